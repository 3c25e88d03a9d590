"""Huber-TV (ROF-type) denoising of scalar fields on a masked grid.

Minimises  1/2 ||x - f||^2 + w * sum_p H_eps(|grad x|_p)  over valid vertices,
where H_eps is the Huber function and gradients are forward differences that
skip edges touching an invalid vertex.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ValidationError


@dataclass(frozen=True, eq=False)
class ScalarField:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.valid, dtype=bool)
        if v.ndim != 2 or m.shape != v.shape:
            raise ValidationError(f"bad scalar field shapes {v.shape} / {m.shape}")
        if not np.all(np.isfinite(v[m])):
            raise ValidationError("scalar field has NaN/Inf on valid vertices")
        v = np.where(m, v, 0.0)
        v.setflags(write=False)
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", m)

    @classmethod
    def full(cls, values) -> "ScalarField":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, bool))


@dataclass(frozen=True)
class DenoiseParams:
    tv_weight: float = 1.0
    huber_eps: float = 0.05
    max_iter: int = 300
    rel_tol: float = 1e-7

    def __post_init__(self):
        if not (self.tv_weight >= 0 and np.isfinite(self.tv_weight)):
            raise ValidationError(f"tv_weight must be >= 0, got {self.tv_weight}")
        if not self.huber_eps > 0:
            raise ValidationError(f"huber_eps must be > 0, got {self.huber_eps}")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")


@dataclass
class DenoiseInfo:
    iterations: int
    energies: list
    converged: bool


class _MaskedGradient:
    def __init__(self, valid: np.ndarray):
        self.ex = valid[:, :-1] & valid[:, 1:]
        self.ey = valid[:-1, :] & valid[1:, :]

    def grad(self, x):
        gx = np.zeros_like(x)
        gy = np.zeros_like(x)
        gx[:, :-1] = np.where(self.ex, x[:, 1:] - x[:, :-1], 0.0)
        gy[:-1, :] = np.where(self.ey, x[1:, :] - x[:-1, :], 0.0)
        return gx, gy

    def grad_adjoint(self, px, py):
        """K^T (px, py), i.e. minus the divergence."""
        out = np.zeros_like(px)
        ax = np.where(self.ex, px[:, :-1], 0.0)
        ay = np.where(self.ey, py[:-1, :], 0.0)
        out[:, :-1] -= ax
        out[:, 1:] += ax
        out[:-1, :] -= ay
        out[1:, :] += ay
        return out


def huber(t: np.ndarray, eps: float) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.where(t <= eps, t * t / (2 * eps), t - eps / 2)


def rof_energy(x: np.ndarray, field: ScalarField, tv_weight: float, huber_eps: float) -> float:
    m = field.valid
    g = _MaskedGradient(m)
    gx, gy = g.grad(np.where(m, x, 0.0))
    data = 0.5 * ((x - field.values)[m] ** 2).sum()
    return float(data + tv_weight * huber(np.hypot(gx, gy), huber_eps)[m].sum())


def rof_huber_denoise(field: ScalarField, tv_weight: float = 1.0, huber_eps: float = 0.05,
                      max_iter: int = 300, rel_tol: float = 1e-7,
                      info: Optional[list] = None) -> ScalarField:
    """Primal-dual (Chambolle-Pock, linearly convergent variant) Huber-ROF solver.

    Invalid vertices are copied through untouched.  Pass a list as ``info`` to
    receive a :class:`DenoiseInfo`.
    """
    if tv_weight < 0 or not np.isfinite(tv_weight):
        raise ValidationError(f"tv_weight must be >= 0, got {tv_weight}")
    if huber_eps <= 0:
        raise ValidationError(f"huber_eps must be > 0, got {huber_eps}")
    m = field.valid
    if not m.any():
        raise ValidationError("field has no valid vertices")
    f = field.values
    if tv_weight == 0:
        if info is not None:
            info.append(DenoiseInfo(0, [], True))
        return field

    k = _MaskedGradient(m)
    lip = np.sqrt(8.0)
    delta = huber_eps / tv_weight  # strong convexity of the dual term
    mu = 2.0 * np.sqrt(delta) / lip
    tau = mu / 2.0
    sigma = mu / (2.0 * delta)
    theta = 1.0 / (1.0 + mu)

    x = f.copy()
    xbar = x.copy()
    px = np.zeros_like(x)
    py = np.zeros_like(x)
    e_prev = rof_energy(x, field, tv_weight, huber_eps)
    energies = [e_prev]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gx, gy = k.grad(xbar)
        px = (px + sigma * gx) / (1.0 + sigma * huber_eps / tv_weight)
        py = (py + sigma * gy) / (1.0 + sigma * huber_eps / tv_weight)
        norm = np.maximum(1.0, np.hypot(px, py) / tv_weight)
        px /= norm
        py /= norm
        x_new = (x - tau * k.grad_adjoint(px, py) + tau * f) / (1.0 + tau)
        x_new = np.where(m, x_new, f)
        xbar = x_new + theta * (x_new - x)
        x = x_new
        if it % 10 == 0 or it == max_iter:
            e = rof_energy(x, field, tv_weight, huber_eps)
            energies.append(e)
            if abs(e_prev - e) <= rel_tol * max(abs(e_prev), 1e-300):
                converged = True
                break
            e_prev = e
    # the exact minimiser lies inside the input range; the box projection can only lower the energy
    lo, hi = f[m].min(), f[m].max()
    x = np.where(m, np.clip(x, lo, hi), f)
    if info is not None:
        info.append(DenoiseInfo(it, energies, converged))
    return ScalarField(x, m)
