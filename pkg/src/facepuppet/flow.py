"""Appearance subspaces and coarse-to-fine variational optical flow.

The flow minimises, on a pyramid of luminance images,

    sum psi(|I2(p+w) - I1(p)|^2) + gamma * sum psi(|grad I2(p+w) - grad I1(p)|^2)
        + alpha * sum psi(|grad u|^2 + |grad v|^2),   psi(s) = sqrt(s + eps^2)

with lagged robust weights and red-black SOR on the linearised increments.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import FaceImage, ValidationError, WarpField
from .geometry import pixel_grid, sample_bilinear
from .parallel import parallel_map

LUMA = np.array([0.299, 0.587, 0.114])
DERIV_TAPS = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
DENSE_WARP_ALPHA = 0.3


@dataclass(frozen=True)
class FlowParams:
    alpha: float = 0.02
    ratio: float = 0.85
    min_width: int = 20
    outer_iters: int = 4
    inner_iters: int = 1
    sor_iters: int = 40
    gamma: float = 1.0  # gradient-constancy weight relative to brightness constancy
    epsilon: float = 1e-3
    omega: float = 1.9

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ValidationError(f"pyramid ratio must be in (0, 1), got {self.ratio}")
        if self.min_width < 8:
            raise ValidationError(f"min level width must be >= 8, got {self.min_width}")
        if min(self.outer_iters, self.inner_iters, self.sor_iters) < 1:
            raise ValidationError("iteration counts must be >= 1")
        if self.alpha < 0 or self.gamma < 0 or self.epsilon <= 0 or not 0 < self.omega < 2:
            raise ValidationError("invalid flow weights")


DENSE_WARP_PARAMS = FlowParams(alpha=DENSE_WARP_ALPHA)


# ---------------------------------------------------------------------------
# appearance subspace

@dataclass(frozen=True, eq=False)
class AppearanceSubspace:
    """Mean image plus orthonormal basis images (rank <= requested rank).

    ``energies`` holds the eigenvalues for the requested rank; directions with
    negligible energy are not kept as basis images.
    """

    mean: np.ndarray  # (H, W, 3)
    basis: np.ndarray  # (k, H, W, 3)
    energies: np.ndarray  # (rank,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean.shape[:2]

    @property
    def rank(self) -> int:
        return len(self.basis)

    def coefficients(self, image: FaceImage) -> np.ndarray:
        if image.shape != self.shape:
            raise ValidationError(f"image {image.shape} does not match subspace {self.shape}")
        d = (image.pixels - self.mean).ravel()
        return self.basis.reshape(self.rank, d.size) @ d

    def reconstruct(self, coefficients: np.ndarray) -> np.ndarray:
        flat = self.mean.ravel() + np.asarray(coefficients) @ self.basis.reshape(self.rank, self.mean.size)
        return flat.reshape(self.mean.shape)


def build_subspace(images: Sequence[FaceImage], rank: int = 4) -> AppearanceSubspace:
    """Mean and top principal components via the (n x n) Gram matrix."""
    n = len(images)
    if n < rank + 1:
        raise ValidationError(f"need at least {rank + 1} images for a rank-{rank} subspace, got {n}")
    shape = images[0].pixels.shape
    if any(im.pixels.shape != shape for im in images):
        raise ValidationError("all images must share one size")
    x = np.stack([im.pixels.ravel() for im in images])
    mean = x.mean(axis=0)
    xc = x - mean
    gram = xc @ xc.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1][:rank]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    keep = evals > 1e-12 * n * x.shape[1]
    vecs = (xc.T @ evecs[:, keep]) / np.sqrt(evals[keep])
    if vecs.shape[1]:
        q, r = np.linalg.qr(vecs)
        vecs = q * np.sign(np.diag(r))
        peak = vecs[np.abs(vecs).argmax(axis=0), np.arange(vecs.shape[1])]
        vecs = vecs * np.sign(peak)
    energies = np.where(keep, evals, 0.0)
    return AppearanceSubspace(mean.reshape(shape), vecs.T.reshape((-1,) + shape), energies)


def project(image: FaceImage, subspace: AppearanceSubspace) -> FaceImage:
    """Orthogonal projection onto mean + span(basis)."""
    return FaceImage(subspace.reconstruct(subspace.coefficients(image)))


# ---------------------------------------------------------------------------
# image helpers

def _luma(image: FaceImage | np.ndarray) -> np.ndarray:
    px = image.pixels if isinstance(image, FaceImage) else np.asarray(image, dtype=np.float64)
    return px @ LUMA if px.ndim == 3 else px


def resize(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment."""
    h, w = arr.shape[:2]
    if (h, w) == (height, width):
        return arr.copy()
    gx, gy = pixel_grid(width, height)
    return sample_bilinear(arr, (gx + 0.5) * (w / width) - 0.5, (gy + 0.5) * (h / height) - 0.5)


def _dx(a):
    return ndimage.correlate1d(a, DERIV_TAPS, axis=1, mode="nearest")


def _dy(a):
    return ndimage.correlate1d(a, DERIV_TAPS, axis=0, mode="nearest")


def _forward_diff(a):
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    gx[:, :-1] = a[:, 1:] - a[:, :-1]
    gy[:-1, :] = a[1:, :] - a[:-1, :]
    return gx, gy


def pyramid_sizes(width: int, height: int, params: FlowParams) -> list[tuple[int, int]]:
    if min(width, height) < params.min_width:
        raise ValidationError(f"image {width}x{height} is smaller than the minimum level width {params.min_width}")
    sizes = [(width, height)]
    k = 1
    while True:
        s = params.ratio ** k
        w, h = int(round(width * s)), int(round(height * s))
        if min(w, h) < params.min_width:
            break
        sizes.append((w, h))
        k += 1
    return sizes


def _image_pyramid(img: np.ndarray, sizes, ratio: float) -> list[np.ndarray]:
    out = [img]
    base_sigma = 1.0 / ratio - 1.0
    for k, (w, h) in enumerate(sizes[1:], start=1):
        sm = ndimage.gaussian_filter(img, base_sigma * k, mode="nearest")
        out.append(resize(sm, w, h))
    return out


# ---------------------------------------------------------------------------
# variational flow

class _Level:
    """Per-level images and derivative images of the target-grid (I1) and source (I2)."""

    def __init__(self, i1: np.ndarray, i2: np.ndarray):
        self.i1 = i1
        self.i2 = i2
        self.i1x, self.i1y = _dx(i1), _dy(i1)
        self.i2x, self.i2y = _dx(i2), _dy(i2)
        self.i2xx, self.i2xy, self.i2yy = _dx(self.i2x), _dy(self.i2x), _dy(self.i2y)
        h, w = i1.shape
        self.gx, self.gy = pixel_grid(w, h)
        self._stack = np.stack([i2, self.i2x, self.i2y, self.i2xx, self.i2xy, self.i2yy], axis=-1)

    def warped(self, u, v):
        return np.moveaxis(sample_bilinear(self._stack, self.gx + u, self.gy + v), -1, 0)

    def energy(self, u, v, params: FlowParams) -> float:
        w2, wx, wy = self.warped(u, v)[:3]
        eps2 = params.epsilon ** 2
        data = np.sqrt((w2 - self.i1) ** 2 + eps2).sum()
        grad = np.sqrt((wx - self.i1x) ** 2 + (wy - self.i1y) ** 2 + eps2).sum()
        ux, uy = _forward_diff(u)
        vx, vy = _forward_diff(v)
        smooth = np.sqrt(ux ** 2 + uy ** 2 + vx ** 2 + vy ** 2 + eps2).sum()
        return float(data + params.gamma * grad + params.alpha * smooth)


def _neighbour_sum(x, we, ws):
    """sum_q w_pq x_q over 4-neighbours; we/ws weight the east/south edge of each pixel."""
    out = np.zeros_like(x)
    out[:, :-1] += we[:, :-1] * x[:, 1:]
    out[:, 1:] += we[:, :-1] * x[:, :-1]
    out[:-1, :] += ws[:-1, :] * x[1:, :]
    out[1:, :] += ws[:-1, :] * x[:-1, :]
    return out


def _solve_increment(lvl: _Level, u, v, params: FlowParams):
    """Linearise around (u, v) and solve for (du, dv) with red-black SOR."""
    w2, ix, iy, ixx, ixy, iyy = lvl.warped(u, v)
    iz = w2 - lvl.i1
    ixz = ix - lvl.i1x
    iyz = iy - lvl.i1y
    eps2 = params.epsilon ** 2
    alpha, gamma, omega = params.alpha, params.gamma, params.omega
    h, w = u.shape
    red = ((np.add.outer(np.arange(h), np.arange(w))) % 2) == 0
    colours = (red, ~red)
    du = np.zeros_like(u)
    dv = np.zeros_like(v)
    for _ in range(params.inner_iters):
        rd = iz + ix * du + iy * dv
        rgx = ixz + ixx * du + ixy * dv
        rgy = iyz + ixy * du + iyy * dv
        psi_d = 0.5 / np.sqrt(rd ** 2 + eps2)
        psi_g = gamma * 0.5 / np.sqrt(rgx ** 2 + rgy ** 2 + eps2)
        ux, uy = _forward_diff(u + du)
        vx, vy = _forward_diff(v + dv)
        psi_s = 0.5 / np.sqrt(ux ** 2 + uy ** 2 + vx ** 2 + vy ** 2 + eps2)
        we = alpha * psi_s
        we[:, -1] = 0
        ws = alpha * psi_s
        ws[-1, :] = 0
        wsum = we + ws
        wsum[:, 1:] += we[:, :-1]
        wsum[1:, :] += ws[:-1, :]

        a11 = psi_d * ix * ix + psi_g * (ixx * ixx + ixy * ixy)
        a12 = psi_d * ix * iy + psi_g * (ixx * ixy + ixy * iyy)
        a22 = psi_d * iy * iy + psi_g * (ixy * ixy + iyy * iyy)
        b1 = -psi_d * ix * iz - psi_g * (ixx * ixz + ixy * iyz)
        b2 = -psi_d * iy * iz - psi_g * (ixy * ixz + iyy * iyz)
        b1 = b1 - (wsum * u - _neighbour_sum(u, we, ws))
        b2 = b2 - (wsum * v - _neighbour_sum(v, we, ws))
        d1 = a11 + wsum
        d2 = a22 + wsum
        for _ in range(params.sor_iters):
            for c in colours:
                new = (b1 + _neighbour_sum(du, we, ws) - a12 * dv) / d1
                du[c] = (1 - omega) * du[c] + omega * new[c]
                new = (b2 + _neighbour_sum(dv, we, ws) - a12 * du) / d2
                dv[c] = (1 - omega) * dv[c] + omega * new[c]
    return du, dv


def _flow_levels(source: FaceImage, target: FaceImage, params: FlowParams):
    if source.shape != target.shape:
        raise ValidationError(f"source {source.shape} and target {target.shape} differ in size")
    h, w = source.shape
    sizes = pyramid_sizes(w, h, params)
    p1 = _image_pyramid(_luma(target), sizes, params.ratio)
    p2 = _image_pyramid(_luma(source), sizes, params.ratio)
    return sizes, p1, p2


def compute_flow_trace(source: FaceImage, target: FaceImage, params: FlowParams = FlowParams(),
                       init: Optional[WarpField] = None) -> tuple[WarpField, list[list[float]]]:
    """Like :func:`compute_flow`, also returning the energy after each outer iteration.

    The trace holds one list per pyramid level, coarsest first; entry 0 is the
    energy of the initial (upsampled) flow.  An outer update that would raise
    the energy is shortened by halving, down to a zero step.
    """
    sizes, p1, p2 = _flow_levels(source, target, params)
    trace: list[list[float]] = []
    u = v = None
    for k in range(len(sizes) - 1, -1, -1):
        w, h = sizes[k]
        if u is None:
            if init is not None:
                d = resize(init.displacement, w, h)
                u = d[..., 0] * (w / source.width)
                v = d[..., 1] * (h / source.height)
            else:
                u = np.zeros((h, w))
                v = np.zeros((h, w))
        else:
            ph, pw = u.shape
            u = resize(u, w, h) * (w / pw)
            v = resize(v, w, h) * (h / ph)
        lvl = _Level(p1[k], p2[k])
        e = lvl.energy(u, v, params)
        energies = [e]
        for _ in range(params.outer_iters):
            du, dv = _solve_increment(lvl, u, v, params)
            step = 1.0
            while step >= 1.0 / 16:
                e_new = lvl.energy(u + step * du, v + step * dv, params)
                if e_new <= e:
                    u, v, e = u + step * du, v + step * dv, e_new
                    break
                step *= 0.5
            energies.append(e)
        trace.append(energies)
    return WarpField(np.stack([u, v], axis=-1)), trace


def compute_flow(source: FaceImage, target: FaceImage, params: FlowParams = FlowParams(),
                 init: Optional[WarpField] = None) -> WarpField:
    """Backward field w on the target grid with source(p + w(p)) ~ target(p)."""
    return compute_flow_trace(source, target, params, init)[0]


def flow_energy(source: FaceImage, target: FaceImage, field: WarpField, params: FlowParams = FlowParams()) -> float:
    """Full-resolution energy of ``field``."""
    lvl = _Level(_luma(target), _luma(source))
    return lvl.energy(field.displacement[..., 0], field.displacement[..., 1], params)


def compose(f_ab: WarpField, f_bc: WarpField) -> WarpField:
    """Field equivalent to warping by ``f_ab`` and then by ``f_bc``.

    (f_ab o f_bc)(p) = f_bc(p) + f_ab(p + f_bc(p)), with f_ab sampled bilinearly.
    """
    if f_ab.shape != f_bc.shape:
        raise ValidationError(f"fields differ in size: {f_ab.shape} vs {f_bc.shape}")
    h, w = f_bc.shape
    gx, gy = pixel_grid(w, h)
    d = f_bc.displacement
    return WarpField(d + sample_bilinear(f_ab.displacement, gx + d[..., 0], gy + d[..., 1]))


def align_via_subspace(images: Sequence[FaceImage], params: FlowParams = DENSE_WARP_PARAMS, rank: int = 4,
                       workers: int = 1, subspace: Optional[AppearanceSubspace] = None) -> list[WarpField]:
    """For every image, the flow from the image to its own rank-4 projection."""
    if len(images) < 5:
        raise ValidationError(f"need at least 5 images, got {len(images)}")
    space = subspace or build_subspace(images, rank)

    def job(im):
        return compute_flow(im, project(im, space), params)

    return parallel_map(job, images, workers)


def flow_to_color(field: WarpField, max_magnitude: Optional[float] = None) -> np.ndarray:
    """Hue = direction, saturation = magnitude (white = no motion)."""
    d = field.displacement
    mag = np.hypot(d[..., 0], d[..., 1])
    scale = max_magnitude or max(float(mag.max()), 1e-9)
    hue = (np.arctan2(-d[..., 1], -d[..., 0]) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / scale, 0, 1)
    h6 = hue * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p, q, t = 1 - sat, 1 - sat * f, 1 - sat * (1 - f)
    one = np.ones_like(sat)
    table = [(one, t, p), (q, one, p), (p, one, t), (p, q, one), (t, p, one), (one, p, q)]
    rgb = np.zeros(d.shape[:2] + (3,))
    for k, chans in enumerate(table):
        m = i == k
        for c in range(3):
            rgb[..., c][m] = chans[c][m]
    return rgb


__all__ = [
    "AppearanceSubspace", "DENSE_WARP_PARAMS", "FlowParams", "align_via_subspace", "build_subspace",
    "compose", "compute_flow", "compute_flow_trace", "flow_energy", "flow_to_color", "project",
    "pyramid_sizes", "resize", "replace",
]
