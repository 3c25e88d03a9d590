"""Cross-identity correspondence and magnitude-adjusted deformation transfer.

All computation happens on the puppet grid: each puppet vertex q pulls the
driver quantities from p = q + inverse(q), so every output vertex has exactly
one well-defined source and nothing needs splatting.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import DepthMesh, FaceImage, TranslationField, ValidationError, WarpField
from .denoise import DenoiseParams, ScalarField, rof_huber_denoise
from .flow import AppearanceSubspace, FlowParams, compose, compute_flow, project
from .geometry import pixel_grid, sample_bilinear, warp_image

PASS_THROUGH = 1e-4  # |delta| below this leaves the puppet vertex untouched


@dataclass(frozen=True, eq=False)
class Correspondence:
    """forward: driver grid -> puppet grid (driver p lands on p + forward(p));
    inverse: puppet grid -> driver grid."""

    forward: WarpField
    inverse: WarpField
    note: str = ""

    def __post_init__(self):
        if self.forward.shape != self.inverse.shape:
            raise ValidationError("forward and inverse fields differ in size")

    @property
    def shape(self):
        return self.forward.shape

    @classmethod
    def identity(cls, width: int, height: int) -> "Correspondence":
        z = WarpField.zeros(width, height)
        return cls(z, z, "identity")

    def roundtrip_error(self, mask: Optional[np.ndarray] = None) -> float:
        """RMS of forward(inverse(q)) - q over puppet vertices."""
        return compose(self.forward, self.inverse).rms(mask)


def _relit(image: FaceImage, space: AppearanceSubspace, field: Optional[WarpField]) -> FaceImage:
    """``space``'s face under the lighting of ``image``.

    With a field, the lighting coefficients are measured on ``image`` warped
    into ``space``'s geometry, which keeps shape differences out of them.
    """
    probe = image if field is None else warp_image(image, field)
    return FaceImage(np.clip(space.reconstruct(space.coefficients(probe)), 0.0, 1.0))


def cross_identity_correspondence(driver_avg: FaceImage, puppet_avg: FaceImage,
                                  driver_space: AppearanceSubspace, puppet_space: AppearanceSubspace,
                                  params: FlowParams = FlowParams(), rounds: int = 3) -> Correspondence:
    """Flow between illumination-matched projections, in both directions.

    Projecting an image onto the other person's subspace renders that person's
    face under the image's lighting, so each flow compares two faces lit alike.
    A plain projection of a misaligned average leaks shape differences into
    the lighting coefficients; each of the ``rounds`` extra passes re-measures
    them on the average warped by the previous correspondence and reflows.
    """
    if driver_avg.shape != puppet_avg.shape:
        raise ValidationError(f"averages differ in size: {driver_avg.shape} vs {puppet_avg.shape}")
    if driver_space.shape != driver_avg.shape or puppet_space.shape != puppet_avg.shape:
        raise ValidationError("subspace grid does not match the average image")
    if rounds < 0:
        raise ValidationError("rounds must be >= 0")
    # puppet lighting: puppet face (source) vs driver face (target) -> driver grid to puppet grid
    p_as_p = project(puppet_avg, puppet_space)
    # driver lighting: driver face (source) vs puppet face (target) -> puppet grid to driver grid
    d_as_d = project(driver_avg, driver_space)
    forward = inverse = None
    for _ in range(rounds + 1):
        p_as_d = _relit(puppet_avg, driver_space, forward)
        d_as_p = _relit(driver_avg, puppet_space, inverse)
        forward = compute_flow(p_as_p, p_as_d, params)
        inverse = compute_flow(d_as_d, d_as_p, params)
    return Correspondence(forward, inverse, f"flow between subspace projections, {rounds} relighting rounds")


@dataclass(frozen=True, eq=False)
class TransferResult:
    mesh: DepthMesh
    displacement: TranslationField  # float64 output - puppet_avg, exactly direction * f*
    direction: np.ndarray  # unit driver direction per puppet vertex (0 where passed through)
    magnitude: np.ndarray  # f before denoising
    denoised: np.ndarray  # f*
    transfer_ms: float
    denoise_ms: float


def _sample_ok(valid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """True where bilinear sampling at (x, y) stays on the grid and touches valid vertices only."""
    h, w = valid.shape
    inside = (x >= -1e-9) & (x <= w - 1 + 1e-9) & (y >= -1e-9) & (y <= h - 1 + 1e-9)
    x0 = np.clip(np.floor(x), 0, w - 1).astype(int)
    y0 = np.clip(np.floor(y), 0, h - 1).astype(int)
    x1 = np.where(x - x0 > 0, np.minimum(x0 + 1, w - 1), x0)
    y1 = np.where(y - y0 > 0, np.minimum(y0 + 1, h - 1), y0)
    return inside & valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]


class DeformationTransfer:
    """Precomputed state for transferring many frames between fixed averages.

    With ``subvertex`` (default) the nearest driver vertex is refined to the
    closest point of the bilinear surface around it and the correspondence is
    followed without snapping; otherwise both lookups snap to grid vertices,
    which quantises the transferred magnitude to about half a vertex spacing.
    """

    def __init__(self, driver_avg: DepthMesh, puppet_avg: DepthMesh, corr: Correspondence,
                 denoise: DenoiseParams = DenoiseParams(), subvertex: bool = True):
        if driver_avg.shape != puppet_avg.shape or corr.shape != puppet_avg.shape:
            raise ValidationError(
                f"grids differ: driver {driver_avg.shape}, puppet {puppet_avg.shape}, correspondence {corr.shape}")
        self.driver_avg, self.puppet_avg, self.corr, self.denoise = driver_avg, puppet_avg, corr, denoise
        h, w = puppet_avg.shape
        gx, gy = pixel_grid(w, h)
        inv = corr.inverse.displacement
        self.px, self.py = gx + inv[..., 0], gy + inv[..., 1]
        self.reachable = puppet_avg.valid & _sample_ok(driver_avg.valid, self.px, self.py)
        md = driver_avg.vertices.astype(np.float64)
        self.md = md
        self.md_at_p = sample_bilinear(md, self.px, self.py)
        dv = np.flatnonzero(driver_avg.valid.ravel())
        if dv.size == 0:
            raise ValidationError("driver average has no valid vertices")
        self.driver_index = dv
        self.tree = cKDTree(md.reshape(-1, 3)[dv])
        # nearest valid puppet vertex for every grid cell
        if not puppet_avg.valid.any():
            raise ValidationError("puppet average has no valid vertices")
        _, (iy, ix) = ndimage.distance_transform_edt(~puppet_avg.valid, return_indices=True)
        self.snap_y, self.snap_x = iy, ix
        self.mp = puppet_avg.vertices.astype(np.float64)
        self.fwd = corr.forward.displacement
        self.subvertex = subvertex
        if subvertex:
            self.md_ds = np.gradient(md, axis=1)
            self.md_dt = np.gradient(md, axis=0)

    def _refine(self, s, t, target, iters: int = 4):
        """Closest point to ``target`` on the bilinear driver surface near vertex (s, t)."""
        s0, t0 = s.astype(np.float64), t.astype(np.float64)
        sc, tc = s0.copy(), t0.copy()
        h, w = self.driver_avg.shape
        for _ in range(iters):
            r = sample_bilinear(self.md, sc, tc) - target
            js = sample_bilinear(self.md_ds, sc, tc)
            jt = sample_bilinear(self.md_dt, sc, tc)
            a, b, c = (js * js).sum(-1), (js * jt).sum(-1), (jt * jt).sum(-1)
            gs, gt = (js * r).sum(-1), (jt * r).sum(-1)
            det = a * c - b * b
            det = np.where(np.abs(det) > 1e-12, det, np.inf)
            sc = np.clip(sc - (c * gs - b * gt) / det, np.maximum(s0 - 1, 0), np.minimum(s0 + 1, w - 1))
            tc = np.clip(tc - (a * gt - b * gs) / det, np.maximum(t0 - 1, 0), np.minimum(t0 + 1, h - 1))
        ok = _sample_ok(self.driver_avg.valid, sc, tc)
        return np.where(ok, sc, s0), np.where(ok, tc, t0)

    def _snap(self, x, y):
        """Puppet vertex at the nearest valid grid vertex to (x, y)."""
        h, w = self.puppet_avg.shape
        xi = np.clip(np.rint(x), 0, w - 1).astype(int)
        yi = np.clip(np.rint(y), 0, h - 1).astype(int)
        return self.mp[self.snap_y[yi, xi], self.snap_x[yi, xi]]

    def __call__(self, frame: DepthMesh) -> TransferResult:
        t0 = time.perf_counter()
        if frame.shape != self.driver_avg.shape:
            raise ValidationError(f"frame grid {frame.shape} != driver grid {self.driver_avg.shape}")
        h, w = frame.shape
        delta_grid = TranslationField.between(frame, self.driver_avg)
        ok = self.reachable & _sample_ok(delta_grid.valid, self.px, self.py)
        delta = np.where(ok[..., None], sample_bilinear(delta_grid.vectors, self.px, self.py), 0.0)
        norm = np.linalg.norm(delta, axis=-1)
        moving = ok & (norm >= PASS_THROUGH)
        direction = np.zeros_like(delta)
        direction[moving] = delta[moving] / norm[moving, None]

        f = np.zeros((h, w))
        if moving.any():
            # nearest driver vertex to the displaced driver point
            target = self.md_at_p[moving] + delta[moving]
            _, k = self.tree.query(target)
            flat = self.driver_index[k]
            t, s = np.divmod(flat, w)
            qy, qx = np.nonzero(moving)
            if self.subvertex:
                sc, tc = self._refine(s, t, target)
                fw = sample_bilinear(self.fwd, sc, tc)
                s2, t2 = sc + fw[:, 0], tc + fw[:, 1]
                good = _sample_ok(self.puppet_avg.valid, s2, t2)
                snapped = self._snap(s2, t2)
                end = np.where(good[:, None], sample_bilinear(self.mp, s2, t2), snapped)
            else:
                end = self._snap(s + self.fwd[t, s, 0], t + self.fwd[t, s, 1])
            delta_p = end - self.mp[qy, qx]
            f[moving] = np.einsum("ij,ij->i", direction[moving], delta_p)
        t1 = time.perf_counter()
        fstar = rof_huber_denoise(ScalarField(f, ok), self.denoise.tv_weight, self.denoise.huber_eps,
                                  self.denoise.max_iter, self.denoise.rel_tol).values
        t2_ = time.perf_counter()
        disp = direction * fstar[..., None]
        out = self.mp + disp
        mesh = DepthMesh(np.where(ok[..., None], out, self.mp), ok)
        res = TransferResult(mesh, TranslationField(disp, ok), direction, f, fstar,
                             1e3 * (t2_ - t0), 1e3 * (t2_ - t1))
        return res


def transfer_deformation(driver_frame: DepthMesh, driver_avg: DepthMesh, puppet_avg: DepthMesh,
                         corr: Correspondence, denoise: DenoiseParams = DenoiseParams(),
                         subvertex: bool = True) -> DepthMesh:
    """Puppet mesh for one driver frame (see :class:`DeformationTransfer`)."""
    return DeformationTransfer(driver_avg, puppet_avg, corr, denoise, subvertex)(driver_frame).mesh


def average_mesh(meshes: Sequence[DepthMesh]) -> DepthMesh:
    """Vertex-wise mean over a sequence; valid where every frame is valid."""
    if not meshes:
        raise ValidationError("no meshes to average")
    shape = meshes[0].shape
    if any(m.shape != shape for m in meshes):
        raise ValidationError("meshes differ in grid size")
    valid = np.logical_and.reduce([m.valid for m in meshes])
    acc = np.zeros(meshes[0].vertices.shape)
    for m in meshes:
        acc += m.vertices
    return DepthMesh(acc / len(meshes), valid)


def frames_from_images(frames: Sequence[FaceImage], average: FaceImage, average_mesh_: DepthMesh,
                       params: FlowParams = FlowParams()) -> list[DepthMesh]:
    """2.5D approximation of driver frame meshes from frontal frame images.

    Each average-image pixel p is tracked to p + d(p) in the frame; its vertex
    slides along the average surface to that location.  Only on-surface motion
    is representable.
    """
    h, w = average.shape
    if average_mesh_.shape != (h, w):
        raise ValidationError("average mesh and image differ in size")
    gx, gy = pixel_grid(w, h)
    verts = average_mesh_.vertices.astype(np.float64)
    out = []
    for img in frames:
        d = compute_flow(img, average, params).displacement
        x, y = gx + d[..., 0], gy + d[..., 1]
        ok = average_mesh_.valid & _sample_ok(average_mesh_.valid, x, y)
        out.append(DepthMesh(np.where(ok[..., None], sample_bilinear(verts, x, y), verts), ok))
    return out


__all__ = [
    "PASS_THROUGH", "Correspondence", "cross_identity_correspondence", "TransferResult",
    "DeformationTransfer", "transfer_deformation", "average_mesh", "frames_from_images",
]
