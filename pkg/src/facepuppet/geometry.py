"""Thin-plate-spline warps, backward image warping and rigid pose estimation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .core import (
    DepthMesh,
    FaceImage,
    FiducialSet,
    Intrinsics,
    Pose,
    PhotoRecord,
    ValidationError,
    WarpField,
    canonical_to_grid,
    load_depth_mesh,
    mesh_faces,
)


class PoseEstimationError(RuntimeError):
    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


# ---------------------------------------------------------------------------
# sampling

def sample_bilinear(arr: np.ndarray, x, y) -> np.ndarray:
    """Bilinear lookup of ``arr`` (H, W[, C]) at float pixel coords; clamp-to-edge."""
    h, w = arr.shape[:2]
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if arr.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = arr[y0, x0] * (1 - fx) + arr[y0, x1] * fx
    bot = arr[y1, x0] * (1 - fx) + arr[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))


def warp_array(arr: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    h, w = displacement.shape[:2]
    if arr.shape[:2] != (h, w):
        raise ValidationError(f"array {arr.shape[:2]} and field {(h, w)} differ in size")
    gx, gy = pixel_grid(w, h)
    return sample_bilinear(arr, gx + displacement[..., 0], gy + displacement[..., 1])


def warp_image(image: FaceImage, field: WarpField) -> FaceImage:
    """Backward warp: out(p) = image(p + field(p)), bilinear, clamped at the border."""
    if image.shape != field.shape:
        raise ValidationError(f"image {image.shape} and field {field.shape} differ in size")
    return FaceImage(warp_array(image.pixels, field.displacement))


# ---------------------------------------------------------------------------
# thin-plate splines

def tps_kernel(r: np.ndarray) -> np.ndarray:
    """phi(r) = r^2 log r with phi(0) = 0."""
    r = np.asarray(r, dtype=np.float64)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


def _kernel_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return tps_kernel(d)


@dataclass(frozen=True, eq=False)
class TpsMapping:
    """r(p) = affine[:, 0] + affine[:, 1:] @ p + sum_k weights[k] * phi(|p - control[k]|)."""

    control_points: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n, 2)
    affine: np.ndarray  # (2, 3)
    smoothing: float

    def __post_init__(self):
        if len(self.weights) != len(self.control_points):
            raise ValidationError("coefficient count must match control-point count")

    def __call__(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        k = _kernel_matrix(p, self.control_points)
        return p @ self.affine[:, 1:].T + self.affine[:, 0] + k @ self.weights

    def bending_energy(self) -> float:
        k = _kernel_matrix(self.control_points, self.control_points)
        return float(np.einsum("ic,ij,jc->", self.weights, k, self.weights))

    def side_conditions(self) -> np.ndarray:
        """[sum w, sum w x, sum w y] per output coordinate; zero for a valid fit."""
        p = np.column_stack([np.ones(len(self.control_points)), self.control_points])
        return p.T @ self.weights

    def objective(self, source: FiducialSet | np.ndarray) -> float:
        """Data residual plus smoothing times bending energy."""
        src = source.points if isinstance(source, FiducialSet) else np.asarray(source)
        res = src - self(self.control_points)
        return float((res ** 2).sum() + self.smoothing * self.bending_energy())


def fit_affine(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Least-squares affine map target -> source, returned as a (2, 3) matrix."""
    p = np.column_stack([np.ones(len(target)), target])
    coef, *_ = np.linalg.lstsq(p, source, rcond=None)
    return coef.T


def fit_tps(source: FiducialSet | np.ndarray, target: FiducialSet | np.ndarray, lam: float = 10.0) -> TpsMapping:
    """Smoothing thin-plate spline r with r(target) ~ source.

    The mapping is used for backward warping: a pixel at a target-expression
    location fetches from the matching location of the source photo.
    """
    src = source.points if isinstance(source, FiducialSet) else np.asarray(source, dtype=np.float64)
    tgt = target.points if isinstance(target, FiducialSet) else np.asarray(target, dtype=np.float64)
    if lam < 0 or not np.isfinite(lam):
        raise ValidationError(f"smoothing must be a finite non-negative number, got {lam}")
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValidationError("source and target must be matching (n, 2) point arrays")
    n = len(tgt)
    p = np.column_stack([np.ones(n), tgt])
    centred = tgt - tgt.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if n < 3 or sv[-1] <= 1e-9 * max(sv[0], 1.0):
        raise ValidationError("target points are collinear; the TPS system is singular")
    a = np.zeros((n + 3, n + 3))
    a[:n, :n] = _kernel_matrix(tgt, tgt) + lam * np.eye(n)
    a[:n, n:] = p
    a[n:, :n] = p.T
    b = np.zeros((n + 3, 2))
    b[:n] = src
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"TPS system is singular: {exc}") from exc
    return TpsMapping(tgt.copy(), sol[:n], sol[n:].T.copy(), float(lam))


def rasterize_tps(mapping: TpsMapping, width: int, height: int, chunk: int = 1 << 16) -> WarpField:
    """Dense field r(p) - p at every pixel centre."""
    gx, gy = pixel_grid(width, height)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    out = np.empty_like(pts)
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = mapping(pts[s:s + chunk])
    return WarpField((out - pts).reshape(height, width, 2))


def tps_warp(image: FaceImage, source: FiducialSet, target: FiducialSet, lam: float = 10.0) -> tuple[FaceImage, WarpField]:
    field = rasterize_tps(fit_tps(source, target, lam), image.width, image.height)
    return warp_image(image, field), field


# ---------------------------------------------------------------------------
# camera model and PnP
#
# Camera frame shares the face-frame axes (x right, y up, z toward the viewer);
# the camera sits at the origin looking down -z.  A face-frame point P maps to
# X = R P + t and projects to col = cx + f X_x / -X_z, row = cy - f X_y / -X_z.

def default_translation(intrinsics: Intrinsics) -> np.ndarray:
    """Frontal placement at which the z = 0 plane is imaged at unit scale."""
    return np.array([0.0, 0.0, -intrinsics.focal])


def project(points: np.ndarray, rotation: np.ndarray, translation: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64) @ np.asarray(rotation).T + translation
    w = -x[..., 2]
    return np.stack([intrinsics.cx + intrinsics.focal * x[..., 0] / w,
                     intrinsics.cy - intrinsics.focal * x[..., 1] / w], axis=-1)


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + k
    k /= theta
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def _nearest_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _dlt_pose(points3d: np.ndarray, image_pts: np.ndarray, intr: Intrinsics):
    c = points3d.mean(axis=0)
    s = np.sqrt(((points3d - c) ** 2).sum(1).mean())
    pn = (points3d - c) / s
    a = (image_pts[:, 0] - intr.cx) / intr.focal
    b = -(image_pts[:, 1] - intr.cy) / intr.focal
    ph = np.column_stack([pn, np.ones(len(pn))])
    z = np.zeros_like(ph)
    # a * (-(r3.P + t3)) = r1.P + t1 and likewise for b
    rows = np.vstack([np.hstack([ph, z, a[:, None] * ph]),
                      np.hstack([z, ph, b[:, None] * ph])])
    _, _, vt = np.linalg.svd(rows)
    m = vt[-1].reshape(3, 4)
    m /= np.linalg.norm(m[:, :3], axis=1).mean()
    if np.mean(-(ph @ m[2])) < 0:
        m = -m
    r = _nearest_rotation(m[:, :3])
    t = s * m[:, 3] - r @ c
    return r, t


def estimate_pose(fiducials: FiducialSet | np.ndarray, template_points_3d: np.ndarray,
                  intrinsics: Intrinsics, max_iter: int = 100, tol: float = 1e-10) -> Pose:
    """DLT initialisation followed by Gauss-Newton on the reprojection error."""
    obs = fiducials.points if isinstance(fiducials, FiducialSet) else np.asarray(fiducials, dtype=np.float64)
    pts = np.asarray(template_points_3d, dtype=np.float64)
    if pts.shape != (len(obs), 3):
        raise ValidationError(f"need one 3D template point per fiducial, got {pts.shape} for {len(obs)}")
    sv = np.linalg.svd(pts - pts.mean(0), compute_uv=False)
    if sv[-1] < 1e-6 * sv[0]:
        raise ValidationError("template points are coplanar; DLT needs depth variation")
    r, t = _dlt_pose(pts, obs, intrinsics)
    f = intrinsics.focal

    def residual(r, t):
        return (project(pts, r, t, intrinsics) - obs).ravel()

    res = residual(r, t)
    cost = float(res @ res)
    trace = [np.sqrt(cost / len(obs))]
    converged = False
    for _ in range(max_iter):
        rp = pts @ r.T
        x = rp + t
        w = -x[:, 2]
        jx = np.zeros((len(pts), 2, 3))
        jx[:, 0, 0] = f / w
        jx[:, 0, 2] = f * x[:, 0] / w ** 2
        jx[:, 1, 1] = -f / w
        jx[:, 1, 2] = -f * x[:, 1] / w ** 2
        skew = np.zeros((len(pts), 3, 3))
        skew[:, 0, 1], skew[:, 0, 2] = -rp[:, 2], rp[:, 1]
        skew[:, 1, 0], skew[:, 1, 2] = rp[:, 2], -rp[:, 0]
        skew[:, 2, 0], skew[:, 2, 1] = -rp[:, 1], rp[:, 0]
        j = np.concatenate([jx @ -skew, jx], axis=2).reshape(-1, 6)
        step = np.linalg.lstsq(j, -res, rcond=None)[0]
        scale = 1.0
        while True:
            r_new = rotation_from_axis_angle(scale * step[:3]) @ r
            r_new = _nearest_rotation(r_new)
            t_new = t + scale * step[3:]
            res_new = residual(r_new, t_new)
            cost_new = float(res_new @ res_new)
            if np.isfinite(cost_new) and cost_new <= cost or scale < 1e-6:
                break
            scale *= 0.5
        if not np.isfinite(cost_new):
            raise PoseEstimationError("pose estimation diverged", trace)
        step_norm = scale * np.linalg.norm(step)
        stalled = cost - cost_new <= 1e-15 * max(cost, 1e-300)
        r, t, res, cost = r_new, t_new, res_new, cost_new
        trace.append(np.sqrt(cost / len(obs)))
        if step_norm < tol or stalled:
            converged = True
            break
    if not converged:
        raise PoseEstimationError(f"pose did not converge in {max_iter} iterations", trace)
    return Pose(r, t, intrinsics, residual=float(np.mean(np.linalg.norm(res.reshape(-1, 2), axis=1))))


# ---------------------------------------------------------------------------
# frontalisation

@dataclass(frozen=True, eq=False)
class FaceTemplate:
    """Generic 3D face: a depth mesh on the canonical grid plus its 49 fiducials."""

    mesh: DepthMesh
    fiducials: FiducialSet  # canonical grid (col, row)
    points_3d: np.ndarray  # (49, 3) face-frame points

    @classmethod
    def from_mesh(cls, mesh: DepthMesh, fiducials: FiducialSet) -> "FaceTemplate":
        verts = mesh.vertices.astype(np.float64)
        pts = sample_bilinear(verts, fiducials.points[:, 0], fiducials.points[:, 1])
        return cls(mesh, fiducials, pts)

    @property
    def shape(self):
        return self.mesh.shape


def load_template(mesh_path=None, fiducials_path=None) -> FaceTemplate:
    """Load a template; defaults to the generic template shipped with the package.

    The fiducial file has columns x, y[, z]: grid coordinates of the landmarks.
    """
    data = Path(__file__).with_name("data")
    mesh = load_depth_mesh(mesh_path or data / "template_mesh.pfmesh")
    raw = np.loadtxt(fiducials_path or data / "template_fiducials.csv", delimiter=",", skiprows=1)
    fid = FiducialSet(raw[:, :2])
    if raw.shape[1] >= 5:
        return FaceTemplate(mesh, fid, raw[:, 2:5])
    return FaceTemplate.from_mesh(mesh, fid)


def _template_surface(mesh: DepthMesh) -> np.ndarray:
    """Vertices with invalid cells replaced by their z = 0 grid position."""
    h, w = mesh.shape
    gx, gy = pixel_grid(w, h)
    x, y = gx - (w - 1) / 2.0, (h - 1) / 2.0 - gy
    flat = np.stack([x, y, np.zeros_like(x)], axis=-1)
    return np.where(mesh.valid[..., None], mesh.vertices.astype(np.float64), flat)


class FrontalView(NamedTuple):
    image: FaceImage
    fiducials: FiducialSet
    visible: np.ndarray
    pose: Pose


def _surface_normals(surf: np.ndarray) -> np.ndarray:
    """Unit normals of a grid surface, oriented toward +z for a flat grid."""
    d_row = np.gradient(surf, axis=0)
    d_col = np.gradient(surf, axis=1)
    n = np.cross(d_row, d_col)
    return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)


def visibility(mesh: DepthMesh, pose: Pose, width: int, height: int, tol: float = 1.0,
               max_slack: float = 3.0) -> np.ndarray:
    """Per-vertex visibility of ``mesh`` seen through ``pose``.

    A vertex is visible when it faces the camera, projects inside the photo and
    is not behind the z-buffer.  The depth tolerance grows with the grazing
    angle (a pixel footprint on a steep wall spans a large depth range), capped
    at ``max_slack`` footprints.
    """
    from .render import rasterize  # render imports this module

    surf = _template_surface(mesh)
    cam = surf @ pose.rotation.T + pose.translation
    scr = project(surf, pose.rotation, pose.translation, pose.intrinsics)
    dist = -cam[..., 2]
    faces = mesh_faces(mesh.valid)
    verts = np.column_stack([scr.reshape(-1, 2), dist.ravel()])
    zbuf = rasterize(verts, faces, None, width, height).depth
    c, r = scr[..., 0], scr[..., 1]
    inside = (c >= -0.5) & (c <= width - 0.5) & (r >= -0.5) & (r <= height - 0.5)
    # facing test in the face frame
    centre = -pose.rotation.T @ pose.translation
    view = centre - surf
    view /= np.linalg.norm(view, axis=-1, keepdims=True)
    cos = np.einsum("...k,...k->...", _surface_normals(surf), view)
    facing = cos > 0
    footprint = dist / pose.intrinsics.focal
    slope = np.sqrt(np.clip(1 - cos ** 2, 0, None)) / np.maximum(cos, 1e-6)
    slack = tol + footprint * np.minimum(slope, max_slack)
    ci = np.clip(np.rint(c).astype(int), 0, width - 1)
    ri = np.clip(np.rint(r).astype(int), 0, height - 1)
    z_here = zbuf[ri, ci]
    return mesh.valid & inside & facing & np.isfinite(z_here) & (dist <= z_here + slack)


def _invert_map(map_xy: np.ndarray, targets: np.ndarray, start: np.ndarray, iters: int = 30) -> np.ndarray:
    """Solve map(p) = target for p by Newton steps on the bilinear interpolant."""
    p = np.array(start, dtype=np.float64)
    h, w = map_xy.shape[:2]
    for _ in range(iters):
        g = sample_bilinear(map_xy, p[:, 0], p[:, 1])
        e = 0.5
        gx = (sample_bilinear(map_xy, p[:, 0] + e, p[:, 1]) - sample_bilinear(map_xy, p[:, 0] - e, p[:, 1])) / (2 * e)
        gy = (sample_bilinear(map_xy, p[:, 0], p[:, 1] + e) - sample_bilinear(map_xy, p[:, 0], p[:, 1] - e)) / (2 * e)
        jac = np.stack([gx, gy], axis=-1)  # (n, 2, 2): d map / d (col, row)
        delta = np.linalg.solve(jac + 1e-12 * np.eye(2), (targets - g)[..., None])[..., 0]
        p = p + delta
        p[:, 0] = np.clip(p[:, 0], 0, w - 1)
        p[:, 1] = np.clip(p[:, 1], 0, h - 1)
        if np.abs(delta).max() < 1e-6:
            break
    return p


def frontalize(record: PhotoRecord, template: FaceTemplate, intrinsics: Optional[Intrinsics] = None) -> FrontalView:
    """Resample a photo onto the template's canonical grid after removing head pose.

    Returns the frontal image, the pose-corrected fiducials, a visibility mask
    (pixels whose surface point is hidden in the photo are zeroed, not filled in)
    and the estimated pose.
    """
    img = record.image
    intr = intrinsics or Intrinsics.default_for(img.width, img.height)
    pose = estimate_pose(record.fiducials, template.points_3d, intr)
    surf = _template_surface(template.mesh)
    scr = project(surf, pose.rotation, pose.translation, intr)
    out = sample_bilinear(img.pixels, scr[..., 0], scr[..., 1])
    vis = visibility(template.mesh, pose, img.width, img.height)
    # off-template cells are kept as a plain planar resample
    keep = vis | ~template.mesh.valid
    out = np.where(keep[..., None], out, 0.0)
    fid = _invert_map(scr, record.fiducials.points, template.fiducials.points)
    return FrontalView(FaceImage(out), FiducialSet(fid), keep, pose)


__all__ = [
    "FaceTemplate", "FrontalView", "PoseEstimationError", "TpsMapping",
    "canonical_to_grid", "default_translation", "estimate_pose", "fit_affine", "fit_tps",
    "frontalize", "load_template", "project", "rasterize_tps", "rotation_from_axis_angle",
    "sample_bilinear", "tps_kernel", "tps_warp", "visibility", "warp_array", "warp_image",
]
