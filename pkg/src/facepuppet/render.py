"""Small vectorised triangle rasterizer with a z-buffer.

Only meant for previews, synthetic photo rendering and visibility tests, so it
uses screen-space (affine) attribute interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DepthMesh, FaceImage, mesh_faces
from .geometry import project, sample_bilinear


@dataclass
class Raster:
    depth: np.ndarray  # (H, W), +inf where nothing was drawn
    attrs: Optional[np.ndarray]  # (H, W, k) or None
    triangle: np.ndarray  # (H, W) index of the visible triangle, -1 if empty

    @property
    def covered(self) -> np.ndarray:
        return self.triangle >= 0


def rasterize(verts: np.ndarray, faces: np.ndarray, attrs: Optional[np.ndarray],
              width: int, height: int) -> Raster:
    """Rasterize triangles given screen vertices (col, row, depth); smaller depth wins.

    Pixel centres sit on integer coordinates.  Ties go to the lower triangle index.
    """
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.intp).reshape(-1, 3)
    depth = np.full((height, width), np.inf)
    tri_img = np.full((height, width), -1, dtype=np.intp)
    out_attr = None if attrs is None else np.zeros((height, width, attrs.shape[1]))
    if len(faces) == 0:
        return Raster(depth, out_attr, tri_img)

    p = verts[faces]  # (n, 3, 3)
    ok = np.all(np.isfinite(p), axis=(1, 2)) & np.all(p[..., 2] > 0, axis=1)
    x0 = np.ceil(p[..., 0].min(1) - 1e-9)
    x1 = np.floor(p[..., 0].max(1) + 1e-9)
    y0 = np.ceil(p[..., 1].min(1) - 1e-9)
    y1 = np.floor(p[..., 1].max(1) + 1e-9)
    x0, y0 = np.maximum(x0, 0), np.maximum(y0, 0)
    x1, y1 = np.minimum(x1, width - 1), np.minimum(y1, height - 1)
    area = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    ok &= (x1 >= x0) & (y1 >= y0) & (np.abs(area) > 1e-12)
    ext = np.maximum(x1 - x0, y1 - y0) + 1

    cand_pix, cand_z, cand_tri, cand_bary = [], [], [], []
    idx_all = np.nonzero(ok)[0]
    span = ext[idx_all]
    size = 1
    while len(idx_all):
        # bucket triangles by bounding-box extent so each bucket enumerates a fixed s x s window
        s = size
        sel = span <= s
        tris = idx_all[sel]
        idx_all, span = idx_all[~sel], span[~sel]
        size *= 2
        if not len(tris):
            continue
        oy, ox = np.mgrid[0:s, 0:s]
        px = x0[tris, None] + ox.ravel()[None, :]
        py = y0[tris, None] + oy.ravel()[None, :]
        inb = (px <= x1[tris, None]) & (py <= y1[tris, None])
        a, b, c = p[tris, 0, :2], p[tris, 1, :2], p[tris, 2, :2]
        ar = area[tris][:, None]
        w0 = ((b[:, 0, None] - px) * (c[:, 1, None] - py) - (c[:, 0, None] - px) * (b[:, 1, None] - py)) / ar
        w1 = ((c[:, 0, None] - px) * (a[:, 1, None] - py) - (a[:, 0, None] - px) * (c[:, 1, None] - py)) / ar
        w2 = 1.0 - w0 - w1
        eps = -1e-9
        inside = inb & (w0 >= eps) & (w1 >= eps) & (w2 >= eps)
        ti, k = np.nonzero(inside)
        if not len(ti):
            continue
        bw = np.stack([w0[ti, k], w1[ti, k], w2[ti, k]], axis=1)
        t = tris[ti]
        z = (bw * p[t, :, 2]).sum(1)
        cand_pix.append(py[ti, k].astype(np.intp) * width + px[ti, k].astype(np.intp))
        cand_z.append(z)
        cand_tri.append(t)
        cand_bary.append(bw)
    if not cand_pix:
        return Raster(depth, out_attr, tri_img)
    pix = np.concatenate(cand_pix)
    z = np.concatenate(cand_z)
    tri = np.concatenate(cand_tri)
    bary = np.concatenate(cand_bary)
    order = np.lexsort((tri, z, pix))
    pix, z, tri, bary = pix[order], z[order], tri[order], bary[order]
    first = np.ones(len(pix), bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, z, tri, bary = pix[first], z[first], tri[first], bary[first]
    depth.ravel()[pix] = z
    tri_img.ravel()[pix] = tri
    if attrs is not None:
        va = np.asarray(attrs, dtype=np.float64)[faces[tri]]  # (m, 3, k)
        out_attr.reshape(-1, va.shape[2])[pix] = np.einsum("mi,mik->mk", bary, va)
    return Raster(depth, out_attr, tri_img)


def render_textured(mesh: DepthMesh, texture: FaceImage, rotation: np.ndarray, translation: np.ndarray,
                    intrinsics, width: int, height: int, background: float = 0.5) -> tuple[FaceImage, np.ndarray]:
    """Perspective render of a grid mesh whose texture lives on the same grid.

    Returns the image and the coverage mask.
    """
    h, w = mesh.shape
    verts = mesh.vertices.astype(np.float64).reshape(-1, 3)
    scr = project(verts, rotation, translation, intrinsics)
    dist = -(verts @ np.asarray(rotation).T + translation)[:, 2]
    gy, gx = np.divmod(np.arange(h * w), w)
    uv = np.column_stack([gx, gy]).astype(np.float64)
    ras = rasterize(np.column_stack([scr, dist]), mesh_faces(mesh.valid), uv, width, height)
    tex = texture.pixels
    if tex.shape[:2] != (h, w):
        raise ValueError("texture must share the mesh grid")
    img = np.full((height, width, 3), background)
    cov = ras.covered
    img[cov] = sample_bilinear(tex, ras.attrs[cov, 0], ras.attrs[cov, 1])
    return FaceImage(img), cov


def render_preview(mesh: DepthMesh, texture: Optional[FaceImage] = None, size: Optional[tuple[int, int]] = None,
                   light=(0.3, 0.4, 1.0), background: float = 0.15) -> FaceImage:
    """Orthographic, flat-shaded, texture-mapped view along -z."""
    h, w = mesh.shape
    width, height = size or (w, h)
    verts = mesh.vertices.astype(np.float64).reshape(-1, 3)
    faces = mesh_faces(mesh.valid)
    valid_v = verts[mesh.valid.ravel()]
    if len(valid_v) == 0 or len(faces) == 0:
        return FaceImage(np.full((height, width, 3), background))
    lo, hi = valid_v[:, :2].min(0), valid_v[:, :2].max(0)
    scale = 0.9 * min((width - 1) / max(hi[0] - lo[0], 1e-9), (height - 1) / max(hi[1] - lo[1], 1e-9))
    centre = (lo + hi) / 2
    col = (width - 1) / 2 + scale * (verts[:, 0] - centre[0])
    row = (height - 1) / 2 - scale * (verts[:, 1] - centre[1])
    zmax = valid_v[:, 2].max()
    dist = zmax - verts[:, 2] + 1.0
    gy, gx = np.divmod(np.arange(h * w), w)
    attrs = np.column_stack([gx, gy]).astype(np.float64)
    ras = rasterize(np.column_stack([col, row, dist]), faces, attrs, width, height)
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    n[n[:, 2] < 0] *= -1
    l = np.asarray(light, dtype=np.float64)
    shade = 0.25 + 0.75 * np.clip(n @ (l / np.linalg.norm(l)), 0, 1)
    img = np.full((height, width, 3), background)
    cov = ras.covered
    if texture is not None:
        base = sample_bilinear(texture.pixels, ras.attrs[cov, 0], ras.attrs[cov, 1])
    else:
        base = np.full((cov.sum(), 3), 0.8)
    img[cov] = np.clip(base * shade[ras.triangle[cov], None], 0, 1)
    return FaceImage(img)
