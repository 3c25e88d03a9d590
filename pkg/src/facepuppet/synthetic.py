"""Procedural faces, photo collections and driver sequences with known ground truth.

A face is an albedo image plus a depth map on a canonical grid.  Expressions
are smooth forward displacement fields acting on neutral positions; a photo is
rendered by pulling each output pixel back to its neutral position, so the true
correspondence of every pixel is known.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import (
    DepthMesh,
    FaceImage,
    FiducialSet,
    Intrinsics,
    PhotoCollection,
    PhotoRecord,
    save_depth_mesh,
    save_fiducials,
    save_image,
)
from .geometry import (
    FaceTemplate,
    default_translation,
    pixel_grid,
    project,
    rotation_from_axis_angle,
    sample_bilinear,
)


@dataclass(frozen=True)
class Identity:
    """Shape and colour parameters, in units of the face half-width/half-height."""

    eye_sep: float = 0.36
    eye_y: float = -0.12
    eye_w: float = 0.15
    eye_h: float = 0.06
    brow_gap: float = 0.13
    nose_y: float = 0.22
    nose_w: float = 0.14
    mouth_y: float = 0.5
    mouth_w: float = 0.30
    lip_h: float = 0.08
    skin: tuple = (0.80, 0.62, 0.52)
    lip: tuple = (0.70, 0.35, 0.35)
    brow: tuple = (0.25, 0.18, 0.14)
    iris: tuple = (0.25, 0.30, 0.45)
    dome: float = 0.12  # depth of the face dome, fraction of grid width
    nose_h: float = 0.08
    detail: float = 0.05  # amplitude of fixed skin texture
    seed: int = 0

    @classmethod
    def random(cls, seed: int) -> "Identity":
        rng = np.random.default_rng(seed)
        j = lambda s: rng.uniform(-s, s)
        base = cls()
        return replace(
            base,
            eye_sep=base.eye_sep + j(0.03), eye_y=base.eye_y + j(0.03),
            eye_w=base.eye_w + j(0.02), eye_h=base.eye_h + j(0.015),
            brow_gap=base.brow_gap + j(0.02), nose_y=base.nose_y + j(0.03),
            nose_w=base.nose_w + j(0.02), mouth_y=base.mouth_y + j(0.04),
            mouth_w=base.mouth_w + j(0.04), lip_h=base.lip_h + j(0.015),
            skin=tuple(np.clip(np.array(base.skin) + rng.uniform(-0.12, 0.08, 3), 0.2, 0.95)),
            lip=tuple(np.clip(np.array(base.lip) + rng.uniform(-0.08, 0.08, 3), 0.1, 0.9)),
            dome=base.dome + j(0.02), nose_h=base.nose_h + j(0.02),
            seed=seed,
        )


@dataclass(frozen=True)
class Expression:
    smile: float = 0.0
    blink: float = 0.0
    mouth_open: float = 0.0

    def as_array(self):
        return np.array([self.smile, self.blink, self.mouth_open])


NEUTRAL = Expression()


@dataclass(frozen=True)
class Lighting:
    ambient: float = 0.55
    direction: tuple = (0.0, 0.0, 0.45)  # scaled light vector dotted with unit normals
    gain: tuple = (1.0, 1.0, 1.0)  # per-channel white balance


class FaceModel:
    """A synthetic identity on a W x H canonical grid."""

    def __init__(self, width: int, height: int, identity: Identity = Identity()):
        self.width, self.height = width, height
        self.identity = identity
        self.cx, self.cy = (width - 1) / 2.0, (height - 1) / 2.0
        self.a, self.b = 0.40 * width, 0.42 * height
        self.gx, self.gy = pixel_grid(width, height)
        self.nx, self.ny = (self.gx - self.cx) / self.a, (self.gy - self.cy) / self.b
        self.depth = self._depth()
        self.normals = self._normals()
        self.albedo = self._albedo()
        self.creases = self._creases()
        self.neutral_landmarks = self.landmarks_normalised()

    # -- layout ---------------------------------------------------------
    def to_grid(self, xn, yn):
        return np.stack([self.cx + np.asarray(xn) * self.a, self.cy + np.asarray(yn) * self.b], axis=-1)

    def landmarks_normalised(self) -> np.ndarray:
        p = self.identity
        pts = []
        for side in (-1, 1):
            ex = side * p.eye_sep
            xs = ex + np.linspace(-1.1, 1.0, 5) * p.eye_w * (1 if side < 0 else -1)
            xs = np.sort(xs)
            ys = p.eye_y - p.brow_gap - 0.05 * (1 - ((xs - ex) / (1.1 * p.eye_w)) ** 2)
            pts += list(zip(xs, ys))
        pts += [(0.0, y) for y in np.linspace(p.eye_y, p.nose_y - 0.08, 4)]
        pts += [(x, p.nose_y + 0.02 * (1 - abs(x) / p.nose_w)) for x in np.linspace(-p.nose_w, p.nose_w, 5)]
        for side in (-1, 1):
            ex, w, h = side * p.eye_sep, p.eye_w, p.eye_h
            if side < 0:
                pts += [(ex - w, p.eye_y), (ex - w / 3, p.eye_y - h), (ex + w / 3, p.eye_y - h),
                        (ex + w, p.eye_y), (ex + w / 3, p.eye_y + h), (ex - w / 3, p.eye_y + h)]
            else:
                pts += [(ex - w, p.eye_y), (ex - w / 3, p.eye_y - h), (ex + w / 3, p.eye_y - h),
                        (ex + w, p.eye_y), (ex + w / 3, p.eye_y + h), (ex - w / 3, p.eye_y + h)]
        mw, my, lh = p.mouth_w, p.mouth_y, p.lip_h
        pts.append((-mw, my))
        pts += [(x, my - lh * (0.6 + 0.4 * (1 - abs(x) / mw))) for x in np.linspace(-0.65, 0.65, 5) * mw]
        pts.append((mw, my))
        pts += [(x, my + lh * (0.7 + 0.5 * (1 - abs(x) / mw))) for x in np.linspace(0.65, -0.65, 5) * mw]
        pts += [(x, my - 0.2 * lh) for x in np.linspace(-0.4, 0.4, 3) * mw]
        pts += [(x, my + 0.2 * lh) for x in np.linspace(0.4, -0.4, 3) * mw]
        pts = np.array(pts)
        return self.to_grid(pts[:, 0], pts[:, 1])

    # -- geometry -------------------------------------------------------
    def _depth(self) -> np.ndarray:
        p = self.identity
        w = self.width
        r2 = self.nx ** 2 + self.ny ** 2
        dome = p.dome * w * np.sqrt(np.clip(1 - r2 / 1.3, 0, None))
        nose = p.nose_h * w * np.exp(-(self.nx / 0.09) ** 2 / 2) * np.exp(
            -((self.ny - (p.eye_y + p.nose_y) / 2 - 0.05) / 0.16) ** 2 / 2)
        sockets = sum(-0.02 * w * np.exp(-(((self.nx - s * p.eye_sep) / 0.12) ** 2 + ((self.ny - p.eye_y) / 0.08) ** 2) / 2)
                      for s in (-1, 1))
        lips = 0.012 * w * np.exp(-((self.nx / (p.mouth_w * 0.9)) ** 2 + ((self.ny - p.mouth_y) / 0.07) ** 2) / 2)
        return ndimage.gaussian_filter(dome + nose + sockets + lips, 0.7)

    def _normals(self) -> np.ndarray:
        zy, zx = np.gradient(self.depth)
        # canonical y points up while rows go down
        n = np.stack([-zx, zy, np.ones_like(zx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def mesh(self) -> DepthMesh:
        return DepthMesh.from_depth(self.depth, np.ones(self.depth.shape, bool))

    def template(self) -> FaceTemplate:
        return FaceTemplate.from_mesh(self.mesh(), FiducialSet(self.neutral_landmarks))

    # -- appearance -----------------------------------------------------
    def _soft(self, d, width=0.7):
        """Smooth indicator of d < 0 with a ~1 px transition (d in pixels)."""
        return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))

    def _ellipse_d(self, cx, cy, rx, ry):
        """Approximate signed pixel distance to an axis-aligned ellipse in normalised units."""
        dx = (self.nx - cx) / rx
        dy = (self.ny - cy) / ry
        r = np.sqrt(dx ** 2 + dy ** 2)
        return (r - 1) * min(rx * self.a, ry * self.b)

    def _albedo(self) -> np.ndarray:
        p = self.identity
        rng = np.random.default_rng(10_000 + p.seed)
        img = np.empty((self.height, self.width, 3))
        img[:] = np.array(p.skin)
        # fixed multi-scale skin texture (1/f spectrum)
        k = 48
        mag = np.exp(rng.uniform(np.log(1.0 / 40), np.log(1.0 / 3), k))
        ang = rng.uniform(0, 2 * np.pi, k)
        ph = rng.uniform(0, 2 * np.pi, k)
        amp = 1.0 / mag
        amp /= np.sqrt((amp ** 2).sum() / 2)
        tex = np.zeros_like(self.gx)
        for m, a_, ph_, am in zip(mag, ang, ph, amp):
            tex += am * np.sin(2 * np.pi * m * (np.cos(a_) * self.gx + np.sin(a_) * self.gy) + ph_)
        img *= (1 + p.detail * tex)[..., None]
        # eyes
        for s in (-1, 1):
            ex = s * p.eye_sep
            white = self._soft(self._ellipse_d(ex, p.eye_y, p.eye_w, p.eye_h * 1.05))
            img = img * (1 - white[..., None]) + white[..., None] * np.array([0.92, 0.92, 0.9])
            iris = self._soft(self._ellipse_d(ex, p.eye_y, p.eye_h * self.b / self.a * 0.95, p.eye_h * 0.95)) * white
            img = img * (1 - iris[..., None]) + iris[..., None] * np.array(p.iris)
            pupil = self._soft(self._ellipse_d(ex, p.eye_y, p.eye_h * self.b / self.a * 0.4, p.eye_h * 0.4)) * white
            img = img * (1 - pupil[..., None]) + pupil[..., None] * 0.05
            brow = self._soft(self._ellipse_d(ex, p.eye_y - p.brow_gap - 0.03, p.eye_w * 1.15, 0.025))
            img = img * (1 - 0.85 * brow[..., None]) + 0.85 * brow[..., None] * np.array(p.brow)
            nostril = self._soft(self._ellipse_d(s * p.nose_w * 0.45, p.nose_y + 0.01, 0.04, 0.018))
            img *= (1 - 0.6 * nostril)[..., None]
        lips = self._soft(self._ellipse_d(0, p.mouth_y, p.mouth_w, p.lip_h * 1.15))
        img = img * (1 - lips[..., None]) + lips[..., None] * np.array(p.lip) * (1 + 0.5 * p.detail * tex)[..., None]
        line = np.exp(-((self.ny - p.mouth_y) * self.b / 0.8) ** 2 / 2) * (np.abs(self.nx) < p.mouth_w)
        img *= (1 - 0.6 * line)[..., None]
        # background outside the face oval
        face = self._soft(self._ellipse_d(0, 0.02, 1.02, 1.08), 1.5)
        bg = 0.35 + 0.1 * self.ny
        return np.clip(img * face[..., None] + (1 - face[..., None]) * bg[..., None], 0, 1)

    def _creases(self) -> np.ndarray:
        """Dark expression lines (smile folds, crow's feet) in neutral coordinates."""
        p = self.identity
        out = np.zeros_like(self.gx)
        for s in (-1, 1):
            # nasolabial fold: quadratic curve from nose wing to below the mouth corner
            t = np.linspace(0, 1, 200)
            xs = s * (p.nose_w + 0.05 + (p.mouth_w + 0.06 - p.nose_w - 0.05) * t + 0.05 * t * (1 - t))
            ys = p.nose_y + (p.mouth_y + 0.12 - p.nose_y) * t
            out = np.maximum(out, self._curve_mask(xs, ys, 0.9))
            for k in range(3):
                ang = (-0.5 + 0.5 * k) * 0.6
                t = np.linspace(0.02, 0.12, 40)
                xs = s * (p.eye_sep + p.eye_w + 0.02 + t * np.cos(ang))
                ys = p.eye_y + t * np.sin(ang) * self.a / self.b
                out = np.maximum(out, 0.7 * self._curve_mask(xs, ys, 0.6))
        return out

    def _curve_mask(self, xs, ys, width_px):
        pts = self.to_grid(xs, ys)
        d = np.full(self.gx.shape, np.inf)
        for px, py in pts:
            d = np.minimum(d, (self.gx - px) ** 2 + (self.gy - py) ** 2)
        return np.exp(-d / (2 * width_px ** 2))

    # -- expressions ----------------------------------------------------
    def displacement(self, expr: Expression, q: np.ndarray) -> np.ndarray:
        """Forward displacement (grid px) of neutral points q (..., 2) under ``expr``."""
        p = self.identity
        xn = (q[..., 0] - self.cx) / self.a
        yn = (q[..., 1] - self.cy) / self.b
        d = np.zeros(q.shape)

        def bump(cx, cy, rx, ry):
            return np.exp(-(((xn - cx) / rx) ** 2 + ((yn - cy) / ry) ** 2) / 2)

        if expr.smile:
            for s in (-1, 1):
                g = bump(s * p.mouth_w, p.mouth_y, 0.16, 0.13)
                d[..., 0] += expr.smile * s * 0.07 * self.a * g
                d[..., 1] += -expr.smile * 0.07 * self.b * g
                cheek = bump(s * p.eye_sep, p.eye_y + 0.14, 0.16, 0.08)
                d[..., 1] += -expr.smile * 0.025 * self.b * cheek
            d[..., 1] += -expr.smile * 0.02 * self.b * bump(0, p.mouth_y - p.lip_h, 0.2, 0.06)
        if expr.blink:
            for s in (-1, 1):
                g = bump(s * p.eye_sep, p.eye_y - p.eye_h * 1.3, p.eye_w * 0.9, p.eye_h * 1.5)
                d[..., 1] += expr.blink * 1.6 * p.eye_h * self.b * g
        if expr.mouth_open:
            g = bump(0, p.mouth_y + 0.25, 0.45, 0.26)
            d[..., 1] += expr.mouth_open * 0.07 * self.b * g
        return d

    def pullback(self, expr: Expression, jitter: Optional[np.ndarray] = None, iters: int = 12) -> np.ndarray:
        """Neutral position q(p) with q + d(q) = p for every grid pixel p."""
        p = np.stack([self.gx, self.gy], axis=-1)
        q = p.copy()
        for _ in range(iters):
            d = self.displacement(expr, q)
            if jitter is not None:
                d = d + sample_bilinear(jitter, q[..., 0], q[..., 1])
            q = p - d
        return q

    def expression_landmarks(self, expr: Expression, jitter: Optional[np.ndarray] = None) -> np.ndarray:
        q = self.neutral_landmarks
        d = self.displacement(expr, q)
        if jitter is not None:
            d = d + sample_bilinear(jitter, q[:, 0], q[:, 1])
        return q + d

    def shade(self, q: np.ndarray, expr: Expression, light: Lighting) -> np.ndarray:
        alb = sample_bilinear(self.albedo, q[..., 0], q[..., 1])
        n = sample_bilinear(self.normals, q[..., 0], q[..., 1])
        crease = sample_bilinear(self.creases, q[..., 0], q[..., 1])
        alb = alb * (1 - 0.55 * np.clip(expr.smile, 0, None) * crease)[..., None]
        s = light.ambient + n @ np.asarray(light.direction, dtype=np.float64)
        return np.clip(alb * s[..., None] * np.asarray(light.gain), 0, 1)

    def render(self, expr: Expression = NEUTRAL, light: Lighting = Lighting(),
               jitter: Optional[np.ndarray] = None, noise: float = 0.0,
               rng: Optional[np.random.Generator] = None) -> tuple[FaceImage, FiducialSet]:
        """Canonical-grid (frontal) image and its fiducials."""
        q = self.pullback(expr, jitter)
        img = self.shade(q, expr, light)
        if noise:
            img = np.clip(img + (rng or np.random.default_rng(0)).normal(0, noise, img.shape), 0, 1)
        return FaceImage(img), FiducialSet(self.expression_landmarks(expr, jitter))

    def neutral_image(self, light: Lighting = Lighting()) -> FaceImage:
        return self.render(NEUTRAL, light)[0]

    # -- 3D --------------------------------------------------------------
    def expression_mesh(self, expr: Expression, normal_scale: float = 0.0) -> DepthMesh:
        """Neutral mesh with every vertex slid along the surface by the expression field.

        ``normal_scale`` adds an off-surface component proportional to the slide length.
        """
        base = self.mesh()
        verts = base.vertices.astype(np.float64)
        p = np.stack([self.gx, self.gy], axis=-1)
        d = self.displacement(expr, p)
        moved = sample_bilinear(verts, p[..., 0] + d[..., 0], p[..., 1] + d[..., 1])
        if normal_scale:
            moved = moved + normal_scale * np.linalg.norm(d, axis=-1)[..., None] * self.normals
        return DepthMesh(moved, base.valid)

    def render_photo(self, expr: Expression = NEUTRAL, light: Lighting = Lighting(),
                     yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0,
                     jitter: Optional[np.ndarray] = None, noise: float = 0.0,
                     rng: Optional[np.random.Generator] = None,
                     intrinsics: Optional[Intrinsics] = None):
        """Perspective photo of the textured face at a head pose (angles in degrees).

        Returns (image, fiducials, rotation, translation).
        """
        from .render import render_textured

        tex, _ = self.render(expr, light, jitter)
        intr = intrinsics or Intrinsics.default_for(self.width, self.height)
        rot = rotation_from_axis_angle(np.deg2rad([0, 0, roll])) @ rotation_from_axis_angle(
            np.deg2rad([pitch, 0, 0])) @ rotation_from_axis_angle(np.deg2rad([0, yaw, 0]))
        t = default_translation(intr)
        img, _ = render_textured(self.mesh(), tex, rot, t, intr, self.width, self.height, background=0.3)
        lm = self.expression_landmarks(expr, jitter)
        pts3d = sample_bilinear(self.mesh().vertices.astype(np.float64), lm[:, 0], lm[:, 1])
        fid = project(pts3d, rot, t, intr)
        px = img.pixels
        if noise:
            px = np.clip(px + (rng or np.random.default_rng(0)).normal(0, noise, px.shape), 0, 1)
        return FaceImage(px), FiducialSet(fid), rot, t


def smooth_jitter(width: int, height: int, amplitude: float, rng: np.random.Generator, scale: float = 0.25) -> np.ndarray:
    """Random smooth displacement field (px) with the given peak amplitude."""
    out = np.zeros((height, width, 2))
    gx, gy = pixel_grid(width, height)
    for c in range(2):
        for _ in range(4):
            f = rng.uniform(0.5, 1.5) / (scale * max(width, height))
            a = rng.uniform(0, 2 * np.pi)
            out[..., c] += np.sin(2 * np.pi * f * (np.cos(a) * gx + np.sin(a) * gy) + rng.uniform(0, 2 * np.pi))
    peak = np.abs(out).max()
    return out * (amplitude / peak if peak > 0 else 0.0)


def random_lighting(rng: np.random.Generator, strength: float = 1.0) -> Lighting:
    d = rng.normal(0, 1, 3)
    d[2] = abs(d[2]) + 1.0
    d = d / np.linalg.norm(d)
    return Lighting(ambient=0.5 + 0.1 * rng.uniform(-1, 1) * strength,
                    direction=tuple(0.5 * d * (0.6 + 0.4 * strength)),
                    gain=tuple(1 + 0.12 * strength * rng.uniform(-1, 1, 3)))


def random_expression(rng: np.random.Generator) -> Expression:
    return Expression(smile=float(np.clip(rng.normal(0.4, 0.45), 0, 1.2)),
                      blink=float(rng.uniform(0, 1) ** 4),
                      mouth_open=float(np.clip(rng.normal(0.0, 0.3), 0, 1)))


def photo_collection(model: FaceModel, n: int, seed: int = 0, jitter: float = 1.0, noise: float = 0.004,
                     pose_deg: float = 0.0, expressions: Optional[Sequence[Expression]] = None,
                     lights: Optional[Sequence[Lighting]] = None, prefix: str = "photo") -> PhotoCollection:
    """Collection of frontal canonical images (``pose_deg == 0``) or posed photos."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        expr = expressions[i] if expressions is not None else random_expression(rng)
        light = lights[i] if lights is not None else random_lighting(rng)
        jit = smooth_jitter(model.width, model.height, jitter, rng) if jitter else None
        if pose_deg:
            yaw, pitch, roll = rng.uniform(-pose_deg, pose_deg, 3) * np.array([1.0, 0.5, 0.5])
            img, fid, rot, t = model.render_photo(expr, light, yaw, pitch, roll, jit, noise, rng)
        else:
            img, fid = model.render(expr, light, jit, noise, rng)
        records.append(PhotoRecord(f"{prefix}_{i:04d}", img, fid))
    return PhotoCollection(tuple(records))


def driver_expressions(n_frames: int) -> list[Expression]:
    """A short performance: smile up, blink, open mouth, back to neutral."""
    t = np.linspace(0, 1, n_frames)
    return [Expression(smile=float(np.sin(np.pi * x) ** 2),
                       blink=float(np.exp(-((x - 0.55) / 0.08) ** 2)),
                       mouth_open=float(0.6 * np.exp(-((x - 0.8) / 0.1) ** 2))) for x in t]


def driver_frames(model: FaceModel, expressions: Sequence[Expression], normal_scale: float = 0.0) -> list[DepthMesh]:
    return [model.expression_mesh(e, normal_scale) for e in expressions]


def mean_mesh(meshes: Sequence[DepthMesh]) -> DepthMesh:
    valid = np.logical_and.reduce([m.valid for m in meshes])
    verts = np.mean([m.vertices.astype(np.float64) for m in meshes], axis=0)
    return DepthMesh(verts, valid)


PUPPET_IDENTITY = Identity(eye_w=0.18, eye_h=0.075, mouth_w=0.34, skin=(0.72, 0.55, 0.45), seed=7,
                           nose_h=0.1, mouth_y=0.53)
DRIVER_IDENTITY = Identity(seed=3)


def write_dataset(root, width: int = 64, height: int = 80, n_photos: int = 16, n_frames: int = 6,
                  seed: int = 0, pose_deg: float = 6.0) -> Path:
    """Write a complete synthetic puppetry dataset:

    root/puppet/*.png|csv, root/driver/*.png|csv, root/frames/*.pfmesh,
    root/puppet_mesh.pfmesh (the puppet's base mesh), root/template_mesh.pfmesh,
    root/template_fiducials.csv, root/config.txt
    """
    root = Path(root)
    puppet = FaceModel(width, height, PUPPET_IDENTITY)
    driver = FaceModel(width, height, DRIVER_IDENTITY)
    template = FaceModel(width, height, Identity())
    for name, model, s in (("puppet", puppet, seed), ("driver", driver, seed + 1)):
        coll = photo_collection(model, n_photos, seed=s, pose_deg=pose_deg, prefix=name)
        for rec in coll:
            save_image(rec.image, root / name / f"{rec.id}.png")
            save_fiducials(rec.fiducials, root / name / f"{rec.id}.csv")
    for i, mesh in enumerate(driver_frames(driver, driver_expressions(n_frames))):
        save_depth_mesh(mesh, root / "frames" / f"frame_{i:04d}.pfmesh")
    save_depth_mesh(puppet.mesh(), root / "puppet_mesh.pfmesh")
    write_template(template.template(), root / "template_mesh.pfmesh", root / "template_fiducials.csv")
    (root / "config.txt").write_text(
        "# synthetic puppetry dataset\n"
        "puppet = puppet\ndriver = driver\nframes = frames\npuppet_mesh = puppet_mesh.pfmesh\n"
        "template_mesh = template_mesh.pfmesh\ntemplate_fiducials = template_fiducials.csv\n")
    return root


def write_template(template: FaceTemplate, mesh_path, fiducials_path) -> None:
    save_depth_mesh(template.mesh, mesh_path)
    rows = np.column_stack([template.fiducials.points, template.points_3d])
    Path(fiducials_path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(fiducials_path, rows, delimiter=",", header="x,y,X,Y,Z", comments="", fmt="%.9g")
