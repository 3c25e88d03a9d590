"""Expression-targeted collection alignment and multi-scale weighted blending.

Per pyramid level l (0 = coarsest) photo i gets the per-pixel weight

    W_i = (exp(-|F_T - F_i|^2 / 2 sigma^2) + tau * l^-beta) * L_i^alpha

where L_i is the local Laplacian response.  Level 0 is the pure-uniform limit
(every photo weighs the same); a one-level pyramid is the plain single-scale
weighted average exp(...) * L^alpha.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import FaceImage, FiducialSet, PhotoCollection, PhotoRecord, ValidationError, WarpField
from .flow import (
    DENSE_WARP_PARAMS,
    AppearanceSubspace,
    FlowParams,
    build_subspace,
    compose,
    compute_flow,
    project,
)
from .geometry import fit_tps, rasterize_tps, tps_warp, warp_image
from .parallel import parallel_map

KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
MIN_BASE = 4  # smallest side of the coarsest pyramid level
MIN_DENSE = 5  # photos needed for the rank-4 dense-warp subspace

WeightMap = np.ndarray


# ---------------------------------------------------------------------------
# pyramids

def _blur(a: np.ndarray) -> np.ndarray:
    a = ndimage.correlate1d(a, KERNEL, axis=0, mode="reflect")
    return ndimage.correlate1d(a, KERNEL, axis=1, mode="reflect")


def _down(a: np.ndarray) -> np.ndarray:
    return _blur(a)[::2, ::2]


def _up(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Zero-insert and interpolate, normalised by the kernel mass that hit a sample.

    In the interior the mass is exactly 1/4 (the usual factor 4); near the border
    the normalisation keeps constants constant.
    """
    z = np.zeros(tuple(shape) + a.shape[2:])
    z[::2, ::2] = a
    mask = np.zeros(tuple(shape))
    mask[::2, ::2] = 1.0
    norm = _blur(mask)
    if z.ndim == 3:
        norm = norm[..., None]
    return _blur(z) / norm


def auto_depth(width: int, height: int) -> int:
    return int(np.clip(int(np.floor(np.log2(min(width, height)))) - 3, 3, 7))


@dataclass(frozen=True, eq=False)
class LaplacianPyramid:
    """levels[0] is the coarse low-pass residual; levels[1:] are band-pass, coarse to fine."""

    levels: tuple

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.levels[-1].shape[:2]


def decompose(image: FaceImage | np.ndarray, levels: Optional[int] = None) -> LaplacianPyramid:
    px = image.pixels if isinstance(image, FaceImage) else np.asarray(image, dtype=np.float64)
    h, w = px.shape[:2]
    p = auto_depth(w, h) if levels is None else int(levels)
    if p < 1:
        raise ValidationError(f"pyramid depth must be >= 1, got {p}")
    if p > 1 and min(w, h) < MIN_BASE * 2 ** (p - 1):
        raise ValidationError(f"{w}x{h} image too small for a {p}-level pyramid")
    gauss = [px]
    for _ in range(p - 1):
        gauss.append(_down(gauss[-1]))
    bands = [gauss[k] - _up(gauss[k + 1], gauss[k].shape[:2]) for k in range(p - 1)]
    return LaplacianPyramid(tuple([gauss[-1]] + bands[::-1]))


def collapse(pyramid: LaplacianPyramid) -> np.ndarray:
    x = pyramid.levels[0]
    for band in pyramid.levels[1:]:
        x = _up(x, band.shape[:2]) + band
    return x


# ---------------------------------------------------------------------------
# weights

@dataclass(frozen=True)
class BlendParams:
    sigma: float = 10.0
    alpha: float = 1.0
    beta: float = 20.0
    tau: float = 1.0
    levels: Optional[int] = None  # None: chosen from the image size
    response_floor: float = 1e-4

    def __post_init__(self):
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        if self.levels is not None and self.levels < 1:
            raise ValidationError(f"pyramid depth must be >= 1, got {self.levels}")
        for name in ("alpha", "beta", "tau"):
            v = getattr(self, name)
            if not (v >= 0 and np.isfinite(v)):
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")
        if not self.response_floor > 0:
            raise ValidationError("response_floor must be > 0")

    def depth_for(self, width: int, height: int) -> int:
        return auto_depth(width, height) if self.levels is None else self.levels


def expression_weight(target: FiducialSet, candidate: FiducialSet, sigma: float = 10.0) -> float:
    d2 = float(((target.points - candidate.points) ** 2).sum())
    return float(np.exp(-d2 / (2.0 * sigma * sigma)))


def laplacian_response(band: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """|band| averaged over channels, 3x3 box-smoothed, floored."""
    a = np.abs(band)
    if a.ndim == 3:
        a = a.mean(axis=2)
    return np.maximum(ndimage.uniform_filter(a, 3, mode="reflect"), floor)


def _level_terms(level: int, depth: int, params: BlendParams) -> tuple[bool, float, bool]:
    """(use expression factor, uniform term, use Laplacian response)."""
    if depth == 1:
        return True, 0.0, True
    if level == 0:
        return False, 1.0, False
    return True, params.tau * float(level) ** (-params.beta), True


def level_weight_map(band: np.ndarray, expression_w: float, level: int, params: BlendParams,
                     depth: Optional[int] = None) -> WeightMap:
    """Unnormalised weights of one photo at one level.

    ``depth`` is the pyramid depth (default: any depth > 1); for a single-level
    pyramid the weight is the plain single-scale one.
    """
    use_e, uniform, use_r = _level_terms(level, 2 if depth is None else depth, params)
    base = (expression_w if use_e else 0.0) + uniform
    if not use_r:
        return np.full(band.shape[:2], base)
    return base * laplacian_response(band, params.response_floor) ** params.alpha


def single_scale_response(image: FaceImage | np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """Laplacian response of the image itself (finest band of a two-level split)."""
    px = image.pixels if isinstance(image, FaceImage) else np.asarray(image, dtype=np.float64)
    return laplacian_response(px - _up(_down(px), px.shape[:2]), floor)


# ---------------------------------------------------------------------------
# blending

@dataclass
class BlendDiagnostics:
    fallback_pixels: list = field(default_factory=list)  # per level, pixels with all-zero weights
    weight_maps: Optional[list] = None  # per level (N, h, w) normalised weights, when requested

    @property
    def fallback_total(self) -> int:
        return int(sum(self.fallback_pixels))


def _blend_level(values: Sequence[np.ndarray], weights: Sequence[np.ndarray]):
    num = np.zeros(values[0].shape)
    den = np.zeros(values[0].shape[:2])
    for v, w in zip(values, weights):  # fixed order
        num += w[..., None] * v
        den += w
    zero = den <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den[..., None]
    if zero.any():
        out[zero] = np.mean([v[zero] for v in values], axis=0)
    return out, den, int(zero.sum())


def _canonical_order(images: Sequence[FaceImage], fiducials: Sequence[FiducialSet]) -> list[int]:
    """Order photos by fiducial bytes (image hash breaks ties), so reductions do not depend
    on the order the caller happened to pass them in."""
    keys = [np.ascontiguousarray(f.points).tobytes() for f in fiducials]
    if len(set(keys)) < len(keys):
        keys = [k + hashlib.sha1(np.ascontiguousarray(im.pixels).tobytes()).digest()
                for k, im in zip(keys, images)]
    return sorted(range(len(keys)), key=keys.__getitem__)


def blend(images: Sequence[FaceImage], fiducials: Sequence[FiducialSet], target: FiducialSet,
          params: BlendParams = BlendParams(), uniform: bool = False,
          diagnostics: Optional[BlendDiagnostics] = None, keep_weights: bool = False) -> FaceImage:
    """Multi-scale weighted average of already aligned images.

    ``uniform`` forces equal weights at every level (the plain average).
    """
    if not images:
        raise ValidationError("nothing to blend")
    if len(images) != len(fiducials):
        raise ValidationError("images and fiducials differ in count")
    h, w = images[0].shape
    if any(im.shape != (h, w) for im in images):
        raise ValidationError("images differ in size")
    order = _canonical_order(images, fiducials)
    images = [images[i] for i in order]
    fiducials = [fiducials[i] for i in order]
    depth = params.depth_for(w, h)
    e = [expression_weight(target, f, params.sigma) for f in fiducials]
    pyrs = [decompose(im, depth) for im in images]
    diag = diagnostics if diagnostics is not None else BlendDiagnostics()
    if keep_weights:
        diag.weight_maps = []
    out_levels = []
    for lvl in range(depth):
        vals = [p.levels[lvl] for p in pyrs]
        if uniform:
            ws = [np.ones(v.shape[:2]) for v in vals]
        elif depth == 1:
            ws = [e_i * single_scale_response(v, params.response_floor) ** params.alpha
                  for e_i, v in zip(e, vals)]
        else:
            ws = [level_weight_map(v, e_i, lvl, params, depth) for e_i, v in zip(e, vals)]
        out, den, nfall = _blend_level(vals, ws)
        diag.fallback_pixels.append(nfall)
        if keep_weights:
            with np.errstate(invalid="ignore", divide="ignore"):
                maps = np.empty((len(ws),) + den.shape, np.float32)
                maps[order] = np.nan_to_num(np.stack(ws) / den)
                diag.weight_maps.append(maps)  # in the caller's order
        out_levels.append(out)
    return FaceImage(np.clip(collapse(LaplacianPyramid(tuple(out_levels))), 0.0, 1.0))


def single_scale_average(images: Sequence[FaceImage], fiducials: Sequence[FiducialSet], target: FiducialSet,
                         params: BlendParams = BlendParams(),
                         diagnostics: Optional[BlendDiagnostics] = None) -> FaceImage:
    """Per-pixel weighted average with weights exp(...) * L^alpha (no pyramid)."""
    return blend(images, fiducials, target, BlendParams(params.sigma, params.alpha, params.beta, params.tau, 1,
                                                        params.response_floor), diagnostics=diagnostics)


class NeutralBlender:
    """Fixed aligned images, varying target: per-frame blending from cached pyramids.

    Only the expression factors change between targets, so per level
    sum_i (e_i + u) R_i P_i = e . A + u * sum_i A_i  with A_i = R_i P_i cached
    (float32 storage, float64 accumulation).
    """

    CHUNK = 1 << 15  # columns per float64 accumulation block

    def __init__(self, images: Iterable[FaceImage], fiducials: Sequence[FiducialSet],
                 params: BlendParams = BlendParams()):
        n = len(fiducials)
        if n == 0:
            raise ValidationError("need a non-empty collection")
        self.params = params
        self.fiducials = [np.asarray(f.points) for f in fiducials]
        self.num, self.den, self.sum_num, self.sum_den, self.mean = [], [], [], [], []
        shapes = None
        count = 0
        for i, im in enumerate(images):  # consumed once; may be a generator
            if i >= n:
                raise ValidationError("more images than fiducial sets")
            count += 1
            if shapes is None:
                h, w = im.shape
                self.depth = params.depth_for(w, h)
                self.terms = [_level_terms(lvl, self.depth, params) for lvl in range(self.depth)]
            elif im.shape != shapes[-1][:2]:
                raise ValidationError("images differ in size")
            pyr = decompose(im, self.depth)
            if shapes is None:
                shapes = [lv.shape for lv in pyr.levels]
                for s in shapes:
                    self.num.append(np.empty((n, int(np.prod(s))), np.float32))
                    self.den.append(np.empty((n, s[0] * s[1]), np.float32))
                    self.sum_num.append(np.zeros(int(np.prod(s))))
                    self.sum_den.append(np.zeros(s[0] * s[1]))
                    self.mean.append(np.zeros(s))
            for lvl, band in enumerate(pyr.levels):
                self.mean[lvl] += band / n
                use_e, _, use_r = self.terms[lvl]
                if self.depth == 1:
                    r = single_scale_response(band, params.response_floor) ** params.alpha
                elif use_r:
                    r = laplacian_response(band, params.response_floor) ** params.alpha
                else:
                    r = np.ones(band.shape[:2])
                a = (r[..., None] * band).ravel()
                self.num[lvl][i] = a
                self.den[lvl][i] = r.ravel()
                self.sum_num[lvl] += a
                self.sum_den[lvl] += r.ravel()
        if count != n:
            raise ValidationError(f"{count} images for {n} fiducial sets")
        self.shapes = shapes

    @classmethod
    def _weighted_sum(cls, e: np.ndarray, mat: np.ndarray) -> np.ndarray:
        out = np.empty(mat.shape[1])
        for j in range(0, mat.shape[1], cls.CHUNK):
            out[j:j + cls.CHUNK] = e @ mat[:, j:j + cls.CHUNK].astype(np.float64)
        return out

    def expression_weights(self, target: FiducialSet) -> np.ndarray:
        t = np.asarray(target.points)
        d2 = np.array([((t - f) ** 2).sum() for f in self.fiducials])
        return np.exp(-d2 / (2.0 * self.params.sigma ** 2))

    def __call__(self, target: FiducialSet) -> FaceImage:
        return self.render(target)[0]

    def render(self, target: FiducialSet) -> tuple[FaceImage, int]:
        """Texture for ``target`` and the number of all-zero-weight fallback pixels."""
        e = self.expression_weights(target)
        levels = []
        fallback = 0
        for lvl, shape in enumerate(self.shapes):
            use_e, u, _ = self.terms[lvl]
            ee = e if use_e else np.zeros_like(e)
            num = self._weighted_sum(ee, self.num[lvl]) + u * self.sum_num[lvl]
            den = self._weighted_sum(ee, self.den[lvl]) + u * self.sum_den[lvl]
            zero = den <= 0
            den_px = np.repeat(den, 3) if len(shape) == 3 else den
            with np.errstate(invalid="ignore", divide="ignore"):
                out = (num / den_px).reshape(shape)
            if zero.any():
                zero2 = zero.reshape(shape[:2])
                out[zero2] = self.mean[lvl][zero2]
                fallback += int(zero.sum())
            levels.append(out)
        return FaceImage(np.clip(collapse(LaplacianPyramid(tuple(levels))), 0.0, 1.0)), fallback


# ---------------------------------------------------------------------------
# alignment

@dataclass(frozen=True)
class AlignParams:
    tps_lambda: float = 10.0
    flow: FlowParams = DENSE_WARP_PARAMS
    rank: int = 4
    dense: bool = True

    def __post_init__(self):
        if self.tps_lambda < 0:
            raise ValidationError("tps_lambda must be >= 0")
        if self.rank < 1:
            raise ValidationError("rank must be >= 1")


@dataclass
class Alignment:
    tps_fields: list
    fields: list  # full backward fields (TPS, then dense, then reference flow)
    tps_images: list
    images: list
    subspace: Optional[AppearanceSubspace] = None
    dense_applied: bool = False


def _check_target(collection: PhotoCollection, target: FiducialSet) -> tuple[int, int]:
    h, w = collection[0].image.shape
    if any(r.image.shape != (h, w) for r in collection):
        raise ValidationError("collection images must share the canonical grid")
    return w, h


def align(collection: PhotoCollection, target: FiducialSet, reference: Optional[PhotoRecord] = None,
          params: AlignParams = AlignParams(), workers: int = 1) -> Alignment:
    """TPS each photo to the target, refine by flow to its subspace projection,
    optionally compose with the flow from the reference's projection to the reference."""
    w, h = _check_target(collection, target)

    def tps_field(rec):
        return rasterize_tps(fit_tps(rec.fiducials, target, params.tps_lambda), w, h)

    tps_fields = parallel_map(tps_field, list(collection), workers)
    tps_images = [warp_image(r.image, f) for r, f in zip(collection, tps_fields)]
    fields = list(tps_fields)
    subspace = None
    dense = params.dense and len(collection) >= max(MIN_DENSE, params.rank + 1)
    if dense:
        subspace = build_subspace(tps_images, params.rank)

        def refine(im):
            return compute_flow(im, project(im, subspace), params.flow)

        flows = parallel_map(refine, tps_images, workers)
        fields = [compose(t, d) for t, d in zip(tps_fields, flows)]
        if reference is not None:
            if reference.image.shape != (h, w):
                raise ValidationError("reference photo is not on the canonical grid")
            ref_tps, _ = tps_warp(reference.image, reference.fiducials, target, params.tps_lambda)
            g = compute_flow(project(ref_tps, subspace), ref_tps, params.flow)
            fields = [compose(f, g) for f in fields]
    images = [warp_image(r.image, f) for r, f in zip(collection, fields)]
    return Alignment(tps_fields, fields, tps_images, images, subspace, dense)


def align_collection(collection: PhotoCollection, target: FiducialSet, reference: Optional[PhotoRecord] = None,
                     params: AlignParams = AlignParams(), workers: int = 1) -> list[FaceImage]:
    return align(collection, target, reference, params, workers).images


def synthesize_texture(collection: PhotoCollection, target: FiducialSet, reference: Optional[PhotoRecord] = None,
                       params: BlendParams = BlendParams(), align_params: AlignParams = AlignParams(),
                       workers: int = 1, diagnostics: Optional[BlendDiagnostics] = None,
                       keep_weights: bool = False) -> FaceImage:
    if len(collection) < MIN_DENSE:
        raise ValidationError(f"texture synthesis needs at least {MIN_DENSE} photos, got {len(collection)}")
    images = align_collection(collection, target, reference, align_params, workers)
    return blend(images, collection.fiducials, target, params, diagnostics=diagnostics, keep_weights=keep_weights)


@dataclass
class AverageResult:
    image: FaceImage
    fiducials: FiducialSet
    stages: dict  # "a" frontalized mean, "b" after TPS, "c" after dense warp, "d" blended
    alignment: Optional[Alignment] = None


def _mean_image(images: Sequence[FaceImage]) -> FaceImage:
    acc = np.zeros(images[0].pixels.shape)
    for im in images:
        acc += im.pixels
    return FaceImage(acc / len(images))


def build_average(collection: PhotoCollection, params: BlendParams = BlendParams(),
                  align_params: AlignParams = AlignParams(), workers: int = 1) -> AverageResult:
    """Detail-enhanced average at the mean fiducials (frontalize -> TPS -> dense -> blend)."""
    if len(collection) == 0:
        raise ValidationError("empty collection")
    target = FiducialSet.mean(collection.fiducials)
    if len(collection) == 1:
        im = collection[0].image
        return AverageResult(im, collection[0].fiducials, {k: im for k in "abcd"})
    _check_target(collection, target)
    al = align(collection, target, None, align_params, workers)
    stages = {
        "a": _mean_image(collection.images),
        "b": _mean_image(al.tps_images),
        "c": _mean_image(al.images),
    }
    stages["d"] = blend(al.images, collection.fiducials, target, params)
    return AverageResult(stages["d"], target, stages, al)


def baselines(collection: PhotoCollection, target: FiducialSet, average: AverageResult,
              params: BlendParams = BlendParams(), align_params: AlignParams = AlignParams(),
              reference: Optional[PhotoRecord] = None, workers: int = 1,
              aligned: Optional[Sequence[FaceImage]] = None) -> dict:
    """The three comparison textures:

    ii  plain aligned average warped to the target by TPS
    iii single-scale weighted average of the unaligned photos
    iv  single-scale weighted average of the aligned photos
    """
    ii, _ = tps_warp(average.stages["c"], average.fiducials, target, align_params.tps_lambda)
    iii = single_scale_average(collection.images, collection.fiducials, target, params)
    if aligned is None:
        aligned = align_collection(collection, target, reference, align_params, workers)
    iv = single_scale_average(aligned, collection.fiducials, target, params)
    return {"ii": ii, "iii": iii, "iv": iv}


def gradient_energy(image: FaceImage, mask: Optional[np.ndarray] = None) -> float:
    """Mean gradient magnitude of the luminance (inside ``mask``)."""
    gy, gx = np.gradient(image.luminance())
    g = np.hypot(gx, gy)
    return float(g[mask].mean() if mask is not None else g.mean())


__all__ = [
    "KERNEL", "LaplacianPyramid", "decompose", "collapse", "auto_depth", "BlendParams",
    "expression_weight", "laplacian_response", "level_weight_map", "single_scale_response",
    "BlendDiagnostics", "blend", "single_scale_average", "NeutralBlender", "AlignParams", "Alignment",
    "align", "align_collection", "synthesize_texture", "AverageResult", "build_average", "baselines",
    "gradient_energy", "MIN_DENSE",
]
