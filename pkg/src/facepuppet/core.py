"""Domain types and file I/O for face images, landmarks, meshes and warp fields.

All types are frozen dataclasses holding read-only numpy arrays, so they can be
shared between worker threads without copying.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

N_FIDUCIALS = 49
MESH_MAGIC = b"PFMESH1"

# 49-point layout (brows, nose, eyes, mouth); "left"/"right" are image sides.
LANDMARK_NAMES: tuple[str, ...] = (
    *(f"brow_left_{i}" for i in range(5)),
    *(f"brow_right_{i}" for i in range(5)),
    *(f"nose_bridge_{i}" for i in range(4)),
    *(f"nose_base_{i}" for i in range(5)),
    "eye_left_outer", "eye_left_upper_0", "eye_left_upper_1",
    "eye_left_inner", "eye_left_lower_1", "eye_left_lower_0",
    "eye_right_inner", "eye_right_upper_0", "eye_right_upper_1",
    "eye_right_outer", "eye_right_lower_1", "eye_right_lower_0",
    "mouth_left_corner", *(f"lip_upper_outer_{i}" for i in range(5)),
    "mouth_right_corner", *(f"lip_lower_outer_{i}" for i in range(5)),
    *(f"lip_upper_inner_{i}" for i in range(3)),
    *(f"lip_lower_inner_{i}" for i in range(3)),
)
assert len(LANDMARK_NAMES) == N_FIDUCIALS

BROWS = slice(0, 10)
NOSE = slice(10, 19)
EYES = slice(19, 31)
MOUTH = slice(31, 49)


class ValidationError(ValueError):
    """A payload violates a domain invariant."""


class IngestError(RuntimeError):
    """Input files could not be turned into domain objects."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _require_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{what} contains NaN or Inf")


# ---------------------------------------------------------------------------
# types

@dataclass(frozen=True, eq=False)
class FaceImage:
    """RGB image, float values in [0, 1], shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = np.repeat(px[..., None], 3, axis=2)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"expected (H, W, 3) pixels, got {px.shape}")
        if px.shape[0] < 16 or px.shape[1] < 16:
            raise ValidationError(f"image must be at least 16x16, got {px.shape[1]}x{px.shape[0]}")
        _require_finite(px, "image")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def luminance(self) -> np.ndarray:
        """Rec. 601 luma."""
        return self.pixels @ np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class FiducialSet:
    """49 (x, y) landmark positions in pixel coordinates."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_FIDUCIALS, 2):
            raise ValidationError(f"expected {N_FIDUCIALS} (x, y) points, got shape {pts.shape}")
        _require_finite(pts, "fiducials")
        object.__setattr__(self, "points", _frozen(pts))

    def distance(self, other: "FiducialSet") -> float:
        return float(np.linalg.norm(self.points - other.points))

    @staticmethod
    def mean(sets: Sequence["FiducialSet"]) -> "FiducialSet":
        return FiducialSet(np.mean([s.points for s in sets], axis=0))


@dataclass(frozen=True, eq=False)
class WarpField:
    """Backward map: output pixel p samples the input at p + displacement[p].

    displacement has shape (height, width, 2) with (dx, dy) in the last axis.
    """

    displacement: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.displacement, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ValidationError(f"expected (H, W, 2) displacement, got {d.shape}")
        _require_finite(d, "warp field")
        object.__setattr__(self, "displacement", _frozen(d))

    @classmethod
    def zeros(cls, width: int, height: int) -> "WarpField":
        return cls(np.zeros((height, width, 2)))

    @property
    def width(self) -> int:
        return self.displacement.shape[1]

    @property
    def height(self) -> int:
        return self.displacement.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.displacement.shape[:2]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.displacement[..., 0], self.displacement[..., 1])

    def rms(self, mask: Optional[np.ndarray] = None) -> float:
        m2 = self.magnitude() ** 2
        if mask is not None:
            m2 = m2[mask]
        return float(np.sqrt(np.mean(m2)))


@dataclass(frozen=True, eq=False)
class DepthMesh:
    """Face surface sampled on an image-plane grid.

    vertices: (height, width, 3) float32 points (x right, y up, z toward the
    camera, in canonical grid pixels); valid: (height, width) bool.
    """

    vertices: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float32)
        m = np.asarray(self.valid, dtype=bool)
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValidationError(f"expected (H, W, 3) vertices, got {v.shape}")
        if m.shape != v.shape[:2]:
            raise ValidationError(f"mask shape {m.shape} does not match grid {v.shape[:2]}")
        _require_finite(v[m], "mesh vertices")
        bad = ~np.isfinite(v)
        if bad.any():
            v[bad] = 0.0
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "valid", _frozen(m.copy()))

    @property
    def width(self) -> int:
        return self.vertices.shape[1]

    @property
    def height(self) -> int:
        return self.vertices.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.vertices.shape[:2]

    @classmethod
    def from_depth(cls, depth: np.ndarray, valid: Optional[np.ndarray] = None) -> "DepthMesh":
        """Lift a depth map to the canonical frame (x = u - cx, y = cy - v, z = depth)."""
        depth = np.asarray(depth, dtype=np.float64)
        h, w = depth.shape
        x, y = grid_to_canonical(*np.meshgrid(np.arange(w), np.arange(h)), w, h)
        if valid is None:
            valid = np.isfinite(depth)
        depth = np.where(valid, depth, 0.0)
        return cls(np.stack([x, y, depth], axis=-1), valid)

    def __eq__(self, other):
        if not isinstance(other, DepthMesh):
            return NotImplemented
        return (np.array_equal(self.valid, other.valid)
                and np.array_equal(self.vertices, other.vertices))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TranslationField:
    """Per-vertex 3D displacement on a mesh grid."""

    vectors: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        m = np.asarray(self.valid, dtype=bool)
        if v.ndim != 3 or v.shape[2] != 3 or m.shape != v.shape[:2]:
            raise ValidationError(f"bad translation field shapes {v.shape} / {m.shape}")
        _require_finite(v[m], "translation field")
        object.__setattr__(self, "vectors", _frozen(np.where(m[..., None], v, 0.0)))
        object.__setattr__(self, "valid", _frozen(m.copy()))

    @classmethod
    def between(cls, frame: DepthMesh, average: DepthMesh) -> "TranslationField":
        if frame.shape != average.shape:
            raise ValidationError(f"frame grid {frame.shape} != average grid {average.shape}")
        valid = frame.valid & average.valid
        d = frame.vertices.astype(np.float64) - average.vertices.astype(np.float64)
        return cls(np.where(valid[..., None], d, 0.0), valid)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=-1)


@dataclass(frozen=True, eq=False)
class Intrinsics:
    focal: float
    cx: float
    cy: float

    @classmethod
    def default_for(cls, width: int, height: int) -> "Intrinsics":
        # focal length defaults to the image width
        return cls(float(width), (width - 1) / 2.0, (height - 1) / 2.0)

    def matrix(self) -> np.ndarray:
        return np.array([[self.focal, 0, self.cx], [0, self.focal, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid head pose in the canonical face frame plus the camera that saw it."""

    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: Intrinsics
    residual: float = float("nan")

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValidationError("rotation must be 3x3")
        _require_finite(r, "rotation")
        _require_finite(t, "translation")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValidationError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))


@dataclass(frozen=True, eq=False)
class PhotoRecord:
    id: str
    image: FaceImage
    fiducials: FiducialSet
    pose: Optional[Pose] = None
    visible: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.image is None or self.fiducials is None:
            raise ValidationError(f"record {self.id!r} needs both image and fiducials")


@dataclass(frozen=True, eq=False)
class PhotoCollection:
    """Records are kept sorted by id so that every downstream reduction runs
    in the same order however the collection was assembled."""

    records: tuple[PhotoRecord, ...]
    diagnostics: tuple[str, ...] = field(default=())

    def __post_init__(self):
        recs = tuple(sorted(self.records, key=lambda r: r.id))
        if not recs:
            raise IngestError("no records")
        ids = [r.id for r in recs]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate record ids")
        object.__setattr__(self, "records", recs)
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def images(self) -> list[FaceImage]:
        return [r.image for r in self.records]

    @property
    def fiducials(self) -> list[FiducialSet]:
        return [r.fiducials for r in self.records]

    def without(self, record_id: str) -> "PhotoCollection":
        return PhotoCollection(tuple(r for r in self.records if r.id != record_id), self.diagnostics)


def grid_to_canonical(u, v, width: int, height: int):
    """Grid (column, row) -> canonical (x, y); x right, y up, origin at the grid centre."""
    return np.asarray(u, dtype=np.float64) - (width - 1) / 2.0, (height - 1) / 2.0 - np.asarray(v, dtype=np.float64)


def canonical_to_grid(x, y, width: int, height: int):
    return np.asarray(x, dtype=np.float64) + (width - 1) / 2.0, (height - 1) / 2.0 - np.asarray(y, dtype=np.float64)


# ---------------------------------------------------------------------------
# image / landmark I/O

def load_image(path) -> FaceImage:
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return FaceImage(arr)


def save_image(image: FaceImage | np.ndarray, path) -> None:
    px = image.pixels if isinstance(image, FaceImage) else np.asarray(image, dtype=np.float64)
    arr = np.clip(np.rint(np.clip(px, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def load_fiducials(path) -> FiducialSet:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not "".join(row).strip():
                continue
            try:
                vals = [float(c) for c in row[:2]]
            except ValueError:
                if rows:
                    raise IngestError(f"{path}: non-numeric row {row!r}")
                continue  # header
            if len(vals) != 2:
                raise IngestError(f"{path}: expected 2 columns, got {row!r}")
            rows.append(vals)
    if len(rows) != N_FIDUCIALS:
        raise IngestError(f"{path}: expected {N_FIDUCIALS} landmark rows, found {len(rows)}")
    try:
        return FiducialSet(np.array(rows))
    except ValidationError as exc:
        raise IngestError(f"{path}: {exc}") from exc


def save_fiducials(fiducials: FiducialSet, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in fiducials.points:
            w.writerow([repr(float(x)), repr(float(y))])


def load_photo_collection(directory) -> PhotoCollection:
    """One record per ``<stem>.png`` with a sibling ``<stem>.csv``.

    Records with missing or malformed landmarks are skipped; the reasons end
    up in ``collection.diagnostics``.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestError(f"{directory}: not a directory")
    records, diagnostics = [], []
    for img_path in sorted(directory.glob("*.png")):
        lm_path = img_path.with_suffix(".csv")
        if not lm_path.exists():
            diagnostics.append(f"{img_path.name}: missing landmark file {lm_path.name}")
            continue
        try:
            fid = load_fiducials(lm_path)
            img = load_image(img_path)
        except (IngestError, ValidationError, OSError) as exc:
            diagnostics.append(f"{img_path.name}: {exc}")
            continue
        records.append(PhotoRecord(img_path.stem, img, fid))
    for d in diagnostics:
        log.warning("skipped record: %s", d)
    if not records:
        raise IngestError(f"{directory}: no records" + (f" ({len(diagnostics)} rejected)" if diagnostics else ""))
    return PhotoCollection(tuple(records), tuple(diagnostics))


# ---------------------------------------------------------------------------
# float-grid container

def _write_grid(path, quads: np.ndarray) -> None:
    h, w, _ = quads.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MESH_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(quads, dtype="<f4").tobytes())


def _read_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(MESH_MAGIC):
        raise IngestError(f"{path}: bad magic")
    off = len(MESH_MAGIC)
    if len(data) < off + 8:
        raise IngestError(f"{path}: truncated header")
    w, h = struct.unpack_from("<II", data, off)
    off += 8
    need = w * h * 4 * 4
    if len(data) - off != need:
        raise IngestError(f"{path}: payload is {len(data) - off} bytes, grid {w}x{h} needs {need}")
    return np.frombuffer(data, dtype="<f4", offset=off).reshape(h, w, 4)


def save_depth_mesh(mesh: DepthMesh, path) -> None:
    quads = np.concatenate([mesh.vertices, mesh.valid[..., None].astype(np.float32)], axis=-1)
    _write_grid(path, quads)


def load_depth_mesh(path) -> DepthMesh:
    q = _read_grid(path)
    flag = q[..., 3]
    if not np.all((flag == 0) | (flag == 1)):
        raise IngestError(f"{path}: validity channel must be 0 or 1")
    return DepthMesh(q[..., :3].astype(np.float32), flag == 1)


def save_warp_field(field: WarpField, path) -> None:
    """Flow fields share the mesh container: (dx, dy, 0, 1) per cell."""
    h, w = field.shape
    quads = np.zeros((h, w, 4), np.float32)
    quads[..., :2] = field.displacement
    quads[..., 3] = 1
    _write_grid(path, quads)


def load_warp_field(path) -> WarpField:
    return WarpField(_read_grid(path)[..., :2].astype(np.float64))


def save_scalar_grid(values: np.ndarray, valid: np.ndarray, path) -> None:
    h, w = values.shape
    quads = np.zeros((h, w, 4), np.float32)
    quads[..., 0] = np.where(valid, values, 0.0)
    quads[..., 3] = valid
    _write_grid(path, quads)


def load_scalar_grid(path) -> tuple[np.ndarray, np.ndarray]:
    q = _read_grid(path)
    return q[..., 0].astype(np.float64), q[..., 3] == 1


def mesh_faces(valid: np.ndarray) -> np.ndarray:
    """Two triangles per grid cell whose four corners are valid; vertex ids are row-major."""
    h, w = valid.shape
    idx = np.arange(h * w).reshape(h, w)
    cell = valid[:-1, :-1] & valid[:-1, 1:] & valid[1:, :-1] & valid[1:, 1:]
    a, b = idx[:-1, :-1][cell], idx[:-1, 1:][cell]
    c, d = idx[1:, :-1][cell], idx[1:, 1:][cell]
    # counter-clockwise seen from +z (y up, rows go down)
    t1 = np.stack([a, c, b], axis=1)
    t2 = np.stack([b, c, d], axis=1)
    return np.stack([t1, t2], axis=1).reshape(-1, 3)


def save_mesh_obj(mesh: DepthMesh, path, texture: Optional[str] = None) -> int:
    """Write the valid part of the grid as a triangulated OBJ; returns the face count.

    With ``texture`` (a PNG filename relative to the OBJ) a sibling .mtl is written
    and UVs follow the grid: u = col / (W - 1), v = 1 - row / (H - 1).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = mesh.shape
    faces = mesh_faces(mesh.valid)
    used = np.zeros(h * w, bool)
    used[faces.ravel()] = True
    used |= mesh.valid.ravel()
    new_id = np.cumsum(used) - 1
    verts = mesh.vertices.reshape(-1, 3)[used]
    rows, cols = np.divmod(np.nonzero(used)[0], w)
    lines = []
    if texture is not None:
        mtl = path.with_suffix(".mtl")
        mtl.write_text(f"newmtl face\nKa 1 1 1\nKd 1 1 1\nmap_Kd {texture}\n")
        lines += [f"mtllib {mtl.name}", "usemtl face"]
    lines += [f"v {x:.6g} {y:.6g} {z:.6g}" for x, y, z in verts.tolist()]
    if texture is not None:
        uu = cols / max(w - 1, 1)
        vv = 1.0 - rows / max(h - 1, 1)
        lines += [f"vt {a:.6g} {b:.6g}" for a, b in zip(uu.tolist(), vv.tolist())]
        fmt = "f {0}/{0} {1}/{1} {2}/{2}"
    else:
        fmt = "f {0} {1} {2}"
    lines += [fmt.format(*(new_id[f] + 1)) for f in faces]
    path.write_text("\n".join(lines) + "\n")
    return len(faces)


def iter_mesh_sequence(directory) -> Iterable[tuple[str, Path]]:
    for p in sorted(Path(directory).glob("*.pfmesh")):
        yield p.stem, p
