"""Batch command line: average, texture, transfer, puppet and a flow debug tool.

Every run writes ``manifest.json`` under --out with a config echo, input and
output content hashes, per-stage timings and a ``digest`` over the
deterministic parts (config knobs, inputs, outputs) that is identical for
identical inputs regardless of --threads.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .config import FIELD_TYPES, PATH_KEYS, PipelineConfig, _convert, build_config, read_config_file
from .core import (
    DepthMesh,
    FaceImage,
    FiducialSet,
    IngestError,
    PhotoCollection,
    PhotoRecord,
    ValidationError,
    iter_mesh_sequence,
    load_depth_mesh,
    load_fiducials,
    load_image,
    load_photo_collection,
    load_warp_field,
    save_depth_mesh,
    save_fiducials,
    save_image,
    save_mesh_obj,
    save_warp_field,
)
from .deform import (
    Correspondence,
    DeformationTransfer,
    average_mesh,
    cross_identity_correspondence,
    frames_from_images,
)
from .flow import build_subspace, compute_flow, flow_to_color
from .geometry import PoseEstimationError, frontalize, load_template, sample_bilinear, tps_warp
from .parallel import parallel_map
from .render import render_preview
from .texture import (
    MIN_DENSE,
    AverageResult,
    BlendDiagnostics,
    NeutralBlender,
    baselines,
    blend,
    build_average,
    synthesize_texture,
)

log = logging.getLogger("facepuppet")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
UNHASHED = {"manifest.json", "timing.csv", "diagnostics.txt"}
VOLATILE_KEYS = {"out", "threads"} | set(PATH_KEYS)


# ---------------------------------------------------------------------------
# run bookkeeping

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class Run:
    command: str
    config: PipelineConfig
    out: Path
    inputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)
    stage_name: Optional[str] = None

    def add_inputs(self, label: str, paths) -> None:
        for p in sorted(Path(x) for x in paths):
            self.inputs[f"{label}/{p.name}"] = sha256_file(p)

    @contextlib.contextmanager
    def stage(self, name: str):
        self.stage_name = name
        t0 = time.perf_counter()
        log.info("stage %s", name)
        yield
        self.timings[name] = round(time.perf_counter() - t0, 4)

    def outputs(self) -> dict:
        files = sorted(p for p in self.out.rglob("*") if p.is_file())
        return {p.relative_to(self.out).as_posix(): sha256_file(p) for p in files
                if p.relative_to(self.out).as_posix() not in UNHASHED}

    def write_manifest(self, status: str, error: Optional[str] = None) -> dict:
        knobs = {k: v for k, v in self.config.echo().items() if k not in VOLATILE_KEYS}
        outputs = self.outputs()
        core = {"command": self.command, "knobs": knobs, "inputs": self.inputs, "outputs": outputs}
        digest = hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()
        manifest = {
            "status": status,
            "failed_stage": self.stage_name if status != "ok" else None,
            "error": error,
            "digest": digest,
            **core,
            "config": self.config.echo(),
            "versions": {"facepuppet": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "timings_s": self.timings,
        }
        self.out.mkdir(parents=True, exist_ok=True)
        if self.diagnostics:
            (self.out / "diagnostics.txt").write_text("\n".join(self.diagnostics) + "\n")
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


def _require_dir(value: Optional[str], what: str) -> Path:
    if not value:
        raise IngestError(f"missing --{what.replace('_', '-')}")
    p = Path(value)
    if not p.is_dir():
        raise IngestError(f"{what}: {p} is not a directory")
    return p


def _require_file(value: Optional[str], what: str) -> Path:
    if not value:
        raise IngestError(f"missing --{what.replace('_', '-')}")
    p = Path(value)
    if not p.is_file():
        raise IngestError(f"{what}: {p} not found")
    return p


# ---------------------------------------------------------------------------
# shared stages

def _template(cfg: PipelineConfig, run: Run):
    tpl = load_template(cfg.template_mesh, cfg.template_fiducials)
    for key in ("template_mesh", "template_fiducials"):
        if getattr(cfg, key):
            run.add_inputs("template", [getattr(cfg, key)])
    return tpl


def frontal_collection(directory: Path, template, run: Run, label: str, workers: int) -> PhotoCollection:
    """Load a photo collection and frontalise every record; failures become diagnostics."""
    raw = load_photo_collection(directory)
    run.add_inputs(label, [p for p in directory.iterdir() if p.suffix in (".png", ".csv")])
    run.diagnostics += [f"{label}: {d}" for d in raw.diagnostics]

    def job(rec):
        try:
            fv = frontalize(rec, template)
        except (PoseEstimationError, ValidationError, np.linalg.LinAlgError) as exc:
            return None, f"{label}: {rec.id}: frontalization failed: {exc}"
        return PhotoRecord(rec.id, fv.image, fv.fiducials, fv.pose, fv.visible), None

    recs = []
    for rec, msg in parallel_map(job, list(raw), workers):
        if rec is None:
            run.diagnostics.append(msg)
            log.warning(msg)
        else:
            recs.append(rec)
    if not recs:
        raise IngestError(f"{directory}: no usable records")
    return PhotoCollection(tuple(recs), tuple(raw.diagnostics))


def _average(coll: PhotoCollection, cfg: PipelineConfig) -> AverageResult:
    return build_average(coll, cfg.blend_params(), cfg.align_params(), cfg.threads)


def _write_average(res: AverageResult, out: Path, prefix: str = "") -> None:
    save_image(res.image, out / f"{prefix}average.png")
    save_fiducials(res.fiducials, out / f"{prefix}average_fiducials.csv")
    for k, im in res.stages.items():
        save_image(im, out / f"{prefix}stage_{k}.png")


def _subspace(res: AverageResult, coll: PhotoCollection, rank: int):
    images = res.alignment.images if res.alignment is not None else coll.images
    return build_subspace(images, rank)


def _load_frames(frames_dir: Path, run: Run) -> list[tuple[str, DepthMesh]]:
    items = list(iter_mesh_sequence(frames_dir))
    if not items:
        raise IngestError(f"{frames_dir}: no *.pfmesh frames")
    run.add_inputs("frames", [p for _, p in items])
    frames, bad = [], []
    for name, path in items:
        try:
            frames.append((name, load_depth_mesh(path)))
        except (IngestError, ValidationError) as exc:
            bad.append(f"{name}: {exc}")
    if bad:
        raise IngestError("unreadable frames: " + "; ".join(bad))
    shape = frames[0][1].shape
    wrong = [n for n, m in frames if m.shape != shape]
    if wrong:
        raise IngestError(f"frames with a grid other than {shape}: {', '.join(wrong)}")
    return frames


def _mesh(path_value: Optional[str], what: str, run: Run) -> DepthMesh:
    p = _require_file(path_value, what)
    run.add_inputs(what, [p])
    return load_depth_mesh(p)


def _correspondence(cfg: PipelineConfig, run: Run, averages=None) -> Correspondence:
    if cfg.correspondence:
        d = _require_dir(cfg.correspondence, "correspondence")
        run.add_inputs("correspondence", [d / "forward.pfmesh", d / "inverse.pfmesh"])
        return Correspondence(load_warp_field(d / "forward.pfmesh"), load_warp_field(d / "inverse.pfmesh"), "loaded")
    if averages is None:
        raise IngestError("need --correspondence, or --puppet and --driver collections")
    (p_res, p_coll), (d_res, d_coll) = averages
    return cross_identity_correspondence(d_res.image, p_res.image, _subspace(d_res, d_coll, cfg.rank),
                                         _subspace(p_res, p_coll, cfg.rank), cfg.flow_params(), cfg.corr_rounds)


def _save_correspondence(corr: Correspondence, out: Path) -> None:
    save_warp_field(corr.forward, out / "correspondence" / "forward.pfmesh")
    save_warp_field(corr.inverse, out / "correspondence" / "inverse.pfmesh")


def _transfer_frames(frames, driver_avg: DepthMesh, puppet_avg: DepthMesh, corr: Correspondence,
                     cfg: PipelineConfig):
    engine = DeformationTransfer(driver_avg, puppet_avg, corr, cfg.denoise_params(), cfg.subvertex)
    return parallel_map(lambda item: engine(item[1]), frames, cfg.threads)


def _write_timing(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def moved_fiducials(fiducials: FiducialSet, displacement: np.ndarray) -> FiducialSet:
    """Fiducials carried along by a mesh displacement (canonical x right / y up)."""
    pts = fiducials.points
    d = sample_bilinear(displacement, pts[:, 0], pts[:, 1])
    return FiducialSet(pts + np.column_stack([d[:, 0], -d[:, 1]]))


# ---------------------------------------------------------------------------
# commands

def cmd_average(cfg: PipelineConfig, run: Run) -> None:
    """Frontalize a collection and build its detail-enhanced average (stages a-d)."""
    with run.stage("ingest"):
        tpl = _template(cfg, run)
        coll = frontal_collection(_require_dir(cfg.puppet, "puppet"), tpl, run, "puppet", cfg.threads)
    with run.stage("average"):
        res = _average(coll, cfg)
    _write_average(res, run.out)


def _target(cfg: PipelineConfig, run: Run, tpl):
    """(target fiducials, reference record or None)."""
    if cfg.reference:
        p = _require_file(cfg.reference, "reference")
        lm = p.with_suffix(".csv")
        if not lm.is_file():
            raise IngestError(f"reference photo {p.name} has no landmark file {lm.name}")
        run.add_inputs("reference", [p, lm])
        rec = PhotoRecord(p.stem, load_image(p), load_fiducials(lm))
        try:
            fv = frontalize(rec, tpl)
        except PoseEstimationError as exc:
            raise IngestError(f"reference photo: {exc}") from exc
        return fv.fiducials, PhotoRecord(rec.id, fv.image, fv.fiducials, fv.pose, fv.visible)
    if cfg.target:
        p = _require_file(cfg.target, "target")
        run.add_inputs("target", [p])
        return load_fiducials(p), None
    raise IngestError("texture needs --target (fiducial CSV) or --reference (photo)")


def cmd_texture(cfg: PipelineConfig, run: Run) -> None:
    """Expression-dependent texture for a target fiducial set or reference photo."""
    with run.stage("ingest"):
        tpl = _template(cfg, run)
        coll = frontal_collection(_require_dir(cfg.puppet, "puppet"), tpl, run, "puppet", cfg.threads)
        target, ref = _target(cfg, run, tpl)
        if ref is not None and cfg.hold_out and ref.id in coll.ids:
            coll = coll.without(ref.id)
            run.diagnostics.append(f"held out reference {ref.id}")
    with run.stage("texture"):
        diag = BlendDiagnostics()
        tex = synthesize_texture(coll, target, ref, cfg.blend_params(), cfg.align_params(), cfg.threads,
                                 diag, keep_weights=cfg.debug_weights)
        run.diagnostics.append(f"fallback pixels per level: {diag.fallback_pixels}")
    save_image(tex, run.out / "texture.png")
    save_fiducials(target, run.out / "target_fiducials.csv")
    if cfg.debug_weights:
        np.savez_compressed(run.out / "weights.npz", ids=np.array(coll.ids),
                            **{f"level_{i}": w for i, w in enumerate(diag.weight_maps)})
    if cfg.baselines:
        with run.stage("baselines"):
            avg = _average(coll, cfg)
            base = baselines(coll, target, avg, cfg.blend_params(), cfg.align_params(), ref, cfg.threads)
        for k, im in base.items():
            save_image(im, run.out / f"baseline_{k}.png")


def cmd_transfer(cfg: PipelineConfig, run: Run) -> None:
    """Transfer driver frame deformations onto the puppet's base mesh."""
    with run.stage("ingest"):
        frames = _load_frames(_require_dir(cfg.frames, "frames"), run)
        puppet_avg = _mesh(cfg.puppet_mesh, "puppet_mesh", run)
        driver_avg = _mesh(cfg.driver_mesh, "driver_mesh", run) if cfg.driver_mesh else \
            average_mesh([m for _, m in frames])
    with run.stage("correspondence"):
        averages = None
        if not cfg.correspondence:
            tpl = _template(cfg, run)
            pc = frontal_collection(_require_dir(cfg.puppet, "puppet"), tpl, run, "puppet", cfg.threads)
            dc = frontal_collection(_require_dir(cfg.driver, "driver"), tpl, run, "driver", cfg.threads)
            averages = ((_average(pc, cfg), pc), (_average(dc, cfg), dc))
        corr = _correspondence(cfg, run, averages)
    _save_correspondence(corr, run.out)
    with run.stage("transfer"):
        results = _transfer_frames(frames, driver_avg, puppet_avg, corr, cfg)
    rows = []
    for (name, _), res in zip(frames, results):
        save_depth_mesh(res.mesh, run.out / "meshes" / f"{name}.pfmesh")
        save_mesh_obj(res.mesh, run.out / "meshes" / f"{name}.obj")
        rows.append({"frame": name, "transfer_ms": f"{res.transfer_ms:.3f}", "denoise_ms": f"{res.denoise_ms:.3f}",
                     "denoise_share": f"{res.denoise_ms / max(res.transfer_ms, 1e-9):.3f}"})
    _write_timing(run.out / "timing.csv", rows)


def cmd_puppet(cfg: PipelineConfig, run: Run) -> None:
    """Full pipeline: averages, correspondence, per-frame meshes and textures."""
    with run.stage("ingest"):
        tpl = _template(cfg, run)
        pc = frontal_collection(_require_dir(cfg.puppet, "puppet"), tpl, run, "puppet", cfg.threads)
        dc = frontal_collection(_require_dir(cfg.driver, "driver"), tpl, run, "driver", cfg.threads)
        puppet_avg = _mesh(cfg.puppet_mesh, "puppet_mesh", run)
    with run.stage("averages"):
        p_res, d_res = _average(pc, cfg), _average(dc, cfg)
        _write_average(p_res, run.out, "puppet_")
        _write_average(d_res, run.out, "driver_")
    with run.stage("frames"):
        if cfg.frames:
            frames = _load_frames(_require_dir(cfg.frames, "frames"), run)
        elif cfg.driver_images:
            vids = frontal_collection(_require_dir(cfg.driver_images, "driver_images"), tpl, run,
                                      "driver_images", cfg.threads)
            base = _mesh(cfg.driver_mesh, "driver_mesh", run)
            meshes = frames_from_images(vids.images, d_res.image, base, cfg.flow_params())
            frames = list(zip(vids.ids, meshes))
        else:
            raise IngestError("puppet needs --frames (meshes) or --driver-images (2.5D mode)")
        driver_avg = _mesh(cfg.driver_mesh, "driver_mesh", run) if cfg.driver_mesh else \
            average_mesh([m for _, m in frames])
    with run.stage("correspondence"):
        corr = _correspondence(cfg, run, ((p_res, pc), (d_res, dc)))
    _save_correspondence(corr, run.out)
    with run.stage("transfer"):
        results = _transfer_frames(frames, driver_avg, puppet_avg, corr, cfg)
    targets = [moved_fiducials(p_res.fiducials, r.displacement.vectors) for r in results]
    with run.stage("texture"):
        if cfg.texture_mode == "neutral":
            aligned = p_res.alignment.images if p_res.alignment is not None else pc.images
            blender = NeutralBlender(aligned, pc.fiducials, cfg.blend_params())

            def texture(t):
                t0 = time.perf_counter()
                im, nfall = blender.render(t)
                return im, nfall, 1e3 * (time.perf_counter() - t0)
        else:
            def texture(t):
                t0 = time.perf_counter()
                diag = BlendDiagnostics()
                if len(pc) >= MIN_DENSE:
                    im = synthesize_texture(pc, t, None, cfg.blend_params(), cfg.align_params(), 1, diag)
                else:
                    im = blend(pc.images, pc.fiducials, t, cfg.blend_params(), diagnostics=diag)
                # back onto the neutral parametrisation: the mesh carries the expression geometry
                im, _ = tps_warp(im, p_res.fiducials, t, cfg.tps_lambda)
                return im, diag.fallback_total, 1e3 * (time.perf_counter() - t0)

        textures = parallel_map(texture, targets, cfg.threads)
    rows = []
    h, w = puppet_avg.shape
    for (name, _), res, t, (tex, nfall, tex_ms) in zip(frames, results, targets, textures):
        d = run.out / "frames"
        save_image(tex, d / f"{name}_texture.png")
        save_depth_mesh(res.mesh, d / f"{name}.pfmesh")
        save_mesh_obj(res.mesh, d / f"{name}.obj", texture=f"{name}_texture.png")
        save_fiducials(t, d / f"{name}_fiducials.csv")
        if cfg.preview:
            save_image(render_preview(res.mesh, tex, (2 * w, 2 * h)), run.out / "preview" / f"{name}.png")
        if nfall:
            run.diagnostics.append(f"{name}: {nfall} texture pixels fell back to the plain mean")
        rows.append({"frame": name, "transfer_ms": f"{res.transfer_ms:.3f}", "denoise_ms": f"{res.denoise_ms:.3f}",
                     "texture_ms": f"{tex_ms:.3f}"})
    _write_timing(run.out / "timing.csv", rows)


def cmd_flow(cfg: PipelineConfig, run: Run, first: str, second: str) -> None:
    """Debug: optical flow between two images."""
    with run.stage("flow"):
        a, b = load_image(_require_file(first, "first")), load_image(_require_file(second, "second"))
        run.add_inputs("images", [first, second])
        if a.shape != b.shape:
            raise ValidationError(f"images differ in size: {a.shape} vs {b.shape}")
        f = compute_flow(a, b, cfg.flow_params())
    save_warp_field(f, run.out / "flow.pfmesh")
    save_image(flow_to_color(f), run.out / "flow.png")


COMMANDS = {"average": cmd_average, "texture": cmd_texture, "transfer": cmd_transfer, "puppet": cmd_puppet,
            "flow": cmd_flow}


# ---------------------------------------------------------------------------
# argument parsing

def _add_config_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file (command-line flags win)")
    p.add_argument("-v", "--verbose", action="store_true")
    for name, kind in FIELD_TYPES.items():
        flag = "--" + name.replace("_", "-")
        if kind == "bool":
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=name, default=None, metavar=name.upper())


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="facepuppet", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().split("\n")[0])
        if name == "flow":
            p.add_argument("first", help="source image (flow warps it onto the second)")
            p.add_argument("second", help="target image")
        _add_config_options(p)
    return ap


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cli_values = {}
        for name, kind in FIELD_TYPES.items():
            v = getattr(args, name)
            if v is not None and kind != "bool":
                v = _convert(name, v)
            cli_values[name] = v
        cfg = build_config(file_values, cli_values)
        if not cfg.out:
            raise IngestError("missing --out")
        run = Run(args.command, cfg, Path(cfg.out))
        run.out.mkdir(parents=True, exist_ok=True)
        if args.command == "flow":
            cmd_flow(cfg, run, args.first, args.second)
        else:
            COMMANDS[args.command](cfg, run)
    except (IngestError, ValidationError, FileNotFoundError) as exc:
        print(f"facepuppet {args.command}: error: {exc}", file=sys.stderr)
        if run is not None:
            run.write_manifest("failed", str(exc))
        return EXIT_USAGE
    except (PoseEstimationError, RuntimeError, ArithmeticError, np.linalg.LinAlgError, MemoryError) as exc:
        print(f"facepuppet {args.command}: computation failed: {exc}", file=sys.stderr)
        if run is not None:
            run.write_manifest("failed", str(exc))
        return EXIT_FAILURE
    manifest = run.write_manifest("ok")
    print(f"{args.command}: ok, digest {manifest['digest']}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
