"""Single-core per-frame runtimes: deformation transfer and neutral-mode texture synthesis.

    python3 scripts/bench_runtime.py --out timing.csv

Transfer runs on 194x244-vertex meshes (driver frames from the synthetic
performance, puppet = a different synthetic identity, correspondence from a
landmark TPS).  Texture synthesis blends a 200-photo, 512x512 synthetic
collection for each target expression from cached pyramids, which is how the
`puppet` command renders frames by default.  Setup (correspondence, pyramid
construction) is reported once; the per-frame rows are what the budget covers.
"""
import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from facepuppet.core import FaceImage, FiducialSet
from facepuppet.deform import Correspondence, DeformationTransfer
from facepuppet.geometry import fit_tps, rasterize_tps
from facepuppet.synthetic import (
    DRIVER_IDENTITY,
    PUPPET_IDENTITY,
    Expression,
    FaceModel,
    driver_expressions,
    random_expression,
    random_lighting,
)
from facepuppet.texture import NeutralBlender


def bench_transfer(n_frames: int, width: int = 194, height: int = 244) -> list[dict]:
    driver = FaceModel(width, height, DRIVER_IDENTITY)
    puppet = FaceModel(width, height, PUPPET_IDENTITY)
    t0 = time.perf_counter()
    d_lm, p_lm = driver.neutral_landmarks, puppet.neutral_landmarks
    corr = Correspondence(rasterize_tps(fit_tps(d_lm, p_lm), width, height),
                          rasterize_tps(fit_tps(p_lm, d_lm), width, height), "landmark tps")
    engine = DeformationTransfer(driver.mesh(), puppet.mesh(), corr)
    rows = [{"stage": "transfer_setup", "frame": "", "ms": 1e3 * (time.perf_counter() - t0), "detail": ""}]
    for i, expr in enumerate(driver_expressions(n_frames + 2)[1:-1]):  # skip the neutral end points
        frame = driver.expression_mesh(expr)
        t0 = time.perf_counter()
        res = engine(frame)
        ms = 1e3 * (time.perf_counter() - t0)
        rows.append({"stage": "transfer", "frame": i, "ms": ms, "detail": f"denoise_ms={res.denoise_ms:.1f}"})
    return rows


def bench_texture(n_photos: int, n_frames: int, size: int = 512, seed: int = 0) -> list[dict]:
    model = FaceModel(size, size, PUPPET_IDENTITY)
    rng = np.random.default_rng(seed)
    # a handful of distinct renders, re-tinted per photo: cheap to make, same cost to blend
    base = [model.render(random_expression(rng), random_lighting(rng)) for _ in range(6)]
    gains = 1 + 0.05 * rng.normal(size=(n_photos, 3))
    fids = [FiducialSet(base[i % 6][1].points + rng.normal(0, 1, (49, 2))) for i in range(n_photos)]
    photos = (FaceImage(np.clip(base[i % 6][0].pixels * gains[i], 0, 1)) for i in range(n_photos))
    t0 = time.perf_counter()
    blender = NeutralBlender(photos, fids)
    rows = [{"stage": "texture_setup", "frame": "", "ms": 1e3 * (time.perf_counter() - t0),
             "detail": f"photos={n_photos} size={size}"}]
    targets = [model.expression_landmarks(Expression(smile=s, blink=b))
               for s, b in zip(np.linspace(0, 1, n_frames), np.linspace(0.5, 0, n_frames))]
    for i, t in enumerate(targets):
        t0 = time.perf_counter()
        blender(FiducialSet(t))
        rows.append({"stage": "texture", "frame": i, "ms": 1e3 * (time.perf_counter() - t0), "detail": ""})
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("timing.csv"))
    ap.add_argument("--transfer-frames", type=int, default=10)
    ap.add_argument("--texture-frames", type=int, default=5)
    ap.add_argument("--photos", type=int, default=200)
    ap.add_argument("--size", type=int, default=512)
    a = ap.parse_args(argv)
    rows = bench_transfer(a.transfer_frames) + bench_texture(a.photos, a.texture_frames, a.size)
    a.out.parent.mkdir(parents=True, exist_ok=True)
    with open(a.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["stage", "frame", "ms", "detail"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "ms": f"{r['ms']:.3f}"})
    for stage in ("transfer", "texture"):
        ms = [r["ms"] for r in rows if r["stage"] == stage]
        print(f"{stage}: median {np.median(ms):.1f} ms, max {max(ms):.1f} ms over {len(ms)} frames")
    print(f"timings written to {a.out}")


if __name__ == "__main__":
    main()
