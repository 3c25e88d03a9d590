"""Self-transfer error and x2 magnitude ratio, snapping vs sub-vertex lookups.

    python3 scripts/experiment_transfer.py --out runs/transfer.csv

Self-transfer (driver = puppet, identity correspondence) should give the
driver frame back; the error is the vertex RMS over moving vertices relative
to the peak displacement.  The x2 column transfers onto a puppet scaled by two
and reports the median displacement ratio.
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from facepuppet.core import DepthMesh
from facepuppet.deform import PASS_THROUGH, Correspondence, DeformationTransfer
from facepuppet.synthetic import DRIVER_IDENTITY, Expression, FaceModel

BLENDS = {
    "smile": Expression(smile=1.0),
    "blink": Expression(blink=1.0),
    "mixed": Expression(smile=0.6, blink=0.5, mouth_open=0.8),
}


def run(width, height, subvertex):
    model = FaceModel(width, height, DRIVER_IDENTITY)
    base = model.mesh()
    big = DepthMesh(base.vertices.astype(np.float64) * 2, base.valid)
    ident = Correspondence.identity(width, height)
    same = DeformationTransfer(base, base, ident, subvertex=subvertex)
    double = DeformationTransfer(base, big, ident, subvertex=subvertex)
    for name, expr in BLENDS.items():
        frame = model.expression_mesh(expr)
        d = frame.vertices.astype(np.float64) - base.vertices
        n = np.linalg.norm(d, axis=-1)
        moving = n > PASS_THROUGH
        err = np.linalg.norm(same(frame).mesh.vertices.astype(np.float64) - frame.vertices, axis=-1)
        core = n > 0.3 * n.max()
        ratio = double(frame).displacement.norms()[core] / n[core]
        yield {"grid": f"{width}x{height}", "lookup": "subvertex" if subvertex else "snap", "blend": name,
               "self_rms_pct": f"{100 * np.sqrt(np.mean(err[moving] ** 2)) / n.max():.3f}",
               "x2_median_ratio": f"{np.median(ratio):.3f}"}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/transfer.csv"))
    a = ap.parse_args(argv)
    rows = [r for size in ((96, 120), (194, 244)) for sub in (False, True) for r in run(*size, sub)]
    a.out.parent.mkdir(parents=True, exist_ok=True)
    with open(a.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print("  ".join(f"{v:>10s}" for v in r.values()))


if __name__ == "__main__":
    main()
