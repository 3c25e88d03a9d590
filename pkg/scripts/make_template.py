"""Regenerate the generic face template shipped in facepuppet/data (194 x 244 grid)."""
import argparse
from pathlib import Path

from facepuppet.synthetic import FaceModel, Identity, write_template

DATA = Path(__file__).resolve().parents[1] / "src" / "facepuppet" / "data"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--width", type=int, default=194)
    ap.add_argument("--height", type=int, default=244)
    ap.add_argument("--out", type=Path, default=DATA)
    a = ap.parse_args()
    tpl = FaceModel(a.width, a.height, Identity()).template()
    write_template(tpl, a.out / "template_mesh.pfmesh", a.out / "template_fiducials.csv")
    print(f"wrote {a.width}x{a.height} template to {a.out}")


if __name__ == "__main__":
    main()
