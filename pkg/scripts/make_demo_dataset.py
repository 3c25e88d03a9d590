"""Regenerate the bundled demo dataset and (optionally) the golden puppet digest.

    python3 scripts/make_demo_dataset.py                 # dataset only
    python3 scripts/make_demo_dataset.py --update-golden # also rerun `puppet` and store its digest
"""
import argparse
import json
import shutil
import tempfile
from pathlib import Path

from facepuppet.cli import main as cli_main
from facepuppet.synthetic import write_dataset

ROOT = Path(__file__).resolve().parents[1]
DEMO = ROOT / "src" / "facepuppet" / "data" / "demo"
GOLDEN = ROOT / "tests" / "golden" / "puppet_digest.txt"


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=DEMO)
    ap.add_argument("--update-golden", action="store_true")
    a = ap.parse_args()
    if a.out.exists():
        shutil.rmtree(a.out)
    write_dataset(a.out, width=64, height=80, n_photos=16, n_frames=6, seed=0)
    print(f"dataset written to {a.out}")
    if a.update_golden:
        with tempfile.TemporaryDirectory() as tmp:
            code = cli_main(["puppet", "--config", str(a.out / "config.txt"), "--out", tmp, "--threads", "1"])
            if code != 0:
                raise SystemExit(code)
            digest = json.loads((Path(tmp) / "manifest.json").read_text())["digest"]
        GOLDEN.parent.mkdir(parents=True, exist_ok=True)
        GOLDEN.write_text(digest + "\n")
        print(f"golden digest {digest}")


if __name__ == "__main__":
    main()
