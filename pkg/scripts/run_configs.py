"""Run shipped configs through the CLI and print one headline per run.

    python scripts/run_configs.py                 # every config in configs/
    python scripts/run_configs.py ntk_relu rf_slope --out runs/demo
"""

import argparse
import json
import sys
from pathlib import Path

from advlab.cli import main as cli

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("names", nargs="*", help="config stems; default is all of configs/")
    parser.add_argument("--out", default="runs/configs", help="parent output directory")
    parser.add_argument("--workers", type=int, default=1, help="workers for sweep configs")
    args = parser.parse_args(argv)
    names = args.names or sorted(p.stem for p in CONFIGS.glob("*.json"))
    worst = 0
    for name in names:
        path = CONFIGS / f"{name}.json"
        out = Path(args.out) / name
        sweep = "grid" in json.loads(path.read_text())
        cmd = ["sweep", "--workers", str(args.workers)] if sweep else ["run"]
        code = cli([*cmd, "--config", str(path), "--out", str(out)])
        summary = json.loads((out / "summary.json").read_text())
        print(f"{name:28s} exit={code} {summary.get('headline')}")
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
