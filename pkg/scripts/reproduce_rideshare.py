"""Scaled ride-share experiment: untolled equilibrium, 500 toll iterations, report.

    python scripts/reproduce_rideshare.py [--out runs/rideshare] [--seed 0]

Prints the reduction in total average capacity violation and the change in
normalised average driver cost.
"""
import argparse
import csv
import json
from pathlib import Path

from mdpcg.cli import main as mdpcg

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "rideshare.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/rideshare")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=str(CONFIG))
    args = ap.parse_args()
    out = Path(args.out)
    common = ["--config", args.config, "--seed", str(args.seed)]
    for argv in (["solve", *common, "--out", str(out / "untolled")],
                 ["toll", *common, "--out", str(out / "tolled")],
                 ["report", str(out / "tolled")]):
        if mdpcg(argv) != 0:
            raise SystemExit(f"mdpcg {argv[0]} failed")
    run = json.loads((out / "tolled" / "run.json").read_text())
    with open(out / "tolled" / "violation_vs_k.csv") as fh:
        last_v = list(csv.DictReader(fh))[-1]
    with open(out / "tolled" / "avg_cost_vs_k.csv") as fh:
        last_c = list(csv.DictReader(fh))[-1]
    base = run["baseline_violation"]
    final = float(last_v["avg_total_violation"])
    print(f"capacity {run['capacity']:.2f}; total violation {base:.2f} untolled -> {final:.2f} "
          f"averaged ({1 - final / base:.1%} reduction)")
    print(f"normalised average driver cost: {float(last_c['normalized_ybar']):.4f} (ybar), "
          f"{float(last_c['normalized']):.4f} (y^K)")


if __name__ == "__main__":
    main()
