"""Constant-eps sweep on the ride-share scenario: final average violation and toll vs eps.

    python scripts/eps_sweep.py [--out runs/eps_sweep] [--seeds 0 1 2 3 4]

Inner accuracy levels are M * logspace(-2, 0, 4) (FW gaps scale with the
population mass M). Writes one toll run per (seed, eps), an ``eps_sweep.csv``
summary per seed, and prints whether both series are monotone in eps.
"""
import argparse
import csv
import json
from pathlib import Path

import numpy as np

from mdpcg.cli import main as mdpcg

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "rideshare.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/eps_sweep")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--config", default=str(CONFIG))
    args = ap.parse_args()
    cfg = json.loads(Path(args.config).read_text())
    cfg.setdefault("toll", {})["polish"] = False
    cfg_path = Path(args.out) / "config.json"
    cfg_path.parent.mkdir(parents=True, exist_ok=True)
    base = Path(args.config).resolve().parent
    for key in ("geometry", "trips"):
        if key in cfg and not Path(cfg[key]).is_absolute():
            cfg[key] = str(base / cfg[key])
    cfg_path.write_text(json.dumps(cfg, indent=1))
    levels = float(cfg.get("mass", 1.0)) * np.logspace(-2, 0, 4)
    for seed in args.seeds:
        runs = []
        for eps in levels:
            run = Path(args.out) / f"seed{seed}" / f"eps{eps:.4g}"
            argv = ["toll", "--config", str(cfg_path), "--seed", str(seed), "--out", str(run),
                    "--iters", str(args.iters), "--eps-schedule", f"const:{float(eps)!r}"]
            if mdpcg(argv) != 0:
                raise SystemExit("toll run failed")
            runs.append(str(run))
        summary = Path(args.out) / f"seed{seed}"
        mdpcg(["report", *runs, "--out", str(summary)])
        with open(summary / "eps_sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        viol = [float(r["final_avg_violation"]) for r in rows]
        toll = [float(r["final_avg_toll"]) for r in rows]
        mono = np.all(np.diff(viol) >= 0) and np.all(np.diff(toll) >= 0)
        print(f"seed {seed}: violation {np.round(viol, 3)}, toll {np.round(toll, 3)}, "
              f"{'monotone' if mono else 'NOT monotone'} in eps")


if __name__ == "__main__":
    main()
