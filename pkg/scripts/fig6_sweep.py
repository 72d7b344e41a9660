"""Intersection trip time normalized to traffic lights, per communication setting.

    python3 scripts/fig6_sweep.py --runs 100 --out fig6.csv
"""

import argparse
import csv
import os

from infolat.config import default_config
from infolat.engine import RunSpec, monte_carlo
from infolat.intersection import normalized_trip_time

SETTINGS = {
    "ideal": {"comm_mode": "ideal"},
    "k=1": {"repetitions": 1},
    "k=2": {"repetitions": 2},
    "k=4": {"repetitions": 4},
    "k=8": {"repetitions": 8},
    "smart-lite": {"kind": "smart-lite"},
}


def _batch(runs, seed, jobs, **policy):
    cfg = default_config("intersection")
    for key, v in policy.items():
        setattr(cfg.policy, key, v)
    return [r.result for r in monte_carlo(RunSpec.from_config(cfg, 0), runs, master_seed=seed, jobs=jobs).reports]


def sweep(runs: int, seed: int, jobs: int):
    base = _batch(runs, seed, jobs, comm_mode="lights")
    rows = []
    for label, kw in SETTINGS.items():
        r = normalized_trip_time(_batch(runs, seed, jobs, **kw), base)
        rows.append({"label": label, "ratio": f"{r.ratio:.5f}", "ci95_lo": f"{r.ci95[0]:.5f}",
                     "ci95_hi": f"{r.ci95[1]:.5f}", "runs": runs})
        print(f"{label:>10}  ratio {r.ratio:.4f}  [{r.ci95[0]:.4f}, {r.ci95[1]:.4f}]")
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--out", default="fig6.csv")
    a = ap.parse_args()
    rows = sweep(a.runs, a.seed, a.jobs)
    with open(a.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
