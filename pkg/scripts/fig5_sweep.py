"""Platoon min-safe-distance against repetitions (fixed policy) and smart-lite.

    python3 scripts/fig5_sweep.py --runs 100 --out fig5.csv
"""

import argparse
import os

from infolat.config import default_config
from infolat.engine import RunSpec, monte_carlo
from infolat.platoon import min_safe_distance, write_fig5_csv


def sweep(runs: int, seed: int, jobs: int, max_k: int = 8, rri_ms: int = 100):
    cfg = default_config("platoon")
    cfg.policy.rri_ms = rri_ms
    pcfg = cfg.scenario.params
    rows = []
    for k in list(range(1, max_k + 1)) + [None]:
        if k is None:
            cfg.policy.kind, cfg.policy.repetitions = "smart-lite", 1
        else:
            cfg.policy.repetitions = k
        mc = monte_carlo(RunSpec.from_config(cfg, 0), runs, master_seed=seed, jobs=jobs)
        msd = min_safe_distance(pcfg, [r.result for r in mc.reports])
        rows.append({"label": "smart-lite" if k is None else f"k={k}", "repetitions": k or "", "rri_ms": rri_ms,
                     "success_rate": f"{msd.success_rate:.4f}", "min_safe_distance_m": f"{msd.distance:.3f}",
                     "mean_status_age_ms": f"{msd.mean_status_age:.2f}"})
        print(f"{rows[-1]['label']:>10}  msd {msd.distance:7.2f} m  success {msd.success_rate:.3f}")
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--max-k", type=int, default=8)
    ap.add_argument("--out", default="fig5.csv")
    a = ap.parse_args()
    write_fig5_csv(sweep(a.runs, a.seed, a.jobs, a.max_k), a.out)
