"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Errors go to stderr as one JSON object.  Every command builds its outputs in
a temporary sibling directory and renames it into place at the end, so a
failed run leaves no partial output behind.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RootConfig, default_config, load_config, materialize, to_jsonable
from .engine import (
    BENCH_COLUMNS,
    RunFailed,
    RunSpec,
    monte_carlo,
    policy_bench,
    resolve_policy,
    scenario_radios,
)
from .intersection import normalized_trip_time, write_trip_csv
from .platoon import NoSafeDistance, min_safe_distance, write_crash_csv, write_fig5_csv
from .smart import pretrained_policy, save_checkpoint

OUTPUT_ENV = "INFOLAT_OUTPUT_DIR"
DEFAULT_OUTPUT = "infolat-out"
MAC_TRACE_COLUMNS = ("seed", "t_ms", "radio", "event", "rri_ms", "subchannel")
AGE_TRACE_COLUMNS = ("seed", "t_ms", "radio", "status_age_ms", "control_age_ms", "gap_m")


class UsageError(Exception):
    pass


# --- helpers -------------------------------------------------------------------


def _load(args, scenario: str) -> RootConfig:
    cfg = load_config(args.config) if args.config else default_config(scenario)
    if cfg.scenario.kind != scenario:
        raise ConfigError(f"config scenario is {cfg.scenario.kind!r}, this command runs {scenario!r}")
    pol = cfg.policy
    if getattr(args, "policy", None):
        pol = replace(pol, kind=args.policy)
    if getattr(args, "repetitions", None) is not None:
        pol = replace(pol, repetitions=args.repetitions)
    if getattr(args, "mode", None):
        pol = replace(pol, comm_mode=args.mode)
    rb = cfg.run
    if getattr(args, "runs", None) is not None:
        rb = replace(rb, runs=args.runs)
    if getattr(args, "seed", None) is not None:
        rb = replace(rb, master_seed=args.seed)
    if getattr(args, "jobs", None) is not None:
        rb = replace(rb, jobs=args.jobs)
    try:
        cfg = replace(cfg, policy=replace(pol), run=replace(rb))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if getattr(args, "policy_in", None) and cfg.policy.kind != "smart-lite":
        raise UsageError("--policy-in needs --policy smart-lite")
    if getattr(args, "policy_in", None) and not Path(args.policy_in).is_file():
        raise UsageError(f"checkpoint {args.policy_in} not found")
    return cfg


def _output_dir(args, cfg: RootConfig | None, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    base = (cfg.run.output_dir if cfg is not None else None) or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
    return Path(base) / command


class AtomicDir:
    """Collect outputs in a temporary directory; move into place on success."""

    def __init__(self, final: Path):
        self.final = Path(final)

    def __enter__(self) -> Path:
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.tmp-", dir=self.final.parent))
        self.tmp.chmod(0o755)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        old = None
        if self.final.exists():
            old = self.final.parent / f".{self.final.name}.old-{os.getpid()}"
            os.replace(self.final, old)
        os.replace(self.tmp, self.final)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)
        return False


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _header(cfg: RootConfig, command: str) -> dict:
    return {"tool": "infolat", "version": __version__, "command": command, "config": materialize(cfg)}


def _write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def _label(cfg: RootConfig) -> str:
    return "smart-lite" if cfg.policy.kind == "smart-lite" else f"k={cfg.policy.repetitions}"


# --- commands --------------------------------------------------------------------


def cmd_run_platoon(args) -> int:
    cfg = _load(args, "platoon")
    out = _output_dir(args, cfg, "run-platoon")
    pcfg = cfg.scenario.params
    policy, tables = resolve_policy(cfg, pcfg.n_radios, args.policy_in)
    base = RunSpec.from_config(cfg, 0)
    mc = monte_carlo(base, cfg.run.runs, cfg.run.master_seed, jobs=cfg.run.jobs, policy=policy, tables=tables,
                     trace=args.trace)
    runs = [r.result for r in mc.reports]
    try:
        msd = min_safe_distance(pcfg, runs)
        dist, success = msd.distance, msd.success_rate
    except NoSafeDistance:
        dist = None
        att = sum(r.link_attempts for r in runs)
        success = sum(r.link_successes for r in runs) / att if att else None
    with AtomicDir(out) as tmp:
        summary = _header(cfg, "run-platoon") | {
            "seeds": mc.seeds,
            "min_safe_distance_m": dist,
            "success_rate": success,
            "aggregate": mc.aggregate,
            "runs": [r.metrics for r in mc.reports],
        }
        _write_json(tmp / "summary.json", summary)
        _write_json(tmp / "config.json", materialize(cfg))
        row = {"label": _label(cfg), "repetitions": cfg.policy.repetitions, "rri_ms": cfg.policy.rri_ms,
               "success_rate": success, "min_safe_distance_m": dist,
               "mean_status_age_ms": mc.aggregate["mean_status_age"]["mean"]
               if mc.aggregate.get("mean_status_age") else None}
        write_fig5_csv([row], tmp / "fig5.csv")
        write_crash_csv(runs, dist if dist is not None else pcfg.max_gap, tmp / "crashes.csv")
        if args.trace:
            _write_rows(tmp / "mac_trace.csv", MAC_TRACE_COLUMNS,
                        ([r.spec.seed, *row] for r in mc.reports for row in r.traces["mac"].tolist()))
            _write_rows(tmp / "age_trace.csv", AGE_TRACE_COLUMNS,
                        ([r.spec.seed, int(t), int(k), int(sa), int(ca), f"{g:.6f}"]
                         for r in mc.reports for t, k, sa, ca, g in r.traces["age"].tolist()))
    print(json.dumps({"output": str(out), "min_safe_distance_m": dist, "success_rate": success}))
    return 0


def cmd_run_intersection(args) -> int:
    cfg = _load(args, "intersection")
    out = _output_dir(args, cfg, "run-intersection")
    policy, tables = resolve_policy(cfg, scenario_radios(cfg), args.policy_in)
    lights_cfg = replace(cfg, policy=replace(cfg.policy, kind="fixed", comm_mode="lights"))
    base = monte_carlo(RunSpec.from_config(lights_cfg, 0), cfg.run.runs, cfg.run.master_seed, jobs=cfg.run.jobs)
    if cfg.policy.comm_mode == "lights":
        ctrl = base
    else:
        ctrl = monte_carlo(RunSpec.from_config(cfg, 0), cfg.run.runs, cfg.run.master_seed, jobs=cfg.run.jobs,
                           policy=policy, tables=tables)
    b_runs = [r.result for r in base.reports]
    c_runs = [r.result for r in ctrl.reports]
    paired = all(np.array_equal(b.arrival_ms, c.arrival_ms) and np.array_equal(b.is_hv, c.is_hv)
                 for b, c in zip(b_runs, c_runs))
    ratio = normalized_trip_time(c_runs, b_runs)
    label = "lights" if cfg.policy.comm_mode == "lights" else (
        "ideal" if cfg.policy.comm_mode == "ideal" else _label(cfg))
    with AtomicDir(out) as tmp:
        summary = _header(cfg, "run-intersection") | {
            "seeds": ctrl.seeds,
            "label": label,
            "normalized_trip_time": ratio.ratio,
            "ci95": list(ratio.ci95),
            "per_seed_ratio": ratio.per_seed,
            "paired_arrivals_verified": paired,
            "baseline_aggregate": base.aggregate,
            "aggregate": ctrl.aggregate,
        }
        _write_json(tmp / "summary.json", summary)
        _write_json(tmp / "config.json", materialize(cfg))
        agg = ctrl.aggregate.get("success_rate")
        _write_rows(tmp / "fig6.csv", ("label", "repetitions", "rri_ms", "ratio", "ci_low", "ci_high", "success_rate"),
                    [[label, cfg.policy.repetitions, cfg.policy.rri_ms, f"{ratio.ratio:.6f}", f"{ratio.ci95[0]:.6f}",
                      f"{ratio.ci95[1]:.6f}", "" if agg is None else f"{agg['mean']:.6f}"]])
        write_trip_csv(c_runs + ([] if ctrl is base else b_runs), tmp / "trips.csv")
    print(json.dumps({"output": str(out), "normalized_trip_time": ratio.ratio}))
    return 0


def cmd_policy_bench(args) -> int:
    cfg = load_config(args.config) if args.config else default_config("policy-bench")
    if cfg.scenario.kind != "policy-bench":
        raise ConfigError(f"config scenario is {cfg.scenario.kind!r}, this command runs 'policy-bench'")
    if args.seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, master_seed=args.seed))
    out = _output_dir(args, cfg, "policy-bench")
    rows = policy_bench(cfg.scenario.params, cfg.run.master_seed)
    with AtomicDir(out) as tmp:
        _write_rows(tmp / "bench.csv", BENCH_COLUMNS,
                    [["" if r[c] is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c])
                      for c in BENCH_COLUMNS] for r in rows])
        _write_json(tmp / "summary.json", _header(cfg, "policy-bench") | {"rows": rows})
    print(json.dumps({"output": str(out), "rows": len(rows)}))
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config) if args.config else default_config(args.scenario)
    if cfg.scenario.kind == "policy-bench":
        raise ConfigError("pretraining needs a platoon or intersection scenario")
    radios = args.radios or cfg.policy.pretrain_radios or scenario_radios(cfg)
    pol, rep = pretrained_policy(radios, selfish=cfg.policy.selfish, penalty=cfg.policy.reward_penalty,
                                 seed=cfg.policy.pretrain_seed)
    dest = Path(args.pretrain_out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{dest.name}.tmp-", dir=dest.parent)
    os.close(fd)
    try:
        meta = {"version": __version__, "radios": radios, "episodes": rep.episodes, "converged": rep.converged,
                "config": materialize(cfg)}
        save_checkpoint(tmp, pol, None, meta)
        os.replace(tmp, dest)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    print(json.dumps({"output": str(dest), "radios": radios, "episodes": rep.episodes}))
    return 0


def cmd_explain_config(args) -> int:
    cfg = load_config(args.config) if args.config else default_config(args.scenario)
    print(json.dumps(materialize(cfg), indent=2, sort_keys=True))
    return 0


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infolat", description="Information-latency co-simulator.")
    p.add_argument("--version", action="version", version=f"infolat {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, modes):
        sp.add_argument("config", nargs="?", help="JSON config (defaults when omitted)")
        sp.add_argument("--policy", choices=["fixed", "smart-lite"])
        sp.add_argument("--repetitions", type=int, help="copies per message for the fixed policy")
        sp.add_argument("--mode", choices=modes, help="communication mode")
        sp.add_argument("--policy-in", help="smart-lite checkpoint from `infolat pretrain`")
        sp.add_argument("--runs", type=int)
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--jobs", type=int, help="runs executed in parallel")
        sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT}, plus the command)")

    sp = sub.add_parser("run-platoon", help="platoon braking scenario; min safe distance")
    common(sp, ["mode4", "ideal", "fixed-latency"])
    sp.add_argument("--trace", action="store_true", help="also write MAC and age traces")
    sp.set_defaults(func=cmd_run_platoon)

    sp = sub.add_parser("run-intersection", help="intersection scenario; trip time against traffic lights")
    common(sp, ["mode4", "ideal", "lights"])
    sp.set_defaults(func=cmd_run_intersection)

    sp = sub.add_parser("policy-bench", help="star-network access policies; CSV table")
    sp.add_argument("config", nargs="?")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_policy_bench)

    sp = sub.add_parser("pretrain", help="offline pretraining of the smart-lite learners")
    sp.add_argument("config", nargs="?")
    sp.add_argument("--scenario", choices=["platoon", "intersection"], default="platoon")
    sp.add_argument("--radios", type=int, help="learner population for the stylized model")
    sp.add_argument("--pretrain-out", required=True, help="checkpoint path to write")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("explain-config", help="print the config with every default filled in")
    sp.add_argument("config", nargs="?")
    sp.add_argument("--scenario", choices=["platoon", "intersection", "policy-bench"], default="platoon")
    sp.set_defaults(func=cmd_explain_config)
    return p


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for name in ("jobs", "runs", "repetitions", "radios"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            return _fail(2, "usage", f"--{name} must be at least 1")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        return _fail(2, "config", str(exc))
    except RunFailed as exc:
        return _fail(1, "run", str(exc), seed=exc.seed, index=exc.index)
    except Exception as exc:  # noqa: BLE001 - top-level guard
        return _fail(1, "runtime", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
