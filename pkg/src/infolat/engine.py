"""Run specs, single runs, and the seeded Monte-Carlo harness.

Both scenario kernels step a 1 ms network clock and a coarser dynamics clock
in one fixed phase order (:class:`SimClock`).  A run is fully determined by
its :class:`RunSpec`; every kernel seeds its own random stream from the run
seed at entry, so runs are independent of which thread executes them and of
what ran before.  Kernels release the GIL, so the harness uses threads.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .config import RootConfig, intersection_setup, materialize, parse_config, platoon_setup
from .intersection import simulate_intersection
from .platoon import simulate_run
from .policies import StarNetworkModel, brute_force_optimal, simulate, tune_threshold
from .smart import RatePolicy, load_checkpoint, pretrained_policy

PHASES = ("sense", "mac", "channel", "delivery", "control", "dynamics", "metrics")
NETWORK_PHASES = ("mac", "channel", "delivery")


@dataclass(frozen=True)
class SimClock:
    network_tick_ms: int = 1
    dynamics_tick_ms: int = 10
    now_ms: int = 0

    def __post_init__(self):
        if self.network_tick_ms < 1 or self.dynamics_tick_ms < 1:
            raise ValueError("ticks must be positive")
        if self.dynamics_tick_ms % self.network_tick_ms:
            raise ValueError("the dynamics tick must be a multiple of the network tick")

    def is_dynamics_tick(self, t_ms: int | None = None) -> bool:
        t = self.now_ms if t_ms is None else t_ms
        return t % self.dynamics_tick_ms == 0

    def phases(self, t_ms: int | None = None) -> tuple[str, ...]:
        """Phases executed at a tick, in order."""
        if self.is_dynamics_tick(t_ms):
            return PHASES
        return NETWORK_PHASES

    def advance(self) -> "SimClock":
        return replace(self, now_ms=self.now_ms + self.network_tick_ms)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-run seed: a hash of (master seed, run index), independent of the run count."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


@dataclass
class RunSpec:
    scenario: str
    seed: int
    config: dict  # materialized RootConfig
    duration_ms: int | None = None

    @classmethod
    def from_config(cls, cfg: RootConfig, seed: int) -> "RunSpec":
        return cls(cfg.scenario.kind, int(seed), materialize(cfg), cfg.run.duration_ms)

    def root(self) -> RootConfig:
        cfg = parse_config(self.config)
        if cfg.scenario.kind != self.scenario:
            raise ValueError(f"spec scenario {self.scenario!r} does not match its config")
        return cfg

    def to_json(self) -> str:
        return json.dumps({"scenario": self.scenario, "seed": self.seed, "config": self.config,
                           "duration_ms": self.duration_ms}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunSpec":
        d = json.loads(text)
        return cls(d["scenario"], int(d["seed"]), d["config"], d.get("duration_ms"))


@dataclass
class RunReport:
    spec: RunSpec
    metrics: dict
    traces: dict = field(default_factory=dict)
    result: object = field(default=None, repr=False, compare=False)

    def to_json(self) -> str:
        from .config import to_jsonable

        return json.dumps({"version": __version__, "spec": json.loads(self.spec.to_json()),
                           "metrics": to_jsonable(self.metrics)}, sort_keys=True)


class RunFailed(RuntimeError):
    def __init__(self, index: int, seed: int, cause: BaseException):
        super().__init__(f"run {index} (seed {seed}) failed: {type(cause).__name__}: {cause}")
        self.index, self.seed, self.cause = index, seed, cause


def resolve_policy(cfg: RootConfig, n_radios: int, policy_in=None) -> tuple[RatePolicy | None, np.ndarray | None]:
    """Learner tables for smart-lite: a checkpoint if given, else deterministic pretraining."""
    if cfg.policy.kind != "smart-lite":
        return None, None
    if policy_in is not None:
        pol, tables, _ = load_checkpoint(policy_in)
        if tables is not None and tables.shape[0] != n_radios:
            tables = None
        return pol, tables
    radios = cfg.policy.pretrain_radios or n_radios
    pol, _ = pretrained_policy(radios, selfish=cfg.policy.selfish, penalty=cfg.policy.reward_penalty,
                               seed=cfg.policy.pretrain_seed)
    return pol, None


def scenario_radios(cfg: RootConfig) -> int:
    if cfg.scenario.kind == "platoon":
        return cfg.scenario.params.n_radios
    if cfg.scenario.kind == "intersection":
        p = cfg.scenario.params
        # AVs present at once, roughly: arrival rate times the time spent on the approach
        return max(2, int(round((1 - p.hv_fraction) * p.arrival_rate * (p.approach_m / p.v_free + 10.0))) + 1)
    return 0


def run(spec: RunSpec, policy: RatePolicy | None = None, tables: np.ndarray | None = None,
        trace: bool = False) -> RunReport:
    """Execute one run; identical specs give identical reports."""
    cfg = spec.root()
    if spec.scenario == "platoon":
        pcfg, comm = platoon_setup(cfg)
        if spec.duration_ms is not None:
            pcfg = replace(pcfg, duration_ms=int(spec.duration_ms))
        if comm.policy == "smart" and policy is None:
            policy, tables = resolve_policy(cfg, pcfg.n_radios)
        res = simulate_run(pcfg, comm, spec.seed, policy=policy,
                           tables=None if tables is None else tables.copy(),
                           trace_cap=(pcfg.duration_ms // pcfg.dynamics_tick_ms + 1) * pcfg.n_radios * 2 if trace else 0)
        traces = {"mac": res.mac_trace, "age": res.age_trace} if trace else {}
        return RunReport(spec, res.summary(), traces, res)
    if spec.scenario == "intersection":
        icfg, comm = intersection_setup(cfg)
        if comm.policy == "smart" and policy is None:
            policy, tables = resolve_policy(cfg, scenario_radios(cfg))
        if tables is not None and tables.shape[0] != icfg.n_vehicles:
            tables = None
        res = simulate_intersection(icfg, comm, spec.seed, policy=policy,
                                    tables=None if tables is None else tables.copy(), duration_ms=spec.duration_ms)
        traces = {}
        if trace:
            traces["trips"] = np.column_stack([res.arrival_ms, res.approach, res.is_hv, res.trip_ms])
        return RunReport(spec, res.summary(), traces, res)
    raise ValueError(f"scenario {spec.scenario!r} has no per-seed runs")


def _stats(values: list) -> dict | None:
    a = np.array([np.nan if v is None else float(v) for v in values])
    if np.isnan(a).all():
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        p5, p50, p95 = np.nanpercentile(a, [5, 50, 95])
        return {"mean": float(np.nanmean(a)), "min": float(np.nanmin(a)), "max": float(np.nanmax(a)),
                "p5": float(p5), "p50": float(p50), "p95": float(p95), "n": int((~np.isnan(a)).sum())}


def aggregate(reports: list[RunReport]) -> dict:
    """Per-metric summary over runs, in run-index order; bools become rates."""
    out = {"runs": len(reports)}
    if not reports:
        return out
    for key, v0 in reports[0].metrics.items():
        if key == "seed" or isinstance(v0, str):
            continue
        vals = [r.metrics[key] for r in reports]
        if isinstance(v0, (bool, np.bool_)):
            out[key] = {"rate": float(np.mean([bool(v) for v in vals]))}
        elif isinstance(v0, (int, float, np.integer, np.floating)) or v0 is None:
            out[key] = _stats(vals)
    return out


@dataclass
class MonteCarloReport:
    reports: list[RunReport]
    aggregate: dict
    seeds: list[int]


def monte_carlo(base: RunSpec, n_runs: int, master_seed: int, jobs: int = 1, policy: RatePolicy | None = None,
                tables: np.ndarray | None = None, trace: bool = False) -> MonteCarloReport:
    """``n_runs`` copies of ``base`` with seeds derived from ``master_seed``.

    Results are ordered by run index, so the aggregate does not depend on
    ``jobs``.  The first failing run aborts the batch with :class:`RunFailed`.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if jobs < 1:
        raise ValueError("jobs must be at least 1")
    seeds = [derive_seed(master_seed, i) for i in range(n_runs)]
    specs = [replace(base, seed=s) for s in seeds]
    cfg = base.root()
    if cfg.policy.kind == "smart-lite" and policy is None and base.scenario in ("platoon", "intersection"):
        n = cfg.scenario.params.n_radios if base.scenario == "platoon" else scenario_radios(cfg)
        policy, tables = resolve_policy(cfg, n)

    def one(i):
        try:
            return run(specs[i], policy=policy, tables=tables, trace=trace)
        except Exception as exc:  # noqa: BLE001 - reported with its seed
            raise RunFailed(i, seeds[i], exc) from exc

    if jobs == 1:
        reports = [one(i) for i in range(n_runs)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            futures = [ex.submit(one, i) for i in range(n_runs)]
            reports = []
            for f in futures:
                try:
                    reports.append(f.result())
                except RunFailed:
                    for g in futures:
                        g.cancel()
                    raise
    return MonteCarloReport(reports, aggregate(reports), seeds)


# --- star-network policy bench ------------------------------------------------

BENCH_COLUMNS = ("policy", "instance", "n_terminals", "seeds", "horizon", "avg_age", "peak_age", "exceedance",
                 "oracle_age")


def policy_bench(bench, master_seed: int = 0) -> list[dict]:
    """One row per (policy, instance): seed-averaged average, peak and exceedance age.

    ``oracle_age`` is the value-iteration optimum where the instance is small
    enough (scheduled access, active sources), else ``None``.
    """
    rows = []
    for k, inst in enumerate(bench.instances):
        model = StarNetworkModel(inst.n_terminals, success_prob=inst.success_prob, weights=inst.weights)
        oracle = None
        if inst.n_terminals <= bench.oracle_max_terminals:
            oracle = brute_force_optimal(model, age_cap=bench.oracle_age_cap).value
        seeds = [derive_seed(master_seed, 1000 * k + i) for i in range(bench.seeds)]
        for pol in bench.policies:
            res = []
            for s in seeds:
                kw = {}
                if pol == "aloha":
                    kw["p_tx"] = 1.0 / inst.n_terminals
                elif pol == "threshold":
                    tune_h = min(bench.horizon, 20_000)
                    kw["subsidy"], kw["persistence"] = tune_threshold(model, horizon=tune_h, rng=s ^ 1)
                res.append(simulate(model, pol, bench.horizon, s, bound=bench.exceedance_bound, **kw))
            rows.append({
                "policy": pol, "instance": k, "n_terminals": inst.n_terminals, "seeds": bench.seeds,
                "horizon": bench.horizon,
                "avg_age": float(np.mean([r.avg_age for r in res])),
                "peak_age": float(np.max([r.peak_age for r in res])),
                "exceedance": float(np.mean([r.exceedance for r in res])),
                "oracle_age": oracle,
            })
    return rows
