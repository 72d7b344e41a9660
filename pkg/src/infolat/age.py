"""Age processes and the penalty functionals built on top of them.

Every other module reports freshness through :class:`AgeProcess`: the age of a
source at time ``t`` is ``t - g`` where ``g`` is the generation (capture) time
of the freshest sample delivered so far.  Aggregates are left-Riemann sums on
the sampling cadence, which is exact for per-slot sampled sawtooths.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np


class CausalityError(ValueError):
    """A sample was delivered before it was generated."""


@dataclass
class AgeProcess:
    source_id: Hashable
    gen_time_latest_delivered: float = 0.0
    samples: list[tuple[float, float]] = field(default_factory=list)

    def age(self, t: float) -> float:
        return t - self.gen_time_latest_delivered

    def sample(self, t: float) -> float:
        a = self.age(t)
        if a < 0:
            raise CausalityError(f"sampling at t={t} before reference {self.gen_time_latest_delivered}")
        self.samples.append((t, a))
        return a

    @property
    def ages(self) -> np.ndarray:
        return np.array([a for _, a in self.samples], dtype=float)

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.samples], dtype=float)


def record_delivery(proc: AgeProcess, now: float, gen_time: float) -> AgeProcess:
    """Apply a delivery of a sample generated at ``gen_time`` to ``proc``.

    Stale deliveries (not newer than the current reference) leave the process
    untouched. The process is updated in place and returned.
    """
    if gen_time > now:
        raise CausalityError(f"gen_time {gen_time} is after delivery time {now}")
    if gen_time > proc.gen_time_latest_delivered:
        proc.gen_time_latest_delivered = gen_time
    return proc


@dataclass(frozen=True)
class AgePenalty:
    """Pointwise penalty on age: ``linear``, ``quadratic`` or ``exceedance``."""

    kind: str = "linear"
    bound: float | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic", "exceedance"):
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.kind == "exceedance" and self.bound is None:
            raise ValueError("exceedance penalty needs a bound")

    def __call__(self, age):
        a = np.asarray(age, dtype=float)
        if self.kind == "linear":
            out = a
        elif self.kind == "quadratic":
            out = a * a
        else:
            out = (a > self.bound).astype(float)
        return out if out.ndim else float(out)

    @classmethod
    def linear(cls) -> "AgePenalty":
        return cls("linear")

    @classmethod
    def quadratic(cls) -> "AgePenalty":
        return cls("quadratic")

    @classmethod
    def exceedance(cls, bound: float) -> "AgePenalty":
        return cls("exceedance", float(bound))


def _sample_weights(times: np.ndarray, horizon: float) -> np.ndarray:
    # left-Riemann: each sample holds until the next one, the last until the horizon end
    start = times[0]
    ends = np.append(times[1:], start + horizon)
    return np.clip(ends - times, 0.0, None)


def time_average_penalty(proc: AgeProcess, penalty: AgePenalty, horizon: float) -> float:
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if not proc.samples:
        raise ValueError(f"source {proc.source_id!r} has no samples")
    w = _sample_weights(proc.times, horizon)
    return float(np.sum(penalty(proc.ages) * w) / horizon)


def peak_age(proc: AgeProcess) -> float:
    if not proc.samples:
        raise ValueError(f"source {proc.source_id!r} has no samples")
    return float(proc.ages.max())


@dataclass
class InfoLatencyStats:
    time_avg_penalty: float
    peak_age: float
    exceedance_fraction: float
    per_source: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "time_avg": self.time_avg_penalty,
            "peak": self.peak_age,
            "exceedance": self.exceedance_fraction,
            "per_source": {str(k): v for k, v in self.per_source.items()},
        }


def summarize(
    procs: Sequence[AgeProcess],
    horizon: float,
    penalty: AgePenalty | None = None,
    bound: float = 100.0,
) -> InfoLatencyStats:
    """Fleet-wide and per-source statistics over a common horizon."""
    penalty = penalty or AgePenalty.linear()
    exceed = AgePenalty.exceedance(bound)
    per = {}
    for p in procs:
        per[p.source_id] = {
            "time_avg": time_average_penalty(p, penalty, horizon),
            "peak": peak_age(p),
            "exceedance": time_average_penalty(p, exceed, horizon),
        }
    if not per:
        raise ValueError("no sources to summarize")
    vals = list(per.values())
    return InfoLatencyStats(
        time_avg_penalty=float(np.mean([v["time_avg"] for v in vals])),
        peak_age=float(max(v["peak"] for v in vals)),
        exceedance_fraction=float(np.mean([v["exceedance"] for v in vals])),
        per_source=per,
    )


def sawtooth_process(period: int, delay: int, horizon: int, source_id: Hashable = 0) -> AgeProcess:
    """Deterministic updating: a sample generated every ``period`` slots is
    delivered ``delay`` slots later.

    Sampled once per slot (after that slot's delivery) for ``horizon`` slots,
    starting at the first delivery so the trace is in steady state.
    """
    proc = AgeProcess(source_id)
    for t in range(delay, delay + horizon):
        g = t - delay
        if g % period == 0:
            record_delivery(proc, t, g)
        proc.sample(t)
    return proc


def write_age_csv(procs: Iterable[AgeProcess], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ms", "source_id", "age_ms"])
        for p in procs:
            for t, a in p.samples:
                w.writerow([t, p.source_id, a])


def write_age_json(stats: InfoLatencyStats, path, extra: dict | None = None) -> None:
    rec = stats.to_dict()
    if extra:
        rec.update(extra)
    with open(path, "w") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True)
