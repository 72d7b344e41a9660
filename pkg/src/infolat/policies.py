"""Age-optimal access policies on a one-hop star network.

Slotted time, ``N`` terminals, i.i.d. per-terminal success probabilities.
Scheduled access (round-robin, max-index) serves at most one terminal per
slot; uncoordinated access (ALOHA, threshold-on-index) loses every slot with
two or more transmitters.  Failure feedback is instantaneous.

Age convention: ``a_n(t+1) = 1`` after a successful delivery of a fresh
(active-source) sample in slot ``t``, else ``a_n(t) + 1``.  Averages run over
``t = 1..horizon``.  A small-instance value-iteration oracle gives the exact
optimum of the truncated age MDP.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numba import njit

RR, MAX_INDEX, ALOHA, THRESHOLD = 0, 1, 2, 3
POLICY_CODES = {"round_robin": RR, "max_index": MAX_INDEX, "aloha": ALOHA, "threshold": THRESHOLD}


@dataclass
class StarNetworkModel:
    n_terminals: int
    success_prob: np.ndarray | None = None
    weights: np.ndarray | None = None
    # None: active sources; else per-terminal Bernoulli arrival rates
    arrival_rates: np.ndarray | None = None
    # None: staggered N..1 (round-robin steady state); distinct ages also keep
    # deterministic threshold rules from starting tied
    initial_ages: np.ndarray | None = None

    def __post_init__(self):
        n = self.n_terminals
        if n < 1:
            raise ValueError("need at least one terminal")
        self.success_prob = _vec(self.success_prob, n, 1.0)
        self.weights = _vec(self.weights, n, 1.0)
        if np.any(self.success_prob <= 0) or np.any(self.success_prob > 1):
            raise ValueError("success probabilities must lie in (0, 1]")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        if self.arrival_rates is not None:
            self.arrival_rates = _vec(self.arrival_rates, n, 1.0)
            if np.any(self.arrival_rates < 0) or np.any(self.arrival_rates > 1):
                raise ValueError("arrival rates must lie in [0, 1]")
        if self.initial_ages is None:
            self.initial_ages = np.arange(n, 0, -1, dtype=np.int64)
        else:
            self.initial_ages = np.asarray(self.initial_ages, dtype=np.int64)
            if self.initial_ages.shape != (n,) or np.any(self.initial_ages < 1):
                raise ValueError("initial_ages must be N positive integers")

    @property
    def active(self) -> bool:
        return self.arrival_rates is None

    def _lam(self) -> np.ndarray:
        return np.full(self.n_terminals, -1.0) if self.active else self.arrival_rates


def _vec(x, n, default) -> np.ndarray:
    if x is None:
        return np.full(n, float(default))
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return np.full(n, float(a))
    if a.shape != (n,):
        raise ValueError(f"expected {n} values, got shape {a.shape}")
    return a


def index_values(model: StarNetworkModel, ages) -> np.ndarray:
    a = np.asarray(ages, dtype=float)
    return model.weights * model.success_prob * a * (a + 2.0) / 2.0


def schedule_max_index(model: StarNetworkModel, ages, rng=None) -> int:
    """Terminal with the largest index; ``np.argmax`` breaks ties by lowest id."""
    return int(np.argmax(index_values(model, ages)))


def dynamic_index_access(model: StarNetworkModel, ages, subsidy: float, rng=None) -> np.ndarray:
    """Transmit decision per terminal: index strictly above the broadcast subsidy."""
    return index_values(model, ages) > subsidy


@dataclass
class SlotOutcome:
    transmitters: np.ndarray
    delivered: int | None
    ages: np.ndarray


def aloha_step(model: StarNetworkModel, p_tx, ages, rng: np.random.Generator) -> SlotOutcome:
    p_tx = _vec(p_tx, model.n_terminals, 0.0)
    if np.any(p_tx < 0) or np.any(p_tx > 1):
        raise ValueError("transmit probabilities must lie in [0, 1]")
    tx = rng.random(model.n_terminals) < p_tx
    return _resolve_contention(model, tx, np.asarray(ages), rng)


def _resolve_contention(model, tx, ages, rng) -> SlotOutcome:
    new = ages + 1
    who = None
    if tx.sum() == 1:
        n = int(np.flatnonzero(tx)[0])
        if rng.random() < model.success_prob[n]:
            new[n] = 1
            who = n
    return SlotOutcome(tx, who, new)


@njit(cache=True, nogil=True)
def _simulate(code, p, w, lam, init_ages, horizon, seed, ptx, subsidy, bound, record, rec_tx, rec_ok, rec_ages):
    np.random.seed(seed)
    N = p.shape[0]
    ages = init_ages.copy()
    held = np.full(N, -1, dtype=np.int64)  # generation slot of the held sample
    sum_age = np.zeros(N)
    peak = np.zeros(N, dtype=np.int64)
    over = np.zeros(N, dtype=np.int64)
    n_tx = 0
    n_ok = 0
    if record:
        rec_ages[0, :] = ages
    for t in range(horizon):
        for n in range(N):
            if lam[n] < 0 or np.random.random() < lam[n]:
                held[n] = t
        tx = np.zeros(N, dtype=np.bool_)
        if code == RR:
            n = t % N
            if held[n] >= 0:
                tx[n] = True
        elif code == MAX_INDEX:
            best = -1.0
            bi = -1
            for n in range(N):
                if held[n] >= 0:
                    idx = w[n] * p[n] * ages[n] * (ages[n] + 2.0) / 2.0
                    if idx > best:
                        best = idx
                        bi = n
            if bi >= 0:
                tx[bi] = True
        elif code == ALOHA:
            for n in range(N):
                if held[n] >= 0 and np.random.random() < ptx[n]:
                    tx[n] = True
        else:
            for n in range(N):
                if held[n] >= 0 and w[n] * p[n] * ages[n] * (ages[n] + 2.0) / 2.0 > subsidy:
                    # persistence below 1 draws, so above-threshold terminals can break a collision lock
                    if ptx[n] >= 1.0 or np.random.random() < ptx[n]:
                        tx[n] = True
        cnt = 0
        who = -1
        for n in range(N):
            if tx[n]:
                cnt += 1
                who = n
        n_tx += cnt
        ok = -1
        if cnt == 1 and np.random.random() < p[who]:
            ok = who
        for n in range(N):
            if n == ok:
                ages[n] = t + 1 - held[n]
                held[n] = -1
            else:
                ages[n] += 1
            sum_age[n] += ages[n]
            if ages[n] > peak[n]:
                peak[n] = ages[n]
            if ages[n] > bound:
                over[n] += 1
        if ok >= 0:
            n_ok += 1
        if record:
            for n in range(N):
                rec_tx[t, n] = tx[n]
                rec_ages[t + 1, n] = ages[n]
            rec_ok[t] = ok
    return sum_age, peak, over, n_tx, n_ok


@dataclass
class PolicyResult:
    policy: str
    horizon: int
    avg_age: float  # weighted, averaged over terminals
    per_terminal_age: np.ndarray
    peak_age: float
    exceedance: float
    tx_per_slot: float
    deliveries: int

    def row(self) -> dict:
        return {
            "policy": self.policy,
            "avg_age": self.avg_age,
            "peak_age": self.peak_age,
            "exceedance": self.exceedance,
        }


@dataclass
class PolicyTrace:
    """Per-slot record: ``transmit[t, n]``, ``delivered[t]`` (-1 if none) and
    ``ages[t, n]`` for ``t = 0..horizon``."""

    transmit: np.ndarray
    delivered: np.ndarray
    ages: np.ndarray
    result: PolicyResult = field(repr=False, default=None)

    @property
    def chosen(self) -> np.ndarray:
        """Scheduled terminal per slot (-1 if idle); scheduled access only."""
        out = np.full(len(self.transmit), -1)
        hit = self.transmit.any(axis=1)
        out[hit] = self.transmit[hit].argmax(axis=1)
        return out


def _seed(rng) -> int:
    if rng is None:
        return 0
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(0, 2**31 - 1))


def simulate(
    model: StarNetworkModel,
    policy: str,
    horizon: int,
    rng=None,
    *,
    p_tx=None,
    subsidy: float = 0.0,
    persistence=1.0,
    bound: float = 100.0,
    record: bool = False,
):
    """Run ``policy`` for ``horizon`` slots; returns a PolicyTrace if ``record``
    else a PolicyResult.  ``rng`` may be a Generator or an integer seed.

    ``persistence`` (threshold only) is the per-slot transmit probability of a
    terminal above the subsidy; 1 is the plain deterministic rule."""
    if policy not in POLICY_CODES:
        raise ValueError(f"unknown policy {policy!r}")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    N = model.n_terminals
    ptx = _vec(p_tx, N, 0.0)
    if policy == "threshold":
        ptx = _vec(persistence, N, 1.0)
        if np.any(ptx <= 0) or np.any(ptx > 1):
            raise ValueError("persistence must lie in (0, 1]")
    if policy == "aloha" and (np.any(ptx < 0) or np.any(ptx > 1)):
        raise ValueError("transmit probabilities must lie in [0, 1]")
    H = horizon if record else 1
    rec_tx = np.zeros((H, N), dtype=np.bool_)
    rec_ok = np.zeros(H, dtype=np.int64)
    rec_ages = np.zeros((H + 1, N), dtype=np.int64)
    sum_age, peak, over, n_tx, n_ok = _simulate(
        POLICY_CODES[policy], model.success_prob, model.weights, model._lam(), model.initial_ages,
        horizon, _seed(rng), ptx, float(subsidy), float(bound), record, rec_tx, rec_ok, rec_ages,
    )
    per = sum_age / horizon
    res = PolicyResult(
        policy=policy,
        horizon=horizon,
        avg_age=float(np.mean(model.weights * per)),
        per_terminal_age=per,
        peak_age=float(peak.max()),
        exceedance=float(over.sum() / (horizon * N)),
        tx_per_slot=n_tx / horizon,
        deliveries=int(n_ok),
    )
    if record:
        return PolicyTrace(rec_tx, rec_ok, rec_ages, res)
    return res


def schedule_round_robin(model: StarNetworkModel, horizon: int, rng=None) -> PolicyTrace:
    return simulate(model, "round_robin", horizon, rng, record=True)


def optimize_aloha_p(model: StarNetworkModel, grid, horizon: int = 100_000, rng=None, bound: float = 100.0):
    """Grid point minimizing simulated weighted average age.

    ``grid`` is a 1-D array (one symmetric probability for every terminal) or
    a list of per-terminal arrays (searched over their product).  All grid
    points share one seed, so comparisons use common random numbers.
    Returns ``(p_star, objective)``.
    """
    N = model.n_terminals
    if isinstance(grid, (list, tuple)) and len(grid) and np.ndim(grid[0]) == 1:
        axes = [np.asarray(g, dtype=float) for g in grid]
        if len(axes) != N:
            raise ValueError("need one grid per terminal")
        points = [np.array(c) for c in itertools.product(*axes)]
    else:
        g = np.asarray(grid, dtype=float).ravel()
        points = [np.full(N, v) for v in g]
    if not points or any(np.any(pt < 0) or np.any(pt > 1) for pt in points):
        raise ValueError("degenerate grid: need values in [0, 1]")
    if all(np.all(pt == 0) for pt in points):
        raise ValueError("degenerate grid: all points silence every terminal")
    seed = _seed(rng)
    vals = [simulate(model, "aloha", horizon, seed, p_tx=pt, bound=bound).avg_age for pt in points]
    best = int(np.argmin(vals))
    return points[best], float(vals[best])


def tune_subsidy(
    model: StarNetworkModel, target_tx: float = 1.0, horizon: int = 20_000, rng=None, iters: int = 40
) -> float:
    """Bisection on the subsidy so the mean number of transmitters per slot
    is close to ``target_tx`` (that count is non-increasing in the subsidy)."""
    seed = _seed(rng)
    lo, hi = 0.0, float(index_values(model, np.full(model.n_terminals, 4.0 * horizon)).max())

    def rate(s):
        return simulate(model, "threshold", horizon, seed, subsidy=s).tx_per_slot

    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if rate(mid) > target_tx:
            lo = mid
        else:
            hi = mid
    return hi


def tune_threshold(model: StarNetworkModel, horizon: int = 20_000, rng=None) -> tuple[float, float]:
    """Grid search for the (subsidy, persistence) pair with the lowest average age.

    Subsidies are powers of two in units of the mean ``w * p``, so the pick is
    invariant to rescaling the weights.
    """
    seed = _seed(rng)
    N = model.n_terminals
    unit = float(np.mean(model.weights * model.success_prob))
    subsidies = [0.0] + [unit * 2.0 ** k for k in range(-2, 11)]
    persist = sorted(q for q in {1.0, 0.5, 0.25, 1.0 / N, 2.0 / N} if q <= 1.0)
    best = None
    for q in persist:
        for s in subsidies:
            v = simulate(model, "threshold", horizon, seed, subsidy=s, persistence=q).avg_age
            if best is None or v < best[0]:
                best = (v, s, q)
    return best[1], best[2]


@dataclass
class OracleResult:
    value: float
    policy: np.ndarray  # action per state, shape (cap,)*N, indexed by age-1
    iterations: int


def brute_force_optimal(
    model: StarNetworkModel,
    age_cap: int = 20,
    tol: float = 1e-9,
    max_cells: int = 10_000,
    max_iter: int = 200_000,
) -> OracleResult:
    """Relative value iteration on the age MDP truncated at ``age_cap``.

    Scheduled access with active sources.  Returns the optimal long-run
    weighted age (averaged over terminals) and the greedy action table.
    """
    N, cap = model.n_terminals, age_cap
    if not model.active:
        raise ValueError("oracle covers active sources only")
    if cap ** N > max_cells:
        raise ValueError(f"state space {cap}^{N} exceeds {max_cells} cells")
    grids = np.meshgrid(*[np.arange(1, cap + 1)] * N, indexing="ij")
    ages = np.stack([g.ravel() for g in grids], axis=1)  # (S, N)
    radix = cap ** np.arange(N - 1, -1, -1)

    def idx(a):
        return (a - 1) @ radix

    inc = np.minimum(ages + 1, cap)
    i_fail = idx(inc)
    c_fail = (inc * model.weights).sum(axis=1) / N
    i_succ, c_succ = [], []
    for n in range(N):
        s = inc.copy()
        s[:, n] = 1
        i_succ.append(idx(s))
        c_succ.append((s * model.weights).sum(axis=1) / N)
    p = model.success_prob
    h = np.zeros(len(ages))
    tau = 0.5  # aperiodicity transform; leaves the gain unchanged
    for it in range(1, max_iter + 1):
        q = np.stack(
            [p[n] * (c_succ[n] + h[i_succ[n]]) + (1 - p[n]) * (c_fail + h[i_fail]) for n in range(N)], axis=1
        )
        th = q.min(axis=1)
        diff = th - h
        lo, hi = diff.min(), diff.max()
        h = h + tau * diff
        h -= h[0]
        if hi - lo < tol:
            break
    return OracleResult(value=float(0.5 * (lo + hi)), policy=q.argmin(axis=1).reshape((cap,) * N), iterations=it)


def expected_schedule_age(model: StarNetworkModel, schedule, init_ages=None) -> float:
    """Expected weighted age averaged over the slots of an open-loop schedule."""
    a = np.asarray(model.initial_ages if init_ages is None else init_ages, dtype=float).copy()
    total = 0.0
    for n in schedule:
        nxt = a + 1
        nxt[n] = model.success_prob[n] + (1 - model.success_prob[n]) * (a[n] + 1)
        a = nxt
        total += float(np.mean(model.weights * a))
    return total / len(schedule)


def exhaustive_schedules(model: StarNetworkModel, horizon: int = 10, init_ages=None):
    """All ``N**horizon`` open-loop schedules; returns ``(best_value, best_schedules)``."""
    vals = {}
    for sched in itertools.product(range(model.n_terminals), repeat=horizon):
        vals[sched] = expected_schedule_age(model, sched, init_ages)
    best = min(vals.values())
    return best, [s for s, v in vals.items() if v <= best + 1e-12]
