"""SMART-lite: tabular rate adaptation driven by a broadcast age reward.

Every terminal keeps a Q-table over a quantized situation (own age estimate,
recent collision fraction, current update period) and picks its next update
period (``rri``) from a small action set.  A controller node turns the ages
it observes into per-terminal rewards once per epoch.

Training has two stages: :func:`pretrain` against a stylized single-learner
environment gives the common initial table, then the scenario kernels keep
updating per-terminal copies online.  The numba helpers at the bottom are the
same rules compiled for those kernels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .age import AgePenalty, AgeProcess, time_average_penalty

ACTIONS = (20, 50, 100, 200, 500)
AGE_EDGES = (10.0, 20.0, 30.0, 45.0, 60.0, 80.0, 120.0, 200.0, 400.0)
N_COLLISION_BINS = 8
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Situation:
    age_bin: int
    collision_bin: int
    rri_index: int


@dataclass
class RatePolicy:
    actions: tuple[int, ...] = ACTIONS
    age_edges: tuple[float, ...] = AGE_EDGES
    n_collision_bins: int = N_COLLISION_BINS
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon: float = 0.2
    epsilon_final: float = 0.02
    table: np.ndarray | None = None

    def __post_init__(self):
        self.actions = tuple(int(a) for a in self.actions)
        self.age_edges = tuple(float(e) for e in self.age_edges)
        if list(self.actions) != sorted(set(self.actions)):
            raise ValueError("actions must be strictly increasing")
        if not (0 <= self.epsilon <= 1 and 0 <= self.epsilon_final <= 1):
            raise ValueError("epsilon must lie in [0, 1]")
        if not (0 <= self.alpha <= 1 and 0 <= self.gamma < 1):
            raise ValueError("need alpha in [0, 1] and gamma in [0, 1)")
        if self.table is None:
            self.table = np.zeros((self.n_situations, len(self.actions)))
        self.table = np.asarray(self.table, dtype=float)
        if self.table.shape != (self.n_situations, len(self.actions)):
            raise ValueError(f"table shape {self.table.shape} does not match the situation grid")

    @property
    def n_age_bins(self) -> int:
        return len(self.age_edges) + 1

    @property
    def n_situations(self) -> int:
        return self.n_age_bins * self.n_collision_bins * len(self.actions)

    def situation(self, age_ms: float, collision_frac: float, rri_ms: int) -> Situation:
        if rri_ms not in self.actions:
            raise ValueError(f"rri {rri_ms} not in action set {self.actions}")
        if not 0.0 <= collision_frac <= 1.0:
            raise ValueError("collision fraction must lie in [0, 1]")
        return Situation(
            int(np.searchsorted(self.age_edges, age_ms, side="right")),
            min(int(collision_frac * self.n_collision_bins), self.n_collision_bins - 1),
            self.actions.index(rri_ms),
        )

    def index(self, s: Situation) -> int:
        if not (
            0 <= s.age_bin < self.n_age_bins
            and 0 <= s.collision_bin < self.n_collision_bins
            and 0 <= s.rri_index < len(self.actions)
        ):
            raise ValueError(f"situation {s} is off the quantization grid")
        return (s.age_bin * self.n_collision_bins + s.collision_bin) * len(self.actions) + s.rri_index

    def greedy(self, s: Situation) -> int:
        # argmax returns the first maximum: lowest rri wins ties
        return self.actions[int(np.argmax(self.table[self.index(s)]))]

    def copy(self) -> "RatePolicy":
        return RatePolicy(
            self.actions, self.age_edges, self.n_collision_bins, self.alpha, self.gamma,
            self.epsilon, self.epsilon_final, self.table.copy(),
        )


def act(policy: RatePolicy, s: Situation, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice of the next update period."""
    row = policy.index(s)
    if rng.random() < policy.epsilon:
        return policy.actions[int(rng.integers(len(policy.actions)))]
    return policy.actions[int(np.argmax(policy.table[row]))]


def online_update(policy: RatePolicy, transition) -> RatePolicy:
    """One-step Q-learning update of the visited cell; returns ``policy``."""
    s, a, reward, s2 = transition
    i, j = policy.index(s), policy.actions.index(a)
    target = reward + policy.gamma * policy.table[policy.index(s2)].max()
    policy.table[i, j] += policy.alpha * (target - policy.table[i, j])
    return policy


@dataclass
class RewardBroadcast:
    epoch_start: float
    epoch_end: float
    rewards: dict = field(default_factory=dict)

    @property
    def fleet_objective(self) -> float:
        """Mean epoch penalty across terminals (the negated mean reward)."""
        return -float(np.mean(list(self.rewards.values())))


def semi_supervisor_reward(procs, penalty: AgePenalty | None, epoch) -> RewardBroadcast:
    """Per-terminal reward: minus the epoch time-average penalty of its age at
    the controller.  ``epoch`` is ``(start, end)``; samples in [start, end) count.
    """
    penalty = penalty or AgePenalty.linear()
    start, end = epoch
    if end <= start:
        raise ValueError("empty epoch")
    out = {}
    for p in procs:
        win = [(t, a) for t, a in p.samples if start <= t < end]
        if not win:
            raise ValueError(f"terminal {p.source_id!r} has no samples in the epoch")
        sub = AgeProcess(p.source_id, samples=win)
        out[p.source_id] = -time_average_penalty(sub, penalty, end - win[0][0])
    if not out:
        raise ValueError("empty epoch")
    return RewardBroadcast(start, end, out)


def collision_rates_uniform(n_radios: int, actions=ACTIONS, n_starts: int = 2) -> np.ndarray:
    """Collision probability when ``n_radios`` pick resources uniformly at
    random from ``n_starts * rri`` slots, for every rri in ``actions``."""
    return np.array([1.0 - (1.0 - 1.0 / (n_starts * r)) ** (n_radios - 1) for r in actions])


def _mean_penalty_on(lo: float, hi: float, penalty: AgePenalty) -> float:
    # average of the penalty for age rising linearly from lo to hi
    if penalty.kind == "linear":
        return (lo + hi) / 2.0
    if penalty.kind == "quadratic":
        return (hi**3 - lo**3) / (3.0 * (hi - lo))
    b = penalty.bound
    return float(np.clip((hi - b) / (hi - lo), 0.0, 1.0))


@dataclass
class StylizedEnv:
    """One learner against a fixed background collision rate per action.

    Each epoch the learner's reservation is either clear or blocked (lost to a
    persistent collision).  A fresh selection at period ``R`` is blocked with
    probability ``collision_rates[R]``.  Keeping the same period keeps the
    reservation until the counter expires (mean ``mean_counter`` periods), so
    a blocked reservation stays blocked for the next epoch with probability
    ``persistence(R)``; changing the period forces a fresh selection.  The
    observed age is ``base_delay + R/2`` when clear plus ``epoch_ms/2`` when
    blocked; the reward is minus the epoch time-average of ``penalty``.
    ``epoch_ms=None`` drops the persistence (every epoch is a fresh draw).
    With ``selfish=True`` the reward is instead the learner's raw throughput,
    updates sent per second (``1000/R``) whether or not they get through.
    """

    collision_rates: np.ndarray
    base_delay_ms: float = 35.0
    epoch_ms: float | None = 200.0
    mean_counter: float = 10.0
    block_threshold: float = 0.5
    penalty: AgePenalty = field(default_factory=AgePenalty.quadratic)
    selfish: bool = False

    def persistence(self, rri_ms: float) -> float:
        if self.epoch_ms is None:
            return 0.0
        return max(0.0, 1.0 - self.epoch_ms / (self.mean_counter * rri_ms))

    def age(self, rri_ms: float, blocked: bool) -> float:
        """Epoch-mean age: a sawtooth on [d, d + R] when clear; a blocked
        epoch adds a linear climb of ``epoch_ms`` on top of the mean clear age."""
        extra = self._blackout(rri_ms) / 2.0
        return self.base_delay_ms + rri_ms / 2.0 + (extra if blocked else 0.0)

    def _blackout(self, rri_ms: float) -> float:
        return float(self.epoch_ms) if self.epoch_ms is not None else 2.0 * rri_ms

    def epoch_penalty(self, rri_ms: float, blocked: bool) -> float:
        """Time-average of ``self.penalty`` over the same epoch profile as :meth:`age`."""
        d = self.base_delay_ms
        if blocked:
            lo = d + rri_ms / 2.0
            hi = lo + self._blackout(rri_ms)
        else:
            lo, hi = d, d + rri_ms
        return _mean_penalty_on(lo, hi, self.penalty)

    def outcome(self, action_index: int, actions) -> tuple[float, float]:
        """Expected age and collision rate of a fresh selection at ``actions[action_index]``."""
        c = min(float(self.collision_rates[action_index]), 0.999)
        R = actions[action_index]
        return (1 - c) * self.age(R, False) + c * self.age(R, True), c

    def model(self, policy: "RatePolicy"):
        """Transition table over the policy's situation grid.

        Returns ``(nxt, prob, rew)``, each ``(n_situations, n_actions, 2)``:
        outcome 0 is clear, outcome 1 blocked.
        """
        nS, nA = policy.n_situations, len(policy.actions)
        nxt = np.zeros((nS, nA, 2), dtype=np.int64)
        prob = np.zeros((nS, nA, 2))
        rew = np.zeros((nS, nA, 2))
        nC = policy.n_collision_bins
        for si in range(nS):
            rri_idx = si % nA
            cb = (si // nA) % nC
            blocked_now = (cb + 0.5) / nC >= self.block_threshold
            for a in range(nA):
                R = policy.actions[a]
                c = min(float(self.collision_rates[a]), 0.999)
                if a == rri_idx:
                    rho = self.persistence(R)
                    # a kept reservation changes only when the counter runs out
                    p_block = rho + (1 - rho) * c if blocked_now else (1 - rho) * c
                else:
                    p_block = c
                for o, blk in enumerate((False, True)):
                    age = self.age(R, blk)
                    nxt[si, a, o] = policy.index(policy.situation(age, 1.0 if blk else 0.0, R))
                    prob[si, a, o] = p_block if blk else 1.0 - p_block
                    if self.selfish:
                        rew[si, a, o] = 1000.0 / R
                    else:
                        rew[si, a, o] = -self.epoch_penalty(R, blk)
        return nxt, prob, rew


@dataclass
class PretrainReport:
    converged: bool
    episodes: int
    max_td_recent: float


class PretrainNotConverged(RuntimeError):
    pass


def pretrain(
    policy: RatePolicy,
    env: StylizedEnv,
    episodes: int = 5000,
    rng: np.random.Generator | None = None,
    tol: float = 1e-4,
    window: int = 100,
    strict: bool = True,
) -> tuple[RatePolicy, PretrainReport]:
    """Q-learning with exploring starts against ``env``.

    One episode visits every (situation, action) pair once in a shuffled
    order and applies the expected update over the env's two outcomes.  Convergence means every temporal-difference step of the last
    ``window`` episodes moved its cell by less than ``tol``.  If that never
    happens within ``episodes`` a :class:`PretrainNotConverged` is raised
    (or, with ``strict=False``, returned in the report).
    """
    rng = rng or np.random.default_rng(0)
    nA = len(policy.actions)
    nxt, prob, rew = env.model(policy)
    recent = []
    order = np.arange(policy.n_situations * nA)
    for ep in range(1, episodes + 1):
        rng.shuffle(order)
        step = _pretrain_sweep(policy.table, order, nxt, prob, rew, policy.alpha, policy.gamma)
        recent.append(step)
        if len(recent) > window:
            recent.pop(0)
        if len(recent) == window and max(recent) < tol:
            return policy, PretrainReport(True, ep, max(recent))
    rep = PretrainReport(False, episodes, max(recent) if recent else float("inf"))
    if strict:
        raise PretrainNotConverged(f"no convergence after {episodes} episodes (last max step {rep.max_td_recent:.3g})")
    return policy, rep


@njit(cache=True)
def _pretrain_sweep(Q, order, nxt, prob, rew, alpha, gamma):
    # expected one-step update of every (situation, action) cell, in ``order``
    nA = Q.shape[1]
    biggest = 0.0
    for k in order:
        s = k // nA
        a = k % nA
        target = 0.0
        for o in range(nxt.shape[2]):
            s2 = nxt[s, a, o]
            best = Q[s2, 0]
            for b in range(1, nA):
                if Q[s2, b] > best:
                    best = Q[s2, b]
            target += prob[s, a, o] * (rew[s, a, o] + gamma * best)
        d = alpha * (target - Q[s, a])
        Q[s, a] += d
        if abs(d) > biggest:
            biggest = abs(d)
    return biggest


def save_checkpoint(path, policy: RatePolicy, tables: np.ndarray | None = None, meta: dict | None = None) -> None:
    """JSON checkpoint; ``tables`` optionally holds one table per terminal."""
    rec = {
        "version": CHECKPOINT_VERSION,
        "actions": list(policy.actions),
        "age_edges": list(policy.age_edges),
        "n_collision_bins": policy.n_collision_bins,
        "alpha": policy.alpha,
        "gamma": policy.gamma,
        "epsilon": policy.epsilon,
        "epsilon_final": policy.epsilon_final,
        "table": policy.table.tolist(),
        "tables": None if tables is None else np.asarray(tables).tolist(),
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(rec, fh)


def load_checkpoint(path) -> tuple[RatePolicy, np.ndarray | None, dict]:
    with open(path) as fh:
        rec = json.load(fh)
    if rec.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {rec.get('version')!r}")
    pol = RatePolicy(
        tuple(rec["actions"]), tuple(rec["age_edges"]), rec["n_collision_bins"], rec["alpha"],
        rec["gamma"], rec["epsilon"], rec["epsilon_final"], np.array(rec["table"]),
    )
    tables = None if rec.get("tables") is None else np.array(rec["tables"])
    return pol, tables, rec.get("meta", {})


# --- compiled helpers used inside the scenario kernels ---------------------


@njit(cache=True)
def situation_index(age, cfrac, rri_idx, edges, n_cbins, n_actions):
    ab = 0
    while ab < edges.shape[0] and age >= edges[ab]:
        ab += 1
    cb = int(cfrac * n_cbins)
    if cb >= n_cbins:
        cb = n_cbins - 1
    if cb < 0:
        cb = 0
    return (ab * n_cbins + cb) * n_actions + rri_idx


@njit(cache=True)
def eps_greedy(row, eps):
    n = row.shape[0]
    if eps > 0.0 and np.random.random() < eps:
        return np.random.randint(0, n)
    best = 0
    for a in range(1, n):
        if row[a] > row[best]:
            best = a
    return best


@njit(cache=True)
def td_update(Q, s, a, r, s2, alpha, gamma):
    best = Q[s2, 0]
    for b in range(1, Q.shape[1]):
        if Q[s2, b] > best:
            best = Q[s2, b]
    Q[s, a] += alpha * (r + gamma * best - Q[s, a])


def pretrained_policy(
    n_radios: int,
    selfish: bool = False,
    penalty: AgePenalty | None = None,
    seed: int = 0,
    **policy_kw,
) -> tuple[RatePolicy, PretrainReport]:
    """Common initial table for a scene with ``n_radios`` terminals: pretrain
    against uniform-pick background collision rates."""
    pol = RatePolicy(**policy_kw)
    env = StylizedEnv(
        collision_rates_uniform(n_radios, pol.actions),
        penalty=penalty or AgePenalty.quadratic(),
        selfish=selfish,
    )
    return pretrain(pol, env, rng=np.random.default_rng(seed))
