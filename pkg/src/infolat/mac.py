"""Sidelink Mode-4 semi-persistent scheduling (SPS).

Each radio reserves ``n_rep`` resources (subframe offset mod ``rri``,
sub-channel start) and reuses them every ``rri`` ms until its reselection
counter runs out.  Selection excludes resources other radios were heard
reserving above a power threshold, relaxing the threshold in 3 dB steps until
at least 20% of the candidates survive.

The exclusion/choice core (:func:`relax_mask_into`, :func:`choose_into`) is
compiled with numba and shared with the scenario
kernels in :mod:`infolat.platoon` and :mod:`infolat.intersection`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .phy import ResourceGrid

_MAX_RELAX = 256  # relaxation steps before giving up and taking everything
NEG_INF = -1e300


@dataclass(frozen=True)
class SpsConfig:
    c_min: int = 5
    c_max: int = 15
    keep_prob: float = 0.0
    sensing_window_ms: int = 1000
    # None means min(rri, 100); the default keeps mean access delay near 5 ms
    selection_window_ms: int | None = None
    exclusion_threshold_dbm: float = -110.0
    relax_step_db: float = 3.0
    min_candidate_fraction: float = 0.2

    def __post_init__(self):
        if not 0 <= self.c_min <= self.c_max:
            raise ValueError("need 0 <= c_min <= c_max")
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in [0, 1]")
        if not 0.0 < self.min_candidate_fraction <= 1.0:
            raise ValueError("min_candidate_fraction must lie in (0, 1]")
        if self.relax_step_db <= 0:
            raise ValueError("relax_step_db must be positive")

    def window(self, rri: int) -> int:
        w = min(rri, 100) if self.selection_window_ms is None else min(self.selection_window_ms, rri)
        return max(1, w)


@dataclass(frozen=True)
class Observation:
    """A reservation heard on the air: a packet at ``time`` repeating every ``rri``."""

    time: int
    subchannel: int
    power_dbm: float
    rri: int


@dataclass
class SpsState:
    rri_ms: int
    n_rep: int = 1
    resel_counter: int = 0
    selected: tuple[tuple[int, int], ...] = ()
    sensing_window: list[Observation] = field(default_factory=list)
    keep_prob: float = 0.0

    def opportunity(self, now: int) -> int | None:
        """Sub-channel start if ``now`` is a reserved subframe, else None."""
        r = now % self.rri_ms
        for off, sc in self.selected:
            if off == r:
                return sc
        return None


@dataclass
class Message:
    capture_time: float
    repetitions_remaining: int = 1
    size_bytes: int = 300
    payload: object = None
    enqueue_time: float | None = None

    def __post_init__(self):
        if self.repetitions_remaining < 1:
            raise ValueError("a message needs at least one transmission")
        self.repetitions = self.repetitions_remaining
        if self.enqueue_time is None:
            self.enqueue_time = self.capture_time

    @property
    def started(self) -> bool:
        return self.repetitions_remaining < self.repetitions


class Outbox:
    """Latest-sample-only queue.

    A new sample replaces the current one if it has not been transmitted yet;
    otherwise it waits (replacing any older waiting sample) until the current
    message has finished its repetitions.
    """

    def __init__(self):
        self.current: Message | None = None
        self.pending: Message | None = None

    def push(self, msg: Message) -> None:
        if self.current is None or not self.current.started:
            self.current = msg
        else:
            self.pending = msg

    def pop_copy(self) -> Message | None:
        msg = self.current
        if msg is None:
            return None
        msg.repetitions_remaining -= 1
        if msg.repetitions_remaining == 0:
            self.current, self.pending = self.pending, None
        return msg

    def __bool__(self):
        return self.current is not None


@njit(cache=True)
def relax_mask_into(busy_pow, W, thr, step, min_frac, n_rep, mask):
    """Candidate mask after threshold relaxation, written into ``mask[:W]``.

    ``busy_pow[tau, j]`` is the strongest reservation heard on candidate
    (subframe tau, start j), ``NEG_INF`` if none.  The threshold rises by
    ``step`` dB until enough candidates (and at least ``n_rep`` distinct
    subframes) survive.  Returns the final threshold.
    """
    S = busy_pow.shape[1]
    need = int(np.ceil(min_frac * W * S))
    want_rows = min(n_rep, W)
    top = NEG_INF
    for i in range(W):
        for j in range(S):
            if busy_pow[i, j] > top:
                top = busy_pow[i, j]
    # thresholds by repeated addition, exactly as a step-by-step loop would see them
    thrs = np.empty(_MAX_RELAX)
    n_thr = 0
    x = thr
    while n_thr < _MAX_RELAX:
        thrs[n_thr] = x
        n_thr += 1
        if x >= top:
            break
        x += step
    # admission step per cell, then per row; histogram both
    inv_step = 1.0 / step
    cell_hist = np.zeros(n_thr, dtype=np.int64)
    row_hist = np.zeros(n_thr, dtype=np.int64)
    for i in range(W):
        row_m = n_thr
        for j in range(S):
            bp = busy_pow[i, j]
            if bp <= thr:
                m = 0
            else:
                # direct estimate, then settle against the exact thresholds
                m = min(int(np.ceil((bp - thr) * inv_step)), n_thr)
                while m > 0 and bp <= thrs[m - 1]:
                    m -= 1
                while m < n_thr and bp > thrs[m]:
                    m += 1
            if m < n_thr:
                cell_hist[m] += 1
                if m < row_m:
                    row_m = m
        if row_m < n_thr:
            row_hist[row_m] += 1
    cells = 0
    rows = 0
    m_star = n_thr - 1
    for m in range(n_thr):
        cells += cell_hist[m]
        rows += row_hist[m]
        if cells >= need and rows >= want_rows:
            m_star = m
            break
    final = thrs[m_star]
    for i in range(W):
        for j in range(S):
            mask[i, j] = busy_pow[i, j] <= final
    return final


@njit(cache=True)
def choose_into(mask, W, n_rep, out):
    """Draw ``n_rep`` candidates in distinct subframes, uniformly at each step.

    Consumes ``mask[:W]`` and fills ``out`` with (subframe index, start
    index) rows sorted by subframe.  Uniform draws come from numba's global
    stream (seeded by the caller).
    """
    S = mask.shape[1]
    cand_i = np.empty(W * S, dtype=np.int64)
    cand_j = np.empty(W * S, dtype=np.int64)
    count = 0
    for i in range(W):
        for j in range(S):
            if mask[i, j]:
                cand_i[count] = i
                cand_j[count] = j
                count += 1
    used = np.zeros(W, dtype=np.bool_)
    left = count  # candidates in rows not yet used
    for c in range(n_rep):
        out[c, 0] = -1
        out[c, 1] = -1
        if left == 0:
            continue
        # uniform over the remaining candidates: redraw while the row is taken;
        # compact once rejections would dominate
        if left * 4 < count:
            k = 0
            for q in range(count):
                if not used[cand_i[q]]:
                    cand_i[k] = cand_i[q]
                    cand_j[k] = cand_j[q]
                    k += 1
            count = k
        while True:
            pick = min(int(np.random.random() * count), count - 1)
            if not used[cand_i[pick]]:
                break
        row = cand_i[pick]
        out[c, 0] = row
        out[c, 1] = cand_j[pick]
        used[row] = True
        for j in range(S):
            if mask[row, j]:
                left -= 1
                mask[row, j] = False
    # insertion sort by subframe; n_rep is tiny
    for a in range(1, n_rep):
        b = a
        while b > 0 and out[b - 1, 0] > out[b, 0]:
            t0, t1 = out[b - 1, 0], out[b - 1, 1]
            out[b - 1, 0], out[b - 1, 1] = out[b, 0], out[b, 1]
            out[b, 0], out[b, 1] = t0, t1
            b -= 1


@njit(cache=True)
def relax_mask(busy_pow, thr, step, min_frac, n_rep):
    mask = np.zeros(busy_pow.shape, dtype=np.bool_)
    thr = relax_mask_into(busy_pow, busy_pow.shape[0], thr, step, min_frac, n_rep, mask)
    return mask, thr


@njit(cache=True)
def choose_resources(mask, n_rep, seed):
    """Seeded wrapper around :func:`choose_into` returning an ``(n_rep, 2)`` array."""
    np.random.seed(seed)
    m = mask.copy()
    out = np.full((n_rep, 2), -1, dtype=np.int64)
    choose_into(m, m.shape[0], n_rep, out)
    return out


def busy_map(
    obs: list[Observation], now: int, window: int, grid: ResourceGrid, sensing_window_ms: int = 1000
) -> np.ndarray:
    """Project heard reservations onto the candidate window ``(now, now + window]``."""
    starts = grid.starts
    busy = np.full((window, len(starts)), NEG_INF)
    for o in obs:
        if o.time < now - sensing_window_ms or o.time > now:
            continue
        for tau in range(1, window + 1):
            if (now + tau - o.time) % o.rri:
                continue
            for j, s in enumerate(starts):
                if grid.overlaps(s, o.subchannel) and o.power_dbm > busy[tau - 1, j]:
                    busy[tau - 1, j] = o.power_dbm
    return busy


def candidate_set(state: SpsState, now: int, grid: ResourceGrid, cfg: SpsConfig, relax: bool = True):
    """Candidate (absolute subframe, start) pairs; unrelaxed if ``relax`` is False."""
    W = cfg.window(state.rri_ms)
    busy = busy_map(state.sensing_window, now, W, grid, cfg.sensing_window_ms)
    if relax:
        mask, _ = relax_mask(busy, cfg.exclusion_threshold_dbm, cfg.relax_step_db, cfg.min_candidate_fraction, state.n_rep)
    else:
        mask = busy <= cfg.exclusion_threshold_dbm
    return {(now + 1 + i, grid.starts[j]) for i, j in zip(*np.nonzero(mask))}, mask


def sps_select(
    state: SpsState,
    grid: ResourceGrid,
    rng: np.random.Generator,
    now: int = 0,
    cfg: SpsConfig | None = None,
) -> SpsState:
    """Sensing-based (re)selection of ``state.n_rep`` resources and a new counter."""
    cfg = cfg or SpsConfig()
    W = cfg.window(state.rri_ms)
    if state.n_rep > W:
        raise ValueError(f"{state.n_rep} repetitions do not fit a {W} ms selection window")
    _, mask = candidate_set(state, now, grid, cfg)
    picks = choose_resources(mask, state.n_rep, int(rng.integers(0, 2**31 - 1)))
    selected = tuple(((now + 1 + int(i)) % state.rri_ms, grid.starts[int(j)]) for i, j in picks)
    counter = int(rng.integers(cfg.c_min, cfg.c_max + 1))
    return replace(state, selected=selected, resel_counter=counter, keep_prob=cfg.keep_prob)


def sps_tick(state: SpsState, now: int, outbox: Outbox):
    """Emit ``(subchannel, Message)`` when ``now`` is a reserved subframe with data."""
    sc = state.opportunity(now)
    if sc is None or not outbox:
        return None
    return sc, outbox.pop_copy()


@dataclass
class MacEvent:
    time_ms: int
    radio_id: int
    event: str
    offset: int
    subchannel: int
    rri_ms: int


class Radio:
    """Single SPS radio driven one subframe at a time (reference behaviour).

    The counter is decremented once per reservation period, at the first
    reserved offset; on reaching zero the radio keeps its resources with
    ``keep_prob`` or reselects.
    """

    def __init__(self, radio_id, rri_ms, grid=None, cfg=None, rng=None, n_rep=1):
        self.id = radio_id
        self.grid = grid or ResourceGrid()
        self.cfg = cfg or SpsConfig()
        self.rng = rng or np.random.default_rng(0)
        self.state = SpsState(rri_ms=rri_ms, n_rep=n_rep)
        self.outbox = Outbox()
        self.trace: list[MacEvent] = []
        self.deliveries: list[tuple[float, float]] = []
        self._select(0, "select")

    def _select(self, now, kind):
        self.state = sps_select(self.state, self.grid, self.rng, now, self.cfg)
        for off, sc in self.state.selected:
            self.trace.append(MacEvent(now, self.id, kind, off, sc, self.state.rri_ms))

    def set_rri(self, rri_ms, now):
        if rri_ms != self.state.rri_ms:
            self.state = replace(self.state, rri_ms=rri_ms)
            self._select(now, "resel")

    def tick(self, now):
        res = sps_tick(self.state, now, self.outbox)
        first = self.state.selected[0][0]
        if now % self.state.rri_ms == first:
            self.state.resel_counter -= 1
        if res is not None:
            sc, msg = res
            self.trace.append(MacEvent(now, self.id, "tx", now % self.state.rri_ms, sc, self.state.rri_ms))
        if self.state.resel_counter <= 0 and now % self.state.rri_ms == self.state.selected[-1][0]:
            if self.rng.random() < self.state.keep_prob:
                self.state.resel_counter = int(self.rng.integers(self.cfg.c_min, self.cfg.c_max + 1))
            else:
                self._select(now, "resel")
        return res


def mean_access_delay(trace) -> float:
    """Mean of (delivery time - enqueue time) over delivered messages.

    ``trace`` is an iterable of ``(enqueue_time, delivery_time)`` pairs.
    """
    pairs = list(trace)
    if not pairs:
        raise ValueError("no deliveries in trace")
    return float(np.mean([d - e for e, d in pairs]))


def write_mac_trace(events, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ms", "radio_id", "event", "offset", "subchannel", "rri_ms"])
        for e in events:
            w.writerow([e.time_ms, e.radio_id, e.event, e.offset, e.subchannel, e.rri_ms])
