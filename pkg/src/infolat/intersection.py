"""Four-way intersection with FCFS space-time reservations at an RSU.

Four single-lane approaches (northbound, southbound, eastbound, westbound)
go straight through a square box split into ``cell_m`` cells.  Human-driven
vehicles (HVs) obey a two-phase traffic light.  Autonomous vehicles (AVs) ask
the roadside unit (RSU) for a crossing plan over the sidelink and enter the
box only on a confirmed plan; with ``mode='lights'`` every vehicle behaves
like an HV, which gives the normalization baseline.

Motion outside the box is car following (IDM).  A vehicle that commits to
crossing switches to a deterministic *plan*: from ``(t0, x0, v0)`` it
accelerates at ``accel`` up to ``v_free`` and cruises, so every in-box
trajectory is known exactly.  The RSU books the cells a plan sweeps (front
entering to rear leaving, widened to whole 100 ms slots) and confirms a
request iff none of them is taken and none falls under the HV-priority mask.

HV priority is a mask, not a booking: while an HV is on approach ``a``, the
cells where ``a``'s path crosses the perpendicular paths are closed to AVs
during every light window of ``a``'s axis from the HV's earliest possible
arrival until it leaves.  HVs are detected when they enter the 200 m
approach, which is further ahead than any AV booking reaches, so a mask
never lands on an existing booking.

Run loop: :func:`_intersection_kernel`, 1 ms network ticks and 10 ms
dynamics ticks, phase order as in :mod:`infolat.platoon`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .age import AgePenalty
from .mac import SpsConfig
from .phy import ResourceGrid
from .platoon import PENALTY_CODES, _age_step, _penalty_sum, _reselect
from .smart import RatePolicy, eps_greedy, situation_index, td_update

NB, SB, EB, WB = range(4)
APPROACHES = ("NB", "SB", "EB", "WB")
INT_MODES = {"lights": 0, "ideal": 1, "mode4": 2}
CONFIRMED, REJECTED = "Confirmed", "Rejected"


@dataclass
class IntersectionConfig:
    extent_m: float = 40.0
    cell_m: float = 4.0
    quantum_ms: int = 100
    approach_m: float = 200.0
    n_vehicles: int = 520
    hv_fraction: float = 0.10
    arrival_rate: float = 0.4  # vehicles per second over all four approaches
    v_free: float = 10.0
    accel: float = 2.0
    decel: float = 3.0
    idm_headway_s: float = 1.2
    min_gap: float = 2.0
    plan_headway_s: float = 0.8
    vehicle_length: float = 4.0
    green_ms: int = 30_000
    all_red_ms: int = 3_000
    hv_reaction_ms: int = 1_000
    request_distance_m: float = 100.0
    rest_lead_ms: int = 1_000
    backoff_ms: int = 200
    backoff_jitter_ms: int = 100
    yield_decel: float = 1.5  # eased braking after a rejected request
    horizon_ms: int = 15_000
    deadline_ms: int = 600_000
    dynamics_tick_ms: int = 10

    def __post_init__(self):
        n = self.extent_m / self.cell_m
        if abs(n - round(n)) > 1e-9 or round(n) < 2 or round(n) % 2:
            raise ValueError("extent must split into an even number of cells")
        if not 0.0 <= self.hv_fraction <= 1.0:
            raise ValueError("hv_fraction must lie in [0, 1]")
        if self.arrival_rate <= 0 or self.n_vehicles < 1:
            raise ValueError("need a positive arrival rate and at least one vehicle")
        if self.quantum_ms % self.dynamics_tick_ms:
            raise ValueError("the time quantum must be a multiple of the dynamics tick")
        if self.horizon_ms >= 1000 * self.approach_m / self.v_free:
            raise ValueError("booking horizon must be shorter than the approach travel time")
        if self.green_ms <= 0 or self.all_red_ms < 0:
            raise ValueError("bad light cycle")

    @property
    def n_cells(self) -> int:
        return int(round(self.extent_m / self.cell_m))

    @property
    def free_flow_ms(self) -> float:
        return 1000.0 * (self.approach_m + self.extent_m + self.vehicle_length) / self.v_free


@dataclass
class IntComm:
    """Radio side of the intersection: ``policy`` is ``fixed`` (AVs use
    ``rri_ms`` with ``repetitions`` copies) or ``smart`` (learned rri)."""

    mode: str = "mode4"
    policy: str = "fixed"
    rri_ms: int = 100
    repetitions: int = 1
    rsu_rri_ms: int = 20
    rx_power_dbm: float = -80.0  # every radio hears every other one at this level
    sps: SpsConfig = field(default_factory=SpsConfig)
    grid: ResourceGrid = field(default_factory=ResourceGrid)
    epoch_ms: int = 200
    reward_penalty: AgePenalty = field(default_factory=AgePenalty.quadratic)
    online: bool = False
    epsilon: float = 0.0
    epsilon_final: float = 0.0

    def __post_init__(self):
        if self.mode not in INT_MODES:
            raise ValueError(f"unknown intersection mode {self.mode!r}")
        if self.policy not in ("fixed", "smart"):
            raise ValueError(f"unknown update policy {self.policy!r}")
        if self.repetitions < 1 or self.rri_ms < 2 or self.rsu_rri_ms < 2:
            raise ValueError("need repetitions >= 1 and rri >= 2 ms")


# --- geometry, light and plan kinematics ----------------------------------


def path_cells(cfg: IntersectionConfig) -> np.ndarray:
    """``(4, n)`` cell ids (row * n + col) along each approach's path, in driving order."""
    n = cfg.n_cells
    h = n // 2
    seq = np.arange(n)
    return np.array([
        seq * n + h,                  # NB: column h, rows upward
        (n - 1 - seq) * n + (h - 1),  # SB: column h-1, rows downward
        (h - 1) * n + seq,            # EB: row h-1, columns eastward
        h * n + (n - 1 - seq),        # WB: row h, columns westward
    ], dtype=np.int64)


def crossing_owner(cfg: IntersectionConfig) -> np.ndarray:
    """``(4, n)``: for each path cell, the perpendicular approach sharing it (or -1)."""
    pc = path_cells(cfg)
    out = np.full(pc.shape, -1, dtype=np.int64)
    for a in range(4):
        for i, c in enumerate(pc[a]):
            for b in range(4):
                if axis_of(b) != axis_of(a) and c in pc[b]:
                    out[a, i] = b
    return out


def axis_of(approach: int) -> int:
    return 0 if approach in (NB, SB) else 1


@njit(cache=True)
def _light(t, axis, G, AR):
    # (green now, ms left in this green, ms into this green, inside this axis' mask window)
    cyc = 2 * (G + AR)
    ph = t % cyc
    start = 0 if axis == 0 else G + AR
    rel = ph - start
    if rel < 0:
        rel += cyc
    green = rel < G
    return green, G - rel, rel, rel < G + AR


def light_state(t_ms: int, approach: int, cfg: IntersectionConfig) -> tuple[bool, int]:
    """(green?, ms of green left) for ``approach`` at ``t_ms``."""
    g, left, _, _ = _light(int(t_ms), axis_of(approach), cfg.green_ms, cfg.all_red_ms)
    return bool(g), int(left) if g else 0


@njit(cache=True)
def _px(t, pt, px, pv, vf, acc):
    # front position on a plan (t in s): accelerate from pv at acc up to vf, then cruise
    if t <= pt:
        return px + pv * (t - pt)
    tau = t - pt
    t1 = (vf - pv) / acc
    if tau <= t1:
        return px + pv * tau + 0.5 * acc * tau * tau
    return px + pv * t1 + 0.5 * acc * t1 * t1 + vf * (tau - t1)


@njit(cache=True)
def _pv(t, pt, px, pv, vf, acc):
    if t <= pt:
        return pv
    tau = t - pt
    t1 = (vf - pv) / acc
    if tau <= t1:
        return pv + acc * tau
    return vf


@njit(cache=True)
def _pt_at(X, pt, px, pv, vf, acc):
    # time the plan's front reaches position X
    d = X - px
    if d <= 0.0:
        return pt + d / pv if pv > 0.0 else pt
    t1 = (vf - pv) / acc
    d1 = pv * t1 + 0.5 * acc * t1 * t1
    if d <= d1:
        return pt + (-pv + math.sqrt(pv * pv + 2.0 * acc * d)) / acc
    return pt + t1 + (d - d1) / vf


@dataclass(frozen=True)
class Plan:
    """Deterministic crossing motion: from ``(t0_s, x0_m, v0)`` accelerate to
    ``v_free`` and cruise.  Positions are front bumper, 0 at the stop line."""

    t0_s: float
    x0_m: float
    v0: float

    def position(self, t_s: float, cfg: IntersectionConfig) -> float:
        return _px(t_s, self.t0_s, self.x0_m, self.v0, cfg.v_free, cfg.accel)

    def time_at(self, x_m: float, cfg: IntersectionConfig) -> float:
        return _pt_at(x_m, self.t0_s, self.x0_m, self.v0, cfg.v_free, cfg.accel)


def cell_intervals(plan: Plan, cfg: IntersectionConfig) -> list[tuple[float, float]]:
    """Per path cell: (front enters, rear leaves) in seconds."""
    w, L = cfg.cell_m, cfg.vehicle_length
    return [(plan.time_at(i * w, cfg), plan.time_at((i + 1) * w + L, cfg)) for i in range(cfg.n_cells)]


def cell_slots(plan: Plan, cfg: IntersectionConfig) -> list[tuple[int, int]]:
    """Per path cell: inclusive range of ``quantum_ms`` slots the plan holds."""
    q = cfg.quantum_ms / 1000.0
    return [(math.floor(a / q + 1e-9), math.floor(b / q - 1e-9)) for a, b in cell_intervals(plan, cfg)]


# --- reference reservation manager (the kernel has a compiled copy) --------


@dataclass
class Reservation:
    vehicle_id: int
    trajectory: list[tuple[int, tuple[int, int]]]  # (cell, inclusive slot range) in path order
    status: str


@dataclass
class IntersectionGrid:
    cfg: IntersectionConfig = field(default_factory=IntersectionConfig)
    occupancy: dict = field(default_factory=dict)  # (cell, slot) -> vehicle id
    hv_mask: set = field(default_factory=set)  # (cell, slot) closed to AVs

    def free(self, cell: int, slot: int) -> bool:
        return (cell, slot) not in self.occupancy and (cell, slot) not in self.hv_mask


def trajectory_for(approach: int, plan: Plan, cfg: IntersectionConfig):
    pc = path_cells(cfg)[approach]
    return [(int(c), s) for c, s in zip(pc, cell_slots(plan, cfg))]


def validate_trajectory(trajectory, cfg: IntersectionConfig) -> None:
    n = cfg.n_cells
    for (c0, (a0, b0)), (c1, (a1, b1)) in zip(trajectory, trajectory[1:]):
        r0, k0 = divmod(c0, n)
        r1, k1 = divmod(c1, n)
        if abs(r0 - r1) + abs(k0 - k1) != 1:
            raise ValueError(f"cells {c0} and {c1} are not adjacent")
        if a1 < a0 or b1 < b0:
            raise ValueError("slot intervals must not go backwards along the path")
    for _, (a, b) in trajectory:
        if b < a:
            raise ValueError("empty slot interval")


def request_reservation(grid: IntersectionGrid, vehicle_id: int, trajectory, now_slot: int) -> Reservation:
    """FCFS: confirm iff every requested (cell, slot) is free and unmasked."""
    validate_trajectory(trajectory, grid.cfg)
    ok = trajectory and trajectory[0][1][0] >= now_slot and all(
        grid.free(c, s) for c, (a, b) in trajectory for s in range(a, b + 1)
    )
    if not ok:
        return Reservation(vehicle_id, list(trajectory), REJECTED)
    for c, (a, b) in trajectory:
        for s in range(a, b + 1):
            grid.occupancy[(c, s)] = vehicle_id
    return Reservation(vehicle_id, list(trajectory), CONFIRMED)


def light_trip_time(arrival_ms: int, approach: int, cfg: IntersectionConfig) -> float:
    """Trip time of a lone vehicle under the lights: free flow, or stop at the
    line and wait for the next green (plus reaction) when it would not clear in time."""
    arrive_line = arrival_ms + 1000.0 * cfg.approach_m / cfg.v_free
    cross = 1000.0 * (cfg.extent_m + cfg.vehicle_length) / cfg.v_free
    ax = axis_of(approach)
    g, left, _, _ = _light(int(math.floor(arrive_line)), ax, cfg.green_ms, cfg.all_red_ms)
    if g and cross <= left + cfg.all_red_ms - 500:
        return cfg.free_flow_ms
    # next green onset of this axis
    cyc = 2 * (cfg.green_ms + cfg.all_red_ms)
    start = 0 if ax == 0 else cfg.green_ms + cfg.all_red_ms
    t = math.floor(arrive_line)
    k = math.ceil((t - start) / cyc)
    onset = start + k * cyc
    if onset < t:
        onset += cyc
    go = onset + cfg.hv_reaction_ms
    p = Plan(go / 1000.0, 0.0, 0.0)
    return 1000.0 * p.time_at(cfg.extent_m + cfg.vehicle_length, cfg) - arrival_ms


def sample_arrivals(cfg: IntersectionConfig, rng: np.random.Generator):
    """Poisson arrivals split evenly over the approaches; returns (ms, approach, is_hv)."""
    gaps = rng.exponential(1000.0 / cfg.arrival_rate, cfg.n_vehicles)
    t = np.floor(np.cumsum(gaps)).astype(np.int64)
    app = rng.integers(0, 4, cfg.n_vehicles)
    hv = rng.random(cfg.n_vehicles) < cfg.hv_fraction
    return t, app.astype(np.int64), hv


# --- the run kernel ---------------------------------------------------------

RING = 1024
EV_CAP = 64
SLOT_RING = 1024
N_STATS = 20
(I_SPAWNED, I_EXITED, I_CONFIRM, I_REJECT, I_WASTED, I_CELL_CONFLICT, I_CRASH, I_LINK_TX, I_LINK_OK,
 I_COLLIDED, I_HALF_DUPLEX, I_REQUESTS, I_STATUS_AGE, I_AGE_SAMPLES, I_RRI_SUM, I_RRI_N, I_RESEL,
 I_EV_OVERFLOW, I_UNSOUND, I_MASK_REJECT) = range(N_STATS)


@njit(cache=True)
def _feasible(t0, fpt, fpx, fpv, lpt, lpx, lpv, x_end, vf, acc, L, s0, hw):
    # follower plan keeps gap >= s0 + hw * v behind the leader plan until it clears x_end
    t_end = _pt_at(x_end, fpt, fpx, fpv, vf, acc)
    t = t0
    while t <= t_end + 1e-9:
        xf = _px(t, fpt, fpx, fpv, vf, acc)
        xl = _px(t, lpt, lpx, lpv, vf, acc)
        if xl - xf - L < s0 + hw * _pv(t, fpt, fpx, fpv, vf, acc) - 1e-9:
            return False
        t += 0.05
    return True


@njit(cache=True)
def _slots(i, pt, px, pv, w, L, q, vf, acc):
    a = _pt_at(i * w, pt, px, pv, vf, acc)
    b = _pt_at((i + 1) * w + L, pt, px, pv, vf, acc)
    return int(math.floor(a / q + 1e-9)), int(math.floor(b / q - 1e-9))


@njit(cache=True)
def _release(v, ap, pt, px, pv, pcells, occ_v, occ_s, w, L, q, vf, acc, now_slot):
    # drop the future part of v's booking; returns True if any of it was still ahead
    freed = False
    for i in range(pcells.shape[1]):
        c = pcells[ap, i]
        s0, s1 = _slots(i, pt, px, pv, w, L, q, vf, acc)
        for s in range(max(s0, now_slot + 1), s1 + 1):
            k = s % SLOT_RING
            if occ_s[c, k] == s and occ_v[c, k] == v + 1:
                occ_v[c, k] = 0
                freed = True
    return freed


@njit(cache=True)
def _request(v, ap, pt, px, pv, now_ms, pcells, owner, occ_v, occ_s, hv_count, hv_first, w, L, q_ms, vf, acc,
             horizon_ms, G, AR):
    # FCFS check of one plan against bookings and the HV mask: 1 confirm, 2 reject, 3 masked
    q = q_ms / 1000.0
    n = pcells.shape[1]
    now_slot = now_ms // q_ms
    s_first, _ = _slots(0, pt, px, pv, w, L, q, vf, acc)
    if s_first < now_slot:
        return 2
    _, s_last = _slots(n - 1, pt, px, pv, w, L, q, vf, acc)
    if (s_last + 1) * q_ms > now_ms + horizon_ms:
        return 2
    for i in range(n):
        c = pcells[ap, i]
        s0, s1 = _slots(i, pt, px, pv, w, L, q, vf, acc)
        b = owner[ap, i]
        for s in range(s0, s1 + 1):
            k = s % SLOT_RING
            if occ_s[c, k] == s and occ_v[c, k] != 0 and occ_v[c, k] != v + 1:
                return 2
            if b >= 0 and hv_count[b] > 0:
                ts = s * q_ms
                if hv_first[b] <= ts + q_ms:
                    ax = 0 if b < 2 else 1
                    _, _, _, win0 = _light(ts, ax, G, AR)
                    _, _, _, win1 = _light(ts + q_ms - 1, ax, G, AR)
                    if win0 or win1:
                        return 3
    for i in range(n):
        c = pcells[ap, i]
        s0, s1 = _slots(i, pt, px, pv, w, L, q, vf, acc)
        for s in range(s0, s1 + 1):
            k = s % SLOT_RING
            occ_v[c, k] = v + 1
            occ_s[c, k] = s
    return 1


@njit(cache=True)
def _idm(v, gap, dv, vf, A, B, T, s0):
    s_star = s0 + max(0.0, v * T + v * dv / (2.0 * math.sqrt(A * B)))
    if gap < 0.01:
        gap = 0.01
    return A * (1.0 - (v / vf) ** 4 - (s_star / gap) ** 2)


@njit(cache=True, nogil=True)
def _intersection_kernel(
    arr_ms, app, is_hv, lane_list, lane_n, seed, mode, smart,
    rri_av, k_av, rsu_rri, pm, c_min, c_max, keep_prob, win, max_w, starts, span, excl_thr, relax_step, min_frac,
    pcells, owner, w, box_len, L, vf, A, B, idm_T, s0, hw, hv_react, req_dist, rest_lead, backoff, jitter, yield_decel,
    horizon, G, AR, q_ms, dyn_tick, approach_m, t_max,
    Q, actions, edges, n_cbins, epoch_ms, online, eps0, eps1, alpha, gamma, pcode, pbound,
):
    np.random.seed(seed)
    n = arr_ms.shape[0]
    R = n + 1
    RSU = n
    stats = np.zeros(N_STATS)
    dt = dyn_tick / 1000.0
    # vehicles
    status = np.zeros(n, dtype=np.int64)  # 0 waiting to enter, 1 on approach, 2 committed, 3 done
    x = np.zeros(n)
    v = np.zeros(n)
    pt = np.zeros(n)
    px = np.zeros(n)
    pv = np.zeros(n)
    commit_ms = np.zeros(n, dtype=np.int64)
    spawn_ms = np.full(n, -1, dtype=np.int64)
    exit_ms = np.full(n, -1, dtype=np.int64)
    leader = np.full(n, -1, dtype=np.int64)
    for a in range(4):
        for j in range(1, lane_n[a]):
            leader[lane_list[a, j]] = lane_list[a, j - 1]
    sp = np.zeros(4, dtype=np.int64)  # next vehicle to enter per approach
    head = np.zeros(4, dtype=np.int64)  # first vehicle not yet done per approach
    # requests (AV side) and bookings (RSU side)
    req_state = np.zeros(n, dtype=np.int64)  # 0 none, 1 cruising on plan, 2 waiting at rest
    req_id = np.full(n, -1, dtype=np.int64)
    rq_t = np.zeros(n)
    rq_x = np.zeros(n)
    rq_v = np.zeros(n)
    backoff_until = np.zeros(n, dtype=np.int64)
    slowing = np.zeros(n, dtype=np.bool_)
    dec_id = np.full(n, -1, dtype=np.int64)
    dec_val = np.zeros(n, dtype=np.int64)
    dec_ms = np.zeros(n, dtype=np.int64)
    bk_id = np.full(n, -1, dtype=np.int64)
    bk_t = np.zeros(n)
    bk_x = np.zeros(n)
    bk_v = np.zeros(n)
    used = np.zeros(n, dtype=np.bool_)
    n_cell = pcells.shape[1]
    n_grid = n_cell * n_cell
    occ_v = np.zeros((n_grid, SLOT_RING), dtype=np.int64)
    occ_s = np.full((n_grid, SLOT_RING), -1, dtype=np.int64)
    tick_owner = np.full(n_grid, -1, dtype=np.int64)
    tick_stamp = np.full(n_grid, -1, dtype=np.int64)
    hv_count = np.zeros(4, dtype=np.int64)
    hv_first = np.zeros(4, dtype=np.int64)
    # MAC
    rri = np.full(R, rri_av, dtype=np.int64)
    rri[RSU] = rsu_rri
    nrep = np.full(R, k_av, dtype=np.int64)
    nrep[RSU] = 1
    rri_next = rri.copy()
    KMAX = max(k_av, 1)
    delays = np.zeros((R, KMAX), dtype=np.int64)
    scs = np.zeros((R, KMAX), dtype=np.int64)
    phase = np.zeros((R, KMAX), dtype=np.int64)
    resel_time = np.zeros(R, dtype=np.int64)
    has_res = np.zeros(R, dtype=np.bool_)
    counter = np.zeros(R, dtype=np.int64)
    max_rri = max(rri_av, rsu_rri)
    for i in range(actions.shape[0]):
        max_rri = max(max_rri, actions[i])
    sc_busy = np.zeros((max_w, starts.shape[0]))
    sc_mask = np.zeros((max_w, starts.shape[0]), dtype=np.bool_)
    sc_picks = np.zeros((KMAX, 2), dtype=np.int64)
    sc_own = np.zeros(max_rri, dtype=np.bool_)
    ring_r = np.zeros((RING, EV_CAP), dtype=np.int64)
    ring_k = np.zeros((RING, EV_CAP), dtype=np.int64)
    ring_n = np.zeros(RING, dtype=np.int64)
    msg_gen = np.full(R, -1, dtype=np.int64)
    msg_req = np.full(R, -1, dtype=np.int64)
    msg_t = np.zeros(R)
    msg_x = np.zeros(R)
    msg_v = np.zeros(R)
    msg_reward = False
    tx_list = np.zeros(R, dtype=np.int64)
    tx_sc = np.zeros(R, dtype=np.int64)
    tx_gen = np.zeros(R, dtype=np.int64)
    is_tx = np.zeros(R, dtype=np.bool_)
    rx_gen = np.full(R, -1, dtype=np.int64)  # newest message from each AV seen at the RSU
    rsu_rx_gen = np.full(n, -1, dtype=np.int64)  # newest RSU message seen at each AV
    # status age at the RSU, plus the learners' epoch bookkeeping
    view_t = np.zeros(n, dtype=np.int64)
    view_last = np.zeros(n, dtype=np.int64)
    st_acc = np.zeros(n)
    st_peak = np.zeros(n)
    st_pen = np.zeros(n)
    ep_pen = np.zeros(n)
    ep_acc = np.zeros(n)
    ep_sent = np.zeros(n)
    ep_rx = np.zeros(n)
    ep_from = np.zeros(n, dtype=np.int64)
    bc_valid = np.zeros(n, dtype=np.bool_)
    bc_rw = np.zeros(n)
    bc_age = np.zeros(n)
    bc_cf = np.zeros(n)
    prev_s = np.full(n, -1, dtype=np.int64)
    prev_a = np.zeros(n, dtype=np.int64)
    nA = actions.shape[0]
    bc_pending = False
    x_exit = box_len + L
    q = q_ms / 1000.0
    b = -1
    next_dyn = 0
    next_epoch = epoch_ms
    n_done = 0
    if mode == 2:
        bk = np.random.randint(0, rsu_rri)
        ring_r[bk, 0] = RSU
        ring_k[bk, 0] = -1
        ring_n[bk] = 1
    t = 0
    while t < t_max and n_done < n:
        ts = t / 1000.0
        b += 1
        if b == RING:
            b = 0
        dyn = t == next_dyn
        if dyn:
            next_dyn += dyn_tick
            # ---- entries
            for a in range(4):
                while sp[a] < lane_n[a]:
                    u = lane_list[a, sp[a]]
                    if arr_ms[u] > t:
                        break
                    l = leader[u]
                    if l >= 0 and status[l] < 3 and x[l] - L + approach_m < s0 + vf * idm_T:
                        break
                    status[u] = 1
                    x[u] = -approach_m
                    v[u] = vf
                    spawn_ms[u] = t
                    stats[I_SPAWNED] += 1
                    view_t[u] = t
                    view_last[u] = t
                    ep_from[u] = t
                    if is_hv[u]:
                        if hv_count[a] == 0:
                            hv_first[a] = t + int(1000.0 * approach_m / vf)
                        hv_count[a] += 1
                    elif mode == 2:
                        bk = b + 1 + np.random.randint(0, rri[u])
                        while bk >= RING:
                            bk -= RING
                        nn = ring_n[bk]
                        if nn < EV_CAP:
                            ring_r[bk, nn] = u
                            ring_k[bk, nn] = -1
                            ring_n[bk] = nn + 1
                        else:
                            stats[I_EV_OVERFLOW] += 1
                    sp[a] += 1
        # ---- learners: epoch rewards computed at the RSU
        if smart and mode == 2 and t == next_epoch:
            next_epoch += epoch_ms
            for u in range(n):
                if status[u] == 0 or status[u] == 3 or is_hv[u]:
                    continue
                span_ms = t - ep_from[u]
                if span_ms <= 0:
                    continue
                st_pen[u] += _penalty_sum(view_last[u] - view_t[u], t - view_last[u], pcode, pbound)
                view_last[u], st_acc[u], st_peak[u] = _age_step(t, view_last[u], view_t[u], st_acc[u], st_peak[u])
                bc_age[u] = (st_acc[u] - ep_acc[u]) / span_ms
                bc_rw[u] = -(st_pen[u] - ep_pen[u]) / span_ms
                bc_cf[u] = 1.0 - ep_rx[u] / ep_sent[u] if ep_sent[u] > 0 else 0.0
                ep_acc[u] = st_acc[u]
                ep_pen[u] = st_pen[u]
                ep_rx[u] = 0.0
                ep_sent[u] = 0.0
                ep_from[u] = t
                bc_valid[u] = True
            bc_pending = True
        # ---- MAC
        ntx = 0
        if mode == 2:
            nb = ring_n[b]
            for e in range(nb):
                r = ring_r[b, e]
                kind = ring_k[b, e]
                if r != RSU and status[r] == 3:
                    continue  # gone: its reservation lapses with it
                if kind >= 0:
                    tx_list[ntx] = r
                    tx_sc[ntx] = scs[r, kind]
                    tx_gen[ntx] = msg_gen[r]
                    ntx += 1
                    continue
                counter[r] -= 1
                if rri_next[r] != rri[r] or not has_res[r]:
                    rri[r] = rri_next[r]
                    counter[r] = _reselect(r, t, rri, nrep, delays, scs, phase, resel_time, has_res, pm, win,
                                           starts, span, excl_thr, relax_step, min_frac, c_min, c_max,
                                           sc_busy, sc_mask, sc_picks, sc_own)
                    stats[I_RESEL] += 1
                elif counter[r] <= 0:
                    if np.random.random() < keep_prob:
                        counter[r] = np.random.randint(c_min, c_max + 1)
                    else:
                        counter[r] = _reselect(r, t, rri, nrep, delays, scs, phase, resel_time, has_res, pm, win,
                                               starts, span, excl_thr, relax_step, min_frac, c_min, c_max,
                                               sc_busy, sc_mask, sc_picks, sc_own)
                        stats[I_RESEL] += 1
                msg_gen[r] = t
                if r == RSU:
                    msg_reward = bc_pending
                    bc_pending = False
                else:
                    stats[I_RRI_SUM] += rri[r]
                    stats[I_RRI_N] += 1
                    ep_sent[r] += 1
                    # a fresh status sample, plus a crossing request when eligible
                    if req_state[r] == 0 and status[r] == 1 and t >= backoff_until[r] and -x[r] <= req_dist:
                        _try_request(r, t, x, v, status, leader, req_state, req_id, rq_t, rq_x, rq_v, pt, px, pv,
                                     vf, A, B, L, s0, hw, x_exit, rest_lead, slowing)
                    if req_state[r] > 0:
                        msg_req[r] = req_id[r]
                        msg_t[r] = rq_t[r]
                        msg_x[r] = rq_x[r]
                        msg_v[r] = rq_v[r]
                        stats[I_REQUESTS] += 1
                    else:
                        msg_req[r] = -1
                for j in range(nrep[r]):
                    bk = b + delays[r, j]
                    if bk >= RING:
                        bk -= RING
                    nn = ring_n[bk]
                    if nn < EV_CAP:
                        ring_r[bk, nn] = r
                        ring_k[bk, nn] = j
                        ring_n[bk] = nn + 1
                    else:
                        stats[I_EV_OVERFLOW] += 1
                bk = b + rri[r]
                if bk >= RING:
                    bk -= RING
                nn = ring_n[bk]
                if nn < EV_CAP:
                    ring_r[bk, nn] = r
                    ring_k[bk, nn] = -1
                    ring_n[bk] = nn + 1
                else:
                    stats[I_EV_OVERFLOW] += 1
            ring_n[b] = 0
        # ---- channel + delivery
        if ntx > 0:
            for qq in range(ntx):
                is_tx[tx_list[qq]] = True
            for qq in range(ntx):
                s = tx_list[qq]
                collided = False
                for q2 in range(ntx):
                    if q2 != qq and tx_list[q2] != s and abs(tx_sc[q2] - tx_sc[qq]) < span:
                        collided = True
                        break
                g = tx_gen[qq]
                if s != RSU:
                    stats[I_LINK_TX] += 1
                    if collided:
                        stats[I_COLLIDED] += 1
                        continue
                    if is_tx[RSU]:
                        stats[I_HALF_DUPLEX] += 1
                        continue
                    stats[I_LINK_OK] += 1
                    if g <= rx_gen[s]:
                        continue
                    rx_gen[s] = g
                    ep_rx[s] += 1
                    if g > view_t[s]:
                        st_pen[s] += _penalty_sum(view_last[s] - view_t[s], t - view_last[s], pcode, pbound)
                        view_last[s], st_acc[s], st_peak[s] = _age_step(t, view_last[s], view_t[s], st_acc[s], st_peak[s])
                        view_t[s] = g
                    if msg_req[s] >= 0 and msg_req[s] != dec_id[s]:
                        _rsu_decide(s, app[s], msg_req[s], msg_t[s], msg_x[s], msg_v[s], t, pcells, owner, occ_v,
                                    occ_s, hv_count, hv_first, w, L, q_ms, vf, A, horizon, G, AR, bk_id, bk_t, bk_x,
                                    bk_v, used, dec_id, dec_val, dec_ms, stats)
                else:
                    for u in range(n):
                        if status[u] == 0 or status[u] == 3 or is_hv[u]:
                            continue
                        stats[I_LINK_TX] += 1
                        if collided:
                            stats[I_COLLIDED] += 1
                            continue
                        if is_tx[u]:
                            stats[I_HALF_DUPLEX] += 1
                            continue
                        stats[I_LINK_OK] += 1
                        if g <= rsu_rx_gen[u]:
                            continue
                        rsu_rx_gen[u] = g
                        if req_state[u] > 0 and dec_id[u] == req_id[u] and dec_ms[u] < g:
                            _apply_decision(u, t, dec_val[u], req_state, rq_t, rq_x, rq_v, status, pt, px, pv,
                                            commit_ms, backoff_until, backoff, jitter, slowing)
                        if msg_reward and bc_valid[u]:
                            bc_valid[u] = False
                            ai = 0
                            for bb in range(nA):
                                if actions[bb] == rri_next[u]:
                                    ai = bb
                            s2 = situation_index(bc_age[u], bc_cf[u], ai, edges, n_cbins, nA)
                            if online and prev_s[u] >= 0:
                                td_update(Q[u], prev_s[u], prev_a[u], bc_rw[u], s2, alpha, gamma)
                            an = eps_greedy(Q[u, s2], eps0 + (eps1 - eps0) * t / t_max)
                            prev_s[u] = s2
                            prev_a[u] = an
                            rri_next[u] = actions[an]
            for qq in range(ntx):
                is_tx[tx_list[qq]] = False
        # ---- control + dynamics
        if dyn:
            for a in range(4):
                ax = 0 if a < 2 else 1
                green, left, since, _ = _light(t, ax, G, AR)
                for j in range(head[a], sp[a]):
                    u = lane_list[a, j]
                    if status[u] != 1:
                        continue
                    l = leader[u]
                    lead_ok = l < 0 or status[l] >= 2
                    if is_hv[u] or mode == 0:
                        # light rule: commit on green if the crossing clears before the cross axis opens
                        near = -x[u] <= v[u] * v[u] / (2.0 * B) + 5.0
                        rested = v[u] < 0.5
                        if near and green and lead_ok:
                            react_ok = True
                            if rested:
                                react_ok = since >= hv_react and (l < 0 or t - commit_ms[l] >= hv_react)
                            if react_ok:
                                t_clear = _pt_at(x_exit, ts, x[u], v[u], vf, A)
                                if 1000.0 * t_clear <= t + left + AR - 500:
                                    ok = True
                                    if l >= 0:
                                        ok = _feasible(ts, ts, x[u], v[u], pt[l], px[l], pv[l], x_exit, vf, A, L, s0, hw)
                                    if ok:
                                        status[u] = 2
                                        pt[u] = ts
                                        px[u] = x[u]
                                        pv[u] = v[u]
                                        commit_ms[u] = t
                                        if is_hv[u] and mode != 0:
                                            _hv_commit(u, a, j, t, pt, px, pv, lane_list, sp, is_hv, spawn_ms,
                                                       hv_count, hv_first, pcells, owner, occ_v, occ_s, w, L, q,
                                                       vf, A, approach_m)
                    elif mode == 1:
                        if req_state[u] == 0 and t >= backoff_until[u] and -x[u] <= req_dist:
                            _try_request(u, t, x, v, status, leader, req_state, req_id, rq_t, rq_x, rq_v, pt, px,
                                         pv, vf, A, B, L, s0, hw, x_exit, rest_lead, slowing)
                            if req_state[u] > 0:
                                stats[I_REQUESTS] += 1
                                _rsu_decide(u, a, req_id[u], rq_t[u], rq_x[u], rq_v[u], t, pcells, owner, occ_v,
                                            occ_s, hv_count, hv_first, w, L, q_ms, vf, A, horizon, G, AR, bk_id,
                                            bk_t, bk_x, bk_v, used, dec_id, dec_val, dec_ms, stats)
                                _apply_decision(u, t, dec_val[u], req_state, rq_t, rq_x, rq_v, status, pt, px, pv,
                                                commit_ms, backoff_until, backoff, jitter, slowing)
                    # pending requests that can no longer be met are dropped
                    if req_state[u] == 1 and -x[u] < v[u] * v[u] / (2.0 * B) + 5.0:
                        req_state[u] = 0
                    elif req_state[u] == 2 and ts >= rq_t[u]:
                        req_state[u] = 0
                # motion, front of the lane first
                for j in range(head[a], sp[a]):
                    u = lane_list[a, j]
                    if status[u] == 2 or req_state[u] == 1:
                        pl_t = pt[u] if status[u] == 2 else rq_t[u]
                        pl_x = px[u] if status[u] == 2 else rq_x[u]
                        pl_v = pv[u] if status[u] == 2 else rq_v[u]
                        x[u] = _px(ts + dt, pl_t, pl_x, pl_v, vf, A)
                        v[u] = _pv(ts + dt, pl_t, pl_x, pl_v, vf, A)
                        if status[u] == 2 and x[u] >= x_exit:
                            status[u] = 3
                            exit_ms[u] = t + dyn_tick
                            n_done += 1
                            stats[I_EXITED] += 1
                            if is_hv[u]:
                                pass
                            elif mode == 2:
                                has_res[u] = False  # its reservation lapses; nobody senses it any more
                                _finish_age(u, t, view_t, view_last, st_acc, st_peak, stats)
                        continue
                    if status[u] != 1 or req_state[u] == 2:
                        continue  # a vehicle waiting on a start-from-rest request holds still
                    l = leader[u]
                    acc = _idm(v[u], 1e9, 0.0, vf, A, B, idm_T, s0)
                    if l >= 0 and status[l] != 3:
                        a_l = _idm(v[u], x[l] - L - x[u], v[u] - v[l], vf, A, B, idm_T, s0)
                        if a_l < acc:
                            acc = a_l
                    # stop line: keep free speed until braking at ``decel`` is due, then stop at it
                    d = -x[u] - 0.5
                    if d <= v[u] * v[u] / (2.0 * B) + 1.0:
                        a_s = -v[u] * v[u] / (2.0 * max(d, 0.05))
                        if a_s < acc:
                            acc = a_s
                    # after a reject, ease off (down to 30% of free speed) so the next request asks for a later crossing
                    if slowing[u] and v[u] > 0.3 * vf and acc > -yield_decel:
                        acc = -yield_decel
                    if acc < -9.0:
                        acc = -9.0
                    nv = v[u] + acc * dt
                    if nv < 0.0:
                        nv = 0.0
                    x[u] += 0.5 * (v[u] + nv) * dt
                    v[u] = nv
                    if x[u] > 0.0:
                        x[u] = 0.0
                        v[u] = 0.0
                while head[a] < sp[a] and status[lane_list[a, head[a]]] == 3:
                    head[a] += 1
            # ---- metrics: ground-truth cell occupancy and approach gaps
            for a in range(4):
                for j in range(head[a], sp[a]):
                    u = lane_list[a, j]
                    c = x[u] - 0.5 * L
                    if 0.0 <= c < box_len:
                        if status[u] != 2:
                            stats[I_UNSOUND] += 1
                        cell = pcells[a, int(c / w)]
                        if tick_stamp[cell] == t and tick_owner[cell] != u:
                            stats[I_CELL_CONFLICT] += 1
                        tick_stamp[cell] = t
                        tick_owner[cell] = u
                    l = leader[u]
                    if l >= 0 and status[l] != 3 and x[l] - L - x[u] <= 0.0:
                        stats[I_CRASH] += 1
        t += 1
    for u in range(n):
        if status[u] != 0 and status[u] != 3 and not is_hv[u] and mode == 2:
            _finish_age(u, t, view_t, view_last, st_acc, st_peak, stats)
    final = np.empty((n, 4))
    final[:, 0] = status
    final[:, 1] = x
    final[:, 2] = v
    final[:, 3] = req_state
    return spawn_ms, exit_ms, stats, t, final


@njit(cache=True)
def _hv_commit(u, a, j, t, pt, px, pv, lane_list, sp, is_hv, spawn_ms, hv_count, hv_first, pcells, owner,
               occ_v, occ_s, w, L, q, vf, acc, approach_m):
    # a committed HV has a known crossing: book its crossing cells outright (the
    # mask kept AVs out of them) and move the mask on to the next HV, if any
    for i in range(pcells.shape[1]):
        if owner[a, i] < 0:
            continue
        c = pcells[a, i]
        s0, s1 = _slots(i, pt[u], px[u], pv[u], w, L, q, vf, acc)
        for s in range(s0, s1 + 1):
            k = s % SLOT_RING
            occ_v[c, k] = u + 1
            occ_s[c, k] = s
    hv_count[a] -= 1
    if hv_count[a] > 0:
        for jj in range(j + 1, sp[a]):
            uu = lane_list[a, jj]
            if is_hv[uu]:
                hv_first[a] = spawn_ms[uu] + int(1000.0 * approach_m / vf)
                break


@njit(cache=True)
def _finish_age(u, t, view_t, view_last, st_acc, st_peak, stats):
    view_last[u], st_acc[u], st_peak[u] = _age_step(t, view_last[u], view_t[u], st_acc[u], st_peak[u])
    stats[I_STATUS_AGE] += st_acc[u]
    st_acc[u] = 0.0


@njit(cache=True)
def _try_request(u, t, x, v, status, leader, req_state, req_id, rq_t, rq_x, rq_v, pt, px, pv,
                 vf, A, B, L, s0, hw, x_exit, rest_lead, slowing):
    # a plan from the current motion while the vehicle can still stop, or a start-from-rest plan
    l = leader[u]
    if l >= 0 and status[l] < 2:
        return
    ts = t / 1000.0
    if v[u] >= 0.05 and -x[u] > v[u] * v[u] / (2.0 * B) + 5.0:
        T, X, V = ts, x[u], v[u]
        state = 1
    elif v[u] < 0.05:
        T, X, V = (t + rest_lead) / 1000.0, x[u], 0.0
        state = 2
    else:
        return
    if l >= 0:
        if state == 1:
            if not _feasible(ts, T, X, V, pt[l], px[l], pv[l], x_exit, vf, A, L, s0, hw):
                return
        else:
            # start from rest at the first 100 ms step that keeps the gap
            k = 0
            while not _feasible(ts, T, X, V, pt[l], px[l], pv[l], x_exit, vf, A, L, s0, hw):
                T += 0.1
                k += 1
                if k > 100:
                    return
    req_state[u] = state
    slowing[u] = False
    req_id[u] = t
    rq_t[u] = T
    rq_x[u] = X
    rq_v[u] = V


@njit(cache=True)
def _rsu_decide(u, a, rid, T, X, V, t, pcells, owner, occ_v, occ_s, hv_count, hv_first, w, L, q_ms, vf, A,
                horizon, G, AR, bk_id, bk_t, bk_x, bk_v, used, dec_id, dec_val, dec_ms, stats):
    # a new request from u replaces its earlier booking, if any
    if bk_id[u] >= 0:
        if _release(u, a, bk_t[u], bk_x[u], bk_v[u], pcells, occ_v, occ_s, w, L, q_ms / 1000.0, vf, A, t // q_ms):
            stats[I_WASTED] += 1
        bk_id[u] = -1
    res = _request(u, a, T, X, V, t, pcells, owner, occ_v, occ_s, hv_count, hv_first, w, L, q_ms, vf, A,
                   horizon, G, AR)
    dec_id[u] = rid
    dec_ms[u] = t
    if res == 1:
        dec_val[u] = 1
        bk_id[u] = rid
        bk_t[u] = T
        bk_x[u] = X
        bk_v[u] = V
        stats[I_CONFIRM] += 1
    else:
        dec_val[u] = 2
        stats[I_REJECT] += 1
        if res == 3:
            stats[I_MASK_REJECT] += 1


@njit(cache=True)
def _apply_decision(u, t, val, req_state, rq_t, rq_x, rq_v, status, pt, px, pv, commit_ms, backoff_until,
                    backoff, jitter, slowing):
    if val == 1:
        if req_state[u] == 1 or t < 1000.0 * rq_t[u]:
            status[u] = 2
            pt[u] = rq_t[u]
            px[u] = rq_x[u]
            pv[u] = rq_v[u]
            commit_ms[u] = t
        req_state[u] = 0
    else:
        req_state[u] = 0
        backoff_until[u] = t + backoff + (np.random.randint(0, jitter) if jitter > 0 else 0)
        slowing[u] = True


# --- Python-facing runner ----------------------------------------------------


@dataclass
class IntersectionRun:
    seed: int
    mode: str
    trip_ms: np.ndarray
    arrival_ms: np.ndarray
    approach: np.ndarray
    is_hv: np.ndarray
    spawned: int
    exited: int
    confirms: int
    rejects: int
    mask_rejects: int
    wasted_bookings: int
    requests: int
    cell_conflicts: int
    crashes: int
    unsound_entries: int
    link_attempts: int
    link_successes: int
    collisions: int
    half_duplex: int
    mean_status_age: float
    mean_rri: float
    end_ms: int
    final_state: np.ndarray  # per vehicle at the end: status, position, speed, request state

    @property
    def mean_trip_ms(self) -> float:
        done = self.trip_ms[self.trip_ms >= 0]
        return float(done.mean()) if done.size else float("nan")

    @property
    def success_rate(self) -> float:
        return self.link_successes / self.link_attempts if self.link_attempts else float("nan")

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if not isinstance(v, np.ndarray)}
        d["mean_trip_ms"] = self.mean_trip_ms
        d["success_rate"] = self.success_rate
        return d


def simulate_intersection(
    cfg: IntersectionConfig,
    comm: IntComm,
    seed: int,
    policy: RatePolicy | None = None,
    tables: np.ndarray | None = None,
    arrivals=None,
    duration_ms: int | None = None,
) -> IntersectionRun:
    """One run.  Arrivals come from ``seed`` alone (so every mode sees the
    same traffic for a given seed) unless ``arrivals = (ms, approach, is_hv)``.
    ``duration_ms`` cuts the run short; by default it lasts until every
    vehicle is out or ``deadline_ms`` after the last arrival."""
    if arrivals is None:
        arrivals = sample_arrivals(cfg, np.random.default_rng([int(seed), 0x1A7]))
    arr, app, hv = (np.asarray(arrivals[0], dtype=np.int64), np.asarray(arrivals[1], dtype=np.int64),
                    np.asarray(arrivals[2], dtype=np.bool_))
    order = np.argsort(arr, kind="stable")
    arr, app, hv = arr[order], app[order], hv[order]
    n = len(arr)
    lane_list = np.zeros((4, max(n, 1)), dtype=np.int64)
    lane_n = np.zeros(4, dtype=np.int64)
    for i in range(n):
        lane_list[app[i], lane_n[app[i]]] = i
        lane_n[app[i]] += 1
    mode = INT_MODES[comm.mode]
    smart = comm.policy == "smart" and mode == 2
    sps = comm.sps
    if smart:
        if policy is None:
            raise ValueError("smart policy needs a RatePolicy")
        if tables is None:
            tables = np.repeat(policy.table[None], n, axis=0)
        if tables.shape != (n,) + policy.table.shape:
            raise ValueError("need one learner table per vehicle")
        actions = np.array(policy.actions, dtype=np.int64)
        edges = np.array(policy.age_edges)
        ncb, alpha, gamma = policy.n_collision_bins, policy.alpha, policy.gamma
        rri_av, k_av = (100 if 100 in policy.actions else policy.actions[len(policy.actions) // 2]), 1
    else:
        tables = np.zeros((1, 1, 1))
        actions = np.array([comm.rri_ms], dtype=np.int64)
        edges = np.zeros(1)
        ncb, alpha, gamma = 1, 0.0, 0.0
        rri_av, k_av = comm.rri_ms, comm.repetitions
    rris = list(actions) + [comm.rsu_rri_ms, rri_av]
    windows = [min(sps.window(r), r - 1) for r in rris]
    if mode == 2 and k_av > min(windows):
        raise ValueError(f"{k_av} repetitions do not fit a {min(windows)} ms selection window")
    win = 0 if sps.selection_window_ms is None else int(sps.selection_window_ms)
    pm = np.full((n + 1, n + 1), comm.rx_power_dbm)
    t_max = int(arr.max()) + cfg.deadline_ms if n else 0
    if duration_ms is not None:
        if duration_ms < 0:
            raise ValueError("duration must be non-negative")
        t_max = min(t_max, int(duration_ms))
    spawn, exit_, st, end, final = _intersection_kernel(
        arr, app, hv, lane_list, lane_n, int(seed), mode, smart,
        int(rri_av), int(k_av), int(comm.rsu_rri_ms), pm, sps.c_min, sps.c_max, sps.keep_prob, win, max(windows),
        np.array(comm.grid.starts, dtype=np.int64), comm.grid.packet_span, sps.exclusion_threshold_dbm,
        sps.relax_step_db, sps.min_candidate_fraction,
        path_cells(cfg), crossing_owner(cfg), cfg.cell_m, cfg.extent_m, cfg.vehicle_length, cfg.v_free, cfg.accel,
        cfg.decel, cfg.idm_headway_s, cfg.min_gap, cfg.plan_headway_s, cfg.hv_reaction_ms,
        cfg.request_distance_m, cfg.rest_lead_ms, cfg.backoff_ms, cfg.backoff_jitter_ms, cfg.yield_decel,
        cfg.horizon_ms,
        cfg.green_ms, cfg.all_red_ms, cfg.quantum_ms, cfg.dynamics_tick_ms, cfg.approach_m, t_max,
        tables, actions, edges, ncb, comm.epoch_ms, comm.online, comm.epsilon, comm.epsilon_final, alpha, gamma,
        PENALTY_CODES[comm.reward_penalty.kind], float(comm.reward_penalty.bound or 0.0),
    )
    if st[I_EV_OVERFLOW] > 0:
        raise RuntimeError("event calendar overflow; raise EV_CAP")
    trip = np.where(exit_ >= 0, exit_ - arr, -1)
    av_alive = [(max(e, 0) if e >= 0 else end) - s for s, e, h in zip(spawn, exit_, hv) if s >= 0 and not h]
    age_n = float(sum(av_alive)) if mode == 2 else 0.0
    return IntersectionRun(
        seed=int(seed), mode=comm.mode, trip_ms=trip.astype(float), arrival_ms=arr, approach=app, is_hv=hv,
        spawned=int(st[I_SPAWNED]), exited=int(st[I_EXITED]), confirms=int(st[I_CONFIRM]),
        rejects=int(st[I_REJECT]), mask_rejects=int(st[I_MASK_REJECT]), wasted_bookings=int(st[I_WASTED]),
        requests=int(st[I_REQUESTS]), cell_conflicts=int(st[I_CELL_CONFLICT]), crashes=int(st[I_CRASH]),
        unsound_entries=int(st[I_UNSOUND]), link_attempts=int(st[I_LINK_TX]), link_successes=int(st[I_LINK_OK]),
        collisions=int(st[I_COLLIDED]), half_duplex=int(st[I_HALF_DUPLEX]),
        mean_status_age=float(st[I_STATUS_AGE] / age_n) if age_n > 0 else 0.0,
        mean_rri=float(st[I_RRI_SUM] / max(st[I_RRI_N], 1.0)), end_ms=int(end), final_state=final,
    )


@dataclass
class TripRatio:
    ratio: float
    ci95: tuple[float, float]
    per_seed: np.ndarray


def normalized_trip_time(controlled: list[IntersectionRun], baseline: list[IntersectionRun]) -> TripRatio:
    """Mean over seeds of (mean trip under control) / (mean trip under lights), paired by seed."""
    base = {r.seed: r for r in baseline}
    if not controlled or any(r.seed not in base for r in controlled):
        raise ValueError("every controlled run needs a baseline run with the same seed")
    per = np.array([r.mean_trip_ms / base[r.seed].mean_trip_ms for r in controlled])
    m = float(per.mean())
    half = 1.96 * float(per.std(ddof=1)) / math.sqrt(len(per)) if len(per) > 1 else 0.0
    return TripRatio(m, (m - half, m + half), per)


def write_trip_csv(runs: list[IntersectionRun], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["seed", "mode", "vehicle", "approach", "is_hv", "arrival_ms", "trip_ms"])
        for r in runs:
            for i in range(len(r.trip_ms)):
                wr.writerow([r.seed, r.mode, i, APPROACHES[int(r.approach[i])], int(r.is_hv[i]),
                             int(r.arrival_ms[i]), f"{r.trip_ms[i]:.0f}"])
