"""Dense platooning over the simulated sidelink.

Six platoons of eight vehicles share one resource pool.  Followers report
their status (speed, gap, acceleration) to their lead; the lead runs a
constant-gap controller on that possibly stale view and sends the commands
back.  Everything a run does is in :func:`_platoon_kernel`, a numba loop over
1 ms network ticks with vehicle dynamics on every 10th tick.  Per-tick phase
order: sense, MAC, channel, delivery, control, dynamics, metrics.

Radio links use a fixed nominal layout (``link_spacing_m``) rather than the
instantaneous positions, so a run's communication outcomes and gap
*deviations* do not depend on ``target_gap``.  That makes
:func:`min_safe_distance` exact from one batch of runs per configuration.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .age import AgePenalty
from .mac import SpsConfig, choose_into, relax_mask_into
from .phy import ChannelModel, ResourceGrid
from .smart import RatePolicy, eps_greedy, situation_index, td_update

MODE_MODE4, MODE_IDEAL, MODE_FIXED_LATENCY = 0, 1, 2
COMM_MODES = {"mode4": MODE_MODE4, "ideal": MODE_IDEAL, "fixed-latency": MODE_FIXED_LATENCY}
NEG = -1e300


@dataclass
class PlatoonConfig:
    n_lanes: int = 8
    n_platoons: int = 6
    platoon_size: int = 8
    target_gap: float = 5.0
    vehicle_length: float = 4.0
    lane_width: float = 3.5
    link_spacing_m: float = 10.0
    sensing_interval_ms: int = 60
    actuation_delay_ms: int = 10
    dynamics_tick_ms: int = 10
    cruise_speed: float = 22.0
    brake_accel: float = -2.94
    resume_accel: float = 2.0
    cruise_ms: int = 2000
    brake_ms: int = 7500
    duration_ms: int = 21000
    kp: float = 0.5
    kv: float = 1.2
    a_max: float = 3.0
    max_gap: float = 1000.0
    gap_resolution: float = 0.1

    def __post_init__(self):
        if self.target_gap <= 0:
            raise ValueError("target_gap must be positive")
        if self.cruise_ms <= 0 or self.brake_ms <= 0:
            raise ValueError("profile phase durations must be positive")
        if self.n_platoons > self.n_lanes:
            raise ValueError("one lane per platoon: n_platoons must not exceed n_lanes")
        if self.platoon_size < 2:
            raise ValueError("a platoon needs a lead and at least one follower")
        if self.dynamics_tick_ms <= 0 or self.sensing_interval_ms % self.dynamics_tick_ms:
            raise ValueError("sensing interval must be a multiple of the dynamics tick")
        if self.actuation_delay_ms < 0:
            raise ValueError("actuation delay must be non-negative")

    @property
    def n_radios(self) -> int:
        return self.n_platoons * self.platoon_size

    def lanes(self) -> np.ndarray:
        # spread platoons over the available lanes
        return np.round(np.linspace(0, self.n_lanes - 1, self.n_platoons)).astype(int)


@dataclass
class CommConfig:
    """How status and control messages travel.

    ``policy``: ``fixed`` (every radio uses ``rri_ms`` and ``repetitions``) or
    ``smart`` (per-radio rri chosen by the learners, one copy per message).
    ``mode``: ``mode4`` (simulated sidelink), ``ideal`` (zero latency,
    lossless, the lead sees ground truth) or ``fixed-latency`` (every message
    arrives ``fixed_latency_ms`` after generation).
    """

    mode: str = "mode4"
    policy: str = "fixed"
    rri_ms: int = 100
    repetitions: int = 1
    fixed_latency_ms: int = 5
    channel: ChannelModel = field(default_factory=ChannelModel)
    sps: SpsConfig = field(default_factory=SpsConfig)
    grid: ResourceGrid = field(default_factory=ResourceGrid)
    # smart-lite: reward epoch and the penalty the semi-supervisor applies to age
    epoch_ms: int = 200
    reward_penalty: AgePenalty = field(default_factory=AgePenalty.quadratic)
    online: bool = False
    selfish: bool = False
    epsilon: float = 0.0
    epsilon_final: float = 0.0

    def __post_init__(self):
        if self.mode not in COMM_MODES:
            raise ValueError(f"unknown comm mode {self.mode!r}")
        if self.policy not in ("fixed", "smart"):
            raise ValueError(f"unknown update policy {self.policy!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.rri_ms < 2:
            raise ValueError("rri must be at least 2 ms")


# --- small reference pieces (also exercised directly by tests) -------------


def lead_profile(t_ms: float, cfg: PlatoonConfig, v: float | None = None) -> float:
    """Lead acceleration at ``t_ms``; with the current speed ``v`` the value is
    clamped so speed stays in [0, cruise_speed] over one dynamics tick."""
    dt = cfg.dynamics_tick_ms / 1000.0
    return _profile(float(t_ms), cfg.cruise_speed if v is None else float(v), cfg.cruise_ms, cfg.brake_ms,
                    cfg.brake_accel, cfg.resume_accel, cfg.cruise_speed, dt)


@njit(cache=True)
def _profile(t, v, cruise_ms, brake_ms, a_brake, a_resume, v_cruise, dt):
    if t < cruise_ms:
        return 0.0
    if t < cruise_ms + brake_ms:
        if v + a_brake * dt < 0.0:
            return -v / dt
        return a_brake
    if v + a_resume * dt > v_cruise:
        return max(0.0, (v_cruise - v) / dt)
    return a_resume


@dataclass
class VehicleState:
    position: float
    speed: float
    accel: float = 0.0
    lane: int = 0

    def step(self, a: float, dt: float) -> "VehicleState":
        """Explicit Euler with speed clamped at zero (the effective accel is stored)."""
        if self.speed + a * dt < 0:
            a = -self.speed / dt
        return VehicleState(self.position + self.speed * dt + 0.5 * a * dt * dt, self.speed + a * dt, a, self.lane)


@dataclass
class ControllerView:
    """The lead's latest received status per follower (index 1..M-1)."""

    speed: np.ndarray
    gap: np.ndarray
    accel: np.ndarray
    capture_time: np.ndarray

    def ages(self, now: float) -> np.ndarray:
        return now - self.capture_time


def gap_control(view: ControllerView, lead_speed: float, lead_accel: float, cfg: PlatoonConfig) -> np.ndarray:
    """Commanded acceleration for followers 1..M-1 from a (stale) view."""
    v_pred = np.concatenate([[lead_speed], view.speed[:-1]])
    u = lead_accel + cfg.kp * (view.gap - cfg.target_gap) + cfg.kv * (v_pred - view.speed)
    return np.clip(u, -cfg.a_max, cfg.a_max)


def command_effective_time(delivery_ms: int, cfg: PlatoonConfig) -> int:
    """First dynamics tick at or after delivery + actuation delay."""
    t = delivery_ms + cfg.actuation_delay_ms
    k = cfg.dynamics_tick_ms
    return -(-t // k) * k


@dataclass
class ActuatorDelayLine:
    """Reference of the kernel's actuator: a command delivered at ``t`` is due
    at ``t + delay``; at each dynamics tick the newest due command is applied
    and older due ones are dropped."""

    delay_ms: int = 10
    accel: float = 0.0
    pending: list[tuple[int, float]] = field(default_factory=list)

    def deliver(self, t_ms: int, u: float) -> None:
        self.pending.append((t_ms + self.delay_ms, float(u)))

    def tick(self, t_ms: int) -> float:
        due = [u for at, u in self.pending if at <= t_ms]
        if due:
            self.accel = due[-1]
            self.pending = [(at, u) for at, u in self.pending if at > t_ms]
        return self.accel


def detect_crash(positions, cfg: PlatoonConfig) -> bool:
    """Bumper-to-bumper gap <= 0 anywhere in an ordered (front first) platoon."""
    x = np.asarray(positions, dtype=float)
    return bool(np.any(x[:-1] - x[1:] - cfg.vehicle_length <= 0))


# --- the run kernel ---------------------------------------------------------

RING = 1024
EV_CAP = 64
PEND_CAP = 8
N_STATS = 16
(S_LINK_TX, S_LINK_OK, S_COLLIDED, S_HALF_DUPLEX, S_RANGE, S_STATUS_AGE, S_CTRL_AGE, S_AGE_SAMPLES,
 S_MSGS, S_RESEL, S_PEAK_STATUS, S_PEAK_CTRL, S_RRI_SUM, S_RRI_N, S_BROADCASTS, S_EV_OVERFLOW) = range(N_STATS)


def _mean_power(cfg: PlatoonConfig, ch: ChannelModel) -> np.ndarray:
    M, P = cfg.platoon_size, cfg.n_platoons
    lanes = cfg.lanes()
    xs = np.array([-i * cfg.link_spacing_m for p in range(P) for i in range(M)])
    ys = np.array([lanes[p] * cfg.lane_width for p in range(P) for i in range(M)])
    d = np.maximum(np.hypot(xs[:, None] - xs[None, :], ys[:, None] - ys[None, :]), 1.0)
    pl = ch.pl_a * np.log10(d) + ch.pl_b  # same law as phy.pathloss_db
    return ch.tx_power_dbm - pl


def _link_delivery_prob(pm: np.ndarray, ch: ChannelModel) -> np.ndarray:
    """Probability that a collision-free copy on each link is received.

    Received power is ``pm - X`` with ``X ~ N(0, sigma)`` in dB, so the SNR
    test passes with probability ``Phi((pm - thr) / sigma)``; drawing a
    uniform against it is the same Bernoulli as drawing the shadowing sample.
    """
    if ch.reception == "snr":
        margin = pm - (ch.noise_floor_dbm + ch.snr_threshold_db)
        if ch.shadowing and ch.shadowing_sigma_db > 0:
            z = (-margin / (ch.shadowing_sigma_db * math.sqrt(2.0))).ravel()
            p = 0.5 * np.array([math.erfc(v) for v in z]).reshape(margin.shape)
        else:
            p = (margin >= 0).astype(float)
    else:
        p = np.ones_like(pm)
    return p * ch.delivery_prob


_LINK_CACHE: dict = {}


def _link_tables(cfg: PlatoonConfig, ch: ChannelModel):
    key = (repr(cfg), repr(ch))
    if key not in _LINK_CACHE:
        if len(_LINK_CACHE) > 64:
            _LINK_CACHE.clear()
        pm = _mean_power(cfg, ch)
        _LINK_CACHE[key] = (pm, _link_delivery_prob(pm, ch))
    return _LINK_CACHE[key]


@njit(cache=True)
def _push(ring_r, ring_k, ring_n, t, r, kind, stats):
    b = t % RING
    n = ring_n[b]
    if n >= EV_CAP:
        stats[S_EV_OVERFLOW] += 1
        return
    ring_r[b, n] = r
    ring_k[b, n] = kind
    ring_n[b] = n + 1


@njit(cache=True)
def _reselect(r, t, rri, nrep, delays, scs, phase, resel_time, has_res, pm, win, starts, span,
              excl_thr, relax_step, min_frac, c_min, c_max, busy, mask, picks, own_ph):
    # selection window: min(rri, 100) when win == 0, else min(win, rri); never
    # the next generation instant itself
    W = min(rri[r], 100) if win == 0 else min(win, rri[r])
    W = min(W, rri[r] - 1)
    # phase[s, j] is the reservation's offset modulo rri[s]; stored at selection
    # so the sensing pass below needs one modulo per radio instead of per pair
    R = rri.shape[0]
    S = starts.shape[0]
    for i in range(W):
        for jj in range(S):
            busy[i, jj] = NEG
    if has_res[r]:
        for l in range(nrep[r]):
            own_ph[phase[r, l]] = True
    for s in range(R):
        if s == r or not has_res[s]:
            continue
        tm = (t + 1) % rri[s]
        same = has_res[r] and rri[r] == rri[s]
        pw = pm[r, s]
        for j in range(nrep[s]):
            if resel_time[s] + delays[s, j] >= t:
                continue  # not transmitted yet, nothing to sense
            # half duplex: copies that always coincide with our own are never heard
            if same and own_ph[phase[s, j]]:
                continue
            x = phase[s, j] - tm
            if x < 0:
                x += rri[s]
            if x < W:
                sc = scs[s, j]
                for jj in range(S):
                    if abs(starts[jj] - sc) < span and pw > busy[x, jj]:
                        busy[x, jj] = pw
    if has_res[r]:
        for l in range(nrep[r]):
            own_ph[phase[r, l]] = False
    relax_mask_into(busy, W, excl_thr, relax_step, min_frac, nrep[r], mask)
    choose_into(mask, W, nrep[r], picks)
    for j in range(nrep[r]):
        delays[r, j] = 1 + picks[j, 0]
        scs[r, j] = starts[picks[j, 1]]
        phase[r, j] = (t + delays[r, j]) % rri[r]
    resel_time[r] = t
    has_res[r] = True
    return np.random.randint(c_min, c_max + 1)


PENALTY_CODES = {"linear": 0, "quadratic": 1, "exceedance": 2}


@njit(cache=True)
def _penalty_sum(first, n, code, bound):
    # sum of the penalty over the age samples first, first+1, ..., first+n-1
    if n <= 0:
        return 0.0
    f = float(first)
    if code == 0:
        return n * f + n * (n - 1) / 2.0
    if code == 1:
        return n * f * f + f * n * (n - 1) + (n - 1) * n * (2 * n - 1) / 6.0
    below = math.floor(bound - f) + 1  # samples f+k with k < below are <= bound
    below = min(max(below, 0), n)
    return float(n - below)


@njit(cache=True)
def _age_step(now, last_t, ref, acc, peak):
    # add samples last_t..now-1 of the sawtooth t - ref; returns (last_t, acc, peak)
    n = now - last_t
    if n > 0:
        first = last_t - ref
        acc += n * first + n * (n - 1) / 2.0
        top = first + n - 1
        if top > peak:
            peak = top
        last_t = now
    return last_t, acc, peak


@njit(cache=True, nogil=True)
def _platoon_kernel(
    P, M, seed, mode,
    rri0, nrep0, pm, p_ok,
    c_min, c_max, keep_prob, win, max_w, starts, span, excl_thr, relax_step, min_frac, fixed_latency,
    cruise_ms, brake_ms, a_brake, a_resume, v0, duration, dyn_tick, sense_ms, act_delay,
    kp, kv, a_max, target_gap, veh_len,
    smart, Q, actions, edges, n_cbins, epoch_ms, online, selfish, eps0, eps1, alpha, gamma, pcode, pbound,
    trace_cap, tr_mac, tr_age,
):
    np.random.seed(seed)
    R = P * M
    dt = dyn_tick / 1000.0
    stats = np.zeros(N_STATS)
    # kinematics
    x = np.zeros(R)
    v = np.full(R, v0)
    a = np.zeros(R)
    for p in range(P):
        for i in range(M):
            x[p * M + i] = -i * (target_gap + veh_len)
    min_dev = 0.0  # most negative (gap - target) seen
    min_gap = target_gap
    crashed = False
    # sensing (followers)
    sense_phase = np.zeros(R, dtype=np.int64)
    for r in range(R):
        sense_phase[r] = dyn_tick * np.random.randint(0, sense_ms // dyn_tick)
    cap_t = np.zeros(R, dtype=np.int64)
    cap_v = np.full(R, v0)
    cap_e = np.zeros(R)
    cap_a = np.zeros(R)
    # lead's view of followers
    view_t = np.zeros(R, dtype=np.int64)
    view_v = np.full(R, v0)
    view_e = np.zeros(R)
    view_last = np.zeros(R, dtype=np.int64)
    status_acc = np.zeros(R)
    status_peak = np.zeros(R)
    # commands: computed at the lead, held by followers
    cmd_u = np.zeros(R)
    cmd_time = np.zeros(P, dtype=np.int64)
    rx_cmd_gen = np.zeros(R, dtype=np.int64)
    ctrl_last = np.zeros(R, dtype=np.int64)
    ctrl_acc = np.zeros(R)
    ctrl_peak = np.zeros(R)
    # actuator delay line: commands wait actuation_delay before taking effect
    pend_u = np.zeros((R, PEND_CAP))
    pend_at = np.zeros((R, PEND_CAP), dtype=np.int64)
    pend_n = np.zeros(R, dtype=np.int64)
    # MAC
    rri = rri0.copy()
    nrep = nrep0.copy()
    KMAX = 1
    for r in range(R):
        if nrep[r] > KMAX:
            KMAX = nrep[r]
    delays = np.zeros((R, KMAX), dtype=np.int64)
    scs = np.zeros((R, KMAX), dtype=np.int64)
    gen_base = np.zeros(R, dtype=np.int64)
    phase = np.zeros((R, KMAX), dtype=np.int64)
    resel_time = np.zeros(R, dtype=np.int64)
    has_res = np.zeros(R, dtype=np.bool_)
    counter = np.zeros(R, dtype=np.int64)
    rri_next = rri0.copy()
    sc_busy = np.zeros((max_w, starts.shape[0]))
    sc_mask = np.zeros((max_w, starts.shape[0]), dtype=np.bool_)
    sc_picks = np.zeros((KMAX, 2), dtype=np.int64)
    max_rri = 1
    for r in range(R):
        max_rri = max(max_rri, rri0[r])
    for i in range(actions.shape[0]):
        max_rri = max(max_rri, actions[i])
    sc_own = np.zeros(max_rri, dtype=np.bool_)
    ring_r = np.zeros((RING, EV_CAP), dtype=np.int64)
    ring_k = np.zeros((RING, EV_CAP), dtype=np.int64)
    ring_n = np.zeros(RING, dtype=np.int64)
    for r in range(R):
        _push(ring_r, ring_k, ring_n, np.random.randint(0, rri[r]), r, -1, stats)
    # message in flight per radio
    msg_gen = np.full(R, -1, dtype=np.int64)
    msg_cap = np.zeros(R, dtype=np.int64)
    msg_v = np.zeros(R)
    msg_e = np.zeros(R)
    msg_cmdgen = np.zeros(R, dtype=np.int64)
    msg_u = np.zeros(R)  # lead r=p*M carries commands for its followers in slots p*M+i
    msg_reward = np.zeros(R, dtype=np.bool_)
    ctrl_rx_gen = np.full(R, -1, dtype=np.int64)  # follower: newest control message received
    status_rx_gen = np.full(R, -1, dtype=np.int64)  # lead's newest status message per follower
    is_tx = np.zeros(R, dtype=np.bool_)
    tx_list = np.zeros(R, dtype=np.int64)
    tx_sc = np.zeros(R, dtype=np.int64)
    tx_gen = np.zeros(R, dtype=np.int64)
    # smart-lite
    nA = actions.shape[0]
    ep_sent = np.zeros(R)
    ep_rx = np.zeros(R)
    ep_age = np.zeros(R)
    status_pen = np.zeros(R)
    ep_pen = np.zeros(R)
    bc_age = np.zeros(R)
    ep_ctrl_rep = np.zeros(R)
    ep_ctrl_pen = np.zeros(R)
    ep_ctrl_n = np.zeros(R)
    ep_ctrl_ok = np.zeros(R)
    bc_pending = np.zeros(P, dtype=np.bool_)
    bc_rw = np.zeros(R)
    bc_cf = np.zeros(R)
    prev_s = np.full(R, -1, dtype=np.int64)
    prev_a = np.zeros(R, dtype=np.int64)
    n_mac = 0
    n_age = 0
    ep_start = 0

    is_lead = np.zeros(R, dtype=np.bool_)
    for p in range(P):
        is_lead[p * M] = True
    next_sense = sense_phase.copy()
    next_dyn = 0
    next_epoch = epoch_ms
    b = -1
    for t in range(duration):
        # integer modulo is slow in this loop, so every period runs on a counter
        dyn = t == next_dyn
        if dyn:
            next_dyn += dyn_tick
        b += 1
        if b == RING:
            b = 0
        # ---- sense
        if dyn:
            for r in range(R):
                if not is_lead[r] and t == next_sense[r]:
                    next_sense[r] += sense_ms
                    cap_t[r] = t
                    cap_v[r] = v[r]
                    cap_e[r] = x[r - 1] - x[r] - veh_len - target_gap
                    cap_a[r] = a[r]
        # ---- MAC: epoch bookkeeping for the learners, then generation events
        if smart and t == next_epoch:
            next_epoch += epoch_ms
            eps = eps0 + (eps1 - eps0) * t / duration
            for r in range(R):
                if not is_lead[r]:
                    status_pen[r] += _penalty_sum(view_last[r] - view_t[r], t - view_last[r], pcode, pbound)
                    view_last[r], status_acc[r], status_peak[r] = _age_step(t, view_last[r], view_t[r], status_acc[r], status_peak[r])
            for p in range(P):
                L = p * M
                tot_age = 0.0
                tot_cf = 0.0
                for i in range(1, M):
                    r = L + i
                    epoch_age = (status_acc[r] - ep_age[r]) / (t - ep_start)
                    ep_age[r] = status_acc[r]
                    epoch_pen = (status_pen[r] - ep_pen[r]) / (t - ep_start)
                    ep_pen[r] = status_pen[r]
                    frac = ep_rx[r] / ep_sent[r] if ep_sent[r] > 0 else 0.0
                    if selfish:
                        bc_rw[r] = ep_sent[r] * 1000.0 / (t - ep_start)
                    else:
                        bc_rw[r] = -epoch_pen
                    bc_age[r] = epoch_age
                    bc_cf[r] = 1.0 - frac
                    tot_age += epoch_age
                    tot_cf += 1.0 - frac
                    ep_rx[r] = 0.0
                    ep_sent[r] = 0.0
                bc_pending[p] = True
                stats[S_BROADCASTS] += 1
                # the lead learns from what its followers report back
                if ep_ctrl_n[L] > 0:
                    lead_age = ep_ctrl_rep[L] / ep_ctrl_n[L]
                    lead_pen = ep_ctrl_pen[L] / ep_ctrl_n[L]
                else:
                    lead_age = float(t - ep_start)
                    lead_pen = _penalty_sum(lead_age, 1, pcode, pbound)
                if ep_sent[L] > 0:
                    lead_cf = 1.0 - ep_ctrl_ok[L] / (ep_sent[L] * (M - 1))
                else:
                    lead_cf = 0.0
                if selfish:
                    rw = ep_sent[L] * 1000.0 / (t - ep_start)
                else:
                    rw = -lead_pen
                ep_ctrl_rep[L] = 0.0
                ep_ctrl_pen[L] = 0.0
                ep_ctrl_n[L] = 0.0
                ep_ctrl_ok[L] = 0.0
                ep_sent[L] = 0.0
                ai = 0
                for bb in range(nA):
                    if actions[bb] == rri_next[L]:
                        ai = bb
                s2 = situation_index(lead_age, lead_cf, ai, edges, n_cbins, nA)
                if online and prev_s[L] >= 0:
                    td_update(Q[L], prev_s[L], prev_a[L], rw, s2, alpha, gamma)
                an = eps_greedy(Q[L, s2], eps)
                prev_s[L] = s2
                prev_a[L] = an
                rri_next[L] = actions[an]
            ep_start = t
        nb = ring_n[b]
        ntx = 0
        for e in range(nb):
            r = ring_r[b, e]
            kind = ring_k[b, e]
            if kind >= 0:
                if mode == MODE_MODE4 or mode == MODE_FIXED_LATENCY:
                    tx_list[ntx] = r
                    tx_sc[ntx] = scs[r, kind]
                    tx_gen[ntx] = msg_gen[r]
                    ntx += 1
                continue
            # generation event
            if mode == MODE_MODE4:
                counter[r] -= 1
                if rri_next[r] != rri[r] or not has_res[r]:
                    rri[r] = rri_next[r]
                    gen_base[r] = t
                    counter[r] = _reselect(r, t, rri, nrep, delays, scs, phase, resel_time, has_res, pm, win,
                                           starts, span, excl_thr, relax_step, min_frac, c_min, c_max,
                                           sc_busy, sc_mask, sc_picks, sc_own)
                    stats[S_RESEL] += 1
                elif counter[r] <= 0:
                    if np.random.random() < keep_prob:
                        counter[r] = np.random.randint(c_min, c_max + 1)
                    else:
                        gen_base[r] = t
                        counter[r] = _reselect(r, t, rri, nrep, delays, scs, phase, resel_time, has_res, pm,
                                               win, starts, span, excl_thr, relax_step, min_frac, c_min, c_max,
                                               sc_busy, sc_mask, sc_picks, sc_own)
                        stats[S_RESEL] += 1
                if trace_cap > 0 and n_mac < trace_cap:
                    tr_mac[n_mac, 0] = t
                    tr_mac[n_mac, 1] = r
                    tr_mac[n_mac, 2] = 0
                    tr_mac[n_mac, 3] = rri[r]
                    tr_mac[n_mac, 4] = scs[r, 0]
                    n_mac += 1
            else:
                rri[r] = rri_next[r]
                has_res[r] = True
                delays[r, 0] = fixed_latency
                nrep[r] = 1
            gen_base[r] = t
            stats[S_MSGS] += 1
            stats[S_RRI_SUM] += rri[r]
            stats[S_RRI_N] += 1
            msg_gen[r] = t
            p = r // M
            L = p * M
            if r == L:
                ep_sent[r] += 1
                msg_reward[r] = bc_pending[p]
                bc_pending[p] = False
                for i in range(1, M):
                    msg_u[L + i] = cmd_u[L + i]
                msg_cap[r] = cmd_time[p]
            else:
                msg_cap[r] = cap_t[r]
                msg_v[r] = cap_v[r]
                msg_e[r] = cap_e[r]
                msg_cmdgen[r] = rx_cmd_gen[r]
                ep_sent[r] += 1
            if mode == MODE_MODE4 or mode == MODE_FIXED_LATENCY:
                for j in range(nrep[r]):
                    # calendar insert, inlined: helper calls with array arguments are slow here
                    bk = b + delays[r, j]
                    if bk >= RING:
                        bk -= RING
                    n = ring_n[bk]
                    if n < EV_CAP:
                        ring_r[bk, n] = r
                        ring_k[bk, n] = j
                        ring_n[bk] = n + 1
                    else:
                        stats[S_EV_OVERFLOW] += 1
            bk = b + rri[r]
            if bk >= RING:
                bk -= RING
            n = ring_n[bk]
            if n < EV_CAP:
                ring_r[bk, n] = r
                ring_k[bk, n] = -1
                ring_n[bk] = n + 1
            else:
                stats[S_EV_OVERFLOW] += 1
        ring_n[b] = 0
        # ---- channel + delivery
        if ntx > 0:
            for q in range(ntx):
                is_tx[tx_list[q]] = True
            for q in range(ntx):
                s = tx_list[q]
                collided = False
                if mode == MODE_MODE4:
                    for q2 in range(ntx):
                        if q2 != q and tx_list[q2] != s and abs(tx_sc[q2] - tx_sc[q]) < span:
                            collided = True
                            break
                p = s // M
                L = p * M
                if s == L:
                    lo, hi = L + 1, L + M
                else:
                    lo, hi = L, L + 1
                for rx in range(lo, hi):
                    stats[S_LINK_TX] += 1
                    ok = True
                    if mode == MODE_MODE4:
                        if collided:
                            stats[S_COLLIDED] += 1
                            ok = False
                        elif is_tx[rx]:
                            stats[S_HALF_DUPLEX] += 1
                            ok = False
                        else:
                            # one uniform against the precomputed per-link delivery probability
                            pk = p_ok[rx, s]
                            if pk < 1.0 and np.random.random() >= pk:
                                ok = False
                                stats[S_RANGE] += 1
                    if trace_cap > 0 and n_mac < trace_cap:
                        tr_mac[n_mac, 0] = t
                        tr_mac[n_mac, 1] = s
                        tr_mac[n_mac, 2] = 1 if ok else 2
                        tr_mac[n_mac, 3] = rx
                        tr_mac[n_mac, 4] = tx_sc[q]
                        n_mac += 1
                    if not ok:
                        continue
                    stats[S_LINK_OK] += 1
                    g = tx_gen[q]
                    if s == L:
                        if g <= ctrl_rx_gen[rx]:
                            continue  # a copy of something already received
                        ctrl_rx_gen[rx] = g
                        if msg_reward[s]:
                            # reward broadcast: the follower's learning step
                            ai = 0
                            for bb in range(nA):
                                if actions[bb] == rri_next[rx]:
                                    ai = bb
                            s2 = situation_index(bc_age[rx], bc_cf[rx], ai, edges, n_cbins, nA)
                            if online and prev_s[rx] >= 0:
                                td_update(Q[rx], prev_s[rx], prev_a[rx], bc_rw[rx], s2, alpha, gamma)
                            an = eps_greedy(Q[rx, s2], eps0 + (eps1 - eps0) * t / duration)
                            prev_s[rx] = s2
                            prev_a[rx] = an
                            rri_next[rx] = actions[an]
                        if msg_cap[s] > rx_cmd_gen[rx]:
                            ctrl_last[rx], ctrl_acc[rx], ctrl_peak[rx] = _age_step(t, ctrl_last[rx], rx_cmd_gen[rx], ctrl_acc[rx], ctrl_peak[rx])
                            rx_cmd_gen[rx] = msg_cap[s]
                            n = pend_n[rx]
                            if n == PEND_CAP:
                                # full: the oldest pending command can never win over the rest
                                for j in range(1, n):
                                    pend_u[rx, j - 1] = pend_u[rx, j]
                                    pend_at[rx, j - 1] = pend_at[rx, j]
                                n -= 1
                            pend_u[rx, n] = msg_u[rx]
                            pend_at[rx, n] = t + act_delay
                            pend_n[rx] = n + 1
                            ep_ctrl_ok[L] += 1
                    else:
                        if g <= status_rx_gen[s]:
                            continue
                        status_rx_gen[s] = g
                        ep_rx[s] += 1
                        ep_ctrl_rep[L] += g - msg_cmdgen[s]
                        ep_ctrl_pen[L] += _penalty_sum(g - msg_cmdgen[s], 1, pcode, pbound)
                        ep_ctrl_n[L] += 1
                        if msg_cap[s] > view_t[s]:
                            status_pen[s] += _penalty_sum(view_last[s] - view_t[s], t - view_last[s], pcode, pbound)
                            view_last[s], status_acc[s], status_peak[s] = _age_step(t, view_last[s], view_t[s], status_acc[s], status_peak[s])
                            view_t[s] = msg_cap[s]
                            view_v[s] = msg_v[s]
                            view_e[s] = msg_e[s]
            for q in range(ntx):
                is_tx[tx_list[q]] = False
        # ---- control + dynamics
        if dyn:
            for p in range(P):
                L = p * M
                al = _profile(t, v[L], cruise_ms, brake_ms, a_brake, a_resume, v0, dt)
                if mode == MODE_IDEAL:
                    for i in range(1, M):
                        r = L + i
                        gap_e = x[r - 1] - x[r] - veh_len - target_gap
                        u = al + kp * gap_e + kv * (v[r - 1] - v[r])
                        u = min(max(u, -a_max), a_max)
                        ctrl_last[r], ctrl_acc[r], ctrl_peak[r] = _age_step(t, ctrl_last[r], rx_cmd_gen[r], ctrl_acc[r], ctrl_peak[r])
                        status_pen[r] += _penalty_sum(view_last[r] - view_t[r], t - view_last[r], pcode, pbound)
                        view_last[r], status_acc[r], status_peak[r] = _age_step(t, view_last[r], view_t[r], status_acc[r], status_peak[r])
                        view_t[r] = t
                        rx_cmd_gen[r] = t
                        n = pend_n[r]
                        if n == PEND_CAP:
                            # full: the oldest pending command can never win over the rest
                            for j in range(1, n):
                                pend_u[r, j - 1] = pend_u[r, j]
                                pend_at[r, j - 1] = pend_at[r, j]
                            n -= 1
                        pend_u[r, n] = u
                        pend_at[r, n] = t + act_delay
                        pend_n[r] = n + 1
                else:
                    for i in range(1, M):
                        r = L + i
                        vp = v[L] if i == 1 else view_v[r - 1]
                        u = al + kp * view_e[r] + kv * (vp - view_v[r])
                        cmd_u[r] = min(max(u, -a_max), a_max)
                    cmd_time[p] = t
                a[L] = al
            for r in range(R):
                if is_lead[r]:
                    continue
                # the newest command that is due wins; older due ones are superseded
                k = 0
                while k < pend_n[r] and pend_at[r, k] <= t:
                    a[r] = pend_u[r, k]
                    k += 1
                if k:
                    for j in range(k, pend_n[r]):
                        pend_u[r, j - k] = pend_u[r, j]
                        pend_at[r, j - k] = pend_at[r, j]
                    pend_n[r] -= k
            for r in range(R):
                ar = a[r]
                if v[r] + ar * dt < 0.0:
                    ar = -v[r] / dt
                x[r] += v[r] * dt + 0.5 * ar * dt * dt
                v[r] += ar * dt
                if is_lead[r]:
                    a[r] = ar
            # ---- metrics
            for r in range(R):
                if is_lead[r]:
                    continue
                gap = x[r - 1] - x[r] - veh_len
                if gap <= 0.0:
                    crashed = True
                if gap < min_gap:
                    min_gap = gap
                dev = gap - target_gap
                if dev < min_dev:
                    min_dev = dev
                if trace_cap > 0 and n_age < trace_cap:
                    tr_age[n_age, 0] = t
                    tr_age[n_age, 1] = r
                    tr_age[n_age, 2] = t - view_t[r]
                    tr_age[n_age, 3] = t - rx_cmd_gen[r]
                    tr_age[n_age, 4] = gap
                    n_age += 1
    for r in range(R):
        if not is_lead[r]:
            status_pen[r] += _penalty_sum(view_last[r] - view_t[r], duration - view_last[r], pcode, pbound)
            view_last[r], status_acc[r], status_peak[r] = _age_step(duration, view_last[r], view_t[r], status_acc[r], status_peak[r])
            ctrl_last[r], ctrl_acc[r], ctrl_peak[r] = _age_step(duration, ctrl_last[r], rx_cmd_gen[r], ctrl_acc[r], ctrl_peak[r])
            stats[S_STATUS_AGE] += status_acc[r]
            stats[S_CTRL_AGE] += ctrl_acc[r]
            stats[S_AGE_SAMPLES] += duration
            if status_peak[r] > stats[S_PEAK_STATUS]:
                stats[S_PEAK_STATUS] = status_peak[r]
            if ctrl_peak[r] > stats[S_PEAK_CTRL]:
                stats[S_PEAK_CTRL] = ctrl_peak[r]
    return min_dev, min_gap, crashed, stats, n_mac, n_age


@dataclass
class PlatoonRun:
    seed: int
    min_deviation: float  # most negative (gap - target_gap) over the run
    min_gap: float
    crashed: bool
    link_attempts: int
    link_successes: int
    collisions: int
    half_duplex: int
    range_losses: int
    mean_status_age: float
    mean_control_age: float
    peak_status_age: float
    peak_control_age: float
    mean_rri: float
    reselections: int
    mac_trace: np.ndarray | None = None
    age_trace: np.ndarray | None = None

    @property
    def success_rate(self) -> float:
        return self.link_successes / self.link_attempts if self.link_attempts else float("nan")

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("mac_trace")
        d.pop("age_trace")
        d["success_rate"] = self.success_rate
        return d


def _rri_arrays(cfg: PlatoonConfig, comm: CommConfig, policy: RatePolicy | None):
    R = cfg.n_radios
    if comm.policy == "smart":
        rri0 = np.full(R, 100 if 100 in policy.actions else policy.actions[len(policy.actions) // 2], dtype=np.int64)
        nrep = np.ones(R, dtype=np.int64)
    else:
        rri0 = np.full(R, comm.rri_ms, dtype=np.int64)
        nrep = np.full(R, comm.repetitions, dtype=np.int64)
    return rri0, nrep


def simulate_run(
    cfg: PlatoonConfig,
    comm: CommConfig,
    seed: int,
    policy: RatePolicy | None = None,
    tables: np.ndarray | None = None,
    trace_cap: int = 0,
) -> PlatoonRun:
    """One platoon run.  For ``comm.policy == 'smart'`` the learners start
    from ``tables`` (one per radio) or copies of ``policy.table``; with
    ``comm.online`` the tables passed in are updated in place."""
    R = cfg.n_radios
    ch, sps = comm.channel, comm.sps
    if comm.policy == "smart" and policy is None:
        raise ValueError("smart policy needs a RatePolicy")
    rri0, nrep = _rri_arrays(cfg, comm, policy)
    win = 0 if sps.selection_window_ms is None else int(sps.selection_window_ms)
    rris = list(policy.actions) if comm.policy == "smart" else [comm.rri_ms]
    windows = [min(sps.window(r), r - 1) for r in rris]
    if comm.mode == "mode4" and int(nrep.max()) > min(windows):
        raise ValueError(f"{int(nrep.max())} repetitions do not fit a {min(windows)} ms selection window")
    smart = comm.policy == "smart"
    if smart:
        if tables is None:
            tables = np.repeat(policy.table[None], R, axis=0)
        if tables.shape != (R,) + policy.table.shape:
            raise ValueError("need one learner table per radio")
        actions = np.array(policy.actions, dtype=np.int64)
        edges = np.array(policy.age_edges)
        ncb, alpha, gamma = policy.n_collision_bins, policy.alpha, policy.gamma
    else:
        tables = np.zeros((1, 1, 1))
        actions = np.array([comm.rri_ms], dtype=np.int64)
        edges = np.zeros(1)
        ncb, alpha, gamma = 1, 0.0, 0.0
    pm, p_ok = _link_tables(cfg, ch)
    tr_mac = np.zeros((max(trace_cap, 1), 5), dtype=np.int64)
    tr_age = np.zeros((max(trace_cap, 1), 5))
    min_dev, min_gap, crashed, st, n_mac, n_age = _platoon_kernel(
        cfg.n_platoons, cfg.platoon_size, int(seed), COMM_MODES[comm.mode],
        rri0, nrep, pm, p_ok,
        sps.c_min, sps.c_max, sps.keep_prob, win, max(windows), np.array(comm.grid.starts, dtype=np.int64), comm.grid.packet_span,
        sps.exclusion_threshold_dbm, sps.relax_step_db, sps.min_candidate_fraction, comm.fixed_latency_ms,
        cfg.cruise_ms, cfg.brake_ms, cfg.brake_accel, cfg.resume_accel, cfg.cruise_speed, cfg.duration_ms,
        cfg.dynamics_tick_ms, cfg.sensing_interval_ms, cfg.actuation_delay_ms,
        cfg.kp, cfg.kv, cfg.a_max, cfg.target_gap, cfg.vehicle_length,
        smart, tables, actions, edges, ncb, comm.epoch_ms, comm.online, comm.selfish,
        comm.epsilon, comm.epsilon_final, alpha, gamma,
        PENALTY_CODES[comm.reward_penalty.kind], float(comm.reward_penalty.bound or 0.0),
        trace_cap, tr_mac, tr_age,
    )
    if st[S_EV_OVERFLOW] > 0:
        raise RuntimeError("event calendar overflow; raise EV_CAP")
    samples = max(st[S_AGE_SAMPLES], 1.0)
    return PlatoonRun(
        seed=int(seed),
        min_deviation=float(min_dev),
        min_gap=float(min_gap),
        crashed=bool(crashed),
        link_attempts=int(st[S_LINK_TX]),
        link_successes=int(st[S_LINK_OK]),
        collisions=int(st[S_COLLIDED]),
        half_duplex=int(st[S_HALF_DUPLEX]),
        range_losses=int(st[S_RANGE]),
        mean_status_age=float(st[S_STATUS_AGE] / samples),
        mean_control_age=float(st[S_CTRL_AGE] / samples),
        peak_status_age=float(st[S_PEAK_STATUS]),
        peak_control_age=float(st[S_PEAK_CTRL]),
        mean_rri=float(st[S_RRI_SUM] / max(st[S_RRI_N], 1.0)),
        reselections=int(st[S_RESEL]),
        mac_trace=tr_mac[:n_mac] if trace_cap else None,
        age_trace=tr_age[:n_age] if trace_cap else None,
    )


@dataclass
class MinSafeDistance:
    distance: float
    runs: list[PlatoonRun]
    search_trace: list[tuple[float, int]]

    @property
    def success_rate(self) -> float:
        att = sum(r.link_attempts for r in self.runs)
        return sum(r.link_successes for r in self.runs) / att if att else float("nan")

    @property
    def mean_status_age(self) -> float:
        return float(np.mean([r.mean_status_age for r in self.runs]))


class NoSafeDistance(RuntimeError):
    pass


def crashes_at(runs, gap: float) -> int:
    """Crashing runs at bumper-to-bumper target ``gap`` (from cached deviations)."""
    return sum(1 for r in runs if gap + r.min_deviation <= 0.0)


def min_safe_distance(cfg: PlatoonConfig, runs: list[PlatoonRun]) -> MinSafeDistance:
    """Smallest target gap on the ``gap_resolution`` grid with zero crashes.

    Bisection over the grid; each probe evaluates the crash predicate of every
    run from its cached minimum gap deviation.
    """
    res = cfg.gap_resolution
    hi = int(round(cfg.max_gap / res))
    trace = []
    n_hi = crashes_at(runs, hi * res)
    trace.append((hi * res, n_hi))
    if n_hi:
        raise NoSafeDistance(f"{n_hi} runs crash even at the maximum gap {cfg.max_gap} m")
    lo = 0  # gap 0 always crashes
    while hi - lo > 1:
        mid = (lo + hi) // 2
        n = crashes_at(runs, mid * res)
        trace.append((mid * res, n))
        if n:
            lo = mid
        else:
            hi = mid
    return MinSafeDistance(round(hi * res, 10), list(runs), trace)


def write_crash_csv(runs, gap: float, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "crashed", "min_deviation_m", "success_rate", "mean_status_age_ms", "mean_control_age_ms"])
        for r in runs:
            w.writerow([r.seed, int(gap + r.min_deviation <= 0), f"{r.min_deviation:.6f}", f"{r.success_rate:.6f}",
                        f"{r.mean_status_age:.4f}", f"{r.mean_control_age:.4f}"])


def write_fig5_csv(rows, path) -> None:
    """``rows``: dicts with label, repetitions, rri_ms, success_rate, min_safe_distance_m."""
    cols = ["label", "repetitions", "rri_ms", "success_rate", "min_safe_distance_m", "mean_status_age_ms"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def stopping_distance_bound(cfg: PlatoonConfig) -> float:
    """Lead stopping distance from cruise; a follower that never hears the
    lead needs at least this much gap."""
    return cfg.cruise_speed ** 2 / (2 * abs(cfg.brake_accel))


def nominal_distance(cfg: PlatoonConfig) -> float:
    return math.hypot(cfg.link_spacing_m * (cfg.platoon_size - 1), cfg.lane_width * (cfg.n_lanes - 1))
