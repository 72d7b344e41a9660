import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infolat.age import AgePenalty
from infolat.phy import ChannelModel, Outcome, TransmissionAttempt, range_for_snr, received_power_dbm, resolve_subframe
from infolat.platoon import (
    ActuatorDelayLine,
    CommConfig,
    ControllerView,
    NoSafeDistance,
    PENALTY_CODES,
    PlatoonConfig,
    VehicleState,
    _age_step,
    _link_delivery_prob,
    _penalty_sum,
    command_effective_time,
    crashes_at,
    detect_crash,
    gap_control,
    lead_profile,
    min_safe_distance,
    simulate_run,
    stopping_distance_bound,
    write_crash_csv,
    write_fig5_csv,
)
from infolat.smart import pretrained_policy

CFG = PlatoonConfig()


def test_lead_profile_phases():
    assert lead_profile(0, CFG) == 0.0
    assert lead_profile(CFG.cruise_ms - 1, CFG) == 0.0
    assert lead_profile(CFG.cruise_ms, CFG, v=22.0) == CFG.brake_accel
    assert lead_profile(CFG.cruise_ms + CFG.brake_ms + 5, CFG, v=22.0) == 0.0
    assert lead_profile(CFG.cruise_ms + CFG.brake_ms + 5, CFG, v=10.0) == CFG.resume_accel


def test_braking_reaches_zero_after_v_over_a():
    v, t = 22.0, CFG.cruise_ms
    dt = CFG.dynamics_tick_ms
    stop = None
    while t < CFG.cruise_ms + CFG.brake_ms:
        a = lead_profile(t, CFG, v)
        v = VehicleState(0.0, v).step(a, dt / 1000).speed
        assert v >= 0.0
        t += dt
        if v == 0.0 and stop is None:
            stop = t - CFG.cruise_ms
    assert stop == pytest.approx(1000 * 22 / 2.94, abs=dt)


def _view(gap_err, speeds):
    n = len(speeds)
    return ControllerView(np.array(speeds, float), np.full(n, CFG.target_gap) + gap_err, np.zeros(n), np.zeros(n))


def test_gap_control_examples():
    assert np.allclose(gap_control(_view(0.0, [22.0] * 7), 22.0, 0.0, CFG), 0.0)
    u = gap_control(_view(np.array([1.0] + [0.0] * 6), [22.0] * 7), 22.0, 0.0, CFG)
    assert u[0] == pytest.approx(0.5) and np.allclose(u[1:], 0.0)
    assert np.all(np.abs(gap_control(_view(100.0, [0.0] * 7), 30.0, 3.0, CFG)) <= CFG.a_max)


def test_actuator_delay_line():
    d = ActuatorDelayLine(10)
    d.deliver(100, 1.5)
    assert [d.tick(t) for t in (100, 105, 109)] == [0.0, 0.0, 0.0]
    assert d.tick(110) == 1.5
    z = ActuatorDelayLine(0)
    z.deliver(40, -2.0)
    assert z.tick(40) == -2.0
    two = ActuatorDelayLine(10)
    two.deliver(200, 1.0)
    two.deliver(205, -1.0)
    assert two.tick(220) == -1.0 and not two.pending
    assert command_effective_time(103, CFG) == 120
    assert command_effective_time(100, CFG) == 110


def test_detect_crash():
    x = -np.arange(8) * (CFG.target_gap + CFG.vehicle_length)
    assert not detect_crash(x, CFG)
    x[3] = x[2] - CFG.vehicle_length
    assert detect_crash(x, CFG)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 30), st.floats(-3, 3), st.sampled_from([0.001, 0.01, 0.1]))
def test_euler_contract(v, a, dt):
    s = VehicleState(10.0, v, lane=2)
    n = s.step(a, dt)
    if v + a * dt >= 0:
        assert n.position == pytest.approx(10.0 + v * dt + 0.5 * a * dt * dt)
        assert n.speed == pytest.approx(v + a * dt)
    else:
        assert n.speed == pytest.approx(0.0, abs=1e-12) and n.accel == pytest.approx(-v / dt)
    assert n.lane == 2


def test_ideal_channel_tracks_target():
    run = simulate_run(CFG, CommConfig(mode="ideal"), seed=0)
    assert abs(run.min_deviation) < 0.1
    assert not run.crashed
    # the view refreshes every dynamics tick; 1 ms samples of that sawtooth
    assert run.mean_status_age == pytest.approx((CFG.dynamics_tick_ms - 1) / 2)
    assert min_safe_distance(CFG, [run]).distance <= 1.0


def test_dead_channel_needs_stopping_distance():
    assert stopping_distance_bound(CFG) == pytest.approx(82.3, abs=0.05)
    dead = CommConfig(channel=ChannelModel(delivery_prob=0.0))
    run = simulate_run(CFG, dead, seed=1)
    assert run.link_successes == 0 and run.crashed
    assert min_safe_distance(CFG, [run]).distance >= stopping_distance_bound(CFG)


def test_min_safe_distance_search():
    runs = [simulate_run(CFG, CommConfig(), seed=s) for s in range(6)]
    msd = min_safe_distance(CFG, runs)
    assert crashes_at(runs, msd.distance) == 0
    assert crashes_at(runs, msd.distance - CFG.gap_resolution) > 0
    # monotone risk along the bisection trace
    trace = sorted(msd.search_trace)
    assert all(b[1] <= a[1] for a, b in zip(trace, trace[1:]))
    with pytest.raises(NoSafeDistance):
        min_safe_distance(PlatoonConfig(max_gap=1.0), runs)


def test_cached_predicate_matches_rerun_at_other_gap():
    # communication outcomes do not depend on the target gap, so deviations carry over
    a = simulate_run(CFG, CommConfig(), seed=4)
    b = simulate_run(PlatoonConfig(target_gap=25.0), CommConfig(), seed=4)
    assert a.min_deviation == pytest.approx(b.min_deviation, abs=1e-9)
    assert a.link_successes == b.link_successes


def test_run_is_deterministic_and_counts_consistent():
    a = simulate_run(CFG, CommConfig(repetitions=3), seed=9)
    b = simulate_run(CFG, CommConfig(repetitions=3), seed=9)
    assert a.summary() == b.summary()
    lost = a.collisions + a.half_duplex + a.range_losses
    assert a.link_successes + lost == a.link_attempts
    assert a.collisions > 0 and 0 < a.success_rate < 1


def test_fixed_latency_ages():
    comm = CommConfig(mode="fixed-latency", rri_ms=100, fixed_latency_ms=7)
    run = simulate_run(CFG, comm, seed=2, trace_cap=200_000)
    assert run.success_rate == 1.0
    tr = run.age_trace
    late = tr[tr[:, 0] >= 1000]
    # freshest status at the lead is at least the network latency old
    assert late[:, 2].min() >= 7
    # a capture waits at most one sensing interval plus one period, then 7 ms in flight
    assert late[:, 2].max() <= CFG.sensing_interval_ms + 100 + 7
    assert (late[:, 3] >= 7).all()


def test_access_delay_bounds_status_age():
    run = simulate_run(CFG, CommConfig(), seed=5, trace_cap=400_000)
    tr = run.age_trace
    assert (tr[:, 2] >= 0).all() and (tr[:, 3] >= 0).all()
    assert run.peak_status_age >= tr[:, 2].max()


@pytest.mark.parametrize("kind", ["linear", "quadratic", "exceedance"])
@settings(max_examples=30, deadline=None)
@given(first=st.integers(0, 300), n=st.integers(0, 200), bound=st.floats(0, 400))
def test_penalty_sum_matches_brute_force(kind, first, n, bound):
    pen = AgePenalty(kind, bound if kind == "exceedance" else None)
    ref = float(pen(np.arange(first, first + n)).sum()) if n else 0.0
    got = _penalty_sum(first, n, PENALTY_CODES[kind], bound)
    assert got == pytest.approx(ref, rel=1e-12, abs=1e-9)


def test_age_step_accumulates_sawtooth():
    last, acc, peak = _age_step(10, 0, 0, 0.0, 0.0)
    assert (last, acc, peak) == (10, 45.0, 9.0)
    assert _age_step(10, 10, 0, acc, peak) == (10, acc, peak)


def test_link_delivery_prob_matches_shadowing_draws():
    ch = ChannelModel()
    rng = np.random.default_rng(0)
    for margin in (-4.0, 0.0, 5.0):
        d = range_for_snr(ch, margin)
        p = _link_delivery_prob(np.array([[received_power_dbm(d, ch)]]), ch)[0, 0]
        n = 20_000
        att = [TransmissionAttempt(0, 1, 0, 0, d)]
        hits = sum(resolve_subframe(att, ch, rng)[0] is Outcome.DELIVERED for _ in range(n))
        assert abs(hits / n - p) < 4 * math.sqrt(p * (1 - p) / n) + 1e-9
    off = ChannelModel(shadowing=False)
    pm = np.array([[-200.0, -50.0]])
    assert _link_delivery_prob(pm, off).tolist() == [[0.0, 1.0]]
    assert _link_delivery_prob(pm, ChannelModel(reception="collision", delivery_prob=0.3)).tolist() == [[0.3, 0.3]]


def test_smart_run_stationary_without_online_updates():
    pol, _ = pretrained_policy(CFG.n_radios)
    tables = np.repeat(pol.table[None], CFG.n_radios, axis=0)
    before = tables.copy()
    run = simulate_run(CFG, CommConfig(policy="smart"), seed=3, policy=pol, tables=tables)
    assert np.array_equal(tables, before)
    assert 20 <= run.mean_rri <= 500
    on = CommConfig(policy="smart", online=True)
    simulate_run(CFG, on, seed=3, policy=pol, tables=tables)
    assert not np.array_equal(tables, before)
    with pytest.raises(ValueError):
        simulate_run(CFG, CommConfig(policy="smart"), seed=0)


def test_selfish_learners_raise_fleet_age():
    coop, _ = pretrained_policy(CFG.n_radios)
    selfish, _ = pretrained_policy(CFG.n_radios, selfish=True)
    age = {}
    for name, pol, sf in [("coop", coop, False), ("selfish", selfish, True)]:
        comm = CommConfig(policy="smart", selfish=sf, online=True)
        runs = [simulate_run(CFG, comm, seed=s, policy=pol) for s in range(10)]
        age[name] = np.mean([r.mean_status_age for r in runs])
        if sf:
            assert np.mean([r.mean_rri for r in runs]) < 25
    assert age["selfish"] >= age["coop"]


def test_config_validation():
    with pytest.raises(ValueError):
        PlatoonConfig(target_gap=0)
    with pytest.raises(ValueError):
        PlatoonConfig(n_platoons=9)
    with pytest.raises(ValueError):
        CommConfig(mode="psychic")
    with pytest.raises(ValueError):
        simulate_run(CFG, CommConfig(rri_ms=20, repetitions=20), seed=0)


def test_csv_writers(tmp_path):
    runs = [simulate_run(CFG, CommConfig(mode="ideal"), seed=s) for s in range(2)]
    write_crash_csv(runs, 5.0, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].startswith("seed,crashed") and len(lines) == 3
    write_fig5_csv([{"label": "k=1", "repetitions": 1, "rri_ms": 100, "success_rate": 0.9,
                     "min_safe_distance_m": 10.0, "mean_status_age_ms": 80.0}], tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines()[1] == "k=1,1,100,0.9,10.0,80.0"
