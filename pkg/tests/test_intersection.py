import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infolat.intersection import (
    CONFIRMED,
    REJECTED,
    SLOT_RING,
    IntComm,
    IntersectionConfig,
    IntersectionGrid,
    Plan,
    _request,
    axis_of,
    cell_intervals,
    crossing_owner,
    light_state,
    light_trip_time,
    normalized_trip_time,
    path_cells,
    request_reservation,
    simulate_intersection,
    trajectory_for,
    write_trip_csv,
)
from infolat.smart import pretrained_policy

CFG = IntersectionConfig()


def test_paths_are_straight_and_cross_perpendicular_lanes():
    pc = path_cells(CFG)
    n = CFG.n_cells
    for a in range(4):
        rows, cols = np.divmod(pc[a], n)
        assert len(set(pc[a])) == n
        assert len(set(rows)) == 1 or len(set(cols)) == 1
    own = crossing_owner(CFG)
    for a in range(4):
        hits = own[a][own[a] >= 0]
        assert len(hits) == 2 and all(axis_of(b) != axis_of(a) for b in hits)
    # opposite directions never share a cell
    assert not set(pc[0]) & set(pc[1]) and not set(pc[2]) & set(pc[3])


def test_straight_crossing_cell_sweep():
    plan = Plan(0.0, -100.0, CFG.v_free)
    iv = cell_intervals(plan, CFG)
    fronts = np.array([a for a, _ in iv])
    assert np.allclose(np.diff(fronts), 0.4)
    # front bumper crosses the 40 m box in 4 s at free speed
    assert plan.time_at(CFG.extent_m, CFG) - plan.time_at(0.0, CFG) == pytest.approx(4.0)


def test_plan_kinematics_from_rest():
    p = Plan(2.0, 0.0, 0.0)
    assert p.position(1.0, CFG) == 0.0
    assert p.position(2.0 + 5.0, CFG) == pytest.approx(25.0)  # 10 m/s reached after 5 s at 2 m/s^2
    assert p.position(8.0, CFG) == pytest.approx(35.0)
    assert p.time_at(35.0, CFG) == pytest.approx(8.0)


def test_reservation_examples():
    grid = IntersectionGrid(CFG)
    plan = Plan(0.0, -50.0, CFG.v_free)
    traj = trajectory_for(0, plan, CFG)
    assert request_reservation(grid, 1, traj, now_slot=0).status == CONFIRMED
    assert request_reservation(grid, 2, traj, now_slot=0).status == REJECTED
    # same timing on the opposite lane shares no cell
    assert request_reservation(grid, 3, trajectory_for(1, plan, CFG), now_slot=0).status == CONFIRMED
    # a perpendicular crossing at the same time does
    assert request_reservation(grid, 4, trajectory_for(2, plan, CFG), now_slot=0).status == REJECTED
    late = Plan(10.0, -50.0, CFG.v_free)
    assert request_reservation(grid, 5, trajectory_for(2, late, CFG), now_slot=0).status == CONFIRMED
    # ETA already past
    assert request_reservation(IntersectionGrid(CFG), 6, traj, now_slot=100).status == REJECTED


def test_malformed_trajectory_rejected():
    traj = trajectory_for(0, Plan(0.0, -50.0, CFG.v_free), CFG)
    with pytest.raises(ValueError):
        request_reservation(IntersectionGrid(CFG), 1, [traj[0], traj[2]], 0)
    with pytest.raises(ValueError):
        request_reservation(IntersectionGrid(CFG), 1, [(traj[0][0], (5, 4))], 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0.0, 8.0), st.floats(-90.0, -30.0), st.sampled_from([0.0, 5.0, 10.0])),
                min_size=1, max_size=12))
def test_compiled_request_matches_reference(reqs):
    grid = IntersectionGrid(CFG)
    pc, own = path_cells(CFG), crossing_owner(CFG)
    occ_v = np.zeros((CFG.n_cells ** 2, SLOT_RING), dtype=np.int64)
    occ_s = np.full_like(occ_v, -1)
    none = np.zeros(4, dtype=np.int64)
    for v, (a, t0, x0, v0) in enumerate(reqs):
        ref = request_reservation(grid, v, trajectory_for(a, Plan(t0, x0, v0), CFG), now_slot=0).status
        got = _request(v, a, t0, x0, v0, 0, pc, own, occ_v, occ_s, none, none, CFG.cell_m, CFG.vehicle_length,
                       CFG.quantum_ms, CFG.v_free, CFG.accel, 10 ** 7, CFG.green_ms, CFG.all_red_ms)
        assert (got == 1) == (ref == CONFIRMED)
    booked = {(c, s) for c in range(occ_v.shape[0]) for k in range(SLOT_RING) if occ_v[c, k]
              for s in [occ_s[c, k]]}
    assert booked == set(grid.occupancy)


def test_hv_mask_blocks_crossing_cells_in_the_hv_phase():
    pc, own = path_cells(CFG), crossing_owner(CFG)
    occ_v = np.zeros((CFG.n_cells ** 2, SLOT_RING), dtype=np.int64)
    occ_s = np.full_like(occ_v, -1)
    hv = np.array([0, 0, 1, 0])  # an HV waiting on the eastbound approach
    first = np.zeros(4, dtype=np.int64)
    args = (pc, own, occ_v, occ_s, hv, first, CFG.cell_m, CFG.vehicle_length, CFG.quantum_ms, CFG.v_free,
            CFG.accel, 10 ** 7, CFG.green_ms, CFG.all_red_ms)
    # northbound crossing inside the eastbound green: masked
    t_ew = (CFG.green_ms + CFG.all_red_ms + 5_000) / 1000.0
    assert _request(0, 0, t_ew, -50.0, CFG.v_free, 0, *args) == 3
    # same crossing inside the northbound green: free
    assert _request(1, 0, 10.0, -50.0, CFG.v_free, 0, *args) == 1


def test_light_cycle():
    G, AR = CFG.green_ms, CFG.all_red_ms
    assert light_state(0, 0, CFG) == (True, G)
    assert light_state(0, 2, CFG) == (False, 0)
    assert light_state(G, 0, CFG)[0] is False and light_state(G, 2, CFG)[0] is False
    assert light_state(G + AR, 2, CFG) == (True, G)
    assert light_state(2 * (G + AR), 1, CFG) == (True, G)


def _lone(arrival_ms, approach):
    return np.array([arrival_ms]), np.array([approach]), np.array([True])


def test_single_vehicle_on_green_gets_free_flow():
    assert light_trip_time(0, 0, CFG) == CFG.free_flow_ms
    run = simulate_intersection(CFG, IntComm(mode="lights"), seed=0, arrivals=_lone(0, 0))
    assert run.trip_ms[0] == pytest.approx(CFG.free_flow_ms, abs=CFG.dynamics_tick_ms)


def test_single_vehicle_at_red_onset_waits_out_the_red():
    travel = 1000 * CFG.approach_m / CFG.v_free
    arr = int(CFG.green_ms - travel)  # reaches the line as its green ends
    red = CFG.green_ms + 2 * CFG.all_red_ms
    ref = light_trip_time(arr, 0, CFG)
    # waits the red out, then loses the start-up reaction and the acceleration from rest
    lost = CFG.hv_reaction_ms + 1000 * CFG.v_free / (2 * CFG.accel)
    assert ref == pytest.approx(CFG.free_flow_ms + red + lost)
    run = simulate_intersection(CFG, IntComm(mode="lights"), seed=0, arrivals=_lone(arr, 0))
    assert CFG.free_flow_ms + red <= run.trip_ms[0] <= ref + 1000 * CFG.v_free / (2 * CFG.decel) + 50


def _assert_invariants(run):
    assert run.cell_conflicts == 0
    assert run.crashes == 0
    assert run.unsound_entries == 0
    assert run.spawned == run.exited == len(run.trip_ms)
    assert (run.trip_ms > 0).all()


@pytest.fixture(scope="module")
def smart_policy():
    return pretrained_policy(48)[0]


@pytest.mark.parametrize("mode, kw", [("lights", {}), ("ideal", {}), ("mode4", {}), ("mode4", {"repetitions": 8})])
@pytest.mark.parametrize("seed", [0, 1])
def test_safety_liveness_conservation(mode, kw, seed):
    run = simulate_intersection(CFG, IntComm(mode=mode, **kw), seed=seed)
    _assert_invariants(run)
    assert run.mean_trip_ms > CFG.free_flow_ms


def test_smart_run_invariants(smart_policy):
    run = simulate_intersection(CFG, IntComm(policy="smart"), seed=3, policy=smart_policy)
    _assert_invariants(run)
    assert min(smart_policy.actions) <= run.mean_rri <= max(smart_policy.actions)
    with pytest.raises(ValueError):
        simulate_intersection(CFG, IntComm(policy="smart"), seed=0)


def test_dense_traffic_stays_live():
    cfg = IntersectionConfig(n_vehicles=200, arrival_rate=1.0, hv_fraction=0.3)
    for mode in ("lights", "ideal", "mode4"):
        _assert_invariants(simulate_intersection(cfg, IntComm(mode=mode), seed=5))


def test_all_hv_traffic_matches_lights():
    cfg = IntersectionConfig(n_vehicles=120, hv_fraction=1.0)
    a = simulate_intersection(cfg, IntComm(mode="lights"), seed=2)
    b = simulate_intersection(cfg, IntComm(mode="ideal"), seed=2)
    assert np.array_equal(a.trip_ms, b.trip_ms) and b.requests == 0


def test_paired_arrivals_and_determinism():
    a = simulate_intersection(CFG, IntComm(), seed=4)
    b = simulate_intersection(CFG, IntComm(), seed=4)
    c = simulate_intersection(CFG, IntComm(mode="lights"), seed=4)
    assert a.summary() == b.summary() and np.array_equal(a.trip_ms, b.trip_ms)
    assert np.array_equal(a.arrival_ms, c.arrival_ms) and np.array_equal(a.is_hv, c.is_hv)
    assert a.link_successes + a.collisions + a.half_duplex == a.link_attempts


def test_normalized_trip_time():
    base = [simulate_intersection(CFG, IntComm(mode="lights"), seed=s) for s in range(3)]
    same = normalized_trip_time(base, base)
    assert same.ratio == 1.0 and np.allclose(same.per_seed, 1.0)
    ideal = [simulate_intersection(CFG, IntComm(mode="ideal"), seed=s) for s in range(3)]
    r = normalized_trip_time(ideal, base)
    assert r.ratio < 1.0 and r.ci95[0] <= r.ratio <= r.ci95[1]
    with pytest.raises(ValueError):
        normalized_trip_time(ideal, base[:1])


def test_config_validation():
    with pytest.raises(ValueError):
        IntersectionConfig(cell_m=3.0)
    with pytest.raises(ValueError):
        IntersectionConfig(horizon_ms=30_000)
    with pytest.raises(ValueError):
        IntComm(mode="telepathy")
    with pytest.raises(ValueError):
        simulate_intersection(CFG, IntComm(rri_ms=20, repetitions=20), seed=0)


def test_trip_csv(tmp_path):
    run = simulate_intersection(IntersectionConfig(n_vehicles=5), IntComm(mode="ideal"), seed=0)
    write_trip_csv([run], tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("seed,mode,vehicle") and len(lines) == 6
    assert all(math.isfinite(float(ln.split(",")[-1])) for ln in lines[1:])
