import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infolat.phy import (
    ChannelModel,
    Outcome,
    ResourceGrid,
    TransmissionAttempt,
    pathloss_db,
    range_for_snr,
    resolve_subframe,
    snr_db,
)

CH = ChannelModel()


def att(sender, sc, d=20.0, receiver="rx"):
    return TransmissionAttempt(sender=sender, receiver=receiver, subframe=3, subchannel=sc, distance_m=d)


def test_grid_defaults():
    g = ResourceGrid()
    assert g.starts == (0, 2)
    assert g.max_packets == 2
    with pytest.raises(ValueError):
        g.validate_start(3)


def test_noise_floor():
    assert CH.noise_floor_dbm == pytest.approx(-95.0)


def test_pathloss_examples():
    assert pathloss_db(1.0, CH) == pytest.approx(CH.pl_b)
    assert pathloss_db(100, CH) - pathloss_db(10, CH) == pytest.approx(CH.pl_a)
    assert pathloss_db(10, CH) - pathloss_db(1, CH) == pytest.approx(pathloss_db(100, CH) - pathloss_db(10, CH))
    assert pathloss_db(0.2, CH) == pathloss_db(1.0, CH)
    assert CH.pl_b == pytest.approx(41.0 + 20 * math.log10(5.9 / 5.0))


def test_disjoint_resources_both_delivered():
    out = resolve_subframe([att("a", 0), att("b", 2)], CH, np.random.default_rng(0))
    assert out == [Outcome.DELIVERED, Outcome.DELIVERED]


def test_same_resources_collide():
    out = resolve_subframe([att("a", 0), att("b", 0)], CH, np.random.default_rng(0))
    assert out == [Outcome.COLLISION, Outcome.COLLISION]


def test_threshold_boundary():
    ch = ChannelModel(shadowing=False)
    d_edge = range_for_snr(ch)
    assert snr_db(d_edge, ch) == pytest.approx(ch.snr_threshold_db)
    d_short = range_for_snr(ch, margin_db=-0.1)  # SNR 0.1 dB below threshold
    out = resolve_subframe([att("a", 0, d=d_short)], ch, np.random.default_rng(0))
    assert out == [Outcome.RANGE]
    d_ok = range_for_snr(ch, margin_db=0.1)
    assert resolve_subframe([att("a", 0, d=d_ok)], ch, np.random.default_rng(0)) == [Outcome.DELIVERED]


def test_half_duplex_and_broadcast_links():
    # a broadcasts to two receivers; receiver b is itself transmitting on 2
    links = [att("a", 0, receiver="b"), att("a", 0, receiver="c"), att("b", 2, receiver="a")]
    out = resolve_subframe(links, CH, np.random.default_rng(1))
    assert out == [Outcome.HALF_DUPLEX, Outcome.DELIVERED, Outcome.HALF_DUPLEX]


def test_dead_channel():
    ch = ChannelModel(delivery_prob=0.0)
    out = resolve_subframe([att("a", 0), att("b", 2)], ch, np.random.default_rng(0))
    assert out == [Outcome.RANGE, Outcome.RANGE]


def test_malformed_inputs():
    with pytest.raises(ValueError):
        resolve_subframe([att("a", 3)], CH, np.random.default_rng(0))
    mixed = [att("a", 0), TransmissionAttempt("b", "rx", 4, 2, 10.0)]
    with pytest.raises(ValueError):
        resolve_subframe(mixed, CH, np.random.default_rng(0))


attempt_lists = st.lists(
    st.tuples(st.integers(0, 5), st.sampled_from([0, 2]), st.floats(1, 3000)),
    min_size=1,
    max_size=8,
    unique_by=lambda x: x[0],
)


@settings(max_examples=80, deadline=None)
@given(attempt_lists, st.randoms(use_true_random=False))
def test_collision_symmetry_and_capacity(items, rnd):
    ch = ChannelModel(shadowing=False)
    atts = [att(s, sc, d) for s, sc, d in items]
    out = resolve_subframe(atts, ch, np.random.default_rng(0))
    perm = list(range(len(atts)))
    rnd.shuffle(perm)
    out_p = resolve_subframe([atts[i] for i in perm], ch, np.random.default_rng(0))
    assert [out_p[perm.index(i)] for i in range(len(atts))] == out
    assert sum(o is Outcome.DELIVERED for o in out) <= ResourceGrid().max_packets


@settings(max_examples=40, deadline=None)
@given(attempt_lists, st.integers(0, 2**31))
def test_seed_determinism(items, seed):
    atts = [att(s, sc, d) for s, sc, d in items]
    a = resolve_subframe(atts, CH, np.random.default_rng(seed))
    b = resolve_subframe(atts, CH, np.random.default_rng(seed))
    assert a == b


def test_step_function_of_distance():
    ch = ChannelModel(shadowing=False)
    edge = range_for_snr(ch)
    ds = np.linspace(1, 3 * edge, 200)
    ok = [resolve_subframe([att("a", 0, d)], ch, np.random.default_rng(0))[0] is Outcome.DELIVERED for d in ds]
    assert ok == [d <= edge for d in ds]


def test_shadowing_sigma():
    rng = np.random.default_rng(5)
    ch = ChannelModel()
    d = range_for_snr(ch)  # mean SNR exactly at threshold: half the draws succeed
    n = 4000
    hits = sum(resolve_subframe([att("a", 0, d)], ch, rng)[0] is Outcome.DELIVERED for _ in range(n))
    assert abs(hits / n - 0.5) < 4 * math.sqrt(0.25 / n)
