import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hardballs.core import PhasePoint, make_system
from hardballs.flow import simulate
from hardballs.harness.runners import envelope_state
from hardballs.harness.rng import stream
from hardballs.harness.sampling import random_state
from hardballs.symbolic import (
    PreconditionError,
    WitnessNotFound,
    build_graph,
    f_bound,
    f_bound_bruteforce,
    g_threshold,
    relative_speed_envelope,
    richness,
    witness_collision,
)

# labels are 0-based: (0, 1) is the first pair of balls


def test_graph_examples():
    assert build_graph([(0, 1), (1, 2)], 0, 2, 3).is_connected()
    assert not build_graph([(0, 1)], 0, 1, 3).is_connected()
    assert build_graph([(0, 1), (2, 3), (1, 2)], 0, 3, 4).is_connected()
    empty = build_graph([(0, 1)], 1, 1, 3)
    assert empty.edges == () and len(empty.components()) == 3
    with pytest.raises(IndexError):
        build_graph([(0, 1)], 0, 5, 3)


def test_richness_examples():
    rich, blocks = richness([(0, 1), (1, 2), (0, 1), (1, 2)], 2, 3)
    assert rich and blocks == [(0, 2), (2, 4)]
    assert richness([(0, 1), (1, 2)], 1, 3)[0]
    assert not richness([(0, 1)] * 50, 1, 3)[0]


def test_f_examples():
    assert f_bound(0.7, (2.0,)) == 0.0
    assert f_bound(0.7, (1.0, 3.0)) == 0.7
    assert f_bound(1.0, (1, 1, 1)) == pytest.approx(4 * math.sqrt(3), rel=1e-14)
    assert f_bound(0.5, (1, 1, 1)) == pytest.approx(0.5 * 6.9282, rel=1e-5)


def test_g_examples():
    assert g_threshold((1, 1)) == pytest.approx(0.99 / math.sqrt(2), rel=1e-14)
    assert g_threshold((1, 1)) == pytest.approx(0.7000, abs=1e-4)
    assert g_threshold((1, 1, 1)) == pytest.approx(0.99 / 12, rel=1e-14)


def test_f_matches_bruteforce_unequal():
    for masses in [(1, 2, 3, 4), (1, 1, 2, 2, 3), (0.5, 3, 3, 7)]:
        assert f_bound(1.0, masses) == pytest.approx(f_bound_bruteforce(1.0, masses), rel=1e-12)


def test_witness_head_on(pair_params, head_on):
    traj = simulate(head_on, pair_params, max_collisions=3)
    rec = witness_collision(traj.records, pair_params)
    assert rec is traj.records[0]
    assert rec.rel_speed == pytest.approx(math.sqrt(2))


def test_witness_needs_connected_graph():
    p = make_system(3, 2, (1, 1, 1), 0.05)
    s = PhasePoint([[0.25, 0.5], [0.75, 0.5], [0.5, 0.1]],
                   np.array([[1, 0], [-1, 0], [0, 0]]) / math.sqrt(2))
    traj = simulate(s, p, max_collisions=2)
    with pytest.raises(PreconditionError):
        witness_collision(traj.records, p)


def test_witness_failure_reports_speeds(pair_params, head_on):
    traj = simulate(head_on, pair_params, max_collisions=2)
    with pytest.raises(WitnessNotFound) as err:
        witness_collision(traj.records, pair_params, G=5.0)
    assert err.value.max_rel_speed == pytest.approx(math.sqrt(2)) and err.value.G == 5.0


@pytest.mark.parametrize("seed", range(20))
def test_witness_random_connected_segments(seed):
    p = make_system(3, 2, (1, 1, 1), 0.1)
    traj = simulate(random_state(p, seed), p, max_collisions=300)
    _, blocks = richness(traj.records, 1, p.N)
    for lo, hi in blocks:
        witness_collision(traj.records[lo:hi], p)


def test_envelope_examples():
    p = make_system(2, 2, (1, 1), 0.1)
    s = envelope_state(p, 0.1, stream(0))
    traj = simulate(s, p, max_collisions=50, require_normalized=False)
    report = relative_speed_envelope(traj, 0.1)
    assert report["bound"] == pytest.approx(0.2 * math.sqrt(2), rel=1e-15)
    assert report["ok"]
    still = PhasePoint([[0.25, 0.5], [0.75, 0.5]], [[0.3, 0.1], [0.3, 0.1]])
    out = relative_speed_envelope(simulate(still, p, max_time=5, require_normalized=False), 1e-9)
    assert out["max_rel_speed"] == 0.0


def test_envelope_precondition(pair_params, head_on):
    traj = simulate(head_on, pair_params, max_collisions=2)
    with pytest.raises(PreconditionError):
        relative_speed_envelope(traj, 0.1)


masses = st.lists(st.sampled_from([0.5, 1.0, 1.5, 2.0, 3.0]), min_size=1, max_size=6)


@given(masses, st.floats(0.01, 10), st.floats(0.1, 10))
def test_f_homogeneous(ms, a, c):
    assert f_bound(c * a, ms) == pytest.approx(c * f_bound(a, ms), rel=1e-12)


@given(masses, st.floats(0.01, 10), st.floats(0.01, 10))
def test_f_monotone_in_a(ms, a, b):
    lo, hi = sorted((a, b))
    assert f_bound(lo, ms) <= f_bound(hi, ms) * (1 + 1e-12)


@given(masses, st.randoms())
def test_f_permutation_invariant(ms, rnd):
    shuffled = list(ms)
    rnd.shuffle(shuffled)
    assert f_bound(1.0, shuffled) == f_bound(1.0, ms)


@settings(max_examples=25)
@given(st.lists(st.sampled_from([0.5, 1.0, 2.0, 3.0]), min_size=1, max_size=5))
def test_f_matches_bruteforce(ms):
    assert f_bound(1.0, ms) == pytest.approx(f_bound_bruteforce(1.0, ms), rel=1e-12)


pairs = st.tuples(st.integers(0, 3), st.integers(0, 3)).filter(lambda p: p[0] != p[1])


@given(st.lists(pairs, max_size=40), st.lists(pairs, max_size=40))
def test_richness_concatenation(seq1, seq2):
    _, b1 = richness(seq1, 1, 4)
    head = seq1[: b1[-1][1]] if b1 else []
    _, b2 = richness(seq2, 1, 4)
    _, both = richness(head + seq2, 1, 4)
    shift = len(head)
    assert both == b1 + [(lo + shift, hi + shift) for lo, hi in b2]


@given(st.lists(pairs, max_size=40))
def test_richness_blocks_connected(seq):
    _, blocks = richness(seq, 1, 4)
    for lo, hi in blocks:
        assert build_graph(seq, lo, hi, 4).is_connected()
        assert not build_graph(seq, lo, hi - 1, 4).is_connected()
