import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hardballs.core import PhasePoint, make_system, mass_inner, project_reduced, to_scaled
from hardballs.flow import simulate
from hardballs.harness.sampling import random_state
from hardballs.neutral import (
    FINITE_DIFFERENCE,
    TANGENT,
    NotNeutralError,
    SingularSegmentError,
    advance,
    advance_identity_residual,
    ansatz_probe,
    is_sufficient,
    neutral_space,
    principal_angles,
    sufficiency_ladder,
)
from hardballs.precise import simulate_precise

S = 1 / math.sqrt(2)


def _idle_third_ball():
    p = make_system(3, 2, (1, 1, 1), 0.1)
    s = PhasePoint([[0.1, 0.25], [0.5, 0.25], [0.3, 0.75]], np.array([[S, 0], [-S, 0], [0, 0]]) * math.sqrt(1.5 / 2))
    s = PhasePoint(s.q, s.v - s.v.mean(axis=0))
    s = PhasePoint(s.q, s.v / math.sqrt(mass_inner(s.v, s.v, p)))
    return p, s


def test_free_flight_full_dimension():
    p = make_system(3, 2, (1, 2, 3), 0.05)
    s = PhasePoint([[0.1, 0.1], [0.5, 0.1], [0.3, 0.6]], [[0, 0.1], [0, 0.1], [0, 0.1]])
    s = PhasePoint(s.q, [[0.3, 0], [0.3, 0], [-0.3, 0]])
    s = PhasePoint(s.q, project_reduced(s.v, p))
    traj = simulate(s, p, max_time=0.02, require_normalized=False)
    assert len(traj) == 0
    res = neutral_space(traj)
    assert res.dimension == 4
    assert is_sufficient(traj)[0] is False


@pytest.mark.parametrize("method", [TANGENT, FINITE_DIFFERENCE])
def test_two_balls_one_collision(pair_params, head_on, method):
    traj = simulate(head_on, pair_params, max_time=0.3)
    assert len(traj) == 1
    res = neutral_space(traj, method=method)
    assert res.dimension == 1 and not res.ambiguous
    assert res.velocity_residual < 1e-8
    assert is_sufficient(traj, method=method)[0]


@pytest.mark.parametrize("method", [TANGENT, FINITE_DIFFERENCE])
def test_idle_third_ball(method):
    p, s = _idle_third_ball()
    traj = simulate(s, p, max_time=0.4)
    assert [rec.pair for rec in traj.records] == [(0, 1)]
    res = neutral_space(traj, method=method)
    assert res.dimension >= 2
    assert not is_sufficient(traj, method=method)[0]
    # joint translation of {0, 1} against ball 2 is neutral
    K = res.scaled_basis(p)
    for u in (np.array([1.0, 0.0]), np.array([0.0, 1.0])):
        W = np.array([u, u, -2 * u])
        w = to_scaled(W, p)
        assert np.linalg.norm(w - K @ (K.T @ w)) < 1e-8 * np.linalg.norm(w)


def test_endpoint_at_collision_is_singular(pair_params, head_on):
    traj = simulate(head_on, pair_params, max_time=0.3)
    with pytest.raises(SingularSegmentError):
        neutral_space(traj, 0.0, traj.times[0])


@pytest.mark.parametrize("seed", range(3))
def test_methods_agree(seed):
    p = make_system(3, 2, (1, 1.5, 2), 0.1)
    s = random_state(p, seed)
    traj = simulate_precise(s, p, max_collisions=6)
    b = traj.elapsed + 0.01
    traj = simulate_precise(s, p, max_time=b)
    a = 0.5 * traj.times[0]
    r1 = neutral_space(traj, a, b, method=TANGENT)
    r2 = neutral_space(traj, a, b, method=FINITE_DIFFERENCE)
    assert r1.dimension == r2.dimension
    assert np.max(principal_angles(r1, r2, p)) < 1e-4
    assert r1.velocity_residual < 1e-8 and r2.velocity_residual < 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_advance_of_flow_direction_is_one(seed):
    p = make_system(3, 2, (1, 1, 1), 0.1)
    s = random_state(p, seed)
    traj = simulate(s, p, max_collisions=8)
    traj = simulate(s, p, max_time=traj.elapsed + 0.01)
    t = 0.5 * (traj.times[3] + traj.times[4])
    V = traj.velocity_at(t)
    for k in range(len(traj)):
        assert advance(traj, k, V, t) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_advance_identity(seed):
    p = make_system(3, 2, (1, 1, 1), 0.1)
    s = random_state(p, seed)
    traj = simulate(s, p, max_collisions=3)
    traj = simulate(s, p, max_time=traj.elapsed + 0.01)
    res = neutral_space(traj)
    for W in res.basis:
        for k in range(len(traj)):
            assert advance_identity_residual(traj, k, W, res.ref_time) < 1e-6 * math.sqrt(mass_inner(W, W, p))


def test_advance_rejects_non_neutral(pair_params, head_on):
    traj = simulate(head_on, pair_params, max_time=0.3)
    W = np.array([[0.0, 1.0], [0.0, -1.0]])
    with pytest.raises(NotNeutralError):
        advance(traj, 0, W, 0.1)
    with pytest.raises(IndexError):
        advance(traj, 3, W, 0.1, check=False)


@settings(max_examples=8)
@given(st.integers(0, 2**31))
def test_neutral_dimension_nested(seed):
    p = make_system(3, 2, (1, 1, 1), 0.1)
    s = random_state(p, seed)
    traj = simulate(s, p, max_collisions=6)
    a = 0.5 * traj.times[0]
    ends = [traj.midgap_time(k) for k in range(1, len(traj))]
    dims = [row["dimension"] for row in sufficiency_ladder(traj, a, ends)]
    assert all(x >= y for x, y in zip(dims, dims[1:]))


def test_ansatz_probe_reports():
    p = make_system(2, 2, (1, 1), 0.1)
    empty = ansatz_probe(p, 0, 3.0, seed=1)
    assert empty["aggregate"]["completed"] == 0 and empty["samples"] == []
    r1 = ansatz_probe(p, 6, 3.0, seed=1)
    r2 = ansatz_probe(p, 6, 3.0, seed=1)
    assert r1 == r2
    agg = r1["aggregate"]
    assert agg["completed"] + agg["failures"] == 6
    assert agg["sufficient_fraction"] == 1.0
