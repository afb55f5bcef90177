import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hardballs.core import PhasePoint, make_system, to_scaled, wrap
from hardballs.flow import ContractError, next_pair_collision, simulate
from hardballs.harness.sampling import random_state
from hardballs.precise import precise_difference_flow, simulate_precise
from hardballs.tangent import (
    HorizonExhausted,
    TangentVector,
    collision_map,
    curvature_ratio,
    expansion_audit,
    fd_relative_error,
    find_contracting_vector,
    finite_difference_flow,
    contact_seed,
    propagate,
    propagate_free,
    q_audit,
    q_form,
    sandwich_steps,
    section_projector,
    section_tangent,
    stable_subspace,
    tangent_norm,
    unstable_seed,
)


def _contact(state, params, pair=(0, 1)):
    t, _ = next_pair_collision(state, *pair, params)
    return PhasePoint(wrap(state.q + t * state.v), state.v)


def test_free_flight():
    p = make_system(2, 2, (1, 1), 0.1)
    tv = TangentVector([[0.1, 0.2], [-0.1, -0.2]], [[0.3, 0.0], [-0.3, 0.0]])
    same = propagate_free(tv, 0.0)
    assert np.array_equal(same.dq, tv.dq) and np.array_equal(same.dv, tv.dv)
    still = TangentVector(tv.dq, np.zeros((2, 2)))
    assert np.array_equal(propagate_free(still, 7.0).dq, tv.dq)
    unit = tv * (1 / math.sqrt(2 * 0.09))  # ||dv||^2 = 1 in the mass metric
    assert q_form(propagate_free(unit, 0.5), p) - q_form(unit, p) == pytest.approx(0.5, rel=1e-14)
    with pytest.raises(ValueError):
        propagate_free(tv, -1.0)


def test_q_form_examples():
    p = make_system(2, 2, (1, 2), 0.1)
    dq = np.array([[0.2, -0.1], [-0.1, 0.05]])
    assert q_form(TangentVector(dq, np.zeros((2, 2))), p) == 0.0
    c = float(np.einsum("i,ij,ij", p.mass_array, dq, dq))
    assert q_form(TangentVector(dq, dq), p) == pytest.approx(c, rel=1e-15)


def test_generator_directions_do_not_change_velocity():
    p = make_system(3, 2, (1, 2, 3), 0.08)
    s = random_state(p, 5)
    traj = simulate(s, p, max_collisions=5)
    rec = traj.records[0]
    i, j = rec.pair
    k = 3 - i - j
    u = np.array([0.3, -0.7])
    dq = np.zeros((3, 2))
    dq[i] = dq[j] = u
    dq[k] = -(p.masses[i] + p.masses[j]) * u / p.masses[k]
    cm = collision_map(traj.v_pre[0], np.array(rec.normal), rec.pair, p)
    dq_s = to_scaled(dq, p)
    _, dv = cm.apply(dq_s, np.zeros_like(dq_s))
    assert np.allclose(dv, 0, atol=1e-14)


def test_collision_increases_q_and_keeps_section():
    p = make_system(3, 2, (1, 2, 3), 0.08)
    s = random_state(p, 9)
    traj = simulate(s, p, max_collisions=30)
    rng = np.random.default_rng(0)
    tv = section_tangent(s.v, p, rng)
    end = propagate(traj, tv)
    P = section_projector(traj.final.v, p)
    x = np.concatenate(end.scaled(p))
    assert np.allclose(np.kron(np.eye(2), P) @ x, x, atol=1e-10 * np.linalg.norm(x))


def test_contact_seed_head_on(pair_params, head_on):
    contact = _contact(head_on, pair_params)
    seed = unstable_seed(contact, (0, 1), pair_params)
    assert any("parallel" in w for w in seed.warnings)
    assert curvature_ratio(seed, pair_params) >= math.sqrt(2) / 0.1 * (1 - 1e-12)
    assert curvature_ratio(seed, pair_params) >= 14.142


def test_contact_seed_rejects_bad_w(pair_params, head_on):
    contact = _contact(head_on, pair_params)
    with pytest.raises(ContractError):
        unstable_seed(contact, (0, 1), pair_params, w=np.array([1.0, 0.0]))


@pytest.mark.parametrize("seed", range(5))
def test_unstable_front_seed_dominates_flat(seed):
    p = make_system(3, 2, (1, 1.5, 2), 0.08)
    s = random_state(p, seed)
    traj = simulate(s, p, max_collisions=12)
    k = len(traj) - 1
    rec = traj.records[k]
    contact = PhasePoint(traj.contact_q[k], traj.v_pre[k])
    from hardballs.tangent import _to_section, front_curvature
    M, _ = front_curvature(traj, "flat", 0.0, rec.time, k_lo=0, k_hi=k)
    front = _to_section(M, traj.v_pre[k], p)[0]
    flat = unstable_seed(contact, rec.pair, p)
    curved = unstable_seed(contact, rec.pair, p, front=front)
    assert curvature_ratio(curved, p) >= curvature_ratio(flat, p) * (1 - 1e-12)
    assert curvature_ratio(flat, p) >= rec.rel_speed / p.r * (1 - 1e-12)


def test_expansion_precondition(pair_params, head_on):
    traj = simulate(head_on, pair_params, max_collisions=4)
    tv = TangentVector([[0, 0.1], [0, -0.1]], np.zeros((2, 2)))
    with pytest.raises(ContractError):
        expansion_audit(traj, tv, 1.0)
    assert tangent_norm(propagate(traj, tv, 0.0, 0.0), pair_params) == tangent_norm(tv, pair_params)


def test_expansion_audit_random_orbit():
    p = make_system(3, 2, (1, 1.5, 2), 0.08)
    s = random_state(p, 21)
    traj = simulate(s, p, max_collisions=150)
    rec = traj.records[0]
    seed = unstable_seed(PhasePoint(traj.contact_q[0], traj.v_pre[0]), rec.pair, p)
    report = expansion_audit(traj, seed, curvature_ratio(seed, p), t_from=rec.time)
    assert report["ok"] and len(report["rows"]) > 100


def test_analytic_matches_float_fd_short():
    p = make_system(2, 2, (1, 1), 0.1)
    s = random_state(p, 4)
    T = 1.0
    traj = simulate(s, p, max_time=T)
    tv = section_tangent(s.v, p, np.random.default_rng(1))
    err, h = fd_relative_error(propagate(traj, tv), finite_difference_flow(s, tv, T, p), p)
    assert err < 1e-5


def test_analytic_matches_precise_fd():
    p = make_system(3, 2, (1, 2, 3), 0.08)
    s = random_state(p, 3)
    traj = simulate_precise(s, p, max_collisions=12)
    T = traj.elapsed + 0.5 * (traj.times[-1] - traj.times[-2])
    traj = simulate_precise(s, p, max_time=T)
    tv = section_tangent(s.v, p, np.random.default_rng(2))
    ana = propagate(traj, tv)
    growth = 10 * tangent_norm(ana, p) / tangent_norm(tv, p)
    fd = precise_difference_flow(traj, tv, growth=growth)
    err, _ = fd_relative_error(ana, {1: fd}, p)
    assert err < 1e-10


def test_q_audit_flags_nothing_on_positive_q():
    p = make_system(2, 2, (1, 1), 0.15)
    s = random_state(p, 2)
    traj = simulate(s, p, max_collisions=300)
    tv = section_tangent(s.v, p, np.random.default_rng(3))
    dq, _ = tv.scaled(p)
    tv = TangentVector.from_scaled(dq, dq, p)
    stats = q_audit(traj, tv)
    assert stats["ok"] and stats["events"] == 300


def test_head_on_orbit_stable_curvature_positive(pair_params, head_on):
    est = stable_subspace(head_on, 20.0, pair_params)
    assert est.flat.B.shape == (1, 1)
    assert est.flat.B[0, 0] > 0
    assert est.gap <= 1 / 20.0


@pytest.mark.parametrize("seed", range(3))
def test_sandwich_rows(seed):
    p = make_system(2, 2, (1, 1), 0.15)
    s = random_state(p, seed)
    rows = sandwich_steps(s, 10.0, p)
    for r in rows:
        assert r["gap"] <= r["gap_bound"]
        assert r["order_margin"] >= -1e-10 * r["scale"]
    for r in rows[1:]:
        assert r["flat_step_margin"] >= -1e-10 * r["scale"]
        assert r["candle_step_margin"] >= -1e-10 * r["scale"]


def test_contraction_preconditions():
    p = make_system(2, 2, (1, 1), 0.1)
    s = random_state(p, 0)
    with pytest.raises(ContractError):
        find_contracting_vector(s, 1.0, p)
    with pytest.raises(HorizonExhausted):
        find_contracting_vector(s, 1e300, p, max_collisions=5)


def test_contraction_bound_guaranteed():
    p = make_system(3, 2, (1, 1, 1), 0.1)
    s = random_state(p, 6)
    t, xi, info = find_contracting_vector(s, 10.0, p, require_bound=True)
    assert info["bound"] == pytest.approx(1 + t * info["G"] / p.r)
    assert info["dq_ratio"] < 1 / info["bound"] < 1 / 10.0
    assert info["measured_ratio"] < 1 / 10.0
    assert info["q_at_0"] <= 0


@pytest.mark.parametrize("seed", range(3))
def test_contraction_forward_check_agrees(seed):
    p = make_system(3, 2, (1, 1, 1), 0.1)
    s = random_state(p, seed)
    t, xi, info = find_contracting_vector(s, 10.0, p)
    assert info["measured_ratio"] < 0.1
    assert info["forward_ratio"] == pytest.approx(info["measured_ratio"], rel=1e-6)
    assert tangent_norm(xi, p) == pytest.approx(1.0)


@settings(max_examples=20)
@given(st.integers(0, 2**31), st.integers(2, 3), st.floats(0.5, 3))
def test_q_never_decreases(seed, N, mass):
    p = make_system(N, 2, (1.0,) * (N - 1) + (mass,), 0.1)
    s = random_state(p, seed)
    traj = simulate(s, p, max_collisions=40)
    tv = section_tangent(s.v, p, np.random.default_rng(seed))
    stats = q_audit(traj, tv)
    assert stats["q_violations"] == 0
    assert stats["max_flight_error"] <= 1e-10 or abs(stats["initial_q"]) < 1e-8


@settings(max_examples=20)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_propagation_is_linear(seed, a, b):
    p = make_system(3, 2, (1, 1, 1), 0.1)
    s = random_state(p, seed)
    traj = simulate(s, p, max_collisions=8)
    rng = np.random.default_rng(seed)
    x, y = section_tangent(s.v, p, rng), section_tangent(s.v, p, rng)
    combo = TangentVector(a * x.dq + b * y.dq, a * x.dv + b * y.dv)
    lhs = propagate(traj, combo)
    px, py = propagate(traj, x), propagate(traj, y)
    scale = tangent_norm(px, p) * abs(a) + tangent_norm(py, p) * abs(b) + 1e-300
    diff = TangentVector(lhs.dq - a * px.dq - b * py.dq, lhs.dv - a * px.dv - b * py.dv)
    assert tangent_norm(diff, p) <= 1e-9 * scale
