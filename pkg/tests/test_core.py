import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hardballs.core import (
    ParameterError,
    PhasePoint,
    StateError,
    make_system,
    mass_inner,
    min_image,
    normalize_state,
    pair_images,
    project_reduced,
    reduced_basis,
    section_basis,
    to_scaled,
    wrap,
)
from hardballs.harness.sampling import random_state

finite = st.floats(-10, 10, allow_nan=False).filter(lambda x: x == 0 or abs(x) > 1e-100)


def test_pair_radius_equal_masses():
    p = make_system(2, 2, (1, 1), 0.1)
    assert p.pair_radius(0, 1) == pytest.approx(0.2 * math.sqrt(0.5), rel=1e-12)
    assert p.pair_radius(0, 1) == pytest.approx(0.141421, abs=1e-6)


def test_radius_too_large():
    with pytest.raises(ParameterError):
        make_system(2, 2, (1, 1), 0.3)


def test_unequal_masses():
    p = make_system(3, 2, (1, 2, 3), 0.05)
    assert p.total_mass == 6 and p.m_min == 1
    assert p.pair_radius(1, 2) == pytest.approx(0.1 * math.sqrt(6 / 5), rel=1e-12)
    assert p.pair_radius(1, 2) == pytest.approx(0.109545, abs=1e-6)


@pytest.mark.parametrize("args", [(1, 2, (1,), 0.1), (2, 1, (1, 1), 0.1), (2, 2, (1, -1), 0.1),
                                  (2, 2, (1,), 0.1), (2, 2, (1, 1), 0.0)])
def test_bad_parameters(args):
    with pytest.raises(ParameterError):
        make_system(*args)


def test_mass_inner_examples():
    p = make_system(2, 2, (1, 1), 0.1)
    s = random_state(p, 7)
    assert mass_inner(s.v, s.v, p) == pytest.approx(1.0, abs=1e-14)
    assert mass_inner([[1, 0], [0, 0]], [[0, 1], [0, 0]], p) == 0.0
    p23 = make_system(2, 2, (2, 3), 0.1)
    assert mass_inner([[1, 0], [1, 0]], [[1, 0], [-1, 0]], p23) == -1.0


def test_normalize_examples():
    p = make_system(2, 2, (1, 1), 0.1)
    q = [[0.25, 0.5], [0.75, 0.5]]
    s = normalize_state(q, [[2, 0], [0, 0]], p)
    assert np.allclose(s.v, [[1 / math.sqrt(2), 0], [-1 / math.sqrt(2), 0]], atol=1e-15)
    again = normalize_state(s.q, s.v, p)
    assert np.all(np.abs(again.v - s.v) <= np.spacing(np.abs(s.v)))
    with pytest.raises(StateError):
        normalize_state(q, [[0.3, 0.3], [0.3, 0.3]], p)


def test_normalize_rejects_overlap():
    p = make_system(2, 2, (1, 1), 0.1)
    with pytest.raises(StateError):
        normalize_state([[0.5, 0.5], [0.6, 0.5]], [[1, 0], [0, 0]], p)


def test_pair_images_examples():
    offsets, disp = pair_images([0.3, 0.3], [0.3, 0.3])
    assert len(offsets) == 9
    k = [i for i, o in enumerate(offsets) if tuple(o) == (0, 0)][0]
    assert np.array_equal(disp[k], [0, 0])
    offsets, disp = pair_images([0.9, 0.5], [0.1, 0.5])
    k = [i for i, o in enumerate(offsets) if tuple(o) == (1, 0)][0]
    assert np.allclose(disp[k], [0.2, 0.0])


def test_wrap_stays_in_unit_interval():
    assert wrap(np.array([-1e-18, 1.0, 2.5]))[0] in (0.0, 1.0 - 1e-18)
    assert np.all(wrap(np.array([-1e-18, 1.0, 2.5])) < 1.0)


@given(st.integers(2, 5), st.integers(2, 3), st.data())
def test_mass_inner_positive_definite(N, nu, data):
    masses = data.draw(st.lists(st.floats(0.1, 10), min_size=N, max_size=N))
    p = make_system(N, nu, masses, 0.01)
    u = data.draw(arrays(float, (N, nu), elements=finite))
    w = data.draw(arrays(float, (N, nu), elements=finite))
    assert mass_inner(u, w, p) == pytest.approx(mass_inner(w, u, p), rel=1e-12, abs=1e-12)
    assert mass_inner(u, u, p) >= 0
    if np.any(u):
        assert mass_inner(u, u, p) > 0


@given(st.integers(2, 5), st.integers(2, 3), st.integers(0, 2**32), st.data())
def test_normalize_state_properties(N, nu, seed, data):
    masses = data.draw(st.lists(st.floats(0.2, 5), min_size=N, max_size=N))
    p = make_system(N, nu, masses, 0.02)
    rng = np.random.default_rng(seed)
    from hardballs.harness.sampling import random_positions
    q = random_positions(p, rng)
    s = normalize_state(q, rng.standard_normal((N, nu)), p)
    assert s.is_normalized(p)
    t = normalize_state(s.q, s.v, p)
    assert np.all(np.abs(t.v - s.v) <= np.spacing(np.abs(s.v)))


@given(arrays(float, 2, elements=st.floats(0, 1, exclude_max=True)),
       arrays(float, 2, elements=st.floats(0, 1, exclude_max=True)),
       st.tuples(st.integers(-3, 3), st.integers(-3, 3)))
def test_pair_images_translation_invariant(qi, qj, shift):
    s = np.array(shift, dtype=float)
    o1, d1 = pair_images(qi, qj)
    o2, d2 = pair_images(qi + s, qj + s)
    assert np.array_equal(o1, o2)
    assert np.allclose(d1, d2, atol=1e-12)


@given(arrays(float, (3, 2), elements=st.floats(-5, 5)))
def test_min_image_range(d):
    m = min_image(d)
    assert np.all(np.abs(m) <= 0.5)
    assert np.allclose(np.rint(d - m), d - m)


@given(st.integers(2, 4), st.integers(2, 3), st.integers(0, 1000))
def test_bases_orthonormal(N, nu, seed):
    p = make_system(N, nu, tuple(1.0 + 0.5 * k for k in range(N)), 0.02)
    s = random_state(p, seed)
    Z = reduced_basis(p)
    E = section_basis(s.v, p)
    assert Z.shape == (p.dim, nu * (N - 1))
    assert E.shape == (p.dim, p.dim - nu - 1)
    assert np.allclose(E.T @ E, np.eye(E.shape[1]), atol=1e-12)
    v = to_scaled(s.v, p)
    assert np.allclose(E.T @ v, 0, atol=1e-12)
    w = project_reduced(np.random.default_rng(seed).standard_normal((N, nu)), p)
    assert np.allclose(p.mass_array @ w, 0, atol=1e-12)


def test_phase_point_shape_check():
    with pytest.raises(StateError):
        PhasePoint(np.zeros((2, 2)), np.zeros((3, 2)))
