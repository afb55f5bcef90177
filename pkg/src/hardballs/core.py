"""System parameters, phase points and the kinetic-energy (mass) metric.

Ball labels are 0-based throughout the package. Positions live in the unit
torus and are stored as coordinates in ``[0, 1)``; velocities are arbitrary
vectors. Arrays have shape ``(N, nu)``.

Internally much of the linear algebra is done in *scaled* coordinates
``x * sqrt(m_i)``, in which the mass metric becomes the Euclidean one.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MOMENTUM_TOL = 1e-12
ENERGY_TOL = 1e-12


class ParameterError(ValueError):
    """A system parameter violates its admissible domain."""


class StateError(ValueError):
    """A phase point is degenerate or violates the no-overlap condition."""


@dataclass(frozen=True)
class SystemParams:
    N: int
    nu: int
    masses: tuple[float, ...]
    r: float
    total_mass: float = field(init=False)
    m_min: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total_mass", float(sum(self.masses)))
        object.__setattr__(self, "m_min", float(min(self.masses)))

    @property
    def mass_array(self) -> np.ndarray:
        return np.asarray(self.masses, dtype=float)

    @property
    def sqrt_m(self) -> np.ndarray:
        return np.sqrt(self.mass_array)[:, None]

    @property
    def dim(self) -> int:
        """Dimension nu*N of the unreduced configuration space."""
        return self.N * self.nu

    def pair_radius(self, i: int, j: int) -> float:
        mi, mj = self.masses[i], self.masses[j]
        return 2.0 * self.r * math.sqrt(mi * mj / (mi + mj))


def make_system(N: int, nu: int, masses, r: float) -> SystemParams:
    """Validate the external parameters and build a :class:`SystemParams`."""
    if int(N) != N or N < 2:
        raise ParameterError(f"ball count N must be an integer >= 2, got {N!r}")
    if int(nu) != nu or nu < 2:
        raise ParameterError(f"dimension nu must be an integer >= 2, got {nu!r}")
    masses = tuple(float(m) for m in masses)
    if len(masses) != N:
        raise ParameterError(f"expected {N} masses, got {len(masses)}")
    if not all(math.isfinite(m) and m > 0 for m in masses):
        raise ParameterError("masses must be positive")
    if not (math.isfinite(r) and r > 0):
        raise ParameterError(f"radius must be positive, got {r!r}")
    if not 2 * r < 0.5:
        raise ParameterError(f"radius violates 2r < 1/2 (r={r!r})")
    return SystemParams(int(N), int(nu), masses, float(r))


@dataclass(frozen=True, eq=False)
class PhasePoint:
    """Positions ``q`` and velocities ``v``, both of shape ``(N, nu)``.

    Construction does not enforce the normalizations; use
    :func:`normalize_state` or check :meth:`is_normalized`.
    """

    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        v = np.array(self.v, dtype=float)
        if q.shape != v.shape or q.ndim != 2:
            raise StateError(f"q and v must share an (N, nu) shape, got {q.shape} and {v.shape}")
        q.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "v", v)

    def momentum(self, params: SystemParams) -> np.ndarray:
        return params.mass_array @ self.v

    def energy(self, params: SystemParams) -> float:
        return 0.5 * mass_inner(self.v, self.v, params)

    def is_normalized(self, params: SystemParams, tol: float = MOMENTUM_TOL) -> bool:
        return bool(
            np.all(np.abs(self.momentum(params)) < tol)
            and abs(2 * self.energy(params) - 1) < max(tol, ENERGY_TOL)
        )

    def reversed(self) -> "PhasePoint":
        return PhasePoint(self.q, -self.v)

    @property
    def x(self) -> np.ndarray:
        """The phase point as one flat vector ``(Q, V)``."""
        return np.concatenate([self.q.ravel(), self.v.ravel()])


def wrap(q: np.ndarray) -> np.ndarray:
    """Map coordinates to ``[0, 1)``."""
    q = q - np.floor(q)
    # q - floor(q) can round up to exactly 1.0 for tiny negative q
    return np.where(q >= 1.0, 0.0, q)


def min_image(d: np.ndarray) -> np.ndarray:
    """Minimum-image representative of a torus displacement."""
    return d - np.rint(d)


def mass_inner(u, w, params: SystemParams) -> float:
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    shape = (params.N, params.nu)
    if u.shape != shape or w.shape != shape:
        raise ValueError(f"expected vectors of shape {shape}, got {u.shape} and {w.shape}")
    return float(np.einsum("i,ij,ij->", params.mass_array, u, w))


def mass_norm(u, params: SystemParams) -> float:
    return math.sqrt(mass_inner(u, u, params))


def project_reduced(w: np.ndarray, params: SystemParams) -> np.ndarray:
    """Mass-orthogonal projection onto the momentum-zero subspace Z."""
    w = np.asarray(w, dtype=float)
    mean = params.mass_array @ w / params.total_mass
    return w - mean[None, :]


def generator_distance(w: np.ndarray, i: int, j: int, params: SystemParams) -> float:
    """Mass-metric distance from ``w`` to the generator subspace {w_i = w_j}.

    The orthocomplement of the generator subspace is
    ``L = {(u/m_i, -u/m_j) at (i, j), 0 elsewhere}``; the distance is the
    norm of the projection onto ``L``.
    """
    mi, mj = params.masses[i], params.masses[j]
    rel = np.asarray(w[i] - w[j], dtype=float)
    return float(np.linalg.norm(rel) / math.sqrt(1 / mi + 1 / mj))


def normalize_state(q, v_raw, params: SystemParams, overlap_tol: float = 0.0) -> PhasePoint:
    """Remove the centre-of-mass velocity and rescale to kinetic energy 1/2."""
    q = wrap(np.asarray(q, dtype=float))
    v = np.asarray(v_raw, dtype=float)
    if q.shape != (params.N, params.nu) or v.shape != q.shape:
        raise StateError(f"expected arrays of shape {(params.N, params.nu)}")
    pair = find_overlap(q, params, overlap_tol)
    if pair is not None:
        raise StateError(f"balls {pair[0]} and {pair[1]} overlap")
    if np.all(np.abs(params.mass_array @ v) < MOMENTUM_TOL):
        v_red = v
    else:
        v_red = project_reduced(v, params)
    e2 = mass_inner(v_red, v_red, params)
    if not e2 > 1e-300:
        raise StateError("velocity is a pure translation; nothing left after momentum removal")
    # leave energies that are 1 up to rounding alone, so normalizing is idempotent
    if abs(e2 - 1.0) > 8 * v.size * np.finfo(float).eps:
        v_red = v_red / math.sqrt(e2)
    return PhasePoint(q, v_red)


@lru_cache(maxsize=None)
def image_offsets(nu: int) -> np.ndarray:
    return np.array(list(itertools.product((-1, 0, 1), repeat=nu)), dtype=float)


def pair_images(qi, qj):
    """All ``3**nu`` lattice translates ``q_j + offset - q_i``.

    Returns ``(offsets, displacements)``, each of shape ``(3**nu, nu)``.
    """
    qi = np.asarray(qi, dtype=float)
    qj = np.asarray(qj, dtype=float)
    offsets = image_offsets(qi.shape[0])
    return offsets, qj[None, :] + offsets - qi[None, :]


def find_overlap(q: np.ndarray, params: SystemParams, tol: float = 0.0):
    """First pair ``(i, j)`` closer than ``2r - tol`` in any image, else ``None``."""
    sigma = 2 * params.r - tol
    for i in range(params.N):
        d = min_image(q[i + 1:] - q[i])
        dist = np.sqrt(np.sum(d * d, axis=1))
        hit = np.nonzero(dist < sigma)[0]
        if hit.size:
            return i, i + 1 + int(hit[0])
    return None


def pair_gap(q: np.ndarray, i: int, j: int, params: SystemParams) -> float:
    """Center distance minus ``2r`` under the minimum image convention."""
    d = min_image(q[j] - q[i])
    return float(np.linalg.norm(d) - 2 * params.r)


def to_scaled(w: np.ndarray, params: SystemParams) -> np.ndarray:
    """Flatten a per-ball array into scaled coordinates (mass metric -> Euclidean)."""
    return (np.asarray(w, dtype=float) * params.sqrt_m).ravel()


def from_scaled(x: np.ndarray, params: SystemParams) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(params.N, params.nu) / params.sqrt_m


def translation_basis(params: SystemParams) -> np.ndarray:
    """Orthonormal scaled-coordinate basis of uniform translations, shape (nu*N, nu)."""
    cols = []
    for a in range(params.nu):
        e = np.zeros((params.N, params.nu))
        e[:, a] = 1.0
        x = to_scaled(e, params)
        cols.append(x / np.linalg.norm(x))
    return np.array(cols).T


def reduced_basis(params: SystemParams) -> np.ndarray:
    """Orthonormal scaled-coordinate basis of Z, shape (nu*N, nu*(N-1))."""
    T = translation_basis(params)
    P = np.eye(params.dim) - T @ T.T
    return _gram_schmidt(P.T, params.dim - params.nu)


def _gram_schmidt(candidates, count: int, start=None, tol: float = 1e-10) -> np.ndarray:
    """Classical Gram-Schmidt (twice) over candidate rows; returns columns."""
    basis = [] if start is None else [np.asarray(b, dtype=float) for b in start]
    out = []
    for c in candidates:
        w = np.array(c, dtype=float)
        for _ in range(2):
            for b in basis:
                w -= (b @ w) * b
        nrm = np.linalg.norm(w)
        if nrm > tol:
            w /= nrm
            basis.append(w)
            out.append(w)
            if len(out) == count:
                break
    if len(out) != count:
        raise ArithmeticError(f"Gram-Schmidt produced {len(out)} of {count} vectors")
    return np.array(out).T


def section_basis(v: np.ndarray, params: SystemParams) -> np.ndarray:
    """Orthonormal scaled-coordinate basis of the orthogonal section at ``v``.

    Gram-Schmidt runs over the coordinate basis projected onto Z, with the
    unit velocity placed first, so the result is a deterministic function of
    ``v``. Shape ``(nu*N, nu*N - nu - 1)``.
    """
    vs = to_scaled(project_reduced(v, params), params)
    vs = vs / np.linalg.norm(vs)
    T = translation_basis(params)
    P = np.eye(params.dim) - T @ T.T
    d = params.dim - params.nu - 1
    return _gram_schmidt(P.T, d, start=[vs])
