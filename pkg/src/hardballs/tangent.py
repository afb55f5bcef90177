"""Linearized flow on the orthogonal section.

Tangent vectors ``(dq, dv)`` are pairs of per-ball arrays in the momentum-zero
subspace with ``dq`` and ``dv`` mass-orthogonal to the base velocity. Across a
free flight ``dq += dt * dv``; at a collision

    dq+ = R dq-,    dv+ = R (dv- + 2 <n, v+> V* K V dq-)

with ``R`` the mass-metric reflection in the tangent hyperplane of the
cylinder, ``V`` the projection of ``v-``-orthocomplement onto that hyperplane
along ``v-``, ``V*`` its adjoint and ``K`` the shape operator of the cylinder
(``1/r_ij`` on the sphere directions, zero on the generator).

All matrices here act on scaled coordinates (see :mod:`hardballs.core`).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    PhasePoint,
    SystemParams,
    from_scaled,
    mass_inner,
    min_image,
    section_basis,
    to_scaled,
    translation_basis,
)
from .flow import (
    CollisionRecord,
    ContractError,
    Tolerances,
    Trajectory,
    normal_scaled,
    reflect_velocities,
    simulate,
)

logger = logging.getLogger(__name__)

SECTION_RESIDUAL_TOL = 1e-10
# renormalize long propagations once the vector norm leaves [1/BIG, BIG]
_BIG = 1e100
_LN2 = math.log(2.0)


def _shift(x: float, d_log: float) -> float:
    """``x * exp(d_log)`` exactly, for ``d_log`` a difference of walk scales."""
    return math.ldexp(x, round(d_log / _LN2))


class AssemblyError(ArithmeticError):
    """A propagated vector left the orthogonal section."""


class ExpansionViolation(AssertionError):
    def __init__(self, message, time, ratio):
        super().__init__(message)
        self.time = time
        self.ratio = ratio


class HorizonExhausted(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TangentVector:
    dq: np.ndarray
    dv: np.ndarray
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "dq", np.array(self.dq, dtype=float))
        object.__setattr__(self, "dv", np.array(self.dv, dtype=float))

    def scaled(self, params: SystemParams):
        return to_scaled(self.dq, params), to_scaled(self.dv, params)

    @classmethod
    def from_scaled(cls, dq, dv, params: SystemParams, warnings=()) -> "TangentVector":
        return cls(from_scaled(dq, params), from_scaled(dv, params), tuple(warnings))

    def __mul__(self, c: float) -> "TangentVector":
        return TangentVector(self.dq * c, self.dv * c, self.warnings)

    __rmul__ = __mul__

    def time_reversed(self) -> "TangentVector":
        """Image under the involution ``(q, v) -> (q, -v)``."""
        return TangentVector(self.dq, -self.dv, self.warnings)


def q_form(tv: TangentVector, params: SystemParams) -> float:
    """Infinitesimal Lyapunov function ``<dq, dv>`` in the mass metric."""
    return mass_inner(tv.dq, tv.dv, params)


def tangent_norm(tv: TangentVector, params: SystemParams) -> float:
    return math.sqrt(mass_inner(tv.dq, tv.dq, params) + mass_inner(tv.dv, tv.dv, params))


def curvature_ratio(tv: TangentVector, params: SystemParams) -> float:
    """``<dq, dv> / ||dq||^2``, the curvature of the trajectory bundle."""
    return q_form(tv, params) / mass_inner(tv.dq, tv.dq, params)


def section_projector(v: np.ndarray, params: SystemParams) -> np.ndarray:
    """Orthogonal projector (scaled coordinates) onto the section at ``v``."""
    u = to_scaled(v, params)
    u = u / np.linalg.norm(u)
    T = translation_basis(params)
    return np.eye(params.dim) - np.outer(u, u) - T @ T.T


def section_tangent(v: np.ndarray, params: SystemParams, rng: np.random.Generator) -> TangentVector:
    """Random tangent vector in the orthogonal section at ``v``, unit full norm."""
    P = section_projector(v, params)
    dq = P @ rng.standard_normal(params.dim)
    dv = P @ rng.standard_normal(params.dim)
    s = math.sqrt(dq @ dq + dv @ dv)
    return TangentVector.from_scaled(dq / s, dv / s, params)


def propagate_free(tv: TangentVector, dt: float) -> TangentVector:
    if dt < 0:
        raise ValueError("free flight needs dt >= 0")
    return TangentVector(tv.dq + dt * tv.dv, tv.dv, tv.warnings)


@dataclass(frozen=True, eq=False)
class CollisionMap:
    """Linear data of one reflection, in scaled coordinates."""

    R: np.ndarray
    theta: np.ndarray  # 2 <n, v+> V* K V, restricted to the pre-collision section
    normal: np.ndarray
    v_pre: np.ndarray
    v_post: np.ndarray
    cos_phi: float

    def apply(self, dq: np.ndarray, dv: np.ndarray):
        return self.R @ dq, self.R @ (dv + self.theta @ dq)


def collision_map(v_pre: np.ndarray, e: np.ndarray, pair, params: SystemParams, v_post=None) -> CollisionMap:
    """Assemble ``R`` and ``2 <n, v+> V* K V`` for the contact of ``pair``."""
    i, j = pair
    e = np.asarray(e, dtype=float)
    if v_post is None:
        v_post = reflect_velocities(v_pre, e, i, j, params)
    n = normal_scaled(e, i, j, params)
    vm = to_scaled(v_pre, params)
    vp = to_scaled(v_post, params)
    c_in = float(n @ vm)
    c_out = float(n @ vp)
    if not c_in < 0:
        raise ContractError("collision map needs an approaching velocity")
    dim = params.dim
    eye = np.eye(dim)
    R = eye - 2.0 * np.outer(n, n)

    mi, mj = params.masses[i], params.masses[j]
    s2 = 1 / mi + 1 / mj
    L = np.zeros((dim, params.nu))
    for a in range(params.nu):
        L[i * params.nu + a, a] = 1 / math.sqrt(mi)
        L[j * params.nu + a, a] = -1 / math.sqrt(mj)
    P_L = L @ L.T / s2
    K = (P_L - np.outer(n, n)) / params.pair_radius(i, j)
    V = eye - np.outer(vm, n) / c_in
    Vs = eye - np.outer(n, vm) / c_in
    P_pre = section_projector(v_pre, params)
    theta = 2.0 * c_out * P_pre @ Vs @ K @ V @ P_pre
    speed = float(np.linalg.norm(vp))
    return CollisionMap(R, 0.5 * (theta + theta.T), n, v_pre, v_post, c_out / speed)


def _map_for(traj: Trajectory, k: int) -> CollisionMap:
    rec = traj.records[k]
    return collision_map(traj.v_pre[k], np.array(rec.normal), rec.pair, traj.params, traj.v_post[k])


def _reproject(x: np.ndarray, P: np.ndarray, what: str) -> np.ndarray:
    y = P @ x
    scale = max(np.linalg.norm(x), 1e-300)
    if np.linalg.norm(x - y) > SECTION_RESIDUAL_TOL * scale:
        raise AssemblyError(f"{what} left the orthogonal section (residual {np.linalg.norm(x - y) / scale:.3e})")
    return y


def propagate_collision(tv: TangentVector, record: CollisionRecord, state_at_contact: PhasePoint,
                        params: SystemParams) -> TangentVector:
    """Map a pre-collision section vector through the reflection of ``record``.

    ``state_at_contact`` carries the pre-collision velocities.
    """
    cm = collision_map(state_at_contact.v, np.array(record.normal), record.pair, params)
    dq, dv = tv.scaled(params)
    dq, dv = cm.apply(dq, dv)
    P = section_projector(cm.v_post, params)
    dq = _reproject(dq, P, "dq")
    dv = _reproject(dv, P, "dv")
    warnings = list(tv.warnings)
    if cm.cos_phi < Tolerances.tangency:
        warnings.append(f"ill-conditioned: near-tangential collision (cos phi={cm.cos_phi:.3e})")
    return TangentVector.from_scaled(dq, dv, params, warnings)


def _event_range(traj: Trajectory, t_from: float, t_to: float):
    """Indices of collisions with ``t_from < t_k <= t_to``."""
    if not 0 <= t_from <= t_to <= traj.elapsed:
        raise ValueError(f"need 0 <= t_from <= t_to <= {traj.elapsed}")
    return traj.collisions_before(t_from), traj.collisions_before(t_to)


def walk(traj: Trajectory, dq: np.ndarray, dv: np.ndarray, t_from: float, t_to: float,
         k_lo: int | None = None, k_hi: int | None = None):
    """Generator over the event boundaries of a propagation (scaled coordinates).

    Yields ``(t, kind, k, dq, dv, log_scale)`` with ``kind`` in
    ``{"pre", "post", "end"}``: the vector right before collision ``k``, right
    after it, and at ``t_to``. The true vector is ``exp(log_scale) * (dq, dv)``;
    the walk rescales by a power of two (exactly, so ``log_scale`` is a
    multiple of ``ln 2``) after a collision whenever the norm leaves
    ``[1/_BIG, _BIG]``. Collisions ``k_lo <= k < k_hi`` are applied (default:
    ``t_from < t_k <= t_to``).
    """
    lo, hi = _event_range(traj, t_from, t_to)
    lo = lo if k_lo is None else k_lo
    hi = hi if k_hi is None else k_hi
    t = t_from
    log_scale = 0.0
    for k in range(lo, hi):
        tk = traj.records[k].time
        dq = dq + (tk - t) * dv
        t = tk
        yield t, "pre", k, dq, dv, log_scale
        cm = _map_for(traj, k)
        dq, dv = cm.apply(dq, dv)
        P = section_projector(cm.v_post, traj.params)
        dq = _reproject(dq, P, "dq")
        dv = _reproject(dv, P, "dv")
        yield t, "post", k, dq, dv, log_scale
        s = math.sqrt(float(dq @ dq + dv @ dv))
        if s > _BIG or 0 < s < 1 / _BIG:
            e = math.frexp(s)[1]
            dq, dv = np.ldexp(dq, -e), np.ldexp(dv, -e)
            log_scale += e * _LN2
    dq = dq + (t_to - t) * dv
    yield t_to, "end", hi, dq, dv, log_scale


def propagate(traj: Trajectory, tv: TangentVector, t_from: float = 0.0, t_to: float | None = None) -> TangentVector:
    """Push ``tv`` (given at ``t_from``, post-collision) along ``traj`` to ``t_to``."""
    t_to = traj.elapsed if t_to is None else t_to
    dq, dv = tv.scaled(traj.params)
    warnings = list(tv.warnings)
    for _, kind, k, dq, dv, ls in walk(traj, dq, dv, t_from, t_to):
        if kind == "post" and traj.records[k].cos_phi < Tolerances.tangency:
            warnings.append(f"ill-conditioned: near-tangential collision {k}")
    f = math.exp(ls)
    return TangentVector.from_scaled(f * dq, f * dv, traj.params, warnings)


# --- finite-difference oracle ---------------------------------------------------

FD_STEPS = (1e-5, 1e-6, 1e-7)


def finite_difference_flow(state: PhasePoint, tv: TangentVector, T: float, params: SystemParams,
                           steps=FD_STEPS, tol: Tolerances = Tolerances()):
    """Central differences of the flow map ``S^T`` along ``tv``.

    Returns ``{h: TangentVector or None}``; ``None`` marks a step at which one
    of the perturbed orbits changed its collision sequence.
    """
    base = simulate(state, params, max_time=T, tol=tol, require_normalized=False).sequence
    out = {}
    for h in steps:
        ends = []
        for sign in (1.0, -1.0):
            x = PhasePoint(state.q + sign * h * tv.dq, state.v + sign * h * tv.dv)
            tr = simulate(x, params, max_time=T, tol=tol, require_normalized=False)
            if tr.sequence != base:
                ends = None
                break
            ends.append(tr.final)
        if ends is None:
            out[h] = None
            continue
        dq = min_image(ends[0].q - ends[1].q) / (2 * h)
        dv = (ends[0].v - ends[1].v) / (2 * h)
        out[h] = TangentVector(dq, dv)
    return out


def fd_relative_error(analytic: TangentVector, fd: dict, params: SystemParams):
    """Best relative error over the step sweep, and the step achieving it."""
    norm = tangent_norm(analytic, params)
    best = (math.inf, None)
    for h, est in fd.items():
        if est is None:
            continue
        diff = TangentVector(analytic.dq - est.dq, analytic.dv - est.dv)
        err = tangent_norm(diff, params) / norm
        if err < best[0]:
            best = (err, h)
    return best


# --- audits ------------------------------------------------------------------------


def q_audit(traj: Trajectory, tv0: TangentVector, t_from: float = 0.0, flight_tol: float = 1e-10) -> dict:
    """Check that Q never decreases and that each flight adds ``dt * ||dv||^2``."""
    params = traj.params
    dq, dv = tv0.scaled(params)
    stats = {"events": 0, "flights": 0, "q_violations": 0, "max_flight_error": 0.0,
             "min_collision_increment": math.inf, "initial_q": float(dq @ dq), "flight_tol": flight_tol}
    stats["initial_q"] = float(dq @ dv)
    q_prev, dv2_prev, t_prev, ls_prev = float(dq @ dv), float(dv @ dv), t_from, 0.0
    for t, kind, k, dq, dv, ls in walk(traj, dq, dv, t_from, traj.elapsed):
        # express the current Q in the scale of the previous boundary
        q_now = _shift(_shift(float(dq @ dv), ls - ls_prev), ls - ls_prev)
        if kind in ("pre", "end"):
            expect = q_prev + (t - t_prev) * dv2_prev
            err = abs(q_now - expect) / max(abs(expect), abs(q_prev), 1e-300)
            stats["max_flight_error"] = max(stats["max_flight_error"], err)
            stats["flights"] += 1
            if q_now < q_prev - 1e-14 * abs(q_prev):
                stats["q_violations"] += 1
        else:
            stats["events"] += 1
            stats["min_collision_increment"] = min(stats["min_collision_increment"],
                                                   (q_now - q_prev) / max(abs(q_prev), 1e-300))
            if q_now < q_prev - 1e-12 * abs(q_prev):
                stats["q_violations"] += 1
        q_prev, dv2_prev, t_prev, ls_prev = float(dq @ dv), float(dv @ dv), t, ls
    stats["ok"] = stats["q_violations"] == 0 and stats["max_flight_error"] <= flight_tol
    return stats


def expansion_audit(traj: Trajectory, tv0: TangentVector, c0: float, t_from: float = 0.0,
                    rel_slack: float = 1e-8, raise_on_failure: bool = True) -> dict:
    """Check ``||dq_t|| >= (1 + c0 (t - t_from)) ||dq_0||`` at every event.

    Also checks that ``<dq, dv> / ||dq||`` never decreases. ``tv0`` is taken at
    ``t_from`` (after the collision there, if any).
    """
    params = traj.params
    if not c0 > 0:
        raise ContractError("expansion audit needs c0 > 0")
    if not np.any(tv0.dq) or not curvature_ratio(tv0, params) >= c0:
        raise ContractError(f"initial curvature below c0={c0:.6g}")
    dq, dv = tv0.scaled(params)
    log_n0 = math.log(float(np.linalg.norm(dq)))
    rows, violations = [], []
    prev_mono, prev_ls = -math.inf, 0.0
    for t, kind, k, dq, dv, ls in walk(traj, dq, dv, t_from, traj.elapsed):
        nq = float(np.linalg.norm(dq))
        log_growth = ls + math.log(nq) - log_n0
        bound = 1.0 + c0 * (t - t_from)
        mono = float(dq @ dv) / nq
        if prev_ls != ls:
            prev_mono = _shift(prev_mono, prev_ls - ls)
        rows.append({"t": t, "kind": kind, "index": k, "log_norm_ratio": log_growth,
                     "log_bound": math.log(bound),
                     "log_q_over_norm": math.log(mono) + ls if mono > 0 else None})
        if log_growth < math.log(bound) + math.log1p(-rel_slack):
            violations.append((t, math.exp(log_growth) / bound, "expansion"))
        if mono < prev_mono - 1e-12 * abs(prev_mono):
            violations.append((t, mono / prev_mono, "monotonicity"))
        prev_mono, prev_ls = mono, ls
    report = {"c0": c0, "t_from": t_from, "rows": rows, "violations": violations,
              "ok": not violations, "rel_slack": rel_slack}
    if violations and raise_on_failure:
        t, ratio, what = violations[0]
        raise ExpansionViolation(f"{what} violated at t={t:.12g} (ratio {ratio:.12g})", t, ratio)
    return report


# --- Contact seeds and wavefront curvature ---------------------------------------


def contact_seed(state: PhasePoint, pair, params: SystemParams, front: np.ndarray | None = None,
                 w: np.ndarray | None = None):
    """Pre- and post-collision vectors of the expanding seed; see :func:`unstable_seed`."""
    i, j = sorted(pair)
    q, v = state.q, state.v
    rel_v = v[i] - v[j]
    d = min_image(q[i] - q[j])
    e = d / np.linalg.norm(d)
    speed = float(np.linalg.norm(rel_v))
    if speed == 0:
        raise ContractError("no relative motion: not a collision")
    vh = rel_v / speed
    if -(vh @ e) < Tolerances.tangency:
        raise ContractError("tangential (or receding) collision: seed undefined")
    warnings = []
    if w is None:
        w = e - (e @ vh) * vh
        if np.linalg.norm(w) < 1e-12:
            # relative velocity along the line of centres: no plane to respect
            warnings.append("parallel case: w unconstrained")
            for a in range(params.nu):
                c = np.zeros(params.nu)
                c[a] = 1.0
                w = c - (c @ vh) * vh
                if np.linalg.norm(w) > 0.5:
                    break
    else:
        w = np.asarray(w, dtype=float)
        if abs(w @ vh) > 1e-12 * np.linalg.norm(w):
            raise ContractError("w must be orthogonal to the relative velocity")
    w = w / np.linalg.norm(w)
    dq = np.zeros((params.N, params.nu))
    dq[i] = params.masses[j] * w
    dq[j] = -params.masses[i] * w
    dq_s = to_scaled(dq, params)
    if front is None:
        dv_s = np.zeros_like(dq_s)
    else:
        E = section_basis(v, params)
        dv_s = E @ (np.asarray(front) @ (E.T @ dq_s))
    cm = collision_map(v, e, (i, j), params)
    dq_p, dv_p = cm.apply(dq_s, dv_s)
    P = section_projector(cm.v_post, params)
    pre = TangentVector.from_scaled(dq_s, dv_s, params, warnings)
    post = TangentVector.from_scaled(_reproject(dq_p, P, "dq"), _reproject(dv_p, P, "dv"), params, warnings)
    return pre, post


def unstable_seed(state: PhasePoint, pair, params: SystemParams, front: np.ndarray | None = None,
                  w: np.ndarray | None = None) -> TangentVector:
    """Post-collision vector with curvature at least ``||v_i - v_j|| / r``.

    ``state`` is the configuration at contact of ``pair`` with pre-collision
    velocities. The pre-collision displacement is ``(m_j w, -m_i w)`` on the
    colliding balls with ``w`` orthogonal to the relative velocity and lying in
    the plane of the relative velocity and the line of centres. ``front`` is
    an unstable-front curvature operator in the section basis at the
    pre-collision velocity; ``None`` seeds with ``dv = 0``.
    """
    return contact_seed(state, pair, params, front, w)[1]


@dataclass(frozen=True, eq=False)
class WavefrontOperator:
    """Curvature ``B`` (section basis, positive semi-definite) of a front.

    The stable-space estimate is ``{(dq, -B dq)}``; ``signed`` is the
    second fundamental form of the corresponding concave front, ``-B``.
    """

    B: np.ndarray
    basis: np.ndarray
    flavor: str

    @property
    def signed(self) -> np.ndarray:
        return -self.B

    def stable_vector(self, dq: np.ndarray, params: SystemParams) -> TangentVector:
        """The stable-space vector over the configuration displacement ``dq``."""
        x = self.basis.T @ to_scaled(dq, params)
        return TangentVector.from_scaled(self.basis @ x, -(self.basis @ (self.B @ x)), params)


def _front_flight(kind, M, dt, P):
    if dt == 0:
        return kind, M
    if kind == "U":
        return kind, M + dt * P
    A = np.eye(M.shape[0]) + dt * M
    out = np.linalg.solve(A.T, M.T).T
    return kind, 0.5 * (out + out.T)


def _front_collision(kind, M, cm: CollisionMap, params):
    if kind == "U":
        E = section_basis(cm.v_pre, params)
        Us = E.T @ M @ E
        if np.linalg.cond(Us) > 1e14:
            raise ArithmeticError("candle front hit a collision before any free flight")
        M = E @ np.linalg.inv(Us) @ E.T
    out = cm.R @ (M + cm.theta) @ cm.R
    return "B", 0.5 * (out + out.T)


def front_curvature(traj: Trajectory, flavor: str, t_from: float = 0.0, t_to: float | None = None,
                    k_lo: int | None = None, k_hi: int | None = None, initial: np.ndarray | None = None):
    """Forward-propagate a front's curvature along ``traj``.

    ``flavor`` is ``"flat"`` (B = 0), ``"candle"`` (B = infinity) or
    ``"given"`` (``initial``, ambient scaled matrix). Returns the ambient
    curvature matrix at ``t_to`` (after the last applied collision).
    """
    params = traj.params
    t_to = traj.elapsed if t_to is None else t_to
    lo, hi = _event_range(traj, t_from, t_to)
    lo = lo if k_lo is None else k_lo
    hi = hi if k_hi is None else k_hi
    dim = params.dim
    if flavor == "flat":
        kind, M = "B", np.zeros((dim, dim))
    elif flavor == "candle":
        kind, M = "U", np.zeros((dim, dim))
    elif flavor == "given":
        kind, M = "B", np.array(initial, dtype=float)
    else:
        raise ValueError(f"unknown front flavor {flavor!r}")
    t = t_from
    v = traj.velocity_at(t_from) if lo == 0 or k_lo is None else traj.v_post[lo - 1]
    for k in range(lo, hi):
        tk = traj.records[k].time
        kind, M = _front_flight(kind, M, tk - t, section_projector(traj.v_pre[k], params))
        kind, M = _front_collision(kind, M, _map_for(traj, k), params)
        t = tk
        v = traj.v_post[k]
    kind, M = _front_flight(kind, M, t_to - t, section_projector(v, params))
    if kind == "U":
        E = section_basis(v, params)
        M = E @ np.linalg.inv(E.T @ M @ E) @ E.T
    return M, v


@dataclass(frozen=True, eq=False)
class StableSubspaceEstimate:
    flat: WavefrontOperator
    candle: WavefrontOperator
    gap: float
    horizon: float
    converged: bool
    collisions: int


def _to_section(M, v, params):
    E = section_basis(v, params)
    B = E.T @ M @ E
    return 0.5 * (B + B.T), E


def stable_subspace(state: PhasePoint, horizon: float, params: SystemParams, gap_tol: float = math.inf,
                    traj: Trajectory | None = None) -> StableSubspaceEstimate:
    """Sandwich the stable curvature operator at ``state`` between fronts.

    Flat and candle fronts are started at ``S^horizon(state)`` with reversed
    velocity and pushed back to ``state`` along the reversed orbit.
    """
    if traj is None:
        traj = simulate(state, params, max_time=horizon)
    else:
        traj = truncate(traj, horizon)
    if any(rec.is_tangential() for rec in traj.records):
        raise ContractError("singular segment: near-tangential collision")
    rev = traj.reversed()
    Mf, v_end = front_curvature(rev, "flat")
    Mc, _ = front_curvature(rev, "candle")
    Bf, E = _to_section(Mf, v_end, params)
    Bc, _ = _to_section(Mc, v_end, params)
    gap = float(np.linalg.norm(Bc - Bf, 2))
    return StableSubspaceEstimate(WavefrontOperator(Bf, E, "flat-front"), WavefrontOperator(Bc, E, "candle-front"),
                                  gap, float(horizon), gap <= gap_tol, len(traj))


def truncate(traj: Trajectory, t_end: float) -> Trajectory:
    """Restriction of ``traj`` to ``[0, t_end]``."""
    if not 0 <= t_end <= traj.elapsed:
        raise ValueError("truncation time outside the segment")
    k = traj.collisions_before(t_end)
    return Trajectory(traj.params, traj.initial, traj.records[:k], traj.state_at(t_end), float(t_end),
                      traj.contact_q[:k], traj.v_pre[:k], traj.v_post[:k], traj.gap_window)


def wavefront_ladder(state: PhasePoint, horizons, params: SystemParams, traj: Trajectory | None = None):
    """Stable-curvature sandwiches for an increasing list of horizons."""
    horizons = sorted(horizons)
    if traj is None:
        traj = simulate(state, params, max_time=horizons[-1])
    return [stable_subspace(state, T, params, traj=traj) for T in horizons]


def operator_order_margin(lower: np.ndarray, upper: np.ndarray) -> float:
    """Smallest eigenvalue of ``upper - lower`` (non-negative iff lower <= upper)."""
    D = upper - lower
    return float(np.linalg.eigvalsh(0.5 * (D + D.T)).min())


def sandwich_steps(state: PhasePoint, horizon: float, params: SystemParams, traj: Trajectory | None = None,
                   min_collisions: int = 2) -> list[dict]:
    """Front estimates at ``state`` for every pull-back horizon up to ``horizon``.

    The horizons are the mid-flight times after each collision (and
    ``horizon`` itself). For consecutive horizons ``T < T'`` the flat
    estimate must not decrease and the candle estimate must not increase in
    operator order; at each horizon flat <= candle and their gap is at most
    ``1 / T``. Margins are smallest eigenvalues of the relevant differences,
    so all of them are non-negative when the sandwich holds.
    """
    if traj is None:
        traj = simulate(state, params, max_time=horizon)
    else:
        traj = truncate(traj, horizon)
    ends = [traj.midgap_time(k) for k in range(min_collisions, len(traj))] + [horizon]
    rows, prev = [], None
    for T in ends:
        est = stable_subspace(state, T, params, traj=traj)
        Bf, Bc = est.flat.B, est.candle.B
        row = {"T": float(T), "collisions": est.collisions, "gap": est.gap, "gap_bound": 1.0 / T,
               "order_margin": operator_order_margin(Bf, Bc),
               "flat_min_eig": float(np.linalg.eigvalsh(Bf).min()),
               "scale": float(max(np.linalg.norm(Bc, 2), 1.0))}
        if prev is not None:
            row["flat_step_margin"] = operator_order_margin(prev[0], Bf)
            row["candle_step_margin"] = operator_order_margin(Bc, prev[1])
        rows.append(row)
        prev = (Bf, Bc)
    return rows


# --- contraction search ----------------------------------------------------------


FORWARD_CHECK_GROWTH = 1e6


def _propagate_log(traj: Trajectory, tv: TangentVector, t_from: float, t_to: float):
    """Unit-norm image of ``tv`` and the log of its norm ratio (no overflow)."""
    dq, dv = tv.scaled(traj.params)
    n0 = math.sqrt(float(dq @ dq + dv @ dv))
    for _, _, _, dq, dv, ls in walk(traj, dq / n0, dv / n0, t_from, t_to):
        pass
    n = math.sqrt(float(dq @ dq + dv @ dv))
    return TangentVector.from_scaled(dq / n, dv / n, traj.params), ls + math.log(n)


def find_contracting_vector(state: PhasePoint, L: float, params: SystemParams, max_collisions: int = 2000,
                            seed: str = "unstable", G: float | None = None, require_bound: bool = False):
    """Find ``t`` and a stable vector at ``state`` shrunk by more than ``L`` at time ``t``.

    Works on the time-reversed orbit: for each collision with relative speed at
    least ``G`` (time ``t_w``), build the expanding seed there, push it back
    to the reversed ``state``, and map the result to a stable vector at
    ``state``. By reversibility the forward image of that vector at ``t_w`` is
    the reversed seed itself, so the contraction ratio is the inverse of the
    seed's expansion. Pushing the vector forward numerically only agrees
    while the expansion is modest (rounding grows along the unstable
    direction), so that check is reported as ``forward_ratio`` up to
    ``FORWARD_CHECK_GROWTH``. With ``require_bound`` only witnesses whose
    time already guarantees the ``dq`` contraction (``1 + t_w G / r > L``) are
    accepted.

    Returns ``(t_w, vector, info)``; the vector has unit norm.
    """
    from .symbolic import g_threshold

    if not L > 1:
        raise ContractError("L must exceed 1: the ratio at t = 0 is 1")
    if G is None:
        G = g_threshold(params.masses)
    traj = simulate(state, params, max_collisions=max_collisions)
    if not traj.records:
        raise HorizonExhausted(f"no collisions (G={G:.6g})")
    T = traj.elapsed
    rev = traj.reversed()
    n = len(traj)
    for k, rec in enumerate(traj.records):
        if rec.rel_speed < G:
            continue
        t_w = rec.time
        bound = 1.0 + t_w * G / params.r
        if require_bound and not bound > L:
            continue
        kr = n - 1 - k  # index of the witness in the reversed orbit
        tau_w = rev.records[kr].time
        contact = PhasePoint(rev.contact_q[kr], rev.v_pre[kr])
        front = None
        if seed == "unstable":
            Mu, v_u = front_curvature(rev, "flat", 0.0, tau_w, k_lo=0, k_hi=kr)
            front = _to_section(Mu, rev.v_pre[kr], params)[0]
        eta_pre, eta_post = contact_seed(contact, rec.pair, params, front=front)
        audit = expansion_audit(rev, eta_post, curvature_ratio(eta_post, params), t_from=tau_w,
                                raise_on_failure=False)
        eta_end, log_growth = _propagate_log(rev, eta_post, tau_w, T)
        xi0 = eta_end.time_reversed()
        log_ratio = math.log(tangent_norm(eta_pre, params) / tangent_norm(eta_post, params)) - log_growth
        dq_pre = math.sqrt(mass_inner(eta_pre.dq, eta_pre.dq, params)) / tangent_norm(eta_post, params)
        dq_end = math.sqrt(mass_inner(eta_end.dq, eta_end.dq, params))
        dq_log_ratio = math.log(dq_pre / dq_end) - log_growth
        if log_ratio < -math.log(L):
            forward = None
            if log_growth < math.log(FORWARD_CHECK_GROWTH):
                fwd = propagate(traj, xi0, 0.0, t_w)
                forward = tangent_norm(fwd, params)
            info = {"witness_index": k, "pair": rec.pair, "rel_speed": rec.rel_speed, "G": G,
                    "bound": bound, "measured_ratio": math.exp(log_ratio), "log_ratio": log_ratio,
                    "dq_ratio": math.exp(dq_log_ratio), "forward_ratio": forward,
                    "q_at_0": q_form(xi0, params), "audit_ok": audit["ok"], "seed": seed}
            return t_w, xi0, info
    speeds = [rec.rel_speed for rec in traj.records]
    raise HorizonExhausted(f"no witness achieved ratio < 1/{L} within {n} collisions "
                           f"(G={G:.6g}, max rel speed {max(speeds):.6g})")
