"""Neutral spaces, advances and sufficiency of orbit segments.

For a segment ``[a, b]`` of a trajectory and a reference time ``t`` inside
it, a configuration displacement ``W`` (momentum-zero) is neutral when
shifting the phase point at time ``t`` by ``(W, 0)`` leaves the velocities at
``a`` and ``b`` unchanged to first order. The flow direction ``v(t)`` is
always neutral; the segment is sufficient when nothing else is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy.linalg import subspace_angles

from .core import PhasePoint, SystemParams, from_scaled, generator_distance, reduced_basis, to_scaled
from .flow import ContractError, Tolerances, Trajectory, normal_scaled, simulate
from .tangent import _map_for, section_projector

TANGENT = "tangent-propagation"
FINITE_DIFFERENCE = "finite-difference"


class SingularSegmentError(ValueError):
    pass


class NotNeutralError(ValueError):
    pass


@dataclass(frozen=True)
class NeutralTolerances:
    rank: float = 1e-6          # relative singular-value threshold
    band: float = 10.0          # ambiguity band factor around the threshold
    fd_growth: float = 1e30     # bound on the stretch of perturbations along the segment
    fd_digits: tuple = (15, 20, 25)  # step sweep: h = 1 / (fd_growth * 10**digits)
    neutral_residual: float = 1e-6  # accepted distance of an advance argument from the neutral space


@dataclass(frozen=True, eq=False)
class NeutralSpaceResult:
    """Kernel of ``W -> (dv at a, dv at b)`` over the momentum-zero subspace.

    ``basis`` holds per-ball arrays, orthonormal in the mass metric. When a
    singular value falls inside the ambiguity band, ``ambiguous`` is set and
    ``dimension_range`` brackets the possible dimensions.
    """

    basis: tuple
    dimension: int
    singular_values: tuple
    method: str
    a: float
    b: float
    ref_time: float
    threshold: float
    ambiguous: bool
    dimension_range: tuple
    velocity_residual: float
    step: float | None = None
    meta: dict = field(default_factory=dict)

    def scaled_basis(self, params: SystemParams) -> np.ndarray:
        if not self.basis:
            return np.zeros((params.dim, 0))
        return np.array([to_scaled(w, params) for w in self.basis]).T

    def margin(self) -> float:
        """Second smallest over largest singular value."""
        s = self.singular_values
        if len(s) < 2 or s[0] == 0:
            return 0.0
        return s[-2] / s[0]


def reference_time(traj: Trajectory, a: float, b: float) -> float:
    """Midpoint of the free flight (clipped to ``[a, b]``) containing ``(a + b) / 2``."""
    mid = 0.5 * (a + b)
    k = traj.collisions_before(mid)
    lo = traj.times[k - 1] if k > 0 else 0.0
    hi = traj.times[k] if k < len(traj.times) else traj.elapsed
    return 0.5 * (max(lo, a) + min(hi, b))


def _check_segment(traj: Trajectory, a: float, b: float, tol: Tolerances):
    if not 0 <= a < b <= traj.elapsed:
        raise ValueError(f"need 0 <= a < b <= {traj.elapsed}, got [{a}, {b}]")
    times = traj.times
    for t in (a, b):
        if times.size and np.min(np.abs(times - t)) < tol.double_window:
            raise SingularSegmentError(f"segment endpoint {t} is a collision moment")
    for rec in traj.records:
        if a < rec.time < b:
            if rec.is_tangential(tol.tangency):
                raise SingularSegmentError(f"tangential collision at t={rec.time}")
            if rec.is_near_double(tol.double_window):
                raise SingularSegmentError(f"near-double collision at t={rec.time}")


def _block_dv(traj: Trajectory, X: np.ndarray, t_from: float, t_to: float) -> np.ndarray:
    """``dv`` at ``t_to`` of the block of section vectors ``(X, 0)`` given at ``t_from``.

    The block is rescaled as a whole, so only its column space and the
    ratios between columns are meaningful.
    """
    lo, hi = traj.collisions_before(t_from), traj.collisions_before(t_to)
    dq, dv = X.copy(), np.zeros_like(X)
    t = t_from
    for k in range(lo, hi):
        tk = traj.records[k].time
        dq = dq + (tk - t) * dv
        t = tk
        cm = _map_for(traj, k)
        dq, dv = cm.apply(dq, dv)
        P = section_projector(cm.v_post, traj.params)
        dq, dv = P @ dq, P @ dv
        s = max(np.abs(dq).max(), np.abs(dv).max())
        if s > 1e100:
            dq, dv = dq / s, dv / s
    return dv


def _response_tangent(traj: Trajectory, a: float, b: float, t: float) -> np.ndarray:
    params = traj.params
    Z = reduced_basis(params)
    P = section_projector(traj.velocity_at(t), params)
    X = P @ Z  # the flow component of each W is neutral by itself
    fwd = _block_dv(traj, X, t, b)
    rev = traj.reversed()
    T = traj.elapsed
    bwd = _block_dv(rev, X, T - t, T - a)
    fwd = fwd / max(np.abs(fwd).max(), 1e-300)
    bwd = bwd / max(np.abs(bwd).max(), 1e-300)
    return np.vstack([fwd, bwd])


def _response_fd(traj: Trajectory, a: float, b: float, t: float, tol: NeutralTolerances):
    """Difference quotients of the endpoint velocities, in extended precision.

    The perturbed orbits are forced through the collision sequence of the
    segment; a step at which some pair fails to meet is too large and the
    next (smaller) one is tried.
    """
    from .precise import replay_precise, working_precision

    params = traj.params
    Z = reduced_basis(params)
    x = traj.state_at(t)
    rev = traj.reversed()
    T = traj.elapsed
    last = None
    for digits in tol.fd_digits:
        dps, e = working_precision(tol.fd_growth, digits)
        with mpmath.workdps(dps):
            h = mpmath.mpf(10) ** -e
            cols = []
            try:
                for c in range(Z.shape[1]):
                    W = from_scaled(Z[:, c], params)
                    ends = []
                    for sign in (1, -1):
                        q0 = [[mpmath.mpf(float(u)) + sign * h * mpmath.mpf(float(w)) for u, w in zip(r, rw)]
                              for r, rw in zip(x.q, W)]
                        _, vf = replay_precise(q0, x.v, traj, b, t0=t)
                        _, vb = replay_precise(q0, -x.v, rev, T - a, t0=T - t)
                        ends.append((vf, vb))
                    (vf_p, vb_p), (vf_m, vb_m) = ends
                    col = [float((p_ - m_) / (2 * h)) for rp, rm in zip(vf_p, vf_m) for p_, m_ in zip(rp, rm)]
                    col += [float((p_ - m_) / (2 * h)) for rp, rm in zip(vb_p, vb_m) for p_, m_ in zip(rp, rm)]
                    cols.append(col)
            except ContractError:
                continue
        sq = np.tile(np.sqrt(params.mass_array).repeat(params.nu), 2)
        A = np.array(cols).T * sq[:, None]
        if last is None:
            last = (A, 10.0 ** -e)
        else:
            return A, 10.0 ** -e, float(np.abs(A - last[0]).max() / max(np.abs(A).max(), 1e-300))
    if last is not None:
        return last[0], last[1], None
    raise SingularSegmentError("perturbed orbits left the collision sequence at every step")


def neutral_space(traj: Trajectory, a: float | None = None, b: float | None = None,
                  tol: NeutralTolerances = NeutralTolerances(), method: str = TANGENT,
                  ref_time: float | None = None, flow_tol: Tolerances = Tolerances()) -> NeutralSpaceResult:
    """Neutral space of the segment ``[a, b]`` at ``ref_time`` (default: :func:`reference_time`)."""
    params = traj.params
    a = 0.0 if a is None else a
    b = traj.elapsed if b is None else b
    _check_segment(traj, a, b, flow_tol)
    t = reference_time(traj, a, b) if ref_time is None else ref_time
    if not a <= t <= b:
        raise ValueError("reference time must lie in the segment")
    step = None
    meta = {}
    if method == TANGENT:
        A = _response_tangent(traj, a, b, t)
    elif method == FINITE_DIFFERENCE:
        A, step, spread = _response_fd(traj, a, b, t, tol)
        meta["step_spread"] = spread
    else:
        raise ValueError(f"unknown method {method!r}")
    Z = reduced_basis(params)
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    k = Z.shape[1]
    sig = np.zeros(k)
    sig[: s.size] = s
    smax = float(sig[0])
    thr = tol.rank * smax
    if smax == 0.0:
        null = np.arange(k)
        lo_dim = hi_dim = k
        ambiguous = False
    else:
        null = np.nonzero(sig < thr)[0]
        lo_dim = int(np.sum(sig < thr / tol.band))
        hi_dim = int(np.sum(sig < thr * tol.band))
        ambiguous = lo_dim != hi_dim
    K = Z @ vt[null].T if null.size else np.zeros((params.dim, 0))
    v = to_scaled(traj.velocity_at(t), params)
    v = v / np.linalg.norm(v)
    resid = float(np.linalg.norm(v - K @ (K.T @ v))) if K.shape[1] else 1.0
    return NeutralSpaceResult(
        basis=tuple(from_scaled(K[:, c], params) for c in range(K.shape[1])),
        dimension=int(null.size),
        singular_values=tuple(float(x) for x in sig),
        method=method,
        a=float(a),
        b=float(b),
        ref_time=float(t),
        threshold=float(thr),
        ambiguous=bool(ambiguous),
        dimension_range=(lo_dim, hi_dim),
        velocity_residual=resid,
        step=step,
        meta=meta,
    )


def principal_angles(r1: NeutralSpaceResult, r2: NeutralSpaceResult, params: SystemParams) -> np.ndarray:
    A, B = r1.scaled_basis(params), r2.scaled_basis(params)
    if A.shape[1] == 0 or B.shape[1] == 0:
        return np.zeros(0)
    return subspace_angles(A, B)


def is_sufficient(traj: Trajectory, a: float | None = None, b: float | None = None,
                  tol: NeutralTolerances = NeutralTolerances(), method: str = TANGENT):
    """``(dimension == 1, margin)`` for the segment ``[a, b]``."""
    res = neutral_space(traj, a, b, tol, method)
    return res.dimension == 1, res.margin()


def advance(traj: Trajectory, k: int, W: np.ndarray, t: float, check: bool = True,
            tol: NeutralTolerances = NeutralTolerances()) -> float:
    """First-order advance of collision ``k`` under the shift ``W`` applied at time ``t``.

    Positive values mean the collision happens earlier; ``W = v(t)`` gives
    exactly 1. The shift is split into its flow component ``c v(t)``, which
    just translates time, and a section part that is propagated to the
    contact; the contact time then moves by ``<dq, n> / <v-, n>`` with ``n``
    the boundary normal.
    """
    params = traj.params
    n = len(traj.records)
    if not 0 <= k < n:
        raise IndexError(f"collision index {k} outside [0, {n})")
    W = np.asarray(W, dtype=float)
    if check:
        res = neutral_space(traj, ref_time=t, tol=tol)
        K = res.scaled_basis(params)
        w = to_scaled(W, params)
        resid = np.linalg.norm(w - K @ (K.T @ w)) / max(np.linalg.norm(w), 1e-300)
        if resid > tol.neutral_residual:
            raise NotNeutralError(f"W is {resid:.3e} (relative) away from the neutral space")
    if traj.records[k].time > t:
        return _advance_forward(traj, k, W, t)
    rev = traj.reversed()
    return -_advance_forward(rev, n - 1 - k, W, traj.elapsed - t)


def _advance_forward(traj: Trajectory, k: int, W: np.ndarray, t: float) -> float:
    params = traj.params
    v = to_scaled(traj.velocity_at(t), params)
    w = to_scaled(W, params)
    c = float(w @ v) / float(v @ v)
    X = section_projector(traj.velocity_at(t), params) @ w
    dq, dv = X, np.zeros_like(X)
    s = t
    for j in range(traj.collisions_before(t), k):
        tj = traj.records[j].time
        dq = dq + (tj - s) * dv
        s = tj
        cm = _map_for(traj, j)
        dq, dv = cm.apply(dq, dv)
    rec = traj.records[k]
    dq = dq + (rec.time - s) * dv
    vm = to_scaled(traj.v_pre[k], params)
    nrm = normal_scaled(np.array(rec.normal), *rec.pair, params)
    return c + float(dq @ nrm) / float(vm @ nrm)


def transported_shift(traj: Trajectory, k: int, W: np.ndarray, t: float) -> np.ndarray:
    """The neutral shift ``W`` (given at time ``t``) as seen right before collision ``k``.

    A neutral shift leaves velocities alone but moves collision ``l`` earlier
    by ``advance_l``, which adds ``advance_l * (v+ - v-)`` to the
    displacement after that collision.
    """
    W = np.asarray(W, dtype=float)
    out = W.copy()
    tk = traj.records[k].time
    for l, rec in enumerate(traj.records):
        if t < rec.time < tk:
            sign = 1.0
        elif tk <= rec.time < t:
            sign = -1.0
        else:
            continue
        out += sign * advance(traj, l, W, t, check=False) * (traj.v_post[l] - traj.v_pre[l])
    return out


def advance_identity_residual(traj: Trajectory, k: int, W: np.ndarray, t: float) -> float:
    """Distance of ``W_k - advance * v_k^-`` from the generator subspace of collision ``k``.

    ``W_k`` is the shift transported to just before the collision
    (:func:`transported_shift`) and ``v_k^-`` the velocity there.
    """
    alpha = advance(traj, k, W, t, check=False)
    i, j = traj.records[k].pair
    Wk = transported_shift(traj, k, W, t)
    return generator_distance(Wk - alpha * traj.v_pre[k], i, j, traj.params)


def sufficiency_ladder(traj: Trajectory, a: float, ends, tol: NeutralTolerances = NeutralTolerances()):
    """Neutral dimensions of the nested segments ``[a, b]`` for ``b`` in ``ends``.

    Ends that coincide with a collision moment are nudged to the middle of
    the neighbouring flight.
    """
    out = []
    for b in sorted(ends):
        if b <= a:
            continue
        times = traj.times
        if times.size and np.min(np.abs(times - b)) < Tolerances.double_window:
            k = int(np.argmin(np.abs(times - b)))
            b = traj.midgap_time(k)
        res = neutral_space(traj, a, b, tol)
        out.append({"b": float(b), "dimension": res.dimension, "ambiguous": res.ambiguous,
                    "margin": res.margin()})
    return out


# --- empirical probe near tangential reflections --------------------------------------


def near_tangent_state(params: SystemParams, rng: np.random.Generator, threshold: float) -> PhasePoint:
    """Balls 0 and 1 in contact, separating with normal relative speed below ``threshold``."""
    from .harness.sampling import random_positions, random_velocity

    e = rng.standard_normal(params.nu)
    e /= np.linalg.norm(e)
    q0 = rng.random(params.nu)
    q1 = q0 - 2 * params.r * e * (1 + 1e-12)
    q = random_positions(params, rng, fixed={0: q0, 1: q1 - np.floor(q1)})
    v = random_velocity(params, rng)
    m0, m1 = params.masses[0], params.masses[1]
    target = rng.uniform(0.0, threshold)
    u = float((v[0] - v[1]) @ e)
    lam = (target - u) / (1 / m0 + 1 / m1)
    v = v.copy()
    v[0] += lam * e / m0
    v[1] -= lam * e / m1
    v /= math.sqrt(float(np.einsum("i,ij,ij->", params.mass_array, v, v)))
    return PhasePoint(q, v)


HIST_EDGES = tuple(float(x) for x in range(-16, 1))


def ansatz_probe(params: SystemParams, sample_count: int, horizon: float, seed: int,
                 threshold: float = 1e-3, rungs: int = 4, tol: NeutralTolerances = NeutralTolerances()) -> dict:
    """Sufficiency of forward orbits started just off a tangential reflection.

    Sample ``s`` draws from random stream ``(seed, s)``. Each orbit is tested
    on the nested segments ``[eps, horizon / 2**l]``; its verdict is the
    sufficiency of the longest one. An orbit with no collision in the window
    is marked ``inconclusive`` (a free flight says nothing about the orbit
    beyond it) and left out of ``sufficient_fraction``;
    ``sufficient_fraction_all`` counts it as not sufficient.
    """
    from .harness.rng import stream

    samples = []
    for s in range(sample_count):
        rng = stream(seed, s)
        entry = {"index": s}
        try:
            x = near_tangent_state(params, rng, threshold)
            entry["tangency_margin"] = abs(float((x.v[0] - x.v[1]) @ _contact_normal(x)))
            traj = simulate(x, params, max_time=horizon)
            first = traj.times[0] if len(traj) else horizon
            eps = min(1e-3 * horizon, 0.5 * first)
            ends = [horizon / 2 ** l for l in range(rungs - 1, -1, -1)]
            ladder = sufficiency_ladder(traj, eps, ends, tol)
            entry["collisions"] = len(traj)
            entry["ladder"] = ladder
            entry["verdict"] = bool(ladder and ladder[-1]["dimension"] == 1)
            entry["inconclusive"] = len(traj) == 0
            entry["margin"] = ladder[-1]["margin"] if ladder else 0.0
        except (ValueError, ArithmeticError, RuntimeError, ContractError) as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
        samples.append(entry)
    ok = [e for e in samples if "verdict" in e]
    conclusive = [e for e in ok if not e["inconclusive"]]
    margins = [e["margin"] for e in ok if e["margin"] > 0]
    counts, _ = np.histogram(np.log10(margins) if margins else [], bins=HIST_EDGES)
    return {
        "params": {"N": params.N, "nu": params.nu, "masses": list(params.masses), "r": params.r},
        "sample_count": sample_count,
        "horizon": horizon,
        "seed": seed,
        "threshold": threshold,
        "tolerances": {"rank": tol.rank, "band": tol.band},
        "samples": samples,
        "aggregate": {
            "completed": len(ok),
            "failures": sample_count - len(ok),
            "sufficient": sum(e["verdict"] for e in ok),
            "inconclusive": len(ok) - len(conclusive),
            "sufficient_fraction": (sum(e["verdict"] for e in conclusive) / len(conclusive)) if conclusive else None,
            "sufficient_fraction_all": (sum(e["verdict"] for e in ok) / len(ok)) if ok else None,
            "margin_histogram": {"log10_edges": list(HIST_EDGES), "counts": [int(c) for c in counts]},
        },
    }


def _contact_normal(x: PhasePoint) -> np.ndarray:
    d = x.q[0] - x.q[1]
    d = d - np.rint(d)
    return d / np.linalg.norm(d)
