"""Extended-precision orbits and finite differences (validation oracles).

A double-precision orbit of a hard-ball gas loses roughly one significant
digit per collision, so after a dozen collisions it no longer shadows the
exact orbit of its own initial point. The routines here redo the event loop
in ``mpmath`` so that analytic tangent maps can be compared with
finite differences of the true flow on segments with many collisions.
"""
from __future__ import annotations

import itertools

import mpmath
import numpy as np

from .core import PhasePoint, SystemParams, wrap
from .flow import ContractError, Trajectory, _fill_simultaneity, _make_record, _relative_image_geometry
from .tangent import TangentVector

DPS = 50


def _mp(a):
    return [[x if isinstance(x, mpmath.mpf) else mpmath.mpf(float(x)) for x in row] for row in a]


def _to_float(a) -> np.ndarray:
    return np.array([[float(x) for x in row] for row in a])


def _advance(q, v, s):
    for row, vel in zip(q, v):
        for a in range(len(row)):
            row[a] += s * vel[a]


def _reflect(v, e, i, j, m):
    nu = len(e)
    vr = mpmath.fsum((v[i][a] - v[j][a]) * e[a] for a in range(nu))
    ci, cj = 2 * m[j] / (m[i] + m[j]), 2 * m[i] / (m[i] + m[j])
    for a in range(nu):
        v[i][a] -= ci * vr * e[a]
        v[j][a] += cj * vr * e[a]


def _contact_time(d, w, two_r):
    """Smallest approaching root of ``|d + s w| = 2r``, or ``None``."""
    A = mpmath.fsum(x * x for x in w)
    if A == 0:
        return None
    B = mpmath.fsum(x * y for x, y in zip(d, w))
    C = mpmath.fsum(x * x for x in d) - two_r ** 2
    disc = B * B - A * C
    if not (B < 0 and disc > 0):
        return None
    return C / (-B + mpmath.sqrt(disc))


def simulate_precise(state: PhasePoint, params: SystemParams, max_time: float | None = None,
                     max_collisions: int | None = None, dps: int = DPS) -> Trajectory:
    """Event-driven flow at ``dps`` digits, rounded to a float :class:`Trajectory`.

    Same stopping rules as :func:`hardballs.flow.simulate`. Every pair and
    every nearest image is tested at each event, so this is only meant for
    small systems and short segments.
    """
    if max_time is None and max_collisions is None:
        raise ValueError("give max_time and/or max_collisions")
    n_max = max_collisions if max_collisions is not None else float("inf")
    nu, N = params.nu, params.N
    offsets = list(itertools.product((-1, 0, 1), repeat=nu))
    records, cq, vp, vq = [], [], [], []
    with mpmath.workdps(dps):
        T = None if max_time is None else mpmath.mpf(max_time)
        two_r = 2 * mpmath.mpf(params.r)
        m = [mpmath.mpf(x) for x in params.masses]
        q, v = _mp(state.q), _mp(state.v)
        t = mpmath.mpf(0)
        while len(records) < n_max:
            best = None
            for i in range(N):
                for j in range(i + 1, N):
                    w = [v[j][a] - v[i][a] for a in range(nu)]
                    d0 = [q[j][a] - q[i][a] for a in range(nu)]
                    d0 = [x - mpmath.nint(x) for x in d0]
                    for off in offsets:
                        d = [d0[a] + off[a] for a in range(nu)]
                        s = _contact_time(d, w, two_r)
                        if s is not None and s >= 0 and (best is None or s < best[0]):
                            best = (s, i, j, d, w)
            # nearest images are exhaustive only for a bounded time; recheck past it
            wmax = max(max(abs(v[j][a] - v[i][a]) for a in range(nu))
                       for i in range(N) for j in range(i + 1, N))
            horizon = 0.9 * (1 - two_r) / wmax if wmax > 0 else mpmath.inf
            if best is None or best[0] > horizon:
                step = horizon
                if T is not None and t + step >= T:
                    break
                if step == mpmath.inf:
                    break
                _advance(q, v, step)
                t += step
                continue
            s, i, j, d, w = best
            if T is not None and t + s > T:
                break
            _advance(q, v, s)
            t += s
            e = [-(d[a] + s * w[a]) / two_r for a in range(nu)]
            v_before = _to_float(v)
            _reflect(v, e, i, j, m)
            q_f = wrap(_to_float(q))
            _, off = _relative_image_geometry(q_f, i, j)
            e_f = np.array([float(x) for x in e])
            v_after = _to_float(v)
            records.append(_make_record(float(t), i, j, off, e_f, v_before, v_after, params))
            cq.append(q_f)
            vp.append(v_before)
            vq.append(v_after)
        if T is not None:
            _advance(q, v, T - t)
            t = T
        final = PhasePoint(wrap(_to_float(q)), _to_float(v))
    shape = (0, N, nu)
    return Trajectory(params, state, tuple(_fill_simultaneity(records)), final, float(t),
                      np.array(cq) if cq else np.zeros(shape),
                      np.array(vp) if vp else np.zeros(shape),
                      np.array(vq) if vq else np.zeros(shape))


def replay_precise(q0, v0, traj: Trajectory, T, t0=0):
    """Flow ``(q0, v0)`` from ``t0`` to ``T`` at the current mpmath precision, forcing the pairs of ``traj``.

    Only the records with ``t0 < time <= T`` are replayed. Positions are not
    wrapped. For each collision the lattice image is the one that puts the
    pair at (approximately) the recorded contact; the contact time is
    re-solved at the working precision, and a pair that no longer meets
    raises :class:`ContractError`.
    """
    params = traj.params
    nu = params.nu
    two_r = 2 * mpmath.mpf(params.r)
    m = [mpmath.mpf(x) for x in params.masses]
    q, v = _mp(q0), _mp(v0)
    t = mpmath.mpf(t0)
    for rec in traj.records:
        if rec.time <= t0:
            continue
        if rec.time > T:
            break
        i, j = rec.pair
        d = [q[j][a] - q[i][a] for a in range(nu)]
        w = [v[j][a] - v[i][a] for a in range(nu)]
        guess = [float(d[a] + (rec.time - t) * w[a]) for a in range(nu)]
        shift = [round(-2 * params.r * rec.normal[a] - guess[a]) for a in range(nu)]
        d = [d[a] + shift[a] for a in range(nu)]
        s = _contact_time(d, w, two_r)
        if s is None:
            raise ContractError(f"precise replay lost contact at collision t={rec.time}")
        _advance(q, v, s)
        t += s
        _reflect(v, [-(d[a] + s * w[a]) / two_r for a in range(nu)], i, j, m)
    _advance(q, v, mpmath.mpf(T) - t)
    return q, v


def working_precision(growth: float, digits: int):
    """``(dps, log10 step)`` for a difference quotient through a ``growth``-fold stretch."""
    lg = max(0, int(np.ceil(np.log10(max(growth, 1.0)))))
    return 2 * (lg + digits) + 10, lg + digits


def precise_difference_flow(traj: Trajectory, tv: TangentVector, T: float | None = None,
                            growth: float = 1e40, digits: int = 20) -> TangentVector:
    """Central difference of ``S^T`` along ``tv`` with the collision sequence of ``traj``.

    ``growth`` bounds the factor by which the segment can stretch ``tv``.
    The step is ``h = 1 / (growth * 10**digits)`` so the perturbed orbits
    stay in the linear regime, and the working precision is raised until the
    rounding error of the difference quotient is ``10**-digits`` relative.
    """
    T = traj.elapsed if T is None else T
    dps, e = working_precision(growth, digits)
    with mpmath.workdps(dps):
        hh = mpmath.mpf(10) ** -e
        ends = []
        for sign in (1, -1):
            q0 = [[mpmath.mpf(float(x)) + sign * hh * mpmath.mpf(float(d)) for x, d in zip(r, dr)]
                  for r, dr in zip(traj.initial.q, tv.dq)]
            v0 = [[mpmath.mpf(float(x)) + sign * hh * mpmath.mpf(float(d)) for x, d in zip(r, dr)]
                  for r, dr in zip(traj.initial.v, tv.dv)]
            ends.append(replay_precise(q0, v0, traj, mpmath.mpf(T)))
        (qp, vp), (qm, vm) = ends
        dq = np.array([[float((a - b) / (2 * hh)) for a, b in zip(r1, r2)] for r1, r2 in zip(qp, qm)])
        dv = np.array([[float((a - b) / (2 * hh)) for a, b in zip(r1, r2)] for r1, r2 in zip(vp, vm)])
    return TangentVector(dq, dv)
