"""Event-driven hard-ball flow on the torus.

Collisions are predicted pair by pair over the ``3**nu`` nearest lattice
images and kept in a heap with lazy invalidation: each scheduled event carries
the collision counts of its two balls, and is discarded on pop if either ball
has collided since. Because the image set is only exhaustive while the
relative displacement has moved by less than ``1 - 2r`` per coordinate, a
pair with no collision inside that window gets a *recheck* event instead.
"""
from __future__ import annotations

import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .core import (
    PhasePoint,
    StateError,
    SystemParams,
    image_offsets,
    min_image,
    pair_gap,
    wrap,
)

logger = logging.getLogger(__name__)

_COLLISION = 0
_RECHECK = 1
# fraction of the exhaustive-image window used for a prediction
_HORIZON_SAFETY = 0.9


class ContractError(ValueError):
    """Operation called outside its precondition (e.g. receding pair)."""


class ConsistencyError(RuntimeError):
    """Numerical state drifted out of the admissible phase space."""


class AccumulationError(RuntimeError):
    """Collision times accumulated; the dynamics forbid this, so it is a fault."""


class DegeneracyError(ValueError):
    """More than two collisions coincide; branching is not supported there."""


@dataclass(frozen=True)
class Tolerances:
    root: float = 1e-12
    contact: float = 1e-9
    overlap: float = 1e-9
    double_window: float = 1e-9
    tangency: float = 1e-6
    accumulation_window: int = 64
    accumulation_threshold: float = 1e-10


@dataclass(frozen=True)
class CollisionRecord:
    time: float
    pair: tuple[int, int]
    offset: tuple[int, ...]
    normal: tuple[float, ...]
    cos_phi: float
    rel_speed: float
    tangency_margin: float
    simultaneity_gap: float = math.inf

    def is_tangential(self, tol: float = Tolerances.tangency) -> bool:
        return self.cos_phi < tol

    def is_near_double(self, window: float = Tolerances.double_window) -> bool:
        return self.simultaneity_gap < window

    def as_dict(self) -> dict:
        # field order is part of the export format
        return {
            "time": self.time,
            "pair": list(self.pair),
            "offset": list(self.offset),
            "normal": list(self.normal),
            "cos_phi": self.cos_phi,
            "rel_speed": self.rel_speed,
            "tangency_margin": self.tangency_margin,
            "simultaneity_gap": None if math.isinf(self.simultaneity_gap) else self.simultaneity_gap,
        }


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A simulated orbit segment ``[0, elapsed]``.

    Besides the records it keeps, for every collision, the contact
    configuration and the velocities right before and after it; tangent and
    neutral-space computations replay the orbit from these.
    """

    params: SystemParams
    initial: PhasePoint
    records: tuple[CollisionRecord, ...]
    final: PhasePoint
    elapsed: float
    contact_q: np.ndarray
    v_pre: np.ndarray
    v_post: np.ndarray
    gap_window: int = field(default=Tolerances.accumulation_window)

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([rec.time for rec in self.records])

    @property
    def sequence(self) -> list[tuple[int, int]]:
        return [rec.pair for rec in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def collisions_before(self, t: float) -> int:
        """Number of collisions at times ``<= t``."""
        return int(np.searchsorted(self.times, t, side="right"))

    def velocity_at(self, t: float) -> np.ndarray:
        k = self.collisions_before(t)
        return self.initial.v if k == 0 else self.v_post[k - 1]

    def state_at(self, t: float) -> PhasePoint:
        """Phase point at time ``t`` (post-collision if ``t`` is a collision time)."""
        if not 0.0 <= t <= self.elapsed:
            raise ValueError(f"time {t} outside [0, {self.elapsed}]")
        k = self.collisions_before(t)
        if k == 0:
            q = self.initial.q + t * self.initial.v
            v = self.initial.v
        else:
            q = self.contact_q[k - 1] + (t - self.records[k - 1].time) * self.v_post[k - 1]
            v = self.v_post[k - 1]
        return PhasePoint(wrap(q), v)

    def midgap_time(self, k: int) -> float:
        """Midpoint of the free flight ending at collision ``k`` (0-based)."""
        t = self.times
        lo = 0.0 if k == 0 else t[k - 1]
        hi = self.elapsed if k >= len(t) else t[k]
        return 0.5 * (lo + hi)

    def reversed(self) -> "Trajectory":
        """The same orbit run backwards: ``(q, v) -> (q, -v)`` at the end time."""
        T = self.elapsed
        recs = tuple(replace(rec, time=T - rec.time) for rec in reversed(self.records))
        return Trajectory(
            self.params,
            self.final.reversed(),
            recs,
            self.initial.reversed(),
            T,
            self.contact_q[::-1].copy(),
            -self.v_post[::-1],
            -self.v_pre[::-1],
            self.gap_window,
        )

    def gap_statistics(self, window: int | None = None) -> dict:
        """Inter-collision gap empirics.

        ``beta`` is the smallest, over all windows of ``window`` consecutive
        collisions, of the largest gap inside the window.
        """
        window = window or self.gap_window
        gaps = np.diff(self.times)
        stats = {"collisions": len(self.records), "window": window,
                 "min_gap": float(gaps.min()) if gaps.size else None,
                 "beta": None}
        if gaps.size >= window - 1 and window > 1:
            w = np.lib.stride_tricks.sliding_window_view(gaps, window - 1)
            stats["beta"] = float(w.max(axis=1).min())
        return stats


def _relative_image_geometry(q: np.ndarray, i: int, j: int):
    """Contact vector ``e`` (unit, along q_i - q_j) and the image offset used."""
    d = q[j] - q[i]
    offset = -np.rint(d)
    rel = -(d + offset)
    return rel, tuple(int(o) for o in offset)


def normal_scaled(e: np.ndarray, i: int, j: int, params: SystemParams) -> np.ndarray:
    """Inner unit normal of the cylinder boundary, in scaled coordinates.

    It points out of the cylinder, i.e. into the allowed region.
    """
    mi, mj = params.masses[i], params.masses[j]
    s = math.sqrt(1 / mi + 1 / mj)
    n = np.zeros((params.N, params.nu))
    n[i] = e / (math.sqrt(mi) * s)
    n[j] = -e / (math.sqrt(mj) * s)
    return n.ravel()


def reflect_velocities(v: np.ndarray, e: np.ndarray, i: int, j: int, params: SystemParams) -> np.ndarray:
    """Elastic collision law: mass-metric reflection across the tangent hyperplane."""
    mi, mj = params.masses[i], params.masses[j]
    un = float((v[i] - v[j]) @ e)
    out = np.array(v, dtype=float)
    out[i] = v[i] - (2 * mj / (mi + mj)) * un * e
    out[j] = v[j] + (2 * mi / (mi + mj)) * un * e
    return out


def safe_horizon(w: np.ndarray, params: SystemParams) -> float:
    """Longest time for which the nearest images are exhaustive for a pair."""
    wmax = float(np.max(np.abs(w)))
    if wmax == 0.0:
        return math.inf
    return _HORIZON_SAFETY * (1.0 - 2 * params.r) / wmax


def _earliest_root(D: np.ndarray, w: np.ndarray, sigma: float, contact_tol: float):
    a = float(w @ w)
    if a == 0.0:
        return None
    b = D @ w
    c = np.einsum("ij,ij->i", D, D) - sigma * sigma
    disc = b * b - a * c
    ok = (b < 0) & (disc > 0) & (c > -2 * sigma * contact_tol)
    if not ok.any():
        return None
    idx = np.nonzero(ok)[0]
    # stable form of (-b - sqrt(disc)) / a; -b > 0 so no cancellation
    t = c[idx] / (-b[idx] + np.sqrt(disc[idx]))
    k = int(np.argmin(t))
    tk = float(t[k])
    Dk = D[idx[k]]
    for _ in range(2):
        p = Dk + tk * w
        fp = 2 * float(p @ w)
        if fp == 0.0:
            break
        tk -= (float(p @ p) - sigma * sigma) / fp
    return max(tk, 0.0), int(idx[k])


def next_pair_collision(state: PhasePoint, i: int, j: int, params: SystemParams,
                        horizon: float | None = None, tol: Tolerances = Tolerances()):
    """Earliest approaching contact of balls ``i`` and ``j``.

    Returns ``(t, offset)`` with ``offset`` the lattice image of ``q_j`` at
    the current positions, or ``None`` if no contact happens before
    ``horizon`` (default: the window in which the nearest images are
    exhaustive).
    """
    return _next_pair(state.q, state.v, i, j, params, horizon, tol)


def _next_pair(q, v, i, j, params, horizon, tol):
    w = v[j] - v[i]
    if horizon is None:
        horizon = safe_horizon(w, params)
    offsets = image_offsets(params.nu)
    D = q[j][None, :] + offsets - q[i][None, :]
    root = _earliest_root(D, w, 2 * params.r, tol.contact)
    if root is None or root[0] > horizon:
        return None
    t, k = root
    return t, tuple(int(o) for o in offsets[k])


def resolve_collision(state: PhasePoint, pair, offset, params: SystemParams,
                      time: float = 0.0, tol: Tolerances = Tolerances()):
    """Apply the collision law to ``pair`` at contact.

    Returns the post-collision phase point and the filled record.
    ``offset`` (the image of ``q_j``) may be ``None``; at contact the image
    is unique since ``2r < 1/2``.
    """
    i, j = sorted(pair)
    q, v = state.q, state.v
    rel, off = _relative_image_geometry(q, i, j)
    if offset is not None and pair[0] > pair[1]:
        offset = tuple(-o for o in offset)
    if offset is not None and tuple(int(o) for o in offset) != off:
        rel = -(q[j] + np.asarray(offset, dtype=float) - q[i])
        off = tuple(int(o) for o in offset)
    dist = float(np.linalg.norm(rel))
    if abs(dist - 2 * params.r) > tol.contact:
        raise ContractError(f"pair {(i, j)} not at contact: distance {dist!r}, expected {2 * params.r!r}")
    e = rel / dist
    approach = float((v[i] - v[j]) @ e)
    if approach > 0:
        raise ContractError(f"pair {(i, j)} is receding (normal velocity {approach:.3e})")
    v_new = reflect_velocities(v, e, i, j, params)
    record = _make_record(time, i, j, off, e, v, v_new, params)
    if record.cos_phi < tol.tangency:
        logger.warning("near-tangential collision %s at t=%.12g (cos phi=%.3e)", (i, j), time, record.cos_phi)
    return PhasePoint(q, v_new), record


def _make_record(time, i, j, off, e, v_pre, v_post, params) -> CollisionRecord:
    mi, mj = params.masses[i], params.masses[j]
    s = math.sqrt(1 / mi + 1 / mj)
    speed = math.sqrt(float(np.einsum("i,ij,ij->", params.mass_array, v_post, v_post)))
    rel_pre = v_pre[i] - v_pre[j]
    cos_phi = float((v_post[i] - v_post[j]) @ e) / s / speed if speed > 0 else 0.0
    return CollisionRecord(
        time=float(time),
        pair=(i, j),
        offset=off,
        normal=tuple(float(x) for x in e),
        cos_phi=cos_phi,
        rel_speed=float(np.linalg.norm(rel_pre)),
        tangency_margin=abs(float(rel_pre @ e)),
    )


def _check_normalized(state: PhasePoint, params: SystemParams):
    if not state.is_normalized(params):
        raise StateError("state is not normalized (zero momentum, kinetic energy 1/2)")


def simulate(state: PhasePoint, params: SystemParams, max_time: float | None = None,
             max_collisions: int | None = None, tol: Tolerances = Tolerances(),
             require_normalized: bool = True) -> Trajectory:
    """Run the event loop until ``max_time`` or ``max_collisions``.

    When stopped by the collision count the segment ends at the last
    collision (post-collision state); with ``max_time`` it ends exactly there.
    """
    if max_time is None and max_collisions is None:
        raise ValueError("give max_time and/or max_collisions")
    if max_time is not None and max_time < 0:
        raise ValueError("max_time must be non-negative")
    if require_normalized:
        _check_normalized(state, params)
    T = math.inf if max_time is None else float(max_time)
    n_max = math.inf if max_collisions is None else int(max_collisions)

    N = params.N
    q = np.array(state.q, dtype=float)
    v = np.array(state.v, dtype=float)
    t = 0.0
    counts = [0] * N
    heap: list = []
    seq = 0

    def schedule(i, j):
        nonlocal seq
        w = v[j] - v[i]
        horizon = safe_horizon(w, params)
        hit = _next_pair(q, v, i, j, params, horizon, tol)
        if hit is not None:
            heapq.heappush(heap, (t + hit[0], seq, _COLLISION, i, j, counts[i], counts[j]))
        elif math.isfinite(horizon):
            heapq.heappush(heap, (t + horizon, seq, _RECHECK, i, j, counts[i], counts[j]))
        seq += 1

    for i in range(N):
        for j in range(i + 1, N):
            schedule(i, j)

    records: list[CollisionRecord] = []
    contact_q, v_pre, v_post = [], [], []
    recent = deque(maxlen=tol.accumulation_window)

    while heap and len(records) < n_max:
        t_ev, _, kind, i, j, ci, cj = heap[0]
        if t_ev > T:
            break
        heapq.heappop(heap)
        if counts[i] != ci or counts[j] != cj:
            continue
        q = wrap(q + (t_ev - t) * v)
        t = t_ev
        if kind == _RECHECK:
            schedule(i, j)
            continue

        rel, off = _relative_image_geometry(q, i, j)
        dist = float(np.linalg.norm(rel))
        if abs(dist - 2 * params.r) > tol.contact:
            raise ConsistencyError(f"contact drift {dist - 2 * params.r:.3e} for pair {(i, j)} at t={t}")
        e = rel / dist
        v_new = reflect_velocities(v, e, i, j, params)
        rec = _make_record(t, i, j, off, e, v, v_new, params)
        if rec.cos_phi < tol.tangency:
            logger.warning("near-tangential collision %s at t=%.12g (cos phi=%.3e)", (i, j), t, rec.cos_phi)
        records.append(rec)
        contact_q.append(q.copy())
        v_pre.append(v.copy())
        v_post.append(v_new.copy())
        v = v_new
        counts[i] += 1
        counts[j] += 1

        for a in (i, j):
            for b in range(N):
                if b != a and not (a == j and b == i):
                    if pair_gap(q, a, b, params) < -tol.overlap:
                        raise ConsistencyError(f"overlap of balls {(a, b)} at t={t}")
                    schedule(min(a, b), max(a, b))

        recent.append(t)
        if len(recent) == recent.maxlen and recent[-1] - recent[0] < tol.accumulation_threshold:
            raise AccumulationError(
                f"{recent.maxlen} collisions within {recent[-1] - recent[0]:.3e} time units ending at t={t}")

    if math.isfinite(T):
        q = wrap(q + (T - t) * v)
        t = T
    records = _fill_simultaneity(records)
    shape = (0, params.N, params.nu)
    return Trajectory(
        params,
        state,
        tuple(records),
        PhasePoint(q, v),
        float(t),
        np.array(contact_q) if contact_q else np.zeros(shape),
        np.array(v_pre) if v_pre else np.zeros(shape),
        np.array(v_post) if v_post else np.zeros(shape),
        tol.accumulation_window,
    )


def _fill_simultaneity(records):
    times = [r.time for r in records]
    out = []
    for k, rec in enumerate(records):
        gap = math.inf
        if k > 0:
            gap = times[k] - times[k - 1]
        if k + 1 < len(times):
            gap = min(gap, times[k + 1] - times[k])
        out.append(replace(rec, simultaneity_gap=gap))
    return out


def enumerate_branches(state: PhasePoint, params: SystemParams, window: float = Tolerances.double_window,
                       tol: Tolerances = Tolerances()) -> list[Trajectory]:
    """Trajectory branches through the next collision event of ``state``.

    A simple double collision (two contacts within ``window`` sharing a ball)
    yields two branches, one per time ordering; otherwise the single
    continuation is returned. Each branch is a prefix ending right after the
    event.
    """
    pending = []
    for i in range(params.N):
        for j in range(i + 1, params.N):
            hit = next_pair_collision(state, i, j, params, tol=tol)
            if hit is not None:
                pending.append((hit[0], (i, j)))
    if not pending:
        return []
    pending.sort()
    t0 = pending[0][0]
    close = [p for p in pending if p[0] - t0 <= window]
    if len(close) > 2:
        raise DegeneracyError(f"{len(close)} collisions within {window}: {[p for _, p in close]}")
    if len(close) == 1:
        return [_branch(state, params, close, t0, tol)]
    (ta, pa), (tb, pb) = close
    if not set(pa) & set(pb):
        return [_branch(state, params, close, tb, tol)]
    return [_branch(state, params, [close[0], close[1]], tb, tol),
            _branch(state, params, [close[1], close[0]], tb, tol)]


def _branch(state, params, order, t_end, tol):
    """Resolve the listed contacts in the given order, each with its own contact normal."""
    geometry = []
    for t_c, (i, j) in order:
        qc = wrap(state.q + t_c * state.v)
        rel, off = _relative_image_geometry(qc, i, j)
        geometry.append((qc, i, j, off, rel / np.linalg.norm(rel)))
    times = sorted(t for t, _ in order)
    v = np.array(state.v, dtype=float)
    records, cq, vp, vq = [], [], [], []
    for slot, (qc, i, j, off, e) in enumerate(geometry):
        if float((v[i] - v[j]) @ e) >= 0:
            continue  # the earlier reflection turned this pair away: no contact on this branch
        v_new = reflect_velocities(v, e, i, j, params)
        records.append(_make_record(times[slot], i, j, off, e, v, v_new, params))
        cq.append(qc)
        vp.append(v.copy())
        vq.append(v_new)
        v = v_new
    q_end = wrap(state.q + t_end * state.v)
    return Trajectory(params, state, tuple(_fill_simultaneity(records)), PhasePoint(q_end, v), float(t_end),
                      np.array(cq), np.array(vp), np.array(vq), tol.accumulation_window)
