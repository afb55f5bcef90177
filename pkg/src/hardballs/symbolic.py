"""Collision graphs, richness and the relative-velocity bounds.

``f_bound`` evaluates the recursion

    f(a; one mass) = 0,   f(a; two masses) = a,
    f(a; D) = 2 sqrt(M_D / m_D) * max over two-class partitions (D1, D2) of D
              of [a + f(a; D1) + f(a; D2)]

where ``M_D`` and ``m_D`` are the total and the smallest mass of ``D``.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import SystemParams


class PreconditionError(ValueError):
    pass


class WitnessNotFound(AssertionError):
    def __init__(self, message, max_rel_speed, G):
        super().__init__(message)
        self.max_rel_speed = max_rel_speed
        self.G = G


class EnvelopeViolation(AssertionError):
    pass


@dataclass(frozen=True)
class CollisionGraph:
    n_vertices: int
    edges: tuple[tuple[int, int], ...]

    @property
    def multiplicity(self) -> Counter:
        return Counter(self.edges)

    def components(self) -> list[set[int]]:
        parent = list(range(self.n_vertices))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j in self.edges:
            parent[find(i)] = find(j)
        groups: dict[int, set[int]] = {}
        for a in range(self.n_vertices):
            groups.setdefault(find(a), set()).add(a)
        return sorted(groups.values(), key=min)

    def is_connected(self) -> bool:
        return len(self.components()) == 1


def _pairs(records):
    return [tuple(sorted(getattr(r, "pair", r))) for r in records]


def build_graph(records, from_index: int, to_index: int, n_vertices: int) -> CollisionGraph:
    """Graph on ``n_vertices`` balls with the edges of ``records[from_index:to_index]``.

    ``records`` may hold :class:`CollisionRecord` objects or bare pairs.
    """
    if not 0 <= from_index <= to_index <= len(records):
        raise IndexError(f"bad slice [{from_index}, {to_index}) of {len(records)} records")
    return CollisionGraph(n_vertices, tuple(_pairs(records[from_index:to_index])))


def richness(records, C: int, n_vertices: int):
    """Greedy split of the sequence into consecutive connected blocks.

    A block closes as soon as its graph connects all balls. Returns
    ``(is_rich, blocks)`` with blocks as half-open ``(start, stop)`` index
    ranges; the sequence is ``C``-rich iff there are at least ``C`` blocks.
    Blocks never overlap; counting overlapping connected windows would be a
    weaker notion and is not offered.
    """
    if C < 1:
        raise ValueError("C must be >= 1")
    pairs = _pairs(records)
    blocks = []
    start = 0
    parent = list(range(n_vertices))
    n_comp = n_vertices

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for k, (i, j) in enumerate(pairs):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            n_comp -= 1
        if n_comp == 1:
            blocks.append((start, k + 1))
            start = k + 1
            parent = list(range(n_vertices))
            n_comp = n_vertices
    return len(blocks) >= C, blocks


@lru_cache(maxsize=None)
def _f_unit(masses: tuple[float, ...]) -> float:
    """``f(1; masses)`` for a sorted mass tuple."""
    n = len(masses)
    if n == 1:
        return 0.0
    if n == 2:
        return 1.0
    counts = Counter(masses)
    kinds = sorted(counts)
    best = -math.inf
    # sub-multisets D1 with D1 and its complement both nonempty; each partition
    # appears twice (D1, D2) and (D2, D1), which the max does not mind
    for take in itertools.product(*(range(counts[m] + 1) for m in kinds)):
        size = sum(take)
        if size == 0 or size == n:
            continue
        d1, d2 = [], []
        for m, c in zip(kinds, take):
            d1 += [m] * c
            d2 += [m] * (counts[m] - c)
        best = max(best, 1.0 + _f_unit(tuple(d1)) + _f_unit(tuple(d2)))
    return 2.0 * math.sqrt(sum(masses) / masses[0]) * best


def f_bound(a: float, masses) -> float:
    """Bound on every relative speed given all collision relative speeds <= ``a``."""
    if not a > 0:
        raise ValueError("a must be positive")
    masses = tuple(sorted(float(m) for m in masses))
    if not masses or not all(m > 0 for m in masses):
        raise ValueError("masses must be positive")
    return a * _f_unit(masses)


def f_bound_bruteforce(a: float, masses) -> float:
    """Same recursion over labelled subsets; exponential, for cross-checks."""
    masses = tuple(float(m) for m in masses)

    @lru_cache(maxsize=None)
    def f(labels: frozenset) -> float:
        if len(labels) == 1:
            return 0.0
        if len(labels) == 2:
            return a
        lab = sorted(labels)
        ms = [masses[i] for i in lab]
        best = -math.inf
        for r in range(1, len(lab)):
            for d1 in itertools.combinations(lab, r):
                d1 = frozenset(d1)
                best = max(best, a + f(d1) + f(labels - d1))
        return 2.0 * math.sqrt(sum(ms) / min(ms)) * best

    return f(frozenset(range(len(masses))))


SAFETY = 0.99


def g_threshold(masses) -> float:
    """Relative-speed threshold guaranteed on connected segments of normalized orbits."""
    masses = tuple(float(m) for m in masses)
    if len(masses) < 2:
        raise ValueError("need at least two balls")
    M = sum(masses)
    return SAFETY * M ** -0.5 / f_bound(1.0, masses)


def witness_collision(records, params: SystemParams, G: float | None = None):
    """First record with relative speed at least ``G`` (default :func:`g_threshold`)."""
    if not build_graph(records, 0, len(records), params.N).is_connected():
        raise PreconditionError("collision graph of the segment is not connected")
    G = g_threshold(params.masses) if G is None else G
    for rec in records:
        if rec.rel_speed >= G:
            return rec
    top = max(rec.rel_speed for rec in records)
    raise WitnessNotFound(f"no collision with relative speed >= G={G:.6g} (max {top:.6g})", top, G)


def max_relative_speed(v: np.ndarray) -> float:
    d = v[:, None, :] - v[None, :, :]
    return float(np.sqrt(np.max(np.sum(d * d, axis=-1))))


def relative_speed_envelope(trajectory, a: float, raise_on_failure: bool = True) -> dict:
    """Check every pairwise relative speed against ``2 a sqrt(M / m)`` along the orbit.

    The initial relative speeds must all be at most ``a``. Velocities are
    sampled at the start and after every collision (they are constant in
    between).
    """
    params = trajectory.params
    v0 = trajectory.initial.v
    if max_relative_speed(v0) > a:
        raise PreconditionError(f"initial relative speed {max_relative_speed(v0):.6g} exceeds a={a}")
    bound = 2 * a * math.sqrt(params.total_mass / params.m_min)
    worst = max_relative_speed(v0)
    worst_at = 0.0
    for rec, v in zip(trajectory.records, trajectory.v_post):
        s = max_relative_speed(v)
        if s > worst:
            worst, worst_at = s, rec.time
        if s > bound and raise_on_failure:
            raise EnvelopeViolation(f"relative speed {s:.6g} > {bound:.6g} at t={rec.time}")
    return {"a": a, "bound": bound, "max_rel_speed": worst, "at_time": worst_at,
            "max_ratio": worst / bound, "samples": len(trajectory.records) + 1, "ok": worst <= bound}
