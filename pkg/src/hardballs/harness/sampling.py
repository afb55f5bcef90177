"""Random initial conditions."""
from __future__ import annotations

import numpy as np

from ..core import PhasePoint, StateError, SystemParams, find_overlap, from_scaled, project_reduced, to_scaled, wrap
from .rng import stream

DEFAULT_BUDGET = 100_000


class RejectionBudgetError(StateError):
    pass


def random_velocity(params: SystemParams, rng: np.random.Generator) -> np.ndarray:
    """Uniform on the unit sphere (mass metric) of the momentum-zero subspace."""
    x = rng.standard_normal(params.dim)
    w = project_reduced(from_scaled(x, params), params)
    x = to_scaled(w, params)
    return from_scaled(x / np.linalg.norm(x), params)


def random_positions(params: SystemParams, rng: np.random.Generator, budget: int = DEFAULT_BUDGET,
                     fixed: dict | None = None) -> np.ndarray:
    """Uniform overlap-free configuration by whole-configuration rejection.

    ``fixed`` maps ball labels to prescribed positions; the rest are drawn.
    """
    fixed = fixed or {}
    for _ in range(budget):
        q = rng.random((params.N, params.nu))
        for i, qi in fixed.items():
            q[i] = qi
        q = wrap(q)
        if find_overlap(q, params) is None:
            return q
    raise RejectionBudgetError(
        f"no overlap-free configuration in {budget} draws (r={params.r}); try a smaller radius")


def random_state(params: SystemParams, seed: int, index: int = 0, budget: int = DEFAULT_BUDGET) -> PhasePoint:
    """Normalized, overlap-free phase point drawn from stream ``(seed, index)``."""
    rng = stream(seed, index)
    q = random_positions(params, rng, budget)
    return PhasePoint(q, random_velocity(params, rng))
