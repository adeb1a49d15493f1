"""Squared point-to-set distances, their gradients, and weighted sums.

The distance to a set and its gradient come from the projection alone:
``0.5 * ||P(y) - y||^2`` and ``y - P(y)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projections import ConstraintSet, project, project_intersection


def distance_sq(y: np.ndarray, cset: ConstraintSet) -> float:
    """Half the squared Euclidean distance from output ``y`` to ``cset``."""
    r = project(y, cset) - y
    return 0.5 * float(np.vdot(r, r))


def distance_grad(y: np.ndarray, cset: ConstraintSet) -> np.ndarray:
    """Gradient ``y - P(y)`` of :func:`distance_sq`; zero on feasible points.

    At projection ties (nonconvex sets) this is the direction to the
    projection that was selected.
    """
    return y - project(y, cset)


@dataclass(frozen=True)
class DistancePenalty:
    """Sum of weighted distance penalties, or one distance to the intersection.

    ``mode="sum"`` evaluates ``sum_i w_i * 0.5 ||P_i(y) - y||^2``.
    ``mode="intersection"`` projects once onto the intersection of all sets;
    the weights must then agree and the common weight scales the distance.
    """

    sets: tuple
    weights: tuple = ()
    mode: str = "sum"
    max_sweeps: int = 200
    tol: float = 1e-10

    def __post_init__(self):
        sets = tuple(self.sets)
        if not sets:
            raise ValueError("penalty needs at least one constraint set")
        weights = tuple(float(w) for w in self.weights) or (1.0,) * len(sets)
        if len(weights) != len(sets):
            raise ValueError("one weight per constraint set")
        if any(not w > 0 for w in weights):
            raise ValueError("penalty weights must be positive")
        if self.mode not in ("sum", "intersection"):
            raise ValueError(f"unknown penalty mode {self.mode!r}")
        if self.mode == "intersection" and len(set(weights)) != 1:
            raise ValueError("intersection mode takes a single common weight")
        object.__setattr__(self, "sets", sets)
        object.__setattr__(self, "weights", weights)

    def residuals(self, y):
        """Per-term ``(weight, y - P(y))`` pairs."""
        if self.mode == "intersection":
            if len(self.sets) == 1:
                p = project(y, self.sets[0])
            else:
                p, _ = project_intersection(y, self.sets, self.max_sweeps, self.tol)
            return [(self.weights[0], y - p)]
        return [(w, y - project(y, s)) for s, w in zip(self.sets, self.weights)]

    def value_and_grad(self, y):
        return penalty_value_and_grad(y, self)

    def distance(self, y) -> float:
        """Unweighted ``sum ||y - P(y)||^2`` over the terms (no factor 1/2)."""
        return float(sum(np.vdot(r, r) for _, r in self.residuals(y)))


def penalty_value_and_grad(y: np.ndarray, penalty: DistancePenalty):
    value = 0.0
    grad = np.zeros_like(y)
    for w, r in penalty.residuals(y):
        value += w * 0.5 * float(np.vdot(r, r))
        grad += w * r
    return value, grad

