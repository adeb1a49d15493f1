"""Euclidean projections onto the output constraint sets.

Every spatial constraint binds to one output channel and acts on that
channel's flattened field. :func:`project` dispatches on the set type and
works on a full ``channels x ...`` output; the ``project_*`` functions act
on a single vector or matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np


@dataclass(frozen=True)
class Cardinality:
    """At most ``max_count`` nonzero entries in ``channel``."""

    channel: int
    max_count: int

    def __post_init__(self):
        if self.max_count < 0:
            raise ValueError(f"max_count must be >= 0, got {self.max_count}")
        if self.channel < 0:
            raise ValueError("channel must be >= 0")

    convex = False


@dataclass(frozen=True)
class L1Ball:
    channel: int
    radius: float

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if self.channel < 0:
            raise ValueError("channel must be >= 0")

    convex = True


@dataclass(frozen=True)
class MaxRank:
    """At most rank ``k`` for ``channel`` viewed as an H x W matrix."""

    channel: int
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"rank bound must be >= 1, got {self.k}")
        if self.channel < 0:
            raise ValueError("channel must be >= 0")

    convex = False


@dataclass(frozen=True)
class Intersection:
    members: tuple
    max_sweeps: int = 200
    tol: float = 1e-10

    def __post_init__(self):
        if len(self.members) == 0:
            raise ValueError("intersection needs at least one member set")
        object.__setattr__(self, "members", tuple(self.members))

    @property
    def convex(self):
        return all(m.convex for m in self.members)


ConstraintSet = Union[Cardinality, L1Ball, MaxRank, Intersection]


@dataclass(frozen=True)
class FractionBounds:
    """Lower/upper area fractions ``a1 <= area(class) <= a2``."""

    a1: float
    a2: float

    def __post_init__(self):
        if not (0.0 <= self.a1 <= self.a2 <= 1.0):
            raise ValueError(f"need 0 <= a1 <= a2 <= 1, got a1={self.a1}, a2={self.a2}")


def project_cardinality(v: np.ndarray, k: int) -> np.ndarray:
    """Keep the ``k`` largest-magnitude entries, zero the rest.

    Ties go to the lowest index, so the result is deterministic.
    """
    v = np.asarray(v)
    n = v.size
    if k < 0 or k > n:
        raise ValueError(f"cardinality bound {k} outside [0, {n}]")
    if k == n:
        return v.copy()
    flat = v.ravel()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(v.shape)


def project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Projection onto ``{x : ||x||_1 <= radius}`` by soft thresholding."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    v = np.asarray(v)
    a = np.abs(v.ravel())
    if a.sum() <= radius:
        return v.copy()
    if radius == 0:
        return np.zeros_like(v)
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, u.size + 1)
    # index 0 always qualifies in exact arithmetic; round-off can hide it
    # when radius is tiny next to the entries
    hits = np.nonzero(u * j > css - radius)[0]
    rho = hits[-1] if hits.size else 0
    theta = (css[rho] - radius) / (rho + 1.0)
    return (np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)).astype(v.dtype, copy=False)


def project_rank(X: np.ndarray, k: int) -> np.ndarray:
    """Best rank-``k`` approximation in Frobenius norm (truncated SVD)."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"rank projection needs a matrix, got shape {X.shape}")
    if k < 1 or k > min(X.shape):
        raise ValueError(f"rank bound {k} outside [1, {min(X.shape)}]")
    if k == min(X.shape):
        return X.copy()
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    return (U[:, :k] * s[:k]) @ Vt[:k]


def _project_channel(y, cset):
    field_ = y[cset.channel]
    if isinstance(cset, Cardinality):
        return project_cardinality(field_, cset.max_count)
    if isinstance(cset, L1Ball):
        return project_l1_ball(field_, cset.radius)
    if isinstance(cset, MaxRank):
        return project_rank(field_, cset.k)
    raise TypeError(f"not a channel constraint: {cset!r}")


def project(y: np.ndarray, cset: ConstraintSet) -> np.ndarray:
    """Project a full output ``y`` (channels first) onto ``cset``.

    Channels not bound by the set are returned unchanged.
    """
    y = np.asarray(y)
    if isinstance(cset, Intersection):
        out, _ = project_intersection(y, cset.members, cset.max_sweeps, cset.tol)
        return out
    if cset.channel >= y.shape[0]:
        raise ValueError(f"constraint binds channel {cset.channel}, output has {y.shape[0]}")
    out = y.copy()
    out[cset.channel] = _project_channel(y, cset)
    return out


def project_intersection(v, sets, max_sweeps: int = 200, tol: float = 1e-10):
    """Cyclic projections onto the intersection of ``sets``.

    Uses Dykstra's correction when every member is convex (the limit is then
    the exact projection) and plain cyclic projection otherwise. Stops when
    one full sweep moves the iterate by less than ``tol`` (Euclidean norm).

    ``v`` may be a 1-D vector, in which case it is treated as channel 0.
    Returns ``(point, converged)``.
    """
    sets = list(sets)
    if not sets:
        raise ValueError("intersection needs at least one set")
    v = np.asarray(v)
    vector_input = v.ndim == 1
    y = v[None] if vector_input else v
    if len(sets) == 1:
        out = project(y, sets[0])
        return (out[0] if vector_input else out), True

    dykstra = all(s.convex for s in sets)
    x = y.copy()
    incr = [np.zeros_like(y) for _ in sets] if dykstra else None
    converged = False
    for _ in range(max_sweeps):
        prev = x
        for i, s in enumerate(sets):
            if dykstra:
                z = x + incr[i]
                x_new = project(z, s)
                incr[i] = z - x_new
                x = x_new
            else:
                x = project(x, s)
        if np.linalg.norm(x - prev) < tol:
            converged = True
            break
    return (x[0] if vector_input else x), converged


def fraction_bounds_to_cardinality(b: FractionBounds, N: int, n_class: int = 2) -> list:
    """Upper cardinality bounds for a two-class, simplex-normalized output.

    ``a1 <= area(class 0) <= a2`` becomes ``card(ch0) <= floor(a2 N)`` and
    ``card(ch1) <= floor((1 - a1) N)``; the lower bound is implied by the
    normalization.
    """
    if n_class != 2:
        raise ValueError("area-fraction bounds are defined for two classes")
    # absorb round-off such as 0.29 * 100 = 28.999...96
    upper0 = math.floor(b.a2 * N + 1e-9)
    upper1 = math.floor((1.0 - b.a1) * N + 1e-9)
    return [Cardinality(0, min(upper0, N)), Cardinality(1, min(upper1, N))]


def check_nonempty(sets, n_class: int, N: int) -> None:
    """Reject cardinality bounds that no simplex-normalized output can meet.

    Every pixel has at least one nonzero class probability, so when every
    class carries a cardinality bound their sum must reach ``N``. Other
    combinations are not decidable here and pass silently.
    """
    bounds = {}
    for s in _flatten(sets):
        if isinstance(s, Cardinality):
            bounds[s.channel] = min(bounds.get(s.channel, N), s.max_count)
        if getattr(s, "channel", -1) >= n_class:
            raise ValueError(f"constraint binds channel {s.channel}, only {n_class} classes")
    if len(bounds) == n_class and sum(bounds.values()) < N:
        raise ValueError(
            f"cardinality bounds {sorted(bounds.items())} sum to {sum(bounds.values())} < {N} pixels; "
            "the constraint intersection is empty"
        )


def _flatten(sets):
    for s in sets:
        if isinstance(s, Intersection):
            yield from _flatten(s.members)
        else:
            yield s
