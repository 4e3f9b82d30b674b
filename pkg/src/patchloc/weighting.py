"""K-means over database patch descriptors and the per-patch LSR weight.

A patch's weight is the sum of the alpha smallest cosine distances from
its descriptor to the cluster centroids: patches whose appearance is
common in the database sit close to a centroid and get a small weight,
rare (locally specific) patches get a large one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvariantViolation
from .vlad import PatchDescriptor

WEIGHT_FLOOR = 1e-6


@dataclass
class CentroidSet:
    """K-means result: centroid matrix plus the final objective value."""

    centroids: np.ndarray  # k x dim
    inertia: float

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise InvariantViolation("centroids must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise InvariantViolation("centroids contain non-finite entries")
        k = self.centroids.shape[0]
        if k > 1:
            for i in range(k):
                dup = np.all(self.centroids[i + 1:] == self.centroids[i], axis=1)
                if np.any(dup):
                    raise InvariantViolation("two centroids are identical")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||p - c||^2 expanded; clipped because cancellation can go slightly negative
    d2 = (
        np.sum(points ** 2, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers ** 2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding (several candidates per step, best kept)."""
    n = points.shape[0]
    n_trials = 2 + int(math.log(k)) if k > 1 else 1
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    closest = _sq_dists(points, centers[:1]).ravel()
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining mass already covered (duplicated points):
            # fall back to the first point not yet chosen as a centre
            chosen = {tuple(centers[i]) for i in range(c)}
            pick = next(
                (i for i in range(n) if tuple(points[i]) not in chosen), first
            )
            centers[c] = points[pick]
            continue
        probs = closest / total
        candidates = rng.choice(n, size=n_trials, p=probs)
        best_candidate = -1
        best_pot = np.inf
        best_closest = None
        for cand in candidates:
            cand_closest = np.minimum(
                closest, _sq_dists(points, points[cand][None, :]).ravel()
            )
            pot = cand_closest.sum()
            if pot < best_pot:
                best_pot = pot
                best_candidate = int(cand)
                best_closest = cand_closest
        centers[c] = points[best_candidate]
        closest = best_closest
    return centers


def kmeans(
    descriptors: np.ndarray | Sequence[np.ndarray],
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    rel_tol: float = 1e-6,
) -> CentroidSet:
    """Lloyd's algorithm with seeded greedy k-means++ initialization.

    The squared-Euclidean objective is asserted non-increasing across
    iterations; empty clusters are re-seeded from the point farthest
    from its assigned centroid. Deterministic for a given seed.
    """
    points = np.asarray(descriptors, dtype=np.float64)
    if points.ndim != 2:
        raise InvariantViolation("descriptors must form a 2-D matrix")
    n = points.shape[0]
    if k < 1:
        raise InvariantViolation("k must be >= 1")
    if n < k:
        raise InvariantViolation(f"need at least k={k} descriptors, got {n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(points, k, rng)

    prev_obj = np.inf
    assign = None
    for _ in range(max_iters):
        d2 = _sq_dists(points, centers)
        assign = np.argmin(d2, axis=1)
        obj = float(d2[np.arange(n), assign].sum())
        assert obj <= prev_obj * (1.0 + 1e-9) + 1e-12, "k-means objective increased"
        for c in range(k):
            members = points[assign == c]
            if len(members) == 0:
                farthest = int(np.argmax(d2[np.arange(n), assign]))
                centers[c] = points[farthest]
                d2 = _sq_dists(points, centers)
                assign = np.argmin(d2, axis=1)
            else:
                centers[c] = members.mean(axis=0)
        if prev_obj - obj <= rel_tol * max(obj, 1e-30):
            prev_obj = obj
            break
        prev_obj = obj

    d2 = _sq_dists(points, centers)
    inertia = float(d2[np.arange(n), np.argmin(d2, axis=1)].sum())
    return CentroidSet(centroids=centers, inertia=inertia)


def patch_weight(vector: np.ndarray, centroid_set: CentroidSet, alpha: int) -> float:
    """Sum of the alpha smallest cosine distances from descriptor to centroids.

    Centroid vectors are renormalized to unit length for the cosine
    computation. The result is clamped at WEIGHT_FLOOR so reciprocal
    weighting stays defined.
    """
    if not 1 <= alpha <= centroid_set.k:
        raise InvariantViolation(f"alpha={alpha} not in [1, {centroid_set.k}]")
    v = np.asarray(vector, dtype=np.float64)
    norm = np.linalg.norm(v)
    if abs(norm - 1.0) > 1e-4:
        raise InvariantViolation("patch descriptor must be unit-norm")
    c = centroid_set.centroids.astype(np.float64)
    c_norms = np.linalg.norm(c, axis=1)
    if np.any(c_norms == 0.0):
        raise InvariantViolation("cannot take cosine distance to a zero centroid")
    unit_c = c / c_norms[:, None]
    dists = np.clip(1.0 - unit_c @ v, 0.0, 2.0)
    dists.sort()
    return max(float(dists[:alpha].sum()), WEIGHT_FLOOR)


def weigh_index(descriptors: Iterable[PatchDescriptor], centroid_set: CentroidSet, alpha: int) -> None:
    """Populate the weight field of every descriptor in place (idempotent).

    Weights are rounded to float32 so persisted indexes reproduce the
    in-memory values exactly.
    """
    for desc in descriptors:
        desc.weight = float(np.float32(patch_weight(desc.vector, centroid_set, alpha)))
