"""Pairwise patch matching between a query and a reference image.

The pipeline is: cosine distance matrix -> reciprocal-weight Hadamard
reweighting -> mutual nearest neighbours -> spatial consistency score.
Matrices are plain numpy arrays with query patches on the rows and
reference patches on the columns.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvariantViolation
from .patches import PatchGrid
from .vlad import PatchDescriptor


class Match(NamedTuple):
    i: int        # query patch index
    j: int        # reference patch index
    value: float  # matrix entry the pair was selected on


class PairResult(NamedTuple):
    score: float
    mean_distance: float  # mean matched matrix value, 0.0 when no matches
    n_matches: int


def _as_matrix(descs) -> np.ndarray:
    if isinstance(descs, np.ndarray):
        m = descs.astype(np.float64)
    else:
        if not len(descs):
            raise InvariantViolation("descriptor set must be non-empty")
        m = np.stack([d.vector for d in descs]).astype(np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise InvariantViolation("descriptor set must be non-empty and 2-D")
    return m


def distance_matrix(query_descs, ref_descs) -> np.ndarray:
    """Cosine distances, query rows x reference columns."""
    q = _as_matrix(query_descs)
    r = _as_matrix(ref_descs)
    return np.clip(1.0 - q @ r.T, 0.0, 2.0)


def weight_matrix(
    query_weights: np.ndarray, ref_weights: np.ndarray, dists: np.ndarray
) -> np.ndarray:
    """Divide every entry by the product of its patch weights (reciprocal
    Hadamard weighting): high-weight patches become easier to match."""
    wq = np.asarray(query_weights, dtype=np.float64)
    wr = np.asarray(ref_weights, dtype=np.float64)
    if wq.shape != (dists.shape[0],) or wr.shape != (dists.shape[1],):
        raise InvariantViolation(
            f"weight vectors {wq.shape}/{wr.shape} do not match matrix {dists.shape}"
        )
    if np.any(wq <= 0.0) or np.any(wr <= 0.0):
        raise InvariantViolation("patch weights must be strictly positive")
    return dists / np.outer(wq, wr)


def mutual_nn(dists: np.ndarray) -> list[Match]:
    """Pairs that are each other's nearest neighbour across the two images.

    Argmin ties resolve to the lowest index, which makes the result a
    deterministic one-to-one partial matching.
    """
    if dists.ndim != 2 or 0 in dists.shape:
        raise InvariantViolation("distance matrix must be non-empty")
    row_nn = np.argmin(dists, axis=1)
    col_nn = np.argmin(dists, axis=0)
    return [
        Match(i=i, j=int(j), value=float(dists[i, j]))
        for i, j in enumerate(row_nn)
        if col_nn[j] == i
    ]


def spatial_score(matches: Sequence[Match], query_grid: PatchGrid, ref_grid: PatchGrid) -> float:
    """Consistency score of matched patch displacements.

    Each match contributes (x_span - |dx - mean dx|) + (y_span - |dy -
    mean dy|), so the score grows with the match count and shrinks with
    scatter around the dominant displacement. An empty match set scores 0.
    """
    if (query_grid.n_x, query_grid.n_y) != (ref_grid.n_x, ref_grid.n_y):
        raise InvariantViolation("spatial scoring requires equal patch grids")
    if not matches:
        return 0.0
    dx = np.empty(len(matches))
    dy = np.empty(len(matches))
    for m_i, m in enumerate(matches):
        qx, qy = query_grid.coords_of(m.i)
        rx, ry = ref_grid.coords_of(m.j)
        dx[m_i] = qx - rx
        dy[m_i] = qy - ry
    x_span = query_grid.n_x - 1
    y_span = query_grid.n_y - 1
    return float(
        np.sum((x_span - np.abs(dx - dx.mean())) + (y_span - np.abs(dy - dy.mean())))
    )


def match_pair(
    query_descs: Sequence[PatchDescriptor],
    ref_descs: Sequence[PatchDescriptor],
    query_grid: PatchGrid,
    ref_grid: PatchGrid,
    weighted: bool = True,
) -> PairResult:
    """Full pairwise pipeline; weights come from the descriptors themselves."""
    dists = distance_matrix(query_descs, ref_descs)
    if weighted:
        wq = np.array([d.weight for d in query_descs])
        wr = np.array([d.weight for d in ref_descs])
        dists = weight_matrix(wq, wr, dists)
    matches = mutual_nn(dists)
    score = spatial_score(matches, query_grid, ref_grid)
    mean_distance = float(np.mean([m.value for m in matches])) if matches else 0.0
    return PairResult(score=score, mean_distance=mean_distance, n_matches=len(matches))


def pair_score(
    query_descs: Sequence[PatchDescriptor],
    ref_descs: Sequence[PatchDescriptor],
    query_grid: PatchGrid,
    ref_grid: PatchGrid,
    weighted: bool = True,
) -> float:
    """Spatial consistency score of the (optionally weighted) matching."""
    return match_pair(query_descs, ref_descs, query_grid, ref_grid, weighted).score
