"""Triplet mining and aggregation-layer fine-tuning.

Mining pairs each query patch with a keypoint-confirmed positive patch
and the least-confirmed negative candidates. Training minimizes the
hinged triplet loss

    loss = sum_j max(0, min_i d_cos(q, p_i) + m - d_cos(q, n_j))

by SGD with momentum over the assignment weights, biases and centroids.
Distances during training are taken on the projected (pre-PCA) unit
descriptor; the PCA stage stays frozen and outside the gradient chain
and is refit on the database afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantViolation, PatchlocError
from .featureio import FeatureMap
from .keypoints import KeypointSet, match_keypoints, ransac_filter
from .patches import Patch, PatchGrid, extract_patches, patch_of_pixel
from .vlad import (
    PcaModel,
    VladParams,
    _project_forward,
    _vlad_forward,
    cosine_distance,
    describe_patch,
)


@dataclass
class Triplet:
    """One mined training example: query, final positive, final negatives."""

    query_patch: Patch
    positive_patch: Patch
    negative_patches: list[Patch]
    query_image: str = ""
    positive_image: str = ""
    negative_image: str = ""

    def __post_init__(self):
        if not self.negative_patches:
            raise InvariantViolation("a triplet needs at least one negative patch")


@dataclass
class FinetuneConfig:
    margin: float = 0.1
    learning_rate: float = 1e-4
    momentum: float = 0.9
    epochs: int = 10
    k_p: int = 3
    k_n: int = 3
    ratio_threshold: float = 0.8
    ransac_iters: int = 1000
    ransac_tol: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0 or self.learning_rate < 0:
            raise InvariantViolation("margin must be positive, learning_rate non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise InvariantViolation("momentum must lie in [0, 1)")
        if not 0.0 < self.ratio_threshold <= 1.0:
            raise InvariantViolation("ratio_threshold must lie in (0, 1]")
        if min(self.epochs, self.k_p, self.k_n, self.ransac_iters) < 1 or self.ransac_tol <= 0:
            raise InvariantViolation("epochs, k_p, k_n, ransac_iters, ransac_tol must be positive")


def select_candidates(query_descs, target_descs, k: int) -> list[list[int]]:
    """Per query descriptor, the k nearest target indices by cosine distance.

    Results are ascending by distance; exact ties fall back to the lower
    index (stable sort).
    """
    if k > len(target_descs):
        raise InvariantViolation(f"k={k} exceeds {len(target_descs)} targets")
    q = np.stack([d.vector for d in query_descs]).astype(np.float64)
    t = np.stack([d.vector for d in target_descs]).astype(np.float64)
    dists = np.clip(1.0 - q @ t.T, 0.0, 2.0)
    return [list(np.argsort(row, kind="stable")[:k]) for row in dists]


def _matches_per_patch(matches, kps: KeypointSet, grid: PatchGrid):
    """match index -> patch indices containing its keypoint on one side."""
    out = []
    for kp_index in matches:
        x, y = kps.coords[kp_index]
        out.append(patch_of_pixel(float(x), float(y), kps.image_height, kps.image_width, grid))
    return out


def mine_triplets(
    query_map: FeatureMap,
    query_kps: KeypointSet,
    positive_map: FeatureMap,
    positive_kps: KeypointSet,
    negative_map: FeatureMap,
    negative_kps: KeypointSet,
    d_p: int,
    s_p: int,
    params: VladParams,
    pca: PcaModel,
    cfg: FinetuneConfig,
) -> list[Triplet]:
    """Mine positive/negative patch triplets for one (q, p, n) image tuple.

    The positive and negative images are assumed to be chosen upstream
    from GPS labels. Candidate patches come from descriptor similarity;
    final selection is by keypoint-match voting: the candidate positive
    with the most surviving matches to the query patch wins, candidate
    negatives with the fewest are all kept. Query patches without any
    surviving match to the positive image are dropped.
    """
    q_patches = extract_patches(query_map, d_p, s_p)
    p_patches = extract_patches(positive_map, d_p, s_p)
    n_patches = extract_patches(negative_map, d_p, s_p)
    q_descs = [describe_patch(params, pca, p) for p in q_patches]
    p_descs = [describe_patch(params, pca, p) for p in p_patches]
    n_descs = [describe_patch(params, pca, p) for p in n_patches]

    pos_candidates = select_candidates(q_descs, p_descs, cfg.k_p)
    neg_candidates = select_candidates(q_descs, n_descs, cfg.k_n)

    grid = PatchGrid.for_map(query_map.height, query_map.width, d_p, s_p)

    def surviving(kps_a, kps_b, seed_shift):
        raw = match_keypoints(kps_a, kps_b, cfg.ratio_threshold)
        if not raw:
            return []
        return ransac_filter(raw, kps_a, kps_b, cfg.ransac_iters, cfg.ransac_tol,
                             seed=cfg.seed + seed_shift)

    qp_matches = surviving(query_kps, positive_kps, 1)
    qn_matches = surviving(query_kps, negative_kps, 2)

    qp_query_side = _matches_per_patch([m[0] for m in qp_matches], query_kps, grid)
    qp_pos_side = _matches_per_patch([m[1] for m in qp_matches], positive_kps, grid)
    qn_query_side = _matches_per_patch([m[0] for m in qn_matches], query_kps, grid)
    qn_neg_side = _matches_per_patch([m[1] for m in qn_matches], negative_kps, grid)

    q_mat = np.stack([d.vector for d in q_descs]).astype(np.float64)
    p_mat = np.stack([d.vector for d in p_descs]).astype(np.float64)
    n_mat = np.stack([d.vector for d in n_descs]).astype(np.float64)
    qp_dist = np.clip(1.0 - q_mat @ p_mat.T, 0.0, 2.0)
    qn_dist = np.clip(1.0 - q_mat @ n_mat.T, 0.0, 2.0)

    triplets = []
    for qi, qpatch in enumerate(q_patches):
        own_qp = [m for m, patches_q in enumerate(qp_query_side) if qi in patches_q]
        if not own_qp:
            continue  # no keypoint confirmation against the positive image
        pos_counts = []
        for cand in pos_candidates[qi]:
            count = sum(1 for m in own_qp if cand in qp_pos_side[m])
            pos_counts.append((count, cand))
        # most matches wins; ties prefer the closer candidate
        best_pos = max(pos_counts, key=lambda t: (t[0], -qp_dist[qi][t[1]], -t[1]))[1]

        own_qn = [m for m, patches_q in enumerate(qn_query_side) if qi in patches_q]
        neg_counts = []
        for cand in neg_candidates[qi]:
            count = sum(1 for m in own_qn if cand in qn_neg_side[m])
            neg_counts.append((count, cand))
        min_count = min(c for c, _ in neg_counts)
        kept = [cand for c, cand in neg_counts if c == min_count]
        kept.sort(key=lambda cand: (-qn_dist[qi][cand], cand))

        triplets.append(
            Triplet(
                query_patch=qpatch,
                positive_patch=p_patches[best_pos],
                negative_patches=[n_patches[c] for c in kept],
                query_image=query_map.image_id,
                positive_image=positive_map.image_id,
                negative_image=negative_map.image_id,
            )
        )
    return triplets


def save_triplets(triplets: list[Triplet], path) -> None:
    """Text records `query_id,pos_id,neg_id,q_idx,p_idx,n1;n2;...` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            negs = ";".join(str(p.index) for p in t.negative_patches)
            fh.write(
                f"{t.query_image},{t.positive_image},{t.negative_image},"
                f"{t.query_patch.index},{t.positive_patch.index},{negs}\n"
            )


def load_triplets(path, maps_by_id: dict[str, FeatureMap], d_p: int, s_p: int) -> list[Triplet]:
    """Rebuild triplets from text records and their source feature maps."""
    patch_cache: dict[str, list[Patch]] = {}

    def patches_of(image_id: str) -> list[Patch]:
        if image_id not in patch_cache:
            if image_id not in maps_by_id:
                raise PatchlocError(f"triplet references unknown image {image_id!r}")
            patch_cache[image_id] = extract_patches(maps_by_id[image_id], d_p, s_p)
        return patch_cache[image_id]

    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            q_id, p_id, n_id, q_idx, p_idx, negs = line.split(",")
            out.append(
                Triplet(
                    query_patch=patches_of(q_id)[int(q_idx)],
                    positive_patch=patches_of(p_id)[int(p_idx)],
                    negative_patches=[patches_of(n_id)[int(i)] for i in negs.split(";")],
                    query_image=q_id,
                    positive_image=p_id,
                    negative_image=n_id,
                )
            )
    return out


def triplet_loss(query_desc, positive_descs, negative_descs, margin: float) -> float:
    """Hinged triplet loss over unit descriptors (Eq. form: sum over negatives)."""
    if not len(positive_descs) or not len(negative_descs):
        raise InvariantViolation("positive and negative descriptor lists must be non-empty")
    d_pos = min(cosine_distance(query_desc, p) for p in positive_descs)
    total = 0.0
    for n in negative_descs:
        total += max(0.0, d_pos + margin - cosine_distance(query_desc, n))
    return total


# ---------------------------------------------------------------------------
# Differentiable chain: features -> soft assignment -> VLAD -> projection.
# ---------------------------------------------------------------------------


class _ChainCache:
    __slots__ = ("feats", "assign", "vlad", "col_norms", "normalized", "total", "vec")

    def __init__(self, feats, assign, vlad, col_norms, normalized, total, vec):
        self.feats = feats
        self.assign = assign
        self.vlad = vlad
        self.col_norms = col_norms
        self.normalized = normalized
        self.total = total
        self.vec = vec


def _chain_forward(weights, bias, centroids, patch: Patch) -> _ChainCache:
    feats = np.asarray(patch.features, dtype=np.float64)
    vlad, assign = _vlad_forward(weights, bias, centroids, feats)
    vec, col_norms, normalized, total = _project_forward(vlad)
    return _ChainCache(feats, assign, vlad, col_norms, normalized, total, vec)


def _chain_backward(cache: _ChainCache, centroids, grad_vec):
    """Backpropagate a descriptor-space gradient to (dW, db, dC)."""
    k, d = cache.vlad.shape
    # whole-vector normalization
    g_flat = (grad_vec - (grad_vec @ cache.vec) * cache.vec) / cache.total
    g_norm = g_flat.reshape(k, d)
    # per-column normalization (zero columns carry no gradient)
    g_vlad = np.zeros_like(cache.vlad)
    nz = cache.col_norms > 0.0
    if np.any(nz):
        gn = g_norm[:, nz]
        nc = cache.normalized[:, nz]
        g_vlad[:, nz] = (gn - (gn * nc).sum(axis=0) * nc) / cache.col_norms[nz]
    # VLAD aggregation
    s = cache.assign.sum(axis=0)
    g_centroids = -s[:, None] * g_vlad
    g_assign = cache.feats @ g_vlad.T - (centroids * g_vlad).sum(axis=1)
    # softmax
    inner = (g_assign * cache.assign).sum(axis=1, keepdims=True)
    g_logits = cache.assign * (g_assign - inner)
    g_weights = g_logits.T @ cache.feats
    g_bias = g_logits.sum(axis=0)
    return g_weights, g_bias, g_centroids


def _triplet_forward(weights, bias, centroids, triplet: Triplet, margin: float):
    """Loss plus every per-patch cache needed for the backward pass."""
    q = _chain_forward(weights, bias, centroids, triplet.query_patch)
    p = _chain_forward(weights, bias, centroids, triplet.positive_patch)
    negs = [_chain_forward(weights, bias, centroids, n) for n in triplet.negative_patches]
    d_pos = 1.0 - q.vec @ p.vec
    hinges = [d_pos + margin - (1.0 - q.vec @ n.vec) for n in negs]
    loss = sum(max(0.0, h) for h in hinges)
    return loss, q, p, negs, hinges


def _triplet_gradient(weights, bias, centroids, triplet: Triplet, margin: float):
    loss, q, p, negs, hinges = _triplet_forward(weights, bias, centroids, triplet, margin)
    g_w = np.zeros_like(weights)
    g_b = np.zeros_like(bias)
    g_c = np.zeros_like(centroids)
    active = [i for i, h in enumerate(hinges) if h > 0.0]
    if active:
        # d(q, p) contributes once per active hinge; each active negative
        # contributes -d(q, n_j).
        g_q = -len(active) * p.vec + sum(negs[i].vec for i in active)
        for cache, grad in [(q, g_q), (p, -len(active) * q.vec)] + [
            (negs[i], q.vec) for i in active
        ]:
            dw, db, dc = _chain_backward(cache, centroids, grad)
            g_w += dw
            g_b += db
            g_c += dc
    return loss, g_w, g_b, g_c


@dataclass
class VladGradient:
    assign_weights: np.ndarray
    assign_bias: np.ndarray
    centroids: np.ndarray


def loss_gradient(params: VladParams, triplet: Triplet, margin: float) -> VladGradient:
    """Exact analytic gradient of the triplet loss w.r.t. all VLAD parameters.

    The chain runs aggregate -> project only; PCA is frozen outside it.
    """
    w = params.assign_weights.astype(np.float64)
    b = params.assign_bias.astype(np.float64)
    c = params.centroids.astype(np.float64)
    _, g_w, g_b, g_c = _triplet_gradient(w, b, c, triplet, margin)
    return VladGradient(assign_weights=g_w, assign_bias=g_b, centroids=g_c)


def triplet_loss_of_params(params: VladParams, triplet: Triplet, margin: float) -> float:
    """Triplet loss through the training chain at the given parameters."""
    w = params.assign_weights.astype(np.float64)
    b = params.assign_bias.astype(np.float64)
    c = params.centroids.astype(np.float64)
    loss, *_ = _triplet_forward(w, b, c, triplet, margin)
    return float(loss)


def finetune(
    params: VladParams, triplets: list[Triplet], cfg: FinetuneConfig
) -> tuple[VladParams, list[float]]:
    """SGD with momentum over shuffled triplets; returns params + loss trace.

    The trace holds the mean per-triplet loss of each epoch, evaluated at
    the parameters each triplet was visited with (standard training loss).
    """
    if not triplets:
        raise InvariantViolation("finetune needs a non-empty triplet list")
    w = params.assign_weights.astype(np.float64)
    b = params.assign_bias.astype(np.float64)
    c = params.centroids.astype(np.float64)
    vel_w = np.zeros_like(w)
    vel_b = np.zeros_like(b)
    vel_c = np.zeros_like(c)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(triplets))
        epoch_loss = 0.0
        for idx in order:
            loss, g_w, g_b, g_c = _triplet_gradient(w, b, c, triplets[idx], cfg.margin)
            if not np.isfinite(loss):
                raise PatchlocError(
                    f"non-finite loss at epoch {epoch}, triplet {idx}: "
                    "learning rate too large or degenerate descriptors"
                )
            epoch_loss += loss
            vel_w = cfg.momentum * vel_w - cfg.learning_rate * g_w
            vel_b = cfg.momentum * vel_b - cfg.learning_rate * g_b
            vel_c = cfg.momentum * vel_c - cfg.learning_rate * g_c
            w += vel_w
            b += vel_b
            c += vel_c
        trace.append(epoch_loss / len(triplets))
    tuned = VladParams(assign_weights=w, assign_bias=b, centroids=c)
    return tuned, trace
