"""Central-difference gradient oracle for the triplet-loss chain.

Deliberately re-implements the forward pass (softmax assignment,
residual aggregation, column + whole normalization, hinged triplet
loss) from scratch in float64 so it stays an independent check of
loss_gradient rather than a derivative of the same code.
"""

from __future__ import annotations

import numpy as np

from .finetune import Triplet, VladGradient
from .vlad import VladParams


def _descriptor(w: np.ndarray, b: np.ndarray, c: np.ndarray, feats: np.ndarray) -> np.ndarray:
    logits = feats @ w.T + b
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    assign = e / e.sum(axis=1, keepdims=True)
    vlad = assign.T @ feats - assign.sum(axis=0)[:, None] * c
    norms = np.linalg.norm(vlad, axis=0)
    vlad = vlad / np.where(norms > 0.0, norms, 1.0)
    flat = vlad.reshape(-1)
    return flat / np.linalg.norm(flat)


def reference_loss(
    w: np.ndarray, b: np.ndarray, c: np.ndarray, triplet: Triplet, margin: float
) -> float:
    q = _descriptor(w, b, c, np.asarray(triplet.query_patch.features, dtype=np.float64))
    p = _descriptor(w, b, c, np.asarray(triplet.positive_patch.features, dtype=np.float64))
    d_pos = 1.0 - q @ p
    total = 0.0
    for neg in triplet.negative_patches:
        n = _descriptor(w, b, c, np.asarray(neg.features, dtype=np.float64))
        total += max(0.0, d_pos + margin - (1.0 - q @ n))
    return float(total)


def finite_difference_gradient(
    params: VladParams, triplet: Triplet, margin: float, step: float = 1e-5
) -> VladGradient:
    """Perturb every parameter entry by +/- step and difference the loss."""
    fields = [
        params.assign_weights.astype(np.float64),
        params.assign_bias.astype(np.float64),
        params.centroids.astype(np.float64),
    ]
    grads = []
    for target in range(3):
        base = fields[target]
        grad = np.zeros_like(base)
        flat_base = base.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat_base.size):
            original = flat_base[i]
            flat_base[i] = original + step
            hi = reference_loss(*fields, triplet, margin)
            flat_base[i] = original - step
            lo = reference_loss(*fields, triplet, margin)
            flat_base[i] = original
            flat_grad[i] = (hi - lo) / (2.0 * step)
        grads.append(grad)
    return VladGradient(
        assign_weights=grads[0], assign_bias=grads[1], centroids=grads[2]
    )


def gradient_relative_error(a: VladGradient, b: VladGradient) -> float:
    """|a - b| / (|a| + |b|) over the concatenated parameter vector."""
    va = np.concatenate([
        a.assign_weights.ravel(), a.assign_bias.ravel(), a.centroids.ravel()
    ])
    vb = np.concatenate([
        b.assign_weights.ravel(), b.assign_bias.ravel(), b.centroids.ravel()
    ])
    denom = np.linalg.norm(va) + np.linalg.norm(vb)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(va - vb) / denom)
