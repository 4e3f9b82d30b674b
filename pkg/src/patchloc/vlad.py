"""The descriptor pipeline: soft-assignment VLAD, projection, PCA whitening.

A patch descriptor is apply_pca(project(aggregate_vlad(params, patch))).
Aggregation and projection run in float64; descriptors are rounded to
float32 at the boundary so that values in memory match values on disk
bit-for-bit.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDescriptorError, FormatError, InvariantViolation
from .featureio import FeatureMap
from .patches import Patch, extract_patches

PCA_EIGENVALUE_FLOOR = 1e-8

PARAMS_MAGIC = b"PNVP"
PARAMS_VERSION = 1


@dataclass
class VladParams:
    """Learnable aggregation parameters: assignment affine map + centroids."""

    assign_weights: np.ndarray  # K x D
    assign_bias: np.ndarray     # K
    centroids: np.ndarray       # K x D

    def __post_init__(self):
        self.assign_weights = np.ascontiguousarray(self.assign_weights, dtype=np.float32)
        self.assign_bias = np.ascontiguousarray(self.assign_bias, dtype=np.float32)
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        k, d = self.assign_weights.shape
        if k < 1 or d < 1:
            raise InvariantViolation("VladParams needs K >= 1 and D >= 1")
        if self.assign_bias.shape != (k,) or self.centroids.shape != (k, d):
            raise InvariantViolation(
                f"inconsistent parameter shapes: weights {self.assign_weights.shape}, "
                f"bias {self.assign_bias.shape}, centroids {self.centroids.shape}"
            )
        for name, arr in (
            ("assign_weights", self.assign_weights),
            ("assign_bias", self.assign_bias),
            ("centroids", self.centroids),
        ):
            if not np.all(np.isfinite(arr)):
                raise InvariantViolation(f"{name} contains non-finite entries")

    @property
    def n_clusters(self) -> int:
        return self.assign_weights.shape[0]

    @property
    def depth(self) -> int:
        return self.assign_weights.shape[1]

    @classmethod
    def seeded(cls, n_clusters: int, depth: int, seed: int, scale: float = 1.0) -> "VladParams":
        """Random initial parameters; fine-tuning or clustering refines them."""
        rng = np.random.default_rng(seed)
        return cls(
            assign_weights=scale * rng.standard_normal((n_clusters, depth)),
            assign_bias=np.zeros(n_clusters),
            centroids=rng.standard_normal((n_clusters, depth)),
        )

    def copy(self) -> "VladParams":
        return VladParams(
            assign_weights=self.assign_weights.copy(),
            assign_bias=self.assign_bias.copy(),
            centroids=self.centroids.copy(),
        )


def save_params(params: VladParams, path: str | os.PathLike) -> None:
    """Persist VLAD parameters: magic, version, K, D, then the three
    parameter blocks as float32 little-endian."""
    k, d = params.assign_weights.shape
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<III", PARAMS_VERSION, k, d))
        for arr in (params.assign_weights, params.assign_bias, params.centroids):
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_params(path: str | os.PathLike) -> VladParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != PARAMS_MAGIC:
        raise FormatError(f"{path}: not a PNVP parameter file")
    version, k, d = struct.unpack("<III", raw[4:16])
    if version != PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported PNVP version {version}")
    expected = (k * d + k + k * d) * 4
    payload = raw[16:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype="<f4")
    return VladParams(
        assign_weights=flat[: k * d].reshape(k, d).copy(),
        assign_bias=flat[k * d : k * d + k].copy(),
        centroids=flat[k * d + k :].reshape(k, d).copy(),
    )


@dataclass
class PcaModel:
    """PCA basis with whitening scales (inverse sqrt eigenvalues)."""

    mean: np.ndarray    # D_in
    basis: np.ndarray   # D_pca x D_in, orthonormal rows
    scales: np.ndarray  # D_pca, strictly positive

    def __post_init__(self):
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float32)
        self.basis = np.ascontiguousarray(self.basis, dtype=np.float32)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32)
        if self.basis.ndim != 2:
            raise InvariantViolation("PCA basis must be 2-D")
        d_pca, d_in = self.basis.shape
        if self.mean.shape != (d_in,) or self.scales.shape != (d_pca,):
            raise InvariantViolation("PCA field shapes disagree")
        if np.any(self.scales <= 0):
            raise InvariantViolation("PCA whitening scales must be strictly positive")
        b = self.basis.astype(np.float64)
        gram = b @ b.T
        if not np.allclose(gram, np.eye(d_pca), atol=1e-6):
            raise InvariantViolation("PCA basis rows are not orthonormal within 1e-6")

    @property
    def d_in(self) -> int:
        return self.basis.shape[1]

    @property
    def d_pca(self) -> int:
        return self.basis.shape[0]


@dataclass
class PatchDescriptor:
    """Unit-norm reduced descriptor of one patch, with its grid position."""

    vector: np.ndarray
    grid_x: int
    grid_y: int
    weight: float = 1.0


def soft_assign(params: VladParams, feature: np.ndarray) -> np.ndarray:
    """Softmax cluster assignment of one feature vector."""
    x = np.asarray(feature, dtype=np.float64)
    if x.shape != (params.depth,):
        raise InvariantViolation(f"feature has dim {x.shape}, expected ({params.depth},)")
    if not np.all(np.isfinite(x)):
        raise InvariantViolation("feature contains non-finite entries")
    logits = params.assign_weights.astype(np.float64) @ x + params.assign_bias.astype(np.float64)
    return _softmax_rows(logits[None, :])[0]


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _vlad_forward(weights: np.ndarray, bias: np.ndarray, centroids: np.ndarray,
                  feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Residual aggregation V (K x D) and the assignment matrix A (M x K)."""
    assign = _softmax_rows(feats @ weights.T + bias)
    vlad = assign.T @ feats - assign.sum(axis=0)[:, None] * centroids
    return vlad, assign


def aggregate_vlad(params: VladParams, patch: Patch) -> np.ndarray:
    """Soft-assigned residual sums: V[k] = sum_m a_mk * (x_m - c_k)."""
    feats = np.asarray(patch.features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != params.depth:
        raise InvariantViolation(
            f"patch depth {patch.features.shape[-1]} != params depth {params.depth}"
        )
    vlad, _ = _vlad_forward(
        params.assign_weights.astype(np.float64),
        params.assign_bias.astype(np.float64),
        params.centroids.astype(np.float64),
        feats,
    )
    return vlad


def _project_forward(matrix: np.ndarray):
    """Column-normalize, flatten, L2-normalize; returns intermediates too."""
    col_norms = np.linalg.norm(matrix, axis=0)
    safe = np.where(col_norms > 0.0, col_norms, 1.0)
    normalized = matrix / safe
    flat = normalized.reshape(-1)
    total = np.linalg.norm(flat)
    if total == 0.0:
        raise DegenerateDescriptorError("projection input is the all-zero matrix")
    return flat / total, col_norms, normalized, total


def project(matrix: np.ndarray) -> np.ndarray:
    """Intra(column)-normalized, flattened, unit-norm projection of V."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise InvariantViolation("projection expects a 2-D matrix")
    if not np.all(np.isfinite(m)):
        raise InvariantViolation("projection input contains non-finite entries")
    vec, _, _, _ = _project_forward(m)
    return vec


def fit_pca(vectors: np.ndarray, d_pca: int, eps: float = PCA_EIGENVALUE_FLOOR) -> PcaModel:
    """Fit a whitening PCA to sample vectors (rows).

    Basis rows are the leading eigenvectors of the sample covariance in
    descending eigenvalue order; each row's sign is fixed so its largest
    magnitude component is positive. Rank deficiency past d_pca is
    tolerated via the eigenvalue floor but reported as a warning.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise InvariantViolation("fit_pca expects a 2-D sample matrix")
    n, d_in = x.shape
    if d_pca < 1 or d_pca > d_in:
        raise InvariantViolation(f"d_pca={d_pca} not in [1, {d_in}]")
    if n < d_pca + 1:
        raise InvariantViolation(f"need at least {d_pca + 1} samples, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    if d_in <= n:
        cov = centered.T @ centered / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1][:d_pca]
        lams = eigvals[order]
        basis = eigvecs[:, order].T
    else:
        # Gram trick: eigenvectors of the n x n Gram matrix lift to
        # covariance eigenvectors, avoiding a d_in x d_in problem.
        gram = centered @ centered.T / (n - 1)
        eigvals, eigvecs = np.linalg.eigh(gram)
        order = np.argsort(eigvals)[::-1][:d_pca]
        lams = eigvals[order]
        basis = np.empty((d_pca, d_in))
        for i, (lam, idx) in enumerate(zip(lams, order)):
            v = centered.T @ eigvecs[:, idx]
            norm = np.linalg.norm(v)
            if norm == 0.0:
                basis[i] = 0.0
            else:
                basis[i] = v / norm
    if np.any(lams <= 0.0):
        warnings.warn(
            f"covariance rank below d_pca={d_pca}; whitening floor {eps} applies",
            RuntimeWarning,
            stacklevel=2,
        )
        lams = np.maximum(lams, 0.0)
    # Deterministic eigenvector orientation.
    for row in basis:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    scales = 1.0 / np.sqrt(lams + eps)
    return PcaModel(mean=mean, basis=basis, scales=scales)


def whiten(model: PcaModel, vectors: np.ndarray) -> np.ndarray:
    """Whitening transform scales * (basis @ (x - mean)), no renormalization."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[-1] != model.d_in:
        raise InvariantViolation(f"input dim {x.shape[-1]} != model d_in {model.d_in}")
    centered = x - model.mean.astype(np.float64)
    return centered @ model.basis.astype(np.float64).T * model.scales.astype(np.float64)


def apply_pca(model: PcaModel, vector: np.ndarray) -> np.ndarray:
    """Whiten and re-normalize one vector to unit length."""
    y = whiten(model, np.asarray(vector, dtype=np.float64))
    norm = np.linalg.norm(y)
    if norm == 0.0:
        raise DegenerateDescriptorError("PCA projection collapsed to zero")
    return y / norm


def _round_unit_f32(vec: np.ndarray) -> np.ndarray:
    """Round to float32 keeping the norm as close to 1 as float32 allows."""
    v32 = vec.astype(np.float32)
    norm = np.linalg.norm(v32.astype(np.float64))
    return (v32.astype(np.float64) / norm).astype(np.float32)


def describe_patch(params: VladParams, pca: PcaModel, patch: Patch) -> PatchDescriptor:
    """Full pipeline descriptor for one patch (weight defaults to 1)."""
    reduced = apply_pca(pca, project(aggregate_vlad(params, patch)))
    return PatchDescriptor(
        vector=_round_unit_f32(reduced), grid_x=patch.grid_x, grid_y=patch.grid_y
    )


def describe_image(
    params: VladParams, pca: PcaModel, fmap: FeatureMap, d_p: int, s_p: int
) -> list[PatchDescriptor]:
    """Descriptors for every patch of a map, in row-major grid order."""
    return [describe_patch(params, pca, p) for p in extract_patches(fmap, d_p, s_p)]


def describe_global(params: VladParams, pca_global: PcaModel, fmap: FeatureMap) -> np.ndarray:
    """Whole-image descriptor: the pipeline applied to the single full-size patch."""
    full = Patch(
        index=0,
        grid_x=0,
        grid_y=0,
        features=fmap.data.reshape(fmap.height * fmap.width, fmap.depth),
    )
    return describe_patch(params, pca_global, full).vector


def projected_vector(params: VladParams, patch: Patch) -> np.ndarray:
    """Pre-PCA unit descriptor (aggregate + project), used by fine-tuning."""
    return project(aggregate_vlad(params, patch))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - a.b for unit vectors, clamped into [0, 2] against fp drift."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    for name, v in (("a", av), ("b", bv)):
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > 1e-4:
            raise InvariantViolation(f"vector {name} is not unit-norm (|v| = {norm})")
    return float(min(max(1.0 - av @ bv, 0.0), 2.0))
