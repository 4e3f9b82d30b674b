"""Keypoint sets, their binary format, and geometric match filtering.

On-disk keypoint file ("PNVK"): magic, version u32, image_height u32,
image_width u32, count u32, descriptor_dim u32, then per point x f32,
y f32 and the unit-norm descriptor as dim float32 values.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvariantViolation

KEYPOINT_MAGIC = b"PNVK"
KEYPOINT_VERSION = 1

_KP_HEADER = struct.Struct("<4sIIIII")


@dataclass
class KeypointSet:
    """Detected keypoints of one image: pixel coordinates + descriptors."""

    image_id: str
    image_height: int
    image_width: int
    coords: np.ndarray       # n x 2, (x, y) pixels
    descriptors: np.ndarray  # n x D_kp, unit rows

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise InvariantViolation("coords must be n x 2")
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != self.coords.shape[0]:
            raise InvariantViolation("descriptor count must match coordinate count")
        if len(self.coords):
            xs, ys = self.coords[:, 0], self.coords[:, 1]
            if xs.min() < 0 or ys.min() < 0 or xs.max() > self.image_width or ys.max() > self.image_height:
                raise InvariantViolation("keypoint coordinates outside image bounds")
            norms = np.linalg.norm(self.descriptors.astype(np.float64), axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-4):
                raise InvariantViolation("keypoint descriptors must be unit-norm within 1e-4")

    def __len__(self) -> int:
        return self.coords.shape[0]


def save_keypoints(kps: KeypointSet, path: str | os.PathLike) -> None:
    n, dim = kps.descriptors.shape
    with open(path, "wb") as fh:
        fh.write(_KP_HEADER.pack(
            KEYPOINT_MAGIC, KEYPOINT_VERSION, kps.image_height, kps.image_width, n, dim
        ))
        interleaved = np.concatenate([kps.coords, kps.descriptors], axis=1)
        fh.write(interleaved.astype("<f4").tobytes(order="C"))


def load_keypoints(path: str | os.PathLike, image_id: str | None = None) -> KeypointSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _KP_HEADER.size:
        raise FormatError(f"{path}: file shorter than the PNVK header")
    magic, version, h, w, n, dim = _KP_HEADER.unpack_from(raw)
    if magic != KEYPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {KEYPOINT_MAGIC!r}")
    if version != KEYPOINT_VERSION:
        raise FormatError(f"{path}: unsupported PNVK version {version}")
    expected = n * (2 + dim) * 4
    payload = raw[_KP_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype="<f4").reshape(n, 2 + dim) if n else np.zeros((0, 2 + dim), "<f4")
    if image_id is None:
        image_id = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    try:
        return KeypointSet(
            image_id=image_id,
            image_height=h,
            image_width=w,
            coords=flat[:, :2].copy(),
            descriptors=flat[:, 2:].copy(),
        )
    except InvariantViolation as exc:
        raise FormatError(f"{path}: {exc}") from exc


def match_keypoints(
    a: KeypointSet, b: KeypointSet, ratio_threshold: float
) -> list[tuple[int, int]]:
    """Lowe-ratio matches from a to b.

    For each a-point the two nearest b-descriptors (cosine distance) are
    found; the best is kept iff d1/d2 < ratio_threshold. Equidistant
    neighbours (ratio 1) are always rejected.
    """
    if len(a) == 0 or len(b) == 0:
        raise InvariantViolation("keypoint sets must be non-empty")
    if len(b) < 2:
        raise InvariantViolation("need at least 2 target keypoints for the ratio test")
    dists = 1.0 - a.descriptors.astype(np.float64) @ b.descriptors.astype(np.float64).T
    np.clip(dists, 0.0, 2.0, out=dists)
    matches = []
    for i in range(len(a)):
        row = dists[i]
        best = int(np.argmin(row))
        d1 = row[best]
        row2 = np.delete(row, best)
        d2 = row2.min()
        if d2 == 0.0:
            continue  # tied (or multiple exact) neighbours: ambiguous
        if d1 / d2 < ratio_threshold:
            matches.append((i, best))
    return matches


def ransac_filter(
    matches: list[tuple[int, int]],
    a: KeypointSet,
    b: KeypointSet,
    iters: int,
    tol: float,
    seed: int = 0,
) -> list[tuple[int, int]]:
    """Inliers of the best 2-D translation fit (RANSAC, sample size 1).

    Every candidate model is a single match's displacement; the model
    with the most matches within tol (Euclidean) wins, earlier candidate
    on ties. With iters >= len(matches) all candidates are enumerated,
    which makes the filter exhaustive and seed-independent.
    """
    if not matches:
        raise InvariantViolation("ransac_filter needs at least one match")
    idx_a = np.array([m[0] for m in matches])
    idx_b = np.array([m[1] for m in matches])
    disp = b.coords[idx_b].astype(np.float64) - a.coords[idx_a].astype(np.float64)
    n = len(matches)
    if iters >= n:
        candidates = np.arange(n)
    else:
        rng = np.random.default_rng(seed)
        candidates = rng.integers(0, n, size=iters)
    best_count = -1
    best_mask = None
    for c in candidates:
        err = np.linalg.norm(disp - disp[c], axis=1)
        mask = err <= tol
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    return [m for m, keep in zip(matches, best_mask) if keep]
