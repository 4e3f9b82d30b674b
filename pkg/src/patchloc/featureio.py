"""Feature-map and dataset-manifest I/O, plus deterministic synthetic maps.

On-disk feature map ("PNVF"): magic, version u32, H u32, W u32, D u32,
all little-endian, followed by H*W*D float32 values in row-major order
(y, then x, then depth). Computation elsewhere may run in float64, but
files always hold float32.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import FormatError, InvariantViolation

FEATURE_MAGIC = b"PNVF"
FEATURE_VERSION = 1

_HEADER = struct.Struct("<4sIIII")

# Independent seed domains so user seeds never collide with the shared
# background or the motif streams.
_BASE_KEY = 0x1A2B
_NOISE_KEY = 0x3C4D
_MOTIF_KEY = 0x5E6F


@dataclass(frozen=True)
class FeatureMap:
    """A dense H x W x D feature tensor for one image."""

    image_id: str
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise InvariantViolation(
                f"feature map must be 3-D (H, W, D), got shape {arr.shape}"
            )
        if arr.size == 0:
            raise InvariantViolation("feature map has a zero dimension")
        if not np.all(np.isfinite(arr)):
            raise InvariantViolation("feature map contains non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]


def save_feature_map(fmap: FeatureMap, path: str | os.PathLike) -> None:
    """Write a feature map in the PNVF binary format."""
    header = _HEADER.pack(
        FEATURE_MAGIC, FEATURE_VERSION, fmap.height, fmap.width, fmap.depth
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(fmap.data.astype("<f4", copy=False).tobytes(order="C"))


def load_feature_map(path: str | os.PathLike, image_id: str | None = None) -> FeatureMap:
    """Read a PNVF file back into a FeatureMap.

    The image id is not stored in the file; it defaults to the file's
    stem and may be overridden by the caller (the manifest knows it).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the PNVF header")
    magic, version, h, w, d = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported PNVF version {version}")
    expected = h * w * d * 4
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise FormatError(
            f"{path}: truncated payload, need {expected} bytes, have {len(payload)}"
        )
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    if image_id is None:
        image_id = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: payload contains non-finite values")
    return FeatureMap(image_id=image_id, data=data.copy())


def _motif_vector(motif_id: int, depth: int) -> np.ndarray:
    rng = np.random.default_rng([_MOTIF_KEY, int(motif_id), depth])
    return rng.standard_normal(depth)


def synth_feature_map(
    seed: int,
    height: int,
    width: int,
    depth: int,
    motifs: Iterable[tuple[int, int, int]] = (),
    jitter: float = 0.25,
    image_id: str | None = None,
) -> FeatureMap:
    """Generate a deterministic synthetic feature map.

    The background is a shared base field (identical for every seed at a
    given geometry) plus seed-dependent jitter, so different images look
    alike but never identical. Each motif is a (x, y, motif_id) entry
    that overwrites one feature cell with a vector derived purely from
    the motif id: any two maps that plant the same id carry bit-identical
    features at those cells, which is what lets matching tests construct
    exactly-shared local regions.
    """
    base_rng = np.random.default_rng([_BASE_KEY, height, width, depth])
    data = base_rng.standard_normal((height, width, depth))
    if jitter != 0.0:
        noise_rng = np.random.default_rng([_NOISE_KEY, int(seed)])
        data += jitter * noise_rng.standard_normal((height, width, depth))
    data = data.astype(np.float32)
    for x, y, motif_id in motifs:
        if not (0 <= x < width and 0 <= y < height):
            raise InvariantViolation(
                f"motif position ({x}, {y}) outside {height}x{width} grid"
            )
        data[y, x, :] = _motif_vector(motif_id, depth).astype(np.float32)
    if image_id is None:
        image_id = f"synth-{seed}"
    return FeatureMap(image_id=image_id, data=data)


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    feature_path: str
    keypoint_path: str | None
    latitude: float
    longitude: float
    split: str


@dataclass
class DatasetManifest:
    """Image records with GPS labels and a database/query split."""

    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen: set[str] = set()
        for e in self.entries:
            if e.image_id in seen:
                raise InvariantViolation(f"duplicate image_id {e.image_id!r}")
            seen.add(e.image_id)
            if not -90.0 <= e.latitude <= 90.0:
                raise InvariantViolation(f"{e.image_id}: latitude {e.latitude} out of range")
            if not -180.0 <= e.longitude <= 180.0:
                raise InvariantViolation(f"{e.image_id}: longitude {e.longitude} out of range")
            if e.split not in ("database", "query"):
                raise InvariantViolation(f"{e.image_id}: unknown split {e.split!r}")

    def database(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == "database"]

    def queries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == "query"]

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.image_id: e for e in self.entries}


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    """Write the manifest as one comma-separated record per line."""
    lines = []
    for e in manifest.entries:
        kp = e.keypoint_path or ""
        lines.append(
            f"{e.image_id},{e.feature_path},{kp},{e.latitude!r},{e.longitude!r},{e.split}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split(",")
            if len(cols) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 columns, got {len(cols)}")
            image_id, feature_path, keypoint_path, lat, lon, split = cols
            try:
                latitude = float(lat)
                longitude = float(lon)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad coordinate: {exc}") from exc
            entries.append(
                ManifestEntry(
                    image_id=image_id,
                    feature_path=feature_path,
                    keypoint_path=keypoint_path or None,
                    latitude=latitude,
                    longitude=longitude,
                    split=split,
                )
            )
    try:
        return DatasetManifest(entries)
    except InvariantViolation as exc:
        raise FormatError(f"{path}: {exc}") from exc
