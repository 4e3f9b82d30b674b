"""Retrieval index construction, persistence, querying and evaluation.

On-disk index ("PNVI"): magic, version u32, crc32 u32 over everything
that follows, then length-prefixed sections (manifest text, config,
VLAD parameters, both PCA models, k-means centroids, per-image
records). All integers little-endian, all reals float32.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvariantViolation, PatchlocError
from .featureio import DatasetManifest, FeatureMap, load_feature_map
from .matching import match_pair
from .patches import Patch, PatchGrid, extract_patches
from .vlad import (
    PatchDescriptor,
    PcaModel,
    VladParams,
    apply_pca,
    cosine_distance,
    fit_pca,
    project,
    aggregate_vlad,
    _round_unit_f32,
)
from .weighting import CentroidSet, kmeans, weigh_index

INDEX_MAGIC = b"PNVI"
INDEX_VERSION = 1

EARTH_RADIUS_M = 6_371_000.0


@dataclass
class IndexConfig:
    """Geometry and weighting settings echoed into the index file."""

    d_p: int
    s_p: int
    k: int
    alpha: int
    d_pca: int
    seed: int = 0


@dataclass
class IndexImage:
    image_id: str
    global_desc: np.ndarray
    grid: PatchGrid
    descriptors: list[PatchDescriptor]


@dataclass
class RetrievalIndex:
    manifest: DatasetManifest
    vlad_params: VladParams
    pca_global: PcaModel
    pca_patch: PcaModel
    centroid_set: CentroidSet
    images: list[IndexImage]
    config: IndexConfig

    def image_ids(self) -> list[str]:
        return [img.image_id for img in self.images]


@dataclass
class RankedMatch:
    image_id: str
    score: float
    global_distance: float


@dataclass
class QueryResult:
    query_id: str
    ranking: list[RankedMatch]

    def top_ids(self, n: int) -> list[str]:
        return [r.image_id for r in self.ranking[:n]]


def _projected_vectors(fmap: FeatureMap, params: VladParams, d_p: int, s_p: int):
    """Pre-PCA projected vectors for every patch plus the full-map vector."""
    patches = extract_patches(fmap, d_p, s_p)
    patch_vecs = [project(aggregate_vlad(params, p)) for p in patches]
    full = fmap.data.reshape(fmap.height * fmap.width, fmap.depth)
    global_vec = project(aggregate_vlad(params, Patch(0, 0, 0, full)))
    return patches, patch_vecs, global_vec


def build_index(
    manifest: DatasetManifest,
    vlad_params: VladParams,
    config: IndexConfig,
    base_dir: str | os.PathLike | None = None,
) -> RetrievalIndex:
    """Describe every database image, fit both PCA models, cluster, weigh.

    All database maps must share one H x W x D geometry; the patch PCA is
    fit on every database patch and the global PCA on the whole-image
    vectors, both before weights are derived from the k-means centroids.
    """
    db_entries = manifest.database()
    if not db_entries:
        raise InvariantViolation("manifest has no database images")

    def resolve(p: str) -> str:
        if base_dir is not None and not os.path.isabs(p):
            return os.path.join(os.fspath(base_dir), p)
        return p

    maps = []
    for entry in db_entries:
        fmap = load_feature_map(resolve(entry.feature_path), image_id=entry.image_id)
        maps.append(fmap)
    shapes = {m.data.shape for m in maps}
    if len(shapes) > 1:
        raise InvariantViolation(f"database feature maps disagree on geometry: {shapes}")

    all_patches = []
    patch_vecs_per_image = []
    global_vecs = []
    for fmap in maps:
        patches, patch_vecs, global_vec = _projected_vectors(
            fmap, vlad_params, config.d_p, config.s_p
        )
        all_patches.append(patches)
        patch_vecs_per_image.append(patch_vecs)
        global_vecs.append(global_vec)

    stacked_patch_vecs = np.vstack([np.stack(v) for v in patch_vecs_per_image])
    pca_patch = fit_pca(stacked_patch_vecs, config.d_pca)
    pca_global = fit_pca(np.stack(global_vecs), config.d_pca)

    grid = PatchGrid.for_map(maps[0].height, maps[0].width, config.d_p, config.s_p)
    images = []
    for fmap, patches, patch_vecs, global_vec in zip(
        maps, all_patches, patch_vecs_per_image, global_vecs
    ):
        descs = [
            PatchDescriptor(
                vector=_round_unit_f32(apply_pca(pca_patch, v)),
                grid_x=p.grid_x,
                grid_y=p.grid_y,
            )
            for p, v in zip(patches, patch_vecs)
        ]
        images.append(
            IndexImage(
                image_id=fmap.image_id,
                global_desc=_round_unit_f32(apply_pca(pca_global, global_vec)),
                grid=grid,
                descriptors=descs,
            )
        )

    db_desc_matrix = np.vstack([
        np.stack([d.vector for d in img.descriptors]) for img in images
    ])
    centroid_set = kmeans(db_desc_matrix, config.k, seed=config.seed)
    for img in images:
        weigh_index(img.descriptors, centroid_set, config.alpha)

    db_manifest = DatasetManifest(list(db_entries))
    return RetrievalIndex(
        manifest=db_manifest,
        vlad_params=vlad_params,
        pca_global=pca_global,
        pca_patch=pca_patch,
        centroid_set=centroid_set,
        images=images,
        config=config,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _pack_section(buf: io.BytesIO, payload: bytes) -> None:
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)


def _pack_array(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    header = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("index file truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def section(self) -> "_Reader":
        return _Reader(self.take(self.u32()))

    def array(self) -> np.ndarray:
        ndim = self.u32()
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(self.take(count * 4), dtype="<f4").reshape(shape).copy()

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def save_index(index: RetrievalIndex, path: str | os.PathLike) -> None:
    body = io.BytesIO()

    manifest_buf = io.StringIO()
    for e in index.manifest.entries:
        kp = e.keypoint_path or ""
        manifest_buf.write(
            f"{e.image_id},{e.feature_path},{kp},{e.latitude!r},{e.longitude!r},{e.split}\n"
        )
    _pack_section(body, manifest_buf.getvalue().encode("utf-8"))

    cfg = index.config
    _pack_section(body, struct.pack(
        "<IIIIIq", cfg.d_p, cfg.s_p, cfg.k, cfg.alpha, cfg.d_pca, cfg.seed
    ))

    p = index.vlad_params
    _pack_section(
        body,
        _pack_array(p.assign_weights) + _pack_array(p.assign_bias) + _pack_array(p.centroids),
    )
    for pca in (index.pca_global, index.pca_patch):
        _pack_section(
            body, _pack_array(pca.mean) + _pack_array(pca.basis) + _pack_array(pca.scales)
        )
    _pack_section(
        body,
        _pack_array(index.centroid_set.centroids)
        + _pack_array(np.array([index.centroid_set.inertia], dtype=np.float32)),
    )

    img_buf = io.BytesIO()
    img_buf.write(struct.pack("<I", len(index.images)))
    for img in index.images:
        raw_id = img.image_id.encode("utf-8")
        img_buf.write(struct.pack("<I", len(raw_id)))
        img_buf.write(raw_id)
        g = img.grid
        img_buf.write(struct.pack("<IIIIII", g.d_p, g.s_p, g.n_x, g.n_y, g.height, g.width))
        img_buf.write(_pack_array(img.global_desc))
        img_buf.write(_pack_array(np.stack([d.vector for d in img.descriptors])))
        img_buf.write(_pack_array(np.array([d.weight for d in img.descriptors], dtype=np.float32)))
    _pack_section(body, img_buf.getvalue())

    payload = body.getvalue()
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<II", INDEX_VERSION, zlib.crc32(payload)))
        fh.write(payload)


def load_index(path: str | os.PathLike) -> RetrievalIndex:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != INDEX_MAGIC:
        raise FormatError(f"{path}: not a PNVI index file")
    version, checksum = struct.unpack("<II", raw[4:12])
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    payload = raw[12:]
    if zlib.crc32(payload) != checksum:
        raise FormatError(f"{path}: checksum mismatch, file corrupted")

    reader = _Reader(payload)
    manifest_text = reader.section().data.decode("utf-8")
    entries = []
    from .featureio import ManifestEntry

    for line in manifest_text.splitlines():
        if not line:
            continue
        image_id, feature_path, keypoint_path, lat, lon, split = line.split(",")
        entries.append(ManifestEntry(
            image_id=image_id,
            feature_path=feature_path,
            keypoint_path=keypoint_path or None,
            latitude=float(lat),
            longitude=float(lon),
            split=split,
        ))
    manifest = DatasetManifest(entries)

    cfg_reader = reader.section()
    d_p, s_p, k, alpha, d_pca = struct.unpack("<IIIII", cfg_reader.take(20))
    seed = cfg_reader.i64()
    config = IndexConfig(d_p=d_p, s_p=s_p, k=k, alpha=alpha, d_pca=d_pca, seed=seed)

    params_reader = reader.section()
    vlad_params = VladParams(
        assign_weights=params_reader.array(),
        assign_bias=params_reader.array(),
        centroids=params_reader.array(),
    )
    pcas = []
    for _ in range(2):
        pr = reader.section()
        pcas.append(PcaModel(mean=pr.array(), basis=pr.array(), scales=pr.array()))
    cr = reader.section()
    centroid_set = CentroidSet(centroids=cr.array(), inertia=float(cr.array()[0]))

    ir = reader.section()
    n_images = ir.u32()
    images = []
    for _ in range(n_images):
        image_id = ir.text()
        gd_p, gs_p, n_x, n_y, height, width = struct.unpack("<IIIIII", ir.take(24))
        grid = PatchGrid(d_p=gd_p, s_p=gs_p, n_x=n_x, n_y=n_y, height=height, width=width)
        global_desc = ir.array()
        vectors = ir.array()
        weights = ir.array()
        descs = []
        for i in range(vectors.shape[0]):
            descs.append(PatchDescriptor(
                vector=vectors[i],
                grid_x=i % n_x,
                grid_y=i // n_x,
                weight=float(weights[i]),
            ))
        images.append(IndexImage(
            image_id=image_id, global_desc=global_desc, grid=grid, descriptors=descs
        ))

    return RetrievalIndex(
        manifest=manifest,
        vlad_params=vlad_params,
        pca_global=pcas[0],
        pca_patch=pcas[1],
        centroid_set=centroid_set,
        images=images,
        config=config,
    )


# ---------------------------------------------------------------------------
# Querying
# ---------------------------------------------------------------------------


def query_topk(index: RetrievalIndex, query_global: np.ndarray, k_candidates: int) -> list[str]:
    """Database ids with the smallest global cosine distance, ascending."""
    n = len(index.images)
    if k_candidates > n:
        raise InvariantViolation(f"k_candidates={k_candidates} exceeds database size {n}")
    dists = [cosine_distance(query_global, img.global_desc) for img in index.images]
    order = np.argsort(dists, kind="stable")[:k_candidates]
    return [index.images[i].image_id for i in order]


def rerank(
    index: RetrievalIndex,
    query_map: FeatureMap,
    candidate_ids: list[str],
    weighted: bool = True,
) -> QueryResult:
    """Score every candidate with the weighted patch-matching pipeline.

    Query patches are described with the index's parameters and patch
    PCA, then weighted against the index centroids. Candidates sort by
    score descending; ties break on smaller mean matched distance, then
    database order.
    """
    patches, patch_vecs, global_vec = _projected_vectors(
        query_map, index.vlad_params, index.config.d_p, index.config.s_p
    )
    q_descs = [
        PatchDescriptor(
            vector=_round_unit_f32(apply_pca(index.pca_patch, v)),
            grid_x=p.grid_x,
            grid_y=p.grid_y,
        )
        for p, v in zip(patches, patch_vecs)
    ]
    weigh_index(q_descs, index.centroid_set, index.config.alpha)
    q_global = _round_unit_f32(apply_pca(index.pca_global, global_vec))
    q_grid = PatchGrid.for_map(
        query_map.height, query_map.width, index.config.d_p, index.config.s_p
    )

    by_id = {img.image_id: (pos, img) for pos, img in enumerate(index.images)}
    rows = []
    for cid in candidate_ids:
        if cid not in by_id:
            raise PatchlocError(f"candidate {cid!r} is not in the index")
        pos, img = by_id[cid]
        result = match_pair(q_descs, img.descriptors, q_grid, img.grid, weighted=weighted)
        gdist = cosine_distance(q_global, img.global_desc)
        rows.append((result.score, result.mean_distance, pos, cid, gdist))
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    ranking = [
        RankedMatch(image_id=cid, score=score, global_distance=gdist)
        for score, _, _, cid, gdist in rows
    ]
    return QueryResult(query_id=query_map.image_id, ranking=ranking)


def geo_distance(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Haversine distance in meters on a 6,371,000 m sphere."""
    for lat in (lat1, lat2):
        if not -90.0 <= lat <= 90.0:
            raise InvariantViolation(f"latitude {lat} out of range")
    for lon in (lon1, lon2):
        if not -180.0 <= lon <= 180.0:
            raise InvariantViolation(f"longitude {lon} out of range")
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(lon2 - lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return float(2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(a)))


def recall_at_n(
    results: list[QueryResult],
    manifest: DatasetManifest,
    n: int,
    radius_m: float,
) -> float:
    """Fraction of queries with a database image within radius in the top n."""
    if n < 1:
        raise InvariantViolation("N must be >= 1")
    coords = {
        e.image_id: (e.latitude, e.longitude) for e in manifest.entries
    }
    hits = 0
    for res in results:
        if res.query_id not in coords:
            raise InvariantViolation(f"query {res.query_id!r} has no ground-truth coordinates")
        qlat, qlon = coords[res.query_id]
        found = False
        for cid in res.top_ids(n):
            if cid not in coords:
                raise InvariantViolation(f"database image {cid!r} has no coordinates")
            if geo_distance(qlat, qlon, *coords[cid]) <= radius_m:
                found = True
                break
        if found:
            hits += 1
    return hits / len(results) if results else 0.0


def recall_table(
    results: list[QueryResult],
    manifest: DatasetManifest,
    ns: tuple[int, ...] = (1, 5, 10),
    radius_m: float = 25.0,
) -> dict[int, float]:
    """Recall at each N, with the monotonicity sanity check applied."""
    table = {n: recall_at_n(results, manifest, n, radius_m) for n in ns}
    values = [table[n] for n in sorted(table)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:])), \
        "recall must be non-decreasing in N"
    return table
