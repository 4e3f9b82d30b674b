"""Synthetic benchmark worlds for validating the matching pipeline.

The confusion world models the failure case weighted matching exists
for: many places share most of their patch content (background
"appearances" planted as motifs with a little per-image noise), while
each place carries a few locally specific patches (exact motif twins
between a query and its true place). Adversarial queries copy the
background arrangement of a wrong place, so unweighted spatial scoring
prefers the decoy while weighting suppresses the common patches and
lets the specific ones decide.

Everything here is deterministic for a given seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .featureio import (
    DatasetManifest,
    FeatureMap,
    ManifestEntry,
    save_feature_map,
    save_manifest,
    synth_feature_map,
)
from .finetune import Triplet
from .keypoints import KeypointSet, save_keypoints
from .patches import Patch

_KP_KEY = 0x7A11

# motif id spaces (shared background appearances vs unique content)
_APPEARANCE_BASE = 100
_AUX_BASE = 500
_UNIQUE_BASE = 10000
_NOISE_BASE = 30000

GRID_SIDE = 5          # patches per row/column
PATCH_SIDE = 5         # d_p = s_p
MAP_SIDE = GRID_SIDE * PATCH_SIDE
PIXELS_PER_CELL = 8    # pretend image resolution feeding patch_of_pixel


@dataclass
class PlaceSpec:
    """Content layout of one image: patch position -> content tag."""

    image_id: str
    content: dict[int, tuple[str, int]]  # patch idx -> ("bg"|"unique"|"aux", id)
    latitude: float
    longitude: float
    split: str
    signature: int  # per-image id stamped into background noise cells


@dataclass
class ConfusionWorld:
    root: Path
    manifest_path: Path
    manifest: DatasetManifest
    depth: int
    adversarial_ids: list[str]
    decoy_of: dict[str, str]
    true_place_of: dict[str, str]
    specs: dict[str, PlaceSpec] = field(default_factory=dict)


def _patch_cells(patch_idx: int) -> list[tuple[int, int]]:
    gy, gx = divmod(patch_idx, GRID_SIDE)
    x0, y0 = gx * PATCH_SIDE, gy * PATCH_SIDE
    return [(x0 + lx, y0 + ly) for ly in range(PATCH_SIDE) for lx in range(PATCH_SIDE)]


def _unique_components(ident: int, pool: int = 24) -> tuple[int, int]:
    """Deterministic unordered pair of component ids for one unique patch."""
    pairs = pool * (pool - 1) // 2
    k = ident % pairs
    for a in range(pool):
        span = pool - 1 - a
        if k < span:
            return a, a + 1 + k
        k -= span
    raise AssertionError("unreachable")


def _motifs_for(content: dict[int, tuple[str, int]], signature: int) -> list[tuple[int, int, int]]:
    """Stamp plan for one image.

    Database images (negative signature) render each background
    appearance exactly, so every copy across the database is
    bit-identical: k-means centroids land right on them and their
    weights collapse to the floor. Query images mix the appearance with
    one noise cell keyed by (image, patch): query backgrounds sit close
    to the database atoms but never exactly on them. Unique patches are
    fully stamped from a two-component mix drawn from a small pool, so
    a query and its true place hold bit-identical twins while the whole
    unique population spans few descriptor directions (every direction
    the PCA keeps then carries real variance, which keeps the whitening
    amplification of query noise bounded).
    """
    motifs = []
    for patch_idx, (kind, ident) in content.items():
        cells = _patch_cells(patch_idx)
        if kind == "unique":
            comp_a, comp_b = _unique_components(ident)
        for local, (x, y) in enumerate(cells):
            if kind in ("bg", "aux"):
                if signature >= 0 and local == 0:
                    motif = _NOISE_BASE + signature * 64 + patch_idx
                else:
                    motif = (_APPEARANCE_BASE if kind == "bg" else _AUX_BASE) + ident
            else:
                comp = comp_a if local % 2 == 0 else comp_b
                motif = _UNIQUE_BASE + comp
            motifs.append((x, y, motif))
    return motifs


def _content_key(kind: str, ident: int) -> int:
    return {"bg": 1, "aux": 2, "unique": 3}[kind] * 100_000 + ident


def _keypoints_for(spec: PlaceSpec, kp_dim: int = 16) -> KeypointSet:
    """One keypoint per patch at its centre; descriptor keyed by content,
    so identical content matches exactly across images."""
    coords = []
    descs = []
    for patch_idx in sorted(spec.content):
        kind, ident = spec.content[patch_idx]
        gy, gx = divmod(patch_idx, GRID_SIDE)
        coords.append((
            (gx * PATCH_SIDE + PATCH_SIDE / 2.0) * PIXELS_PER_CELL,
            (gy * PATCH_SIDE + PATCH_SIDE / 2.0) * PIXELS_PER_CELL,
        ))
        rng = np.random.default_rng([_KP_KEY, _content_key(kind, ident)])
        v = rng.standard_normal(kp_dim)
        descs.append(v / np.linalg.norm(v))
    return KeypointSet(
        image_id=spec.image_id,
        image_height=MAP_SIDE * PIXELS_PER_CELL,
        image_width=MAP_SIDE * PIXELS_PER_CELL,
        coords=np.array(coords, dtype=np.float32),
        descriptors=np.array(descs, dtype=np.float32),
    )


def _render(spec: PlaceSpec, depth: int) -> FeatureMap:
    return synth_feature_map(
        seed=max(spec.signature, 0),
        height=MAP_SIDE,
        width=MAP_SIDE,
        depth=depth,
        motifs=_motifs_for(spec.content, spec.signature),
        image_id=spec.image_id,
    )


def make_confusion_world(
    root: str | os.PathLike,
    n_places: int = 50,
    n_queries: int = 20,
    n_adversarial: int = 8,
    n_unique: int = 5,
    n_appearances: int = 20,
    depth: int = 24,
    seed: int = 7,
) -> ConfusionWorld:
    """Write feature maps, keypoints and a manifest for the confusion set.

    Each of the n_places database images holds every background
    appearance exactly once plus n_unique fully-stamped unique patches
    at place-specific positions. Query i targets place i; adversarial
    queries keep only two of the true uniques and take their remaining
    layout from a decoy place.
    """
    n_patches = GRID_SIDE * GRID_SIDE
    if n_appearances + n_unique != n_patches:
        raise ValueError("appearances + uniques must fill the patch grid exactly")
    if n_queries > n_places or n_adversarial > n_queries:
        raise ValueError("need n_adversarial <= n_queries <= n_places")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    def place_content(place: int) -> dict[int, tuple[str, int]]:
        prng = np.random.default_rng([seed, 11, place])
        unique_pos = prng.choice(n_patches, size=n_unique, replace=False)
        bg_pos = [p for p in range(n_patches) if p not in set(unique_pos.tolist())]
        appearance_order = prng.permutation(n_appearances)
        content: dict[int, tuple[str, int]] = {}
        for slot, pos in enumerate(sorted(unique_pos.tolist())):
            content[pos] = ("unique", place * 5 + slot)
        for a, pos in zip(appearance_order, bg_pos):
            content[pos] = ("bg", int(a))
        return content

    place_specs = []
    for i in range(n_places):
        place_specs.append(
            PlaceSpec(
                image_id=f"place{i:03d}",
                content=place_content(i),
                latitude=i * 0.01,
                longitude=0.0,
                split="database",
                signature=-1,
            )
        )

    query_specs = []
    adversarial_ids = []
    decoy_of = {}
    true_place_of = {}
    for q in range(n_queries):
        true = place_specs[q]
        qid = f"query{q:03d}"
        true_place_of[qid] = true.image_id
        adversarial = q < n_adversarial
        if adversarial:
            decoy = place_specs[(q + 7) % n_places]
            decoy_of[qid] = decoy.image_id
            adversarial_ids.append(qid)
            true_uniques = sorted(
                p for p, (kind, _) in true.content.items() if kind == "unique"
            )[:2]
            displaced = [
                ident
                for p, (kind, ident) in decoy.content.items()
                if kind == "bg" and p in true_uniques
            ]
            filler_pool = displaced + [a for a in range(n_appearances)]
            content: dict[int, tuple[str, int]] = {}
            fill_at = 0
            for pos in range(n_patches):
                if pos in true_uniques:
                    content[pos] = true.content[pos]
                elif decoy.content[pos][0] == "bg":
                    content[pos] = decoy.content[pos]
                else:
                    content[pos] = ("bg", int(filler_pool[fill_at % len(filler_pool)]))
                    fill_at += 1
        else:
            # normal query: true uniques in place, background re-arranged
            qrng = np.random.default_rng([seed, 13, q])
            content = {
                p: c for p, c in true.content.items() if c[0] == "unique"
            }
            bg_pos = [p for p in range(n_patches) if p not in content]
            for a, pos in zip(qrng.permutation(n_appearances), bg_pos):
                content[pos] = ("bg", int(a))
        query_specs.append(
            PlaceSpec(
                image_id=qid,
                content=content,
                latitude=true.latitude + 3e-5,  # ~3.3 m from the true place
                longitude=0.0,
                split="query",
                signature=q,
            )
        )

    entries = []
    specs = {}
    for spec in place_specs + query_specs:
        fmap = _render(spec, depth)
        feature_path = f"{spec.image_id}.pnvf"
        keypoint_path = f"{spec.image_id}.pnvk"
        save_feature_map(fmap, root / feature_path)
        save_keypoints(_keypoints_for(spec), root / keypoint_path)
        entries.append(
            ManifestEntry(
                image_id=spec.image_id,
                feature_path=feature_path,
                keypoint_path=keypoint_path,
                latitude=spec.latitude,
                longitude=spec.longitude,
                split=spec.split,
            )
        )
        specs[spec.image_id] = spec

    manifest = DatasetManifest(entries)
    manifest_path = root / "manifest.csv"
    save_manifest(manifest, manifest_path)
    return ConfusionWorld(
        root=root,
        manifest_path=manifest_path,
        manifest=manifest,
        depth=depth,
        adversarial_ids=adversarial_ids,
        decoy_of=decoy_of,
        true_place_of=true_place_of,
        specs=specs,
    )


def make_training_triplets(
    n_triplets: int = 50,
    depth: int = 8,
    rows: int = 4,
    n_negatives: int = 2,
    seed: int = 3,
) -> list[Triplet]:
    """Separable triplets for exercising the fine-tuning loop.

    Positives differ from their query along one fixed nuisance direction,
    negatives along a different fixed offset direction, so a trainable
    assignment can learn to ignore the first and amplify the second:
    positive distances can fall while negative distances grow.
    """
    rng = np.random.default_rng(seed)
    offset = rng.standard_normal(depth)
    offset /= np.linalg.norm(offset)
    nuisance = rng.standard_normal(depth)
    nuisance -= (nuisance @ offset) * offset
    nuisance /= np.linalg.norm(nuisance)
    triplets = []
    for t in range(n_triplets):
        base = rng.standard_normal((rows, depth))
        query = Patch(0, 0, 0, (base + 0.03 * rng.standard_normal((rows, depth))).astype(np.float32))
        pos_bump = (1.0 + 0.4 * rng.random()) * nuisance
        positive = Patch(0, 0, 0, (base + pos_bump + 0.03 * rng.standard_normal((rows, depth))).astype(np.float32))
        negatives = []
        for _ in range(n_negatives):
            bump = (0.6 + 0.3 * rng.random()) * offset
            negatives.append(
                Patch(0, 0, 0, (base + bump + 0.03 * rng.standard_normal((rows, depth))).astype(np.float32))
            )
        triplets.append(
            Triplet(
                query_patch=query,
                positive_patch=positive,
                negative_patches=negatives,
                query_image=f"t{t}-q",
                positive_image=f"t{t}-p",
                negative_image=f"t{t}-n",
            )
        )
    return triplets
