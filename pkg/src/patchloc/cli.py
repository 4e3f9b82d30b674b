"""Command-line surface: build-index, finetune, weigh, query, eval, selftest.

Every tunable lives in RunConfig; a flat key=value config file sets
values and individual command-line flags override the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import zlib

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import PatchlocError
from .featureio import DatasetManifest, load_feature_map, load_manifest
from .finetune import finetune, mine_triplets, save_triplets
from .keypoints import load_keypoints
from .retrieval import (
    build_index,
    geo_distance,
    load_index,
    query_topk,
    recall_table,
    rerank,
    save_index,
)
from .vlad import VladParams, describe_global, load_params, save_params
from .weighting import kmeans, weigh_index


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    for f in dataclasses.fields(RunConfig):
        parser.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f"cfg_{f.name}",
            type=int if f.type == "int" else float,
            default=None,
            help=f"{f.name} (default {f.default})",
        )


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config)
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            overrides[f.name] = int(value) if f.type == "int" else float(value)
    return cfg.replace(**overrides) if overrides else cfg


def _load_params_or_seed(path: str | None, cfg: RunConfig, depth: int) -> VladParams:
    if path:
        return load_params(path)
    return VladParams.seeded(cfg.vlad_clusters, depth, cfg.seed)


def _manifest_dir(manifest_path: str) -> str:
    return os.path.dirname(os.path.abspath(manifest_path))


def _resolve(base: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base, path)


def _probe_depth(manifest: DatasetManifest, base: str) -> int:
    entry = (manifest.database() or manifest.entries)[0]
    return load_feature_map(_resolve(base, entry.feature_path)).depth


def cmd_build_index(args) -> int:
    cfg = _resolve_config(args)
    manifest = load_manifest(args.manifest)
    base = _manifest_dir(args.manifest)
    params = _load_params_or_seed(args.params, cfg, _probe_depth(manifest, base))
    index = build_index(manifest, params, cfg.index_config(), base_dir=base)
    save_index(index, args.out)
    with open(args.out, "rb") as fh:
        checksum = zlib.crc32(fh.read())
    n_patches = sum(len(img.descriptors) for img in index.images)
    print(
        f"indexed {len(index.images)} images, {n_patches} patches, "
        f"kmeans inertia {index.centroid_set.inertia:.6f}, checksum {checksum:08x}"
    )
    return 0


def _mining_tuples(manifest: DatasetManifest, cfg: RunConfig):
    """(query, positive, negative) image triples from the GPS labels."""
    db = manifest.database()
    rng = np.random.default_rng(cfg.seed)
    tuples = []
    for q in manifest.queries():
        positives = [
            e for e in db
            if geo_distance(q.latitude, q.longitude, e.latitude, e.longitude)
            < cfg.positive_radius_m
        ]
        negatives = [
            e for e in db
            if geo_distance(q.latitude, q.longitude, e.latitude, e.longitude)
            > cfg.negative_radius_m
        ]
        if not positives or not negatives:
            continue
        positives.sort(
            key=lambda e: geo_distance(q.latitude, q.longitude, e.latitude, e.longitude)
        )
        negative = negatives[int(rng.integers(len(negatives)))]
        tuples.append((q, positives[0], negative))
    return tuples


def _mine_all(manifest: DatasetManifest, base: str, params: VladParams, cfg: RunConfig):
    from .retrieval import _projected_vectors  # PCA fit for mining descriptors
    from .vlad import fit_pca

    tuples = _mining_tuples(manifest, cfg)
    if not tuples:
        raise PatchlocError(
            "no (query, positive, negative) tuples: check GPS labels and radii"
        )

    def load_pair(entry):
        fmap = load_feature_map(_resolve(base, entry.feature_path), image_id=entry.image_id)
        if not entry.keypoint_path:
            raise PatchlocError(f"{entry.image_id}: keypoint file required for mining")
        kps = load_keypoints(_resolve(base, entry.keypoint_path), image_id=entry.image_id)
        return fmap, kps

    # fit a mining PCA on the database patches described by current params
    db = manifest.database()
    vecs = []
    for entry in db:
        fmap = load_feature_map(_resolve(base, entry.feature_path), image_id=entry.image_id)
        _, patch_vecs, _ = _projected_vectors(fmap, params, cfg.d_p, cfg.s_p)
        vecs.extend(patch_vecs)
    pca = fit_pca(np.stack(vecs), min(cfg.d_pca, len(vecs) - 1, len(vecs[0])))

    triplets = []
    for q, p, n in tuples:
        q_map, q_kps = load_pair(q)
        p_map, p_kps = load_pair(p)
        n_map, n_kps = load_pair(n)
        triplets.extend(
            mine_triplets(
                q_map, q_kps, p_map, p_kps, n_map, n_kps,
                cfg.d_p, cfg.s_p, params, pca, cfg.finetune_config(),
            )
        )
    return triplets


def cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    manifest = load_manifest(args.manifest)
    base = _manifest_dir(args.manifest)
    params = _load_params_or_seed(args.params_in, cfg, _probe_depth(manifest, base))
    triplets = _mine_all(manifest, base, params, cfg)
    if not triplets:
        print("error: mining produced an empty triplet set", file=sys.stderr)
        return 2
    if args.triplets_out:
        save_triplets(triplets, args.triplets_out)
    tuned, trace = finetune(params, triplets, cfg.finetune_config())
    save_params(tuned, args.params_out)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.writelines(f"{v!r}\n" for v in trace)
    print(
        f"fine-tuned on {len(triplets)} triplets for {cfg.epochs} epochs: "
        f"loss {trace[0]:.6f} -> {trace[-1]:.6f}"
    )
    return 0


def cmd_weigh(args) -> int:
    cfg = _resolve_config(args)
    index = load_index(args.index)
    matrix = np.vstack([
        np.stack([d.vector for d in img.descriptors]) for img in index.images
    ])
    k = args.cfg_k if args.cfg_k is not None else index.config.k
    alpha = args.cfg_alpha if args.cfg_alpha is not None else index.config.alpha
    centroid_set = kmeans(matrix, int(k), seed=cfg.seed)
    for img in index.images:
        weigh_index(img.descriptors, centroid_set, int(alpha))
    index.centroid_set = centroid_set
    index.config.k = int(k)
    index.config.alpha = int(alpha)
    save_index(index, args.out)
    print(f"re-weighted {len(index.images)} images with k={k}, alpha={alpha}")
    return 0


def cmd_query(args) -> int:
    index = load_index(args.index)
    fmap = load_feature_map(args.feature)
    q_global = describe_global(index.vlad_params, index.pca_global, fmap)
    k = min(args.topk, len(index.images))
    candidates = query_topk(index, q_global, k)
    result = rerank(index, fmap, candidates, weighted=not args.unweighted)
    for rank, row in enumerate(result.ranking, start=1):
        print(f"{rank}\t{row.image_id}\t{row.score:.4f}\t{row.global_distance:.6f}")
    return 0


def _format_recall(table: dict[int, float]) -> str:
    header = " ".join(f"R@{n}" for n in sorted(table))
    values = " ".join(f"{100.0 * table[n]:.2f}" for n in sorted(table))
    return f"{header}\n{values}"


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    manifest = load_manifest(args.manifest)
    base = _manifest_dir(args.manifest)
    params = _load_params_or_seed(args.params, cfg, _probe_depth(manifest, base))
    if not args.no_finetune:
        triplets = _mine_all(manifest, base, params, cfg)
        if triplets:
            params, _ = finetune(params, triplets, cfg.finetune_config())
    index = build_index(manifest, params, cfg.index_config(), base_dir=base)
    if args.save_index:
        save_index(index, args.save_index)

    results = []
    k = min(cfg.k_candidates, len(index.images))
    for entry in manifest.queries():
        fmap = load_feature_map(_resolve(base, entry.feature_path), image_id=entry.image_id)
        q_global = describe_global(index.vlad_params, index.pca_global, fmap)
        candidates = query_topk(index, q_global, k)
        results.append(rerank(index, fmap, candidates, weighted=not args.unweighted))

    ns = tuple(n for n in (1, 5, 10) if n <= len(index.images))
    table = recall_table(results, manifest, ns=ns, radius_m=cfg.radius_m)
    print(_format_recall(table))
    if args.results:
        coords = {e.image_id: (e.latitude, e.longitude) for e in manifest.entries}
        with open(args.results, "w", encoding="utf-8") as fh:
            for res in results:
                qlat, qlon = coords[res.query_id]
                for rank, row in enumerate(res.ranking, start=1):
                    dist = geo_distance(qlat, qlon, *coords[row.image_id])
                    fh.write(
                        f"{res.query_id},{rank},{row.image_id},{row.score!r},"
                        f"{row.global_distance!r},{dist:.2f}\n"
                    )
    return 0


def cmd_selftest(args) -> int:
    """Fast built-in checks of the numerical core."""
    from .patches import patch_count
    from .matching import mutual_nn, weight_matrix
    from .finetune import loss_gradient
    from .benchdata import make_training_triplets
    from ._gradcheck import finite_difference_gradient, gradient_relative_error

    rng = np.random.default_rng(0)
    failures = 0

    def check(name, ok):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1

    ok = True
    for _ in range(200):
        h, w = rng.integers(1, 40, size=2)
        d = int(rng.integers(1, min(h, w) + 1))
        s = int(rng.integers(1, 8))
        expected = len([
            None
            for y in range(0, h - d + 1, s)
            for x in range(0, w - d + 1, s)
        ])
        ok &= patch_count(int(h), int(w), d, s) == expected
    check("patch_count matches window enumeration", ok)

    ok = True
    for _ in range(50):
        m = rng.random((int(rng.integers(1, 12)), int(rng.integers(1, 12))))
        got = {(p.i, p.j) for p in mutual_nn(m)}
        brute = {
            (i, j)
            for i in range(m.shape[0])
            for j in range(m.shape[1])
            if j == int(np.argmin(m[i])) and i == int(np.argmin(m[:, j]))
        }
        ok &= got == brute
    check("mutual_nn matches brute force", ok)

    m = rng.random((6, 7))
    check(
        "all-ones weights leave the matrix unchanged",
        np.array_equal(weight_matrix(np.ones(6), np.ones(7), m), m),
    )

    triplets = make_training_triplets(n_triplets=3, depth=6, rows=3, seed=1)
    ok = True
    for t in triplets:
        params = VladParams.seeded(3, 6, seed=11)
        grad = loss_gradient(params, t, margin=0.5)
        fd = finite_difference_gradient(params, t, margin=0.5)
        ok &= gradient_relative_error(grad, fd) < 1e-4
    check("analytic gradient matches finite differences", ok)

    if failures:
        print(f"{failures} selftest check(s) failed", file=sys.stderr)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchloc",
        description="Patch-level place recognition: weighted patch matching over dense feature maps.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="describe, cluster and weigh a database")
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", help="PNVP parameter file (seeded init if omitted)")
    p.add_argument("--out", required=True, help="output PNVI index path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("finetune", help="mine triplets and fine-tune the aggregation layer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--params-in", help="initial PNVP parameters")
    p.add_argument("--params-out", required=True)
    p.add_argument("--trace", help="write per-epoch mean loss, one value per line")
    p.add_argument("--triplets-out", help="save mined triplets as text records")
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("weigh", help="recluster and reweigh an existing index")
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_weigh)

    p = sub.add_parser("query", help="rank the database for one feature map")
    p.add_argument("--index", required=True)
    p.add_argument("--feature", required=True, help="query PNVF file")
    p.add_argument("--topk", type=int, default=100)
    p.add_argument("--unweighted", action="store_true", help="skip reciprocal weighting")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="end-to-end evaluation with a recall table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", help="initial PNVP parameters")
    p.add_argument("--unweighted", action="store_true", help="disable reciprocal weighting")
    p.add_argument("--no-finetune", action="store_true", help="skip triplet fine-tuning")
    p.add_argument("--save-index", help="persist the built index")
    p.add_argument("--results", help="write per-query rankings to this file")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run quick internal consistency checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PatchlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
