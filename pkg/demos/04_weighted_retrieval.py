"""End-to-end retrieval: global candidates, weighted reranking, recall.

The confusion set pits two mechanisms against each other: adversarial
queries copy a wrong place's background arrangement, which dominates
unweighted spatial scoring, while their few locally specific patches
only decide the ranking once reciprocal weighting suppresses the
common content.
"""

import tempfile
from pathlib import Path

from patchloc import VladParams, build_index, describe_global, load_feature_map, recall_table
from patchloc.retrieval import IndexConfig, query_topk, rerank
from patchloc.benchdata import make_confusion_world

root = Path(tempfile.mkdtemp())
world = make_confusion_world(root, n_places=30, n_queries=10, n_adversarial=4, depth=24, seed=7)
params = VladParams.seeded(n_clusters=6, depth=24, seed=0)
config = IndexConfig(d_p=5, s_p=5, k=26, alpha=1, d_pca=29, seed=0)
index = build_index(world.manifest, params, config, base_dir=root)


def evaluate(weighted):
    results = []
    for entry in world.manifest.queries():
        fmap = load_feature_map(root / entry.feature_path, image_id=entry.image_id)
        q_global = describe_global(index.vlad_params, index.pca_global, fmap)
        candidates = query_topk(index, q_global, len(index.images))
        results.append(rerank(index, fmap, candidates, weighted=weighted))
    return results


for weighted in (False, True):
    results = evaluate(weighted)
    table = recall_table(results, world.manifest, ns=(1, 5, 10), radius_m=25.0)
    adversarial_hits = sum(
        1 for r in results
        if r.query_id in world.adversarial_ids
        and r.ranking[0].image_id == world.true_place_of[r.query_id]
    )
    label = "weighted" if weighted else "unweighted"
    print(f"{label:>10}: " + "  ".join(f"R@{n}={100 * v:.2f}" for n, v in table.items())
          + f"  (adversarial R@1: {adversarial_hits}/{len(world.adversarial_ids)})")

print("\nper-query rank of the true place (weighted):")
for r in evaluate(True):
    true_id = world.true_place_of[r.query_id]
    rank = [m.image_id for m in r.ranking].index(true_id) + 1
    tag = "adversarial" if r.query_id in world.adversarial_ids else "normal"
    print(f"  {r.query_id} ({tag:>11}): true place {true_id} at rank {rank}")
