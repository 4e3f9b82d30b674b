"""Fine-tune the aggregation layer on mined-style triplets.

Positives differ from their query along one nuisance direction and
negatives along another; gradient descent on the hinged triplet loss
learns to ignore the first and amplify the second, pulling positives
in and pushing negatives out.
"""

import numpy as np

from patchloc import VladParams, cosine_distance, finetune
from patchloc.benchdata import make_training_triplets
from patchloc.finetune import FinetuneConfig
from patchloc.vlad import projected_vector

triplets = make_training_triplets(n_triplets=50, depth=8, rows=4, n_negatives=2, seed=3)
params = VladParams.seeded(n_clusters=4, depth=8, seed=0)


def mean_distances(p):
    pos, neg = [], []
    for t in triplets:
        q = projected_vector(p, t.query_patch)
        pos.append(cosine_distance(q, projected_vector(p, t.positive_patch)))
        neg.extend(cosine_distance(q, projected_vector(p, n)) for n in t.negative_patches)
    return np.mean(pos), np.mean(neg)


pre_pos, pre_neg = mean_distances(params)
print(f"before: mean d(query, positive) = {pre_pos:.4f}, mean d(query, negative) = {pre_neg:.4f}")

cfg = FinetuneConfig(margin=0.8, learning_rate=3e-3, momentum=0.9, epochs=200, seed=0)
tuned, trace = finetune(params, triplets, cfg)

print(f"mean loss per epoch: {trace[0]:.4f} (first) -> {trace[-1]:.4f} (last)")
marks = [0, 24, 49, 99, 199]
print("trace samples:", ", ".join(f"e{m}={trace[m]:.3f}" for m in marks))

post_pos, post_neg = mean_distances(tuned)
print(f"after:  mean d(query, positive) = {post_pos:.4f}, mean d(query, negative) = {post_neg:.4f}")
print("positives pulled in, negatives pushed out:",
      post_pos < pre_pos and post_neg > pre_neg)
