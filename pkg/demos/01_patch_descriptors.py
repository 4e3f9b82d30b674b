"""Walk through the descriptor pipeline on a synthetic feature map.

A feature map is cut into patches by a sliding window; each patch is
aggregated into per-cluster residuals (soft-assignment VLAD), projected
to a unit vector, and reduced by whitening PCA. Two maps that share
planted motifs end up with matching patch descriptors.
"""

import numpy as np

from patchloc import (
    VladParams,
    aggregate_vlad,
    cosine_distance,
    describe_patch,
    extract_patches,
    fit_pca,
    patch_count,
    project,
    synth_feature_map,
)

H = W = 20
DEPTH = 16
D_P = S_P = 5

print(f"feature map {H}x{W}x{DEPTH}, patches {D_P}x{D_P} stride {S_P}")
print("patch count:", patch_count(H, W, D_P, S_P))

# plant the same motif block in two different maps at different spots
motif_cells_a = [(x, y, 42) for x in range(5, 10) for y in range(0, 5)]
motif_cells_b = [(x, y, 42) for x in range(10, 15) for y in range(15, 20)]
map_a = synth_feature_map(seed=1, height=H, width=W, depth=DEPTH, motifs=motif_cells_a)
map_b = synth_feature_map(seed=2, height=H, width=W, depth=DEPTH, motifs=motif_cells_b)

params = VladParams.seeded(n_clusters=4, depth=DEPTH, seed=0)
patches_a = extract_patches(map_a, D_P, S_P)
patches_b = extract_patches(map_b, D_P, S_P)

vlad = aggregate_vlad(params, patches_a[0])
print("VLAD matrix shape:", vlad.shape)
print("projected vector norm:", np.linalg.norm(project(vlad)))

# fit a small PCA on all patch vectors of both maps
vectors = [project(aggregate_vlad(params, p)) for p in patches_a + patches_b]
pca = fit_pca(np.stack(vectors), d_pca=8)
descs_a = [describe_patch(params, pca, p) for p in patches_a]
descs_b = [describe_patch(params, pca, p) for p in patches_b]

# the motif patch in map A is patch (1, 0); in map B it is patch (2, 3)
motif_a = next(d for d in descs_a if (d.grid_x, d.grid_y) == (1, 0))
motif_b = next(d for d in descs_b if (d.grid_x, d.grid_y) == (2, 3))
background = descs_a[0]

print("\ncosine distances between patch descriptors:")
print(f"  shared motif, different maps: {cosine_distance(motif_a.vector, motif_b.vector):.6f}")
print(f"  motif vs background:          {cosine_distance(motif_a.vector, background.vector):.6f}")
