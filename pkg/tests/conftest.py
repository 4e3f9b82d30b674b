import pytest

from patchloc.benchdata import make_confusion_world

# Settings the acceptance experiments run at: small VLAD and PCA sizes so
# the whole suite stays fast, default patch geometry (d_p = s_p = 5).
WORLD_SEED = 7
EXPERIMENT = dict(
    d_p=5, s_p=5, vlad_clusters=6, d_pca=40, k=26, alpha=1,
    k_candidates=50, radius_m=25.0,
)


@pytest.fixture(scope="session")
def confusion_world(tmp_path_factory):
    """Shared 50-place / 20-query confusion set with keypoints and GPS."""
    root = tmp_path_factory.mktemp("confusion")
    return make_confusion_world(
        root, n_places=50, n_queries=20, n_adversarial=8, depth=24, seed=WORLD_SEED
    )
