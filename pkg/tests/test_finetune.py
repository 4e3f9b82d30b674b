import numpy as np
import pytest

from patchloc._gradcheck import (
    finite_difference_gradient,
    gradient_relative_error,
    reference_loss,
)
from patchloc.benchdata import make_training_triplets
from patchloc.errors import InvariantViolation, PatchlocError
from patchloc.featureio import synth_feature_map
from patchloc.finetune import (
    FinetuneConfig,
    Triplet,
    finetune,
    load_triplets,
    loss_gradient,
    mine_triplets,
    save_triplets,
    select_candidates,
    triplet_loss,
    triplet_loss_of_params,
)
from patchloc.keypoints import KeypointSet
from patchloc.patches import Patch
from patchloc.vlad import PatchDescriptor, VladParams, fit_pca


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def desc(v, gx=0, gy=0):
    return PatchDescriptor(vector=unit(v).astype(np.float32), grid_x=gx, grid_y=gy)


class TestSelectCandidates:
    def test_full_ranking(self):
        queries = [desc([1.0, 0.0])]
        targets = [desc([0.0, 1.0]), desc([1.0, 0.1]), desc([-1.0, 0.0])]
        assert select_candidates(queries, targets, 3) == [[1, 0, 2]]

    def test_exact_target_first(self):
        queries = [desc([0.6, 0.8])]
        targets = [desc([1.0, 0.0]), desc([0.6, 0.8])]
        assert select_candidates(queries, targets, 1) == [[1]]

    def test_hand_distances(self):
        # distances to targets: 0.3, 0.1, 0.5, 0.2 -> two smallest are 1, 3
        def at_distance(d):
            return [1.0 - d, np.sqrt(1.0 - (1.0 - d) ** 2)]

        queries = [desc([1.0, 0.0])]
        targets = [desc(at_distance(d)) for d in (0.3, 0.1, 0.5, 0.2)]
        assert select_candidates(queries, targets, 2) == [[1, 3]]

    def test_k_too_large(self):
        with pytest.raises(InvariantViolation):
            select_candidates([desc([1, 0])], [desc([1, 0])], 2)


class TestTripletLoss:
    def test_inactive_hinge(self):
        q = unit([1.0, 0.0, 0.0])
        pos = [q.copy()]
        neg = [unit([0.0, 1.0, 0.0])]  # distance 1 >= margin
        assert triplet_loss(q, pos, neg, 0.5) == 0.0

    def test_hand_case(self):
        # d_pos = 0.2, d_neg = 0.25, margin 0.1 -> 0.05
        q = unit([1.0, 0.0])
        pos = [unit([0.8, np.sqrt(1 - 0.8 ** 2)])]
        neg = [unit([0.75, np.sqrt(1 - 0.75 ** 2)])]
        assert np.isclose(triplet_loss(q, pos, neg, 0.1), 0.05, atol=1e-9)

    def test_identical_negatives(self):
        q = unit([0.0, 1.0])
        loss = triplet_loss(q, [q.copy()], [q.copy()] * 4, 0.1)
        assert np.isclose(loss, 4 * 0.1)

    def test_empty_lists_rejected(self):
        q = unit([1.0, 0.0])
        with pytest.raises(InvariantViolation):
            triplet_loss(q, [], [q], 0.1)

    def test_min_over_positives(self):
        q = unit([1.0, 0.0])
        far = unit([0.0, 1.0])
        near = unit([0.9, np.sqrt(1 - 0.81)])
        neg = unit([0.95, np.sqrt(1 - 0.95 ** 2)])
        one = triplet_loss(q, [near], [neg], 0.2)
        both = triplet_loss(q, [far, near], [neg], 0.2)
        assert np.isclose(one, both)


def random_triplet(rng, rows=4, depth=8, negatives=2):
    def patch():
        return Patch(0, 0, 0, rng.standard_normal((rows, depth)).astype(np.float32))

    return Triplet(query_patch=patch(), positive_patch=patch(),
                   negative_patches=[patch() for _ in range(negatives)])


class TestGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for trial in range(5):
            params = VladParams.seeded(4, 8, seed=trial)
            t = random_triplet(rng)
            grad = loss_gradient(params, t, margin=0.5)
            fd = finite_difference_gradient(params, t, margin=0.5)
            assert gradient_relative_error(grad, fd) < 1e-4

    def test_zero_when_hinge_inactive(self):
        rng = np.random.default_rng(1)
        params = VladParams.seeded(3, 6, seed=0)
        t = random_triplet(rng, depth=6)
        # margin so small that d_pos + m < d_neg for this instance
        loss = triplet_loss_of_params(params, t, margin=1e-9)
        if loss == 0.0:
            g = loss_gradient(params, t, margin=1e-9)
            assert np.all(g.assign_weights == 0)
            assert np.all(g.assign_bias == 0)
            assert np.all(g.centroids == 0)

    def test_nonzero_when_active(self):
        rng = np.random.default_rng(2)
        params = VladParams.seeded(4, 8, seed=3)
        t = random_triplet(rng)
        assert triplet_loss_of_params(params, t, margin=1.5) > 0
        g = loss_gradient(params, t, margin=1.5)
        total = sum(np.abs(x).sum() for x in (g.assign_weights, g.assign_bias, g.centroids))
        assert total > 0

    def test_reference_loss_agrees_with_chain(self):
        rng = np.random.default_rng(3)
        params = VladParams.seeded(4, 8, seed=4)
        t = random_triplet(rng)
        w = params.assign_weights.astype(np.float64)
        b = params.assign_bias.astype(np.float64)
        c = params.centroids.astype(np.float64)
        assert np.isclose(
            reference_loss(w, b, c, t, 0.5), triplet_loss_of_params(params, t, 0.5),
            atol=1e-12,
        )

    def test_single_step_descends(self):
        rng = np.random.default_rng(4)
        params = VladParams.seeded(4, 8, seed=5)
        for _ in range(5):
            t = random_triplet(rng)
            before = triplet_loss_of_params(params, t, margin=1.0)
            if before == 0.0:
                continue
            tuned, _ = finetune(
                params, [t],
                FinetuneConfig(margin=1.0, learning_rate=1e-5, momentum=0.0, epochs=1),
            )
            after = triplet_loss_of_params(tuned, t, margin=1.0)
            assert after <= before + 1e-12


class TestFinetune:
    def test_zero_learning_rate_is_identity(self):
        triplets = make_training_triplets(n_triplets=4, depth=6, rows=3, seed=0)
        params = VladParams.seeded(3, 6, seed=1)
        tuned, trace = finetune(
            params, triplets, FinetuneConfig(margin=0.4, learning_rate=0.0, epochs=3)
        )
        assert np.array_equal(tuned.assign_weights, params.assign_weights)
        assert np.array_equal(tuned.assign_bias, params.assign_bias)
        assert np.array_equal(tuned.centroids, params.centroids)
        assert len(trace) == 3

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_exploding_rate_aborts(self):
        triplets = make_training_triplets(n_triplets=6, depth=6, rows=3, seed=0)
        params = VladParams.seeded(3, 6, seed=1)
        with pytest.raises(PatchlocError):
            finetune(
                params, triplets,
                FinetuneConfig(margin=0.4, learning_rate=1e155, momentum=0.9, epochs=50),
            )

    def test_empty_triplets_rejected(self):
        params = VladParams.seeded(3, 6, seed=1)
        with pytest.raises(InvariantViolation):
            finetune(params, [], FinetuneConfig())


def content_keypoints(image_id, contents, size=80, dim=128):
    """One keypoint per patch centre of a 2x2 patch grid; one-hot
    descriptors keyed by content id, so equal content matches at
    distance zero and different content is exactly orthogonal."""
    coords, descs = [], []
    for idx, content in enumerate(contents):
        gy, gx = divmod(idx, 2)
        coords.append(((gx * 2 + 1) * 20.0, (gy * 2 + 1) * 20.0))
        v = np.zeros(dim)
        v[content % dim] = 1.0
        descs.append(v)
    return KeypointSet(
        image_id=image_id, image_height=size, image_width=size,
        coords=np.array(coords, dtype=np.float32),
        descriptors=np.array(descs, dtype=np.float32),
    )


def motif_map(seed, contents, image_id):
    motifs = []
    for idx, content in enumerate(contents):
        gy, gx = divmod(idx, 2)
        for dy in range(2):
            for dx in range(2):
                motifs.append((gx * 2 + dx, gy * 2 + dy, content))
    return synth_feature_map(seed, 4, 4, 8, motifs=motifs, image_id=image_id)


class TestMining:
    def pipeline(self, seed=0):
        params = VladParams.seeded(3, 8, seed=seed)
        rng = np.random.default_rng(seed + 1)
        pca = fit_pca(rng.standard_normal((40, 24)), 6)
        return params, pca

    def test_identical_positive_pairs_aligned(self):
        params, pca = self.pipeline()
        contents = [10, 11, 12, 13]
        q_map = motif_map(0, contents, "q")
        p_map = motif_map(0, contents, "p")
        n_map = motif_map(1, [20, 21, 22, 23], "n")
        q_kps = content_keypoints("q", contents)
        p_kps = content_keypoints("p", contents)
        n_kps = content_keypoints("n", [20, 21, 22, 23])
        cfg = FinetuneConfig(k_p=2, k_n=2, ratio_threshold=0.8, ransac_tol=2.0)
        triplets = mine_triplets(
            q_map, q_kps, p_map, p_kps, n_map, n_kps, 2, 2, params, pca, cfg
        )
        assert len(triplets) == 4
        for t in triplets:
            assert t.positive_patch.index == t.query_patch.index
            assert np.array_equal(t.positive_patch.features, t.query_patch.features)
            assert t.negative_patches

    def test_max_count_candidate_wins(self):
        # positive shares content with the query only at patch 2, but at a
        # shifted grid slot, so the keypoint vote must pick that slot
        params, pca = self.pipeline(seed=2)
        q_contents = [30, 31, 32, 33]
        p_contents = [32, 40, 41, 42]  # query patch 2 content sits at slot 0
        q_map = motif_map(3, q_contents, "q")
        p_map = motif_map(4, p_contents, "p")
        n_map = motif_map(5, [50, 51, 52, 53], "n")
        cfg = FinetuneConfig(k_p=4, k_n=2, ratio_threshold=0.8, ransac_tol=2.0)
        triplets = mine_triplets(
            q_map, content_keypoints("q", q_contents),
            p_map, content_keypoints("p", p_contents),
            n_map, content_keypoints("n", [50, 51, 52, 53]),
            2, 2, params, pca, cfg,
        )
        assert len(triplets) == 1
        t = triplets[0]
        assert t.query_patch.index == 2
        assert t.positive_patch.index == 0

    def test_no_matches_gives_empty_list(self):
        params, pca = self.pipeline(seed=3)
        q_map = motif_map(6, [60, 61, 62, 63], "q")
        p_map = motif_map(7, [70, 71, 72, 73], "p")
        n_map = motif_map(8, [80, 81, 82, 83], "n")
        cfg = FinetuneConfig(k_p=2, k_n=2, ratio_threshold=0.8)
        triplets = mine_triplets(
            q_map, content_keypoints("q", [60, 61, 62, 63]),
            p_map, content_keypoints("p", [70, 71, 72, 73]),
            n_map, content_keypoints("n", [80, 81, 82, 83]),
            2, 2, params, pca, cfg,
        )
        assert triplets == []

    def test_deterministic(self):
        params, pca = self.pipeline(seed=4)
        contents = [10, 11, 12, 13]
        args = (
            motif_map(0, contents, "q"), content_keypoints("q", contents),
            motif_map(0, contents, "p"), content_keypoints("p", contents),
            motif_map(1, [20, 21, 22, 23], "n"), content_keypoints("n", [20, 21, 22, 23]),
            2, 2, params, pca, FinetuneConfig(k_p=2, k_n=2),
        )
        a = mine_triplets(*args)
        b = mine_triplets(*args)
        assert [(t.query_patch.index, t.positive_patch.index,
                 [n.index for n in t.negative_patches]) for t in a] == \
               [(t.query_patch.index, t.positive_patch.index,
                 [n.index for n in t.negative_patches]) for t in b]


def test_triplet_records_roundtrip(tmp_path):
    contents = [10, 11, 12, 13]
    maps = {
        "q": motif_map(0, contents, "q"),
        "p": motif_map(0, contents, "p"),
        "n": motif_map(1, [20, 21, 22, 23], "n"),
    }
    triplets = [
        Triplet(
            query_patch=Patch(2, 0, 1, maps["q"].data[2:4, 0:2].reshape(4, 8)),
            positive_patch=Patch(2, 0, 1, maps["p"].data[2:4, 0:2].reshape(4, 8)),
            negative_patches=[Patch(0, 0, 0, maps["n"].data[0:2, 0:2].reshape(4, 8))],
            query_image="q", positive_image="p", negative_image="n",
        )
    ]
    path = tmp_path / "triplets.txt"
    save_triplets(triplets, path)
    loaded = load_triplets(path, maps, 2, 2)
    assert len(loaded) == 1
    assert loaded[0].query_patch.index == 2
    assert np.array_equal(loaded[0].query_patch.features, triplets[0].query_patch.features)
    assert [p.index for p in loaded[0].negative_patches] == [0]
