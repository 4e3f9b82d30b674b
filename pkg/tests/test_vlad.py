import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchloc.errors import DegenerateDescriptorError, FormatError, InvariantViolation
from patchloc.featureio import synth_feature_map
from patchloc.patches import Patch, extract_patches
from patchloc.vlad import (
    PcaModel,
    VladParams,
    aggregate_vlad,
    apply_pca,
    cosine_distance,
    describe_global,
    describe_patch,
    fit_pca,
    load_params,
    project,
    save_params,
    soft_assign,
    whiten,
)


def make_patch(features):
    return Patch(index=0, grid_x=0, grid_y=0, features=np.asarray(features, dtype=np.float32))


class TestSoftAssign:
    def test_single_cluster(self):
        params = VladParams(np.zeros((1, 3)), np.zeros(1), np.zeros((1, 3)))
        assert np.allclose(soft_assign(params, np.ones(3)), [1.0])

    def test_uniform_when_symmetric(self):
        params = VladParams(np.zeros((4, 2)), np.full(4, 0.7), np.zeros((4, 2)))
        out = soft_assign(params, np.array([1.0, -2.0]))
        assert np.allclose(out, 0.25)
        assert np.isclose(out.sum(), 1.0, atol=1e-9)

    def test_large_margin_is_one_hot(self):
        # cluster 2 gets a +50 logit margin over the others
        bias = np.array([0.0, 0.0, 50.0, 0.0])
        params = VladParams(np.zeros((4, 2)), bias, np.zeros((4, 2)))
        out = soft_assign(params, np.zeros(2))
        expected = np.exp(bias - 50.0)
        expected /= expected.sum()
        assert np.allclose(out, expected)
        assert out[2] > 1.0 - 1e-9

    def test_nonfinite_feature(self):
        params = VladParams(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)))
        with pytest.raises(InvariantViolation):
            soft_assign(params, np.array([np.nan, 0.0]))


class TestAggregate:
    def test_zero_residuals(self):
        c = np.array([[1.0, 2.0, 3.0]])
        params = VladParams(np.zeros((1, 3)), np.zeros(1), c)
        patch = make_patch(np.tile(c, (4, 1)))
        assert np.allclose(aggregate_vlad(params, patch), 0.0)

    def test_single_row_single_cluster(self):
        params = VladParams(np.zeros((1, 2)), np.zeros(1), np.array([[1.0, 1.0]]))
        patch = make_patch([[3.0, 5.0]])
        assert np.allclose(aggregate_vlad(params, patch), [[2.0, 4.0]])

    def test_hand_computed_two_by_two(self):
        # two features, two clusters, hand-evaluated soft assignments
        w = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = np.zeros(2)
        c = np.array([[0.0, 0.0], [1.0, 0.0]])
        params = VladParams(w, b, c)
        x1 = np.array([1.0, 0.0])
        x2 = np.array([0.0, 1.0])
        patch = make_patch([x1, x2])

        def softmax(z):
            e = np.exp(z - z.max())
            return e / e.sum()

        a1 = softmax(np.array([1.0, 0.0]))
        a2 = softmax(np.array([0.0, 1.0]))
        expected = np.stack([
            a1[0] * (x1 - c[0]) + a2[0] * (x2 - c[0]),
            a1[1] * (x1 - c[1]) + a2[1] * (x2 - c[1]),
        ])
        assert np.allclose(aggregate_vlad(params, patch), expected, atol=1e-12)

    def test_depth_mismatch(self):
        params = VladParams(np.zeros((1, 3)), np.zeros(1), np.zeros((1, 3)))
        with pytest.raises(InvariantViolation):
            aggregate_vlad(params, make_patch([[1.0, 2.0]]))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 500))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        params = VladParams.seeded(3, 4, seed=seed)
        feats = rng.standard_normal((6, 4)).astype(np.float32)
        shuffled = feats[rng.permutation(6)]
        a = aggregate_vlad(params, make_patch(feats))
        b = aggregate_vlad(params, make_patch(shuffled))
        assert np.allclose(a, b, atol=1e-12)


class TestProject:
    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        out = project(rng.standard_normal((4, 6)))
        assert abs(np.linalg.norm(out) - 1.0) < 1e-6

    def test_single_nonzero_column(self):
        m = np.zeros((3, 4))
        m[:, 2] = [1.0, 2.0, 2.0]
        out = project(m).reshape(3, 4)
        assert np.allclose(out[:, [0, 1, 3]], 0.0)
        assert np.allclose(out[:, 2], np.array([1.0, 2.0, 2.0]) / 3.0)

    def test_all_zero_matrix(self):
        with pytest.raises(DegenerateDescriptorError):
            project(np.zeros((3, 3)))


class TestPca:
    def test_line_direction_recovered(self):
        rng = np.random.default_rng(1)
        direction = np.array([3.0, 4.0]) / 5.0
        data = np.outer(rng.standard_normal(200), direction)
        model = fit_pca(data, 1)
        basis0 = model.basis[0].astype(np.float64)
        assert abs(abs(basis0 @ direction) - 1.0) < 1e-5

    def test_rank_deficiency_warns_and_floors(self):
        data = np.tile(np.array([1.0, 2.0, 3.0]), (5, 1))  # zero variance
        with pytest.warns(RuntimeWarning, match="rank"):
            model = fit_pca(data, 2)
        assert np.all(model.scales > 0)

    def test_whitened_covariance_is_identity(self):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((10_000, 32))
        model = fit_pca(data, 8)
        transformed = whiten(model, data)
        cov = np.cov(transformed, rowvar=False)
        assert np.allclose(cov, np.eye(8), atol=1e-2)

    def test_basis_orthonormal(self):
        rng = np.random.default_rng(3)
        model = fit_pca(rng.standard_normal((500, 16)), 6)
        b = model.basis.astype(np.float64)
        assert np.allclose(b @ b.T, np.eye(6), atol=1e-6)

    def test_too_few_samples(self):
        with pytest.raises(InvariantViolation):
            fit_pca(np.zeros((4, 8)), 4)

    def test_gram_path_matches_covariance_path(self):
        rng = np.random.default_rng(4)
        tall = rng.standard_normal((50, 20))
        wide_model = fit_pca(np.pad(tall, ((0, 0), (0, 40))), 5)  # d_in=60 > n=50
        assert wide_model.basis.shape == (5, 60)
        b = wide_model.basis.astype(np.float64)
        assert np.allclose(b @ b.T, np.eye(5), atol=1e-6)

    def test_apply_identity_model(self):
        model = PcaModel(mean=np.zeros(3), basis=np.eye(3), scales=np.ones(3))
        out = apply_pca(model, np.array([0.0, 3.0, 4.0]))
        assert np.allclose(out, [0.0, 0.6, 0.8])

    def test_mean_input_degenerates(self):
        model = PcaModel(mean=np.array([1.0, 2.0]), basis=np.eye(2), scales=np.ones(2))
        with pytest.raises(DegenerateDescriptorError):
            apply_pca(model, np.array([1.0, 2.0]))

    def test_hand_projection(self):
        model = PcaModel(mean=np.zeros(2), basis=np.array([[1.0, 0.0]]), scales=np.array([2.0]))
        out = apply_pca(model, np.array([3.0, 4.0]))
        # pre-normalization value is 2 * 3 = 6, renormalized to [1]
        assert np.allclose(out, [1.0])
        assert np.allclose(whiten(model, np.array([3.0, 4.0])), [6.0])


def toy_pipeline(depth=6, n_clusters=3, d_pca=4, seed=0):
    rng = np.random.default_rng(seed)
    params = VladParams.seeded(n_clusters, depth, seed=seed)
    samples = rng.standard_normal((64, n_clusters * depth))
    pca = fit_pca(samples, d_pca)
    return params, pca


class TestDescribe:
    def test_unit_norm_and_determinism(self):
        params, pca = toy_pipeline()
        rng = np.random.default_rng(5)
        patch = make_patch(rng.standard_normal((4, 6)))
        d1 = describe_patch(params, pca, patch)
        d2 = describe_patch(params, pca, patch)
        assert abs(np.linalg.norm(d1.vector.astype(np.float64)) - 1.0) < 1e-6
        assert np.array_equal(d1.vector, d2.vector)
        assert d1.weight == 1.0

    def test_single_cell_change_changes_descriptor(self):
        params, pca = toy_pipeline()
        rng = np.random.default_rng(6)
        feats = rng.standard_normal((4, 6)).astype(np.float32)
        other = feats.copy()
        other[2, 3] += 1.0
        d1 = describe_patch(params, pca, make_patch(feats))
        d2 = describe_patch(params, pca, make_patch(other))
        assert not np.array_equal(d1.vector, d2.vector)

    def test_global_equals_full_patch(self):
        params, pca = toy_pipeline()
        fmap = synth_feature_map(0, 4, 4, 6)
        full = Patch(0, 0, 0, fmap.data.reshape(16, 6))
        assert np.array_equal(
            describe_global(params, pca, fmap), describe_patch(params, pca, full).vector
        )

    def test_shared_motifs_give_near_zero_distance(self):
        params, pca = toy_pipeline()
        motifs = [(x, y, 100 + (y * 4 + x)) for y in range(4) for x in range(4)]
        a = synth_feature_map(1, 4, 4, 6, motifs=motifs)
        b = synth_feature_map(2, 4, 4, 6, motifs=motifs)
        da = describe_global(params, pca, a)
        db = describe_global(params, pca, b)
        assert cosine_distance(da, db) < 1e-6


class TestCosine:
    def test_self_distance_zero(self):
        v = np.array([0.6, 0.8])
        assert cosine_distance(v, v) == 0.0

    def test_orthogonal(self):
        assert np.isclose(cosine_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])), 1.0)

    def test_opposite(self):
        v = np.array([0.0, 1.0])
        assert np.isclose(cosine_distance(v, -v), 2.0)

    def test_non_unit_rejected(self):
        with pytest.raises(InvariantViolation):
            cosine_distance(np.array([2.0, 0.0]), np.array([1.0, 0.0]))


def test_params_roundtrip(tmp_path):
    params = VladParams.seeded(5, 7, seed=9)
    path = tmp_path / "p.pnvp"
    save_params(params, path)
    loaded = load_params(path)
    assert np.array_equal(loaded.assign_weights, params.assign_weights)
    assert np.array_equal(loaded.assign_bias, params.assign_bias)
    assert np.array_equal(loaded.centroids, params.centroids)


def test_params_bad_magic(tmp_path):
    path = tmp_path / "bad.pnvp"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load_params(path)
