import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvds.linalg import (
    PcaModel,
    cosine,
    kmeans,
    kmeans_distortion,
    pca_apply,
    pca_fit,
    pca_reconstruct,
    softmax,
)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_direct_evaluation(self):
        np.testing.assert_allclose(
            softmax(np.array([math.log(2.0), 0.0])), [2 / 3, 1 / 3], atol=1e-12
        )

    def test_large_inputs_do_not_overflow(self):
        out = softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            softmax(np.array([]))

    @given(
        st.lists(
            st.floats(min_value=-1e4, max_value=1e4, allow_nan=False),
            min_size=1,
            max_size=32,
        )
    )
    @settings(max_examples=200)
    def test_sums_to_one(self, vals):
        out = softmax(np.array(vals))
        assert abs(out.sum() - 1.0) <= 1e-6
        # exact zeros are possible via underflow at extreme spreads
        assert np.all(out >= 0) and np.all(out <= 1)


class TestCosine:
    def test_identity(self):
        a = np.array([0.3, -1.2, 4.0])
        assert cosine(a, a) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(0.0)

    def test_direct_evaluation(self):
        assert cosine(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(
            1 / math.sqrt(2)
        )

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            cosine(np.array([1.0]), np.array([1.0, 2.0]))

    def test_zero_norm_flagged(self):
        with pytest.warns(UserWarning):
            assert cosine(np.zeros(3), np.ones(3)) == 0.0

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.standard_normal((2, 6))
            assert cosine(a, b) == pytest.approx(cosine(b, a))
            for alpha in (0.01, 3.0, 250.0):
                assert cosine(alpha * a, b) == pytest.approx(cosine(a, b), abs=1e-6)


def _recon_error(model: PcaModel, data: np.ndarray) -> float:
    back = pca_reconstruct(model, pca_apply(model, data))
    return float(np.max(np.abs(back - data)))


class TestPca:
    def test_exact_subspace_recovery(self):
        rng = np.random.default_rng(1)
        basis = rng.standard_normal((2, 5))
        data = rng.standard_normal((40, 2)) @ basis  # lies in a 2-D subspace
        model = pca_fit(data, out_dim=2)
        assert _recon_error(model, data) <= 1e-5

    def test_full_rank_identity(self):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((30, 4))
        model = pca_fit(data, out_dim=4)
        assert _recon_error(model, data) <= 1e-5

    def test_reconstruction_error_non_increasing_in_out_dim(self):
        rng = np.random.default_rng(3)
        data = rng.standard_normal((60, 8))
        errors = []
        for q in range(1, 9):
            model = pca_fit(data, out_dim=q)
            back = pca_reconstruct(model, pca_apply(model, data))
            errors.append(float(np.sum((back - data) ** 2)))
        assert all(errors[i + 1] <= errors[i] + 1e-9 for i in range(len(errors) - 1))

    def test_components_orthonormal(self):
        rng = np.random.default_rng(4)
        model = pca_fit(rng.standard_normal((50, 7)), out_dim=5)
        gram = model.components @ model.components.T
        assert np.max(np.abs(gram - np.eye(5))) <= 1e-5

    def test_explained_variance_sorted_nonnegative(self):
        rng = np.random.default_rng(5)
        model = pca_fit(rng.standard_normal((50, 6)), out_dim=6)
        ev = model.explained_variance
        assert np.all(ev >= 0)
        assert np.all(np.diff(ev) <= 1e-12)

    def test_sign_convention_deterministic(self):
        rng = np.random.default_rng(6)
        data = rng.standard_normal((25, 5))
        m1 = pca_fit(data, out_dim=3)
        m2 = pca_fit(data.copy(), out_dim=3)
        np.testing.assert_array_equal(m1.components, m2.components)
        for row in m1.components:
            nz = row[np.abs(row) > 1e-12]
            assert nz[0] > 0

    def test_errors(self):
        rng = np.random.default_rng(7)
        data = rng.standard_normal((3, 4))
        with pytest.raises(ValueError):
            pca_fit(data, out_dim=5)  # out_dim > in_dim
        with pytest.raises(ValueError):
            pca_fit(data, out_dim=4)  # fewer samples than out_dim

    def test_apply_mean_is_zero(self):
        rng = np.random.default_rng(8)
        model = pca_fit(rng.standard_normal((20, 4)), out_dim=2)
        np.testing.assert_allclose(pca_apply(model, model.mean), 0.0, atol=1e-12)

    def test_apply_batch_matches_per_vector(self):
        rng = np.random.default_rng(9)
        data = rng.standard_normal((20, 4))
        model = pca_fit(data, out_dim=3)
        batch = pca_apply(model, data)
        rows = np.stack([pca_apply(model, v) for v in data])
        np.testing.assert_allclose(batch, rows)

    def test_apply_dim_mismatch(self):
        rng = np.random.default_rng(10)
        model = pca_fit(rng.standard_normal((20, 4)), out_dim=2)
        with pytest.raises(ValueError):
            pca_apply(model, np.zeros(5))


class TestKmeans:
    def test_each_point_own_centroid(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((6, 3))
        centroids, assignments = kmeans(data, n_clusters=6, seed=0)
        assert kmeans_distortion(data, centroids, assignments) == pytest.approx(0.0, abs=1e-20)

    def test_two_separated_blobs(self):
        rng = np.random.default_rng(11)
        blob_a = rng.normal(0.0, 0.05, size=(30, 4))
        blob_b = rng.normal(10.0, 0.05, size=(30, 4))
        data = np.vstack([blob_a, blob_b])
        labels = np.array([0] * 30 + [1] * 30)
        _, assignments = kmeans(data, n_clusters=2, seed=3)
        # Cluster indices are arbitrary; require a perfect relabeling.
        match = np.mean(assignments == labels)
        assert match in (0.0, 1.0)

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        data = rng.standard_normal((50, 5))
        c1, a1 = kmeans(data, 4, seed=7)
        c2, a2 = kmeans(data, 4, seed=7)
        np.testing.assert_array_equal(c1, c2)
        np.testing.assert_array_equal(a1, a2)

    def test_distortion_non_increasing_over_iterations(self):
        rng = np.random.default_rng(13)
        data = rng.standard_normal((80, 3))
        prev = math.inf
        for iters in range(1, 8):
            centroids, assignments = kmeans(data, 5, seed=1, max_iters=iters)
            cur = kmeans_distortion(data, centroids, assignments)
            assert cur <= prev + 1e-9
            prev = cur

    def test_too_many_clusters(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4, seed=0)
