import math

import numpy as np
import pytest

from kvds.datastore import AlignmentStrategy, NeighborSet, RawDatastore
from kvds.fusion import (
    DecodeConfig,
    FusionParams,
    attend_values,
    gate_fuse,
    greedy_decode,
    interpolate,
    knn_distribution,
    output_distribution,
    score_sequence,
)


def _ns(values, distances):
    n = len(values)
    return NeighborSet(
        ids=np.arange(n, dtype=np.int64),
        values=np.asarray(values, dtype=np.int64),
        distances=np.asarray(distances, dtype=np.float64),
    )


class TestKnnDistribution:
    def test_single_neighbor_one_hot(self):
        p = knn_distribution(np.zeros(2), _ns([7], [0.3]), T=1.0, vocab_size=10)
        expected = np.zeros(10)
        expected[7] = 1.0
        np.testing.assert_allclose(p, expected)

    def test_two_neighbors_direct_evaluation(self):
        T = 0.7
        p = knn_distribution(
            np.zeros(2), _ns([3, 5], [0.0, T * math.log(2.0)]), T=T, vocab_size=6
        )
        assert p[3] == pytest.approx(2 / 3)
        assert p[5] == pytest.approx(1 / 3)
        assert p.sum() == pytest.approx(1.0)

    def test_equal_value_equal_distance_aggregates(self):
        one = knn_distribution(np.zeros(2), _ns([4], [0.2]), T=1.0, vocab_size=6)
        two = knn_distribution(np.zeros(2), _ns([4, 4], [0.2, 0.2]), T=1.0, vocab_size=6)
        np.testing.assert_allclose(two, one)

    def test_order_invariant(self):
        a = knn_distribution(np.zeros(2), _ns([3, 5, 3], [0.1, 0.2, 0.4]), 1.0, 8)
        b = knn_distribution(np.zeros(2), _ns([3, 3, 5], [0.4, 0.1, 0.2]), 1.0, 8)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_small_temperature_sharpens_to_nearest(self):
        ns = _ns([3, 5], [0.1, 0.2])
        warm = knn_distribution(np.zeros(2), ns, T=1.0, vocab_size=6)
        cold = knn_distribution(np.zeros(2), ns, T=1e-3, vocab_size=6)
        assert cold[3] > warm[3]
        assert cold[3] == pytest.approx(1.0, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            knn_distribution(np.zeros(2), _ns([1], [0.0]), T=0.0, vocab_size=4)
        with pytest.raises(ValueError):
            knn_distribution(np.zeros(2), _ns([], []), T=1.0, vocab_size=4)
        with pytest.raises(ValueError):
            knn_distribution(np.zeros(2), _ns([9], [0.0]), T=1.0, vocab_size=4)


class TestInterpolate:
    def test_endpoints(self):
        p_mt = np.array([0.9, 0.1])
        p_knn = np.array([0.2, 0.8])
        np.testing.assert_array_equal(interpolate(p_mt, p_knn, 1.0), p_mt)
        np.testing.assert_array_equal(interpolate(p_mt, p_knn, 0.0), p_knn)

    def test_midpoint(self):
        out = interpolate(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.5)
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_affine_in_lambda(self):
        rng = np.random.default_rng(0)
        p_mt = rng.dirichlet(np.ones(5))
        p_knn = rng.dirichlet(np.ones(5))
        for lam in (0.0, 0.25, 0.6, 1.0):
            out = interpolate(p_mt, p_knn, lam)
            np.testing.assert_allclose(out, lam * p_mt + (1 - lam) * p_knn)
            assert out.sum() == pytest.approx(1.0, abs=1e-6)

    def test_lambda_out_of_range(self):
        p = np.array([1.0, 0.0])
        with pytest.raises(ValueError):
            interpolate(p, p, 1.5)
        with pytest.raises(ValueError):
            interpolate(p, p, -0.1)


class TestAttendValues:
    def test_single_embedding(self):
        e = np.array([[1.0, 2.0, 3.0]])
        m, w = attend_values(np.array([0.5, 0.5, 0.5]), e)
        np.testing.assert_allclose(m, e[0])
        np.testing.assert_allclose(w, [1.0])

    def test_identical_embeddings(self):
        e = np.tile(np.array([2.0, -1.0]), (4, 1))
        m, w = attend_values(np.array([5.0, 5.0]), e)
        np.testing.assert_allclose(m, [2.0, -1.0])
        np.testing.assert_allclose(w, 0.25)

    def test_strong_alignment_dominates(self):
        # score gap of 10 in the exponent
        e = np.array([[10.0, 0.0], [0.0, 0.0]])
        m, w = attend_values(np.array([1.0, 0.0]), e)
        assert w[0] >= 0.9999
        np.testing.assert_allclose(m, e[0], atol=1e-3)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(1)
        m, w = attend_values(rng.standard_normal(4), rng.standard_normal((6, 4)))
        assert w.sum() == pytest.approx(1.0, abs=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            attend_values(np.zeros(3), np.zeros((2, 4)))


class TestGateFuse:
    def test_zero_params_average(self):
        h = np.array([1.0, 3.0])
        m = np.array([2.0, -1.0])
        z, g = gate_fuse(h, m, FusionParams.zeros(2))
        np.testing.assert_allclose(g, 0.5)
        np.testing.assert_allclose(z, (h + m) / 2)

    def test_saturated_gate_selects_m(self):
        params = FusionParams(W1=np.zeros((2, 2)), W2=np.zeros((2, 2)), b=np.full(2, 50.0))
        h = np.array([1.0, 1.0])
        m = np.array([-3.0, 4.0])
        z, g = gate_fuse(h, m, params)
        np.testing.assert_allclose(g, 1.0, atol=1e-12)
        np.testing.assert_allclose(z, m, atol=1e-9)

    def test_equal_inputs_fixed_point(self):
        rng = np.random.default_rng(2)
        h = rng.standard_normal(4)
        params = FusionParams(
            W1=rng.standard_normal((4, 4)), W2=rng.standard_normal((4, 4)),
            b=rng.standard_normal(4),
        )
        z, _ = gate_fuse(h, h.copy(), params)
        np.testing.assert_allclose(z, h, atol=1e-12)

    def test_output_between_inputs(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            h, m = rng.standard_normal((2, 5))
            params = FusionParams(
                W1=rng.standard_normal((5, 5)), W2=rng.standard_normal((5, 5)),
                b=rng.standard_normal(5),
            )
            z, _ = gate_fuse(h, m, params)
            lo, hi = np.minimum(h, m), np.maximum(h, m)
            assert np.all(z >= lo - 1e-12) and np.all(z <= hi + 1e-12)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            FusionParams(W1=np.zeros((2, 3)), W2=np.zeros((2, 2)), b=np.zeros(2))
        with pytest.raises(ValueError):
            FusionParams(W1=np.full((2, 2), np.inf), W2=np.zeros((2, 2)), b=np.zeros(2))


class TestOutputDistribution:
    def test_zero_state_uniform(self):
        rng = np.random.default_rng(4)
        p = output_distribution(np.zeros(3), rng.standard_normal((5, 3)))
        np.testing.assert_allclose(p, 0.2)

    def test_aligned_row_wins(self):
        W = np.eye(4)
        p = output_distribution(100.0 * W[2], W)
        assert np.argmax(p) == 2
        assert p[2] == pytest.approx(1.0)

    def test_manual_3x2(self):
        W = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        z = np.array([0.2, -0.4])
        logits = W @ z
        expected = np.exp(logits - logits.max())
        expected /= expected.sum()
        np.testing.assert_allclose(output_distribution(z, W), expected)


class _StubModel:
    """Fixed-response model: logits always one-hot-confident on a script."""

    def __init__(self, script, vocab=6, d=4):
        self.script = list(script)
        self.W_e = np.eye(vocab, d)
        self.Q_proj = np.eye(d)
        self.fusion = FusionParams.zeros(d)
        self.d = d

    def forward(self, X, y_in):
        T = len(y_in)
        H = np.zeros((T, self.d))
        for t in range(T):
            tok = self.script[min(t, len(self.script) - 1)]
            H[t, tok] = 200.0  # softmax(W_e h) is then one-hot at tok
        return H, np.zeros((T, self.d)), H @ self.W_e.T


def _stub_searcher(ns):
    return lambda q, k: ns


class TestSequenceOps:
    def _searcher_empty(self):
        return _stub_searcher(
            NeighborSet(
                ids=np.empty(0, np.int64),
                values=np.empty(0, np.int64),
                distances=np.empty(0),
            )
        )

    def test_confident_model_scores_zero(self):
        model = _StubModel([2, 3, 1])
        score = score_sequence(
            model, self._searcher_empty(), [2, 3], [2, 3, 1], DecodeConfig()
        )
        assert score == pytest.approx(0.0, abs=1e-6)

    def test_baseline_ignores_datastore(self):
        model = _StubModel([2, 3, 1])
        ns = _ns([5, 5, 5], [0.1, 0.2, 0.3])
        a = score_sequence(model, _stub_searcher(ns), [2], [2, 3], DecodeConfig())
        b = score_sequence(model, self._searcher_empty(), [2], [2, 3], DecodeConfig())
        assert a == b

    def test_lambda_one_equals_baseline(self):
        model = _StubModel([2, 3, 1])
        ns = _ns([5, 4, 5], [0.1, 0.2, 0.3])
        base = score_sequence(model, self._searcher_empty(), [2], [2, 3], DecodeConfig())
        interp = score_sequence(
            model,
            _stub_searcher(ns),
            [2],
            [2, 3],
            DecodeConfig(mode="knn_interpolate", lam=1.0),
        )
        assert interp == pytest.approx(base, abs=1e-6)

    def test_greedy_emits_script_until_eos(self):
        model = _StubModel([2, 3, 1])  # 1 is EOS
        out = greedy_decode(model, self._searcher_empty(), [2], DecodeConfig(), max_len=10)
        assert out == [2, 3, 1]

    def test_greedy_respects_max_len(self):
        model = _StubModel([2])  # never emits EOS
        out = greedy_decode(model, self._searcher_empty(), [2], DecodeConfig(), max_len=4)
        assert out == [2, 2, 2, 2]

    def test_empty_target_rejected(self):
        model = _StubModel([2])
        with pytest.raises(ValueError):
            score_sequence(model, self._searcher_empty(), [2], [], DecodeConfig())

    def test_out_of_vocab_target_rejected(self):
        model = _StubModel([2])
        with pytest.raises(ValueError):
            score_sequence(model, self._searcher_empty(), [2], [99], DecodeConfig())

    def test_pred_fusion_pulls_toward_retrieved_value(self):
        # Neutral model state; retrieval all votes for token 4. The fused
        # state z moves toward W_e[4], raising p(4) above baseline.
        model = _StubModel([0])
        model.forward = lambda X, y_in: (
            np.full((len(y_in), model.d), 0.1),
            np.full((len(y_in), model.d), 0.1),
            None,
        )
        ns = _ns([4, 4, 4], [0.1, 0.1, 0.1])
        fused = score_sequence(
            model, _stub_searcher(ns), [2], [4], DecodeConfig(mode="pred_fusion")
        )
        base = score_sequence(model, self._searcher_empty(), [2], [4], DecodeConfig())
        assert fused > base


class TestDecodeConfigValidation:
    def test_bad_mode(self):
        with pytest.raises(ValueError):
            DecodeConfig(mode="beam")

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            DecodeConfig(T=0.0)

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            DecodeConfig(lam=2.0)
