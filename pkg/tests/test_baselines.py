import numpy as np
import pytest

from evistream.baselines import aggregate_predict, pool_features, vote
from evistream.encoder import InputError
from evistream.numerics import ConfigError, DimensionError

from oracles import modal_label, pooled_label, small_feature_sets, small_label_sets

HEAD_W = [[0.7, -0.4], [-0.3, 0.9], [0.2, 0.5]]
HEAD_B = [0.05, -0.1]


def head(d):
    return np.array(HEAD_W[:d]), np.array(HEAD_B)


class TestExamples:
    def test_majority(self):
        assert aggregate_predict([1, 0, 1], "voting") == 1

    def test_tie_goes_to_class_zero(self):
        assert aggregate_predict([1, 0, 0, 1], "voting") == 0

    def test_single_slice_vote(self):
        assert aggregate_predict([1], "voting") == 1
        assert aggregate_predict([0], "voting") == 0

    def test_gmp_pool(self):
        np.testing.assert_array_equal(pool_features(np.array([[1, 5], [3, 2]]), "gmp"), [3, 5])

    def test_gap_pool(self):
        np.testing.assert_array_equal(pool_features(np.array([[1, 5], [3, 1]]), "gap"), [2, 3])

    def test_pooled_head_decision(self):
        w, b = np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2)
        assert aggregate_predict([[1, 5], [3, 2]], "gmp", (w, b)) == 1
        assert aggregate_predict([[4, 0], [3, 1]], "gap", (w, b)) == 0


class TestErrors:
    @pytest.mark.parametrize("method", ["voting", "gmp", "gap"])
    def test_empty(self, method):
        with pytest.raises(InputError):
            aggregate_predict([], method, head(2))

    def test_mixed_dims(self):
        with pytest.raises(DimensionError):
            aggregate_predict([[1.0, 2.0], [1.0]], "gap", head(2))

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            aggregate_predict([1], "median")


class TestExhaustiveOracle:
    def test_voting(self):
        count = 0
        for labels in small_label_sets():
            assert vote(labels) == modal_label(labels)
            assert aggregate_predict(labels, "voting") == modal_label(labels)
            count += 1
        assert count == 3 + 9 + 27 + 81

    @pytest.mark.parametrize("kind", ["gmp", "gap"])
    def test_pooling(self, kind):
        for rows in small_feature_sets():
            d = len(rows[0])
            expected, pooled = pooled_label(rows, kind, HEAD_W[:d], HEAD_B)
            np.testing.assert_allclose(pool_features(np.array(rows), kind), pooled, rtol=0, atol=1e-12)
            assert aggregate_predict(rows, kind, head(d)) == expected


class TestProperties:
    def test_permutation_invariance(self, rng):
        for _ in range(50):
            n, d = int(rng.integers(1, 8)), int(rng.integers(1, 4))
            feats = rng.standard_normal((n, d))
            labels = rng.integers(0, 2, n)
            perm = rng.permutation(n)
            for kind in ("gmp", "gap"):
                assert aggregate_predict(feats, kind, head(d)) == aggregate_predict(feats[perm], kind, head(d))
            assert aggregate_predict(labels, "voting") == aggregate_predict(labels[perm], "voting")

    def test_max_dominates_mean(self, rng):
        for _ in range(50):
            feats = rng.standard_normal((int(rng.integers(1, 10)), 4))
            assert np.all(pool_features(feats, "gmp") >= pool_features(feats, "gap") - 1e-12)
