"""
Unit tests for seeded streams, ordered fan-out and replicate statistics.
"""
import numpy as np
import pytest

from src.utils.ensemble import (
    batch_rng,
    mean_and_se,
    ordered_map,
    proportion_se,
    replicate_batches,
    stable_hash,
    variance_se,
)


class TestStreams:

    def test_same_key_same_stream(self):
        a = batch_rng(42, 3, 1).random(5)
        b = batch_rng(42, 3, 1).random(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ_by_batch_and_stream(self):
        base = batch_rng(42, 0, 1).random(5)
        assert not np.array_equal(base, batch_rng(42, 1, 1).random(5))
        assert not np.array_equal(base, batch_rng(42, 0, 2).random(5))
        assert not np.array_equal(base, batch_rng(43, 0, 1).random(5))

    def test_ordered_map_keeps_input_order(self):
        items = list(range(50))
        assert ordered_map(lambda i: i * i, items, threads=8) == [i * i for i in items]
        assert ordered_map(lambda i: i * i, items, threads=1) == [i * i for i in items]

    def test_replicate_batches_cover_range(self):
        batches = replicate_batches(10, 4)
        assert [list(b) for b in batches] == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]


class TestStatistics:

    def test_mean_and_se(self):
        samples = np.array([[1.0, 2.0], [3.0, 2.0], [5.0, 2.0]])
        mean, variance, se = mean_and_se(samples)
        np.testing.assert_allclose(mean, [3.0, 2.0])
        np.testing.assert_allclose(variance, [4.0, 0.0])
        np.testing.assert_allclose(se, [2.0 / np.sqrt(3), 0.0])

    def test_single_replicate_has_zero_variance(self):
        mean, variance, se = mean_and_se(np.array([[1.5, 2.5]]))
        np.testing.assert_allclose(variance, 0.0)
        np.testing.assert_allclose(se, 0.0)

    def test_variance_se_shrinks_with_samples(self):
        rng = np.random.default_rng(1)
        small = variance_se(rng.standard_normal(100))
        large = variance_se(rng.standard_normal(10000))
        assert large < small
        assert large == pytest.approx(np.sqrt(2.0 / 10000), rel=0.2)

    def test_proportion_se(self):
        assert proportion_se(0.5, 100) == pytest.approx(0.05)
        assert proportion_se(0.0, 100) == 0.0


class TestHashing:

    def test_stable_hash_ignores_key_order(self):
        assert stable_hash({"a": 1, "b": [1, 2]}) == stable_hash({"b": [1, 2], "a": 1})
        assert stable_hash({"a": 1}) != stable_hash({"a": 2})
        assert len(stable_hash({})) == 64
