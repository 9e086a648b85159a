"""Tests for word-frame similarity and confidence-gated scoring."""

import numpy as np
import pytest

from prvr import autodiff as ad
from prvr.errors import ContractError, NumericError
from prvr.scoring import (
    confidence_gates,
    gated_score,
    mean_pooled_score,
    uniform_gates,
    word_frame_similarity,
)


def sim_of(words, frames):
    return word_frame_similarity(ad.constant(np.asarray(words, dtype=float)),
                                 ad.constant(np.asarray(frames, dtype=float)))


class TestWordFrameSimilarity:
    def test_matching_row_scores_one(self):
        sim = sim_of([[3.0, 0.0]], [[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_allclose(sim.word_max.value, [[1.0]], atol=1e-12)
        assert sim.argmax_frame[0] == 1

    def test_orthogonal_rows_score_zero(self):
        sim = sim_of([[1.0, 0.0]], [[0.0, 2.0]])
        np.testing.assert_allclose(sim.word_max.value, [[0.0]], atol=1e-12)

    def test_row_maxima_match_brute_force_scan(self):
        rng = np.random.default_rng(0)
        words, frames = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        sim = sim_of(words, frames)
        wn = words / np.linalg.norm(words, axis=1, keepdims=True)
        fn = frames / np.linalg.norm(frames, axis=1, keepdims=True)
        expected = np.array([[max(w @ f for f in fn)] for w in wn])
        np.testing.assert_allclose(sim.word_max.value, expected, atol=1e-12)

    def test_entries_are_valid_cosines(self):
        rng = np.random.default_rng(1)
        sim = sim_of(rng.normal(size=(5, 6)), rng.normal(size=(7, 6)))
        assert np.all(np.abs(sim.matrix.value) <= 1.0 + 1e-12)

    def test_argmax_tie_takes_lowest_frame(self):
        sim = sim_of([[1.0, 0.0]], [[2.0, 0.0], [1.0, 0.0]])
        assert sim.argmax_frame[0] == 0

    def test_zero_norm_row_raises_naming_row(self):
        with pytest.raises(NumericError, match="word row 1"):
            sim_of([[1.0, 0.0], [0.0, 0.0]], [[1.0, 0.0]])
        with pytest.raises(NumericError, match="frame row 0"):
            sim_of([[1.0, 0.0]], [[0.0, 0.0]])

    def test_appending_frame_never_decreases_maxima(self):
        rng = np.random.default_rng(2)
        words = rng.normal(size=(4, 5))
        frames = rng.normal(size=(6, 5))
        base = sim_of(words, frames).word_max.value
        grown = sim_of(words, np.vstack([frames, rng.normal(size=(1, 5))])).word_max.value
        assert np.all(grown >= base - 1e-15)


class TestConfidenceGates:
    def test_softmax_gates_sum_to_one(self):
        rng = np.random.default_rng(3)
        gates = confidence_gates(ad.constant(rng.normal(size=(6, 1))))
        assert np.all(gates.weights.value >= 0)
        np.testing.assert_allclose(gates.weights.value.sum(), 1.0, atol=1e-12)

    def test_sigmoid_normalize_gates_sum_to_one(self):
        rng = np.random.default_rng(4)
        gates = confidence_gates(ad.constant(rng.normal(size=(6, 1))), mode="sigmoid-normalize")
        assert np.all(gates.weights.value >= 0)
        np.testing.assert_allclose(gates.weights.value.sum(), 1.0, atol=1e-12)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ContractError):
            confidence_gates(ad.constant(np.zeros((2, 1))), mode="minmax")


class TestGatedScore:
    def test_single_word_ignores_gate_value(self):
        sim = sim_of([[1.0, 1.0]], [[2.0, 0.0], [1.0, 1.0]])
        gates = confidence_gates(ad.constant([[17.0]]))
        np.testing.assert_allclose(gated_score(sim, gates).value,
                                   sim.word_max.value, atol=1e-12)

    def test_uniform_gates_reproduce_mean_pooling(self):
        rng = np.random.default_rng(5)
        sim = sim_of(rng.normal(size=(5, 3)), rng.normal(size=(8, 3)))
        gates = confidence_gates(ad.constant(np.full((5, 1), 0.37)))  # equal raw scores
        np.testing.assert_allclose(gated_score(sim, gates).value,
                                   mean_pooled_score(sim).value, atol=1e-12)
        np.testing.assert_allclose(gated_score(sim, uniform_gates(5)).value,
                                   mean_pooled_score(sim).value, atol=1e-12)

    def test_hand_arithmetic_case(self):
        # s = (0.9, 0.1), g = (0.75, 0.25) -> 0.7
        words = np.array([[0.9, np.sqrt(1 - 0.81)], [0.1, np.sqrt(1 - 0.01)]])
        frames = np.array([[1.0, 0.0]])
        sim = sim_of(words, frames)
        np.testing.assert_allclose(sim.word_max.value, [[0.9], [0.1]], atol=1e-12)
        gates = confidence_gates(ad.constant([[np.log(3.0)], [0.0]]))
        np.testing.assert_allclose(gated_score(sim, gates).value, [[0.7]], atol=1e-12)

    def test_score_within_unit_interval(self):
        rng = np.random.default_rng(6)
        sim = sim_of(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
        gates = confidence_gates(ad.constant(rng.normal(size=(4, 1))))
        assert abs(gated_score(sim, gates).value[0, 0]) <= 1.0 + 1e-12

    def test_gate_length_mismatch_rejected(self):
        sim = sim_of(np.eye(3), np.eye(3))
        with pytest.raises(ContractError):
            gated_score(sim, uniform_gates(2))

    def test_positive_scaling_preserves_ranking(self):
        rng = np.random.default_rng(7)
        scores = rng.normal(size=10)
        scaled = 3.7 * scores
        np.testing.assert_array_equal(np.argsort(-scores), np.argsort(-scaled))


class TestMeanPooledScore:
    def test_identical_maxima_return_that_value(self):
        sim = sim_of([[1.0, 0.0], [2.0, 0.0]], [[1.0, 0.0]])
        np.testing.assert_allclose(mean_pooled_score(sim).value, [[1.0]], atol=1e-12)

    def test_hand_average(self):
        sim = sim_of([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0]])
        np.testing.assert_allclose(mean_pooled_score(sim).value, [[0.5]], atol=1e-12)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(8)
        sim = sim_of(rng.normal(size=(7, 4)), rng.normal(size=(9, 4)))
        expected = sim.word_max.value.sum() / 7
        np.testing.assert_allclose(mean_pooled_score(sim).value[0, 0], expected, atol=1e-14)
