"""Set-to-set retrieval scoring: word-frame similarity with confidence gates.

Each query word is matched to its best frame by cosine similarity; the
per-word maxima are combined into one query-video score, either uniformly
(mean pooling) or weighted by learned, normalized confidence gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ContractError, NumericError

GATE_MODES = ("softmax", "sigmoid-normalize")


@dataclass
class SimilarityMatrix:
    """Word-frame cosine similarities with per-word maxima."""

    matrix: Node  # [L, N_f]
    word_max: Node  # [L, 1]
    argmax_frame: np.ndarray  # [L], first index on ties

    @property
    def words(self) -> int:
        return self.matrix.value.shape[0]


def _check_rows_nonzero(x: Node, side: str) -> None:
    norms = np.linalg.norm(x.value, axis=1)
    bad = np.nonzero(norms < 1e-300)[0]
    if bad.size:
        raise NumericError(f"zero-norm {side} row {int(bad[0])}")


def word_frame_similarity(words: Node, frames: Node) -> SimilarityMatrix:
    """Cosine similarity of every word against every frame."""
    if words.value.shape[0] < 1 or frames.value.shape[0] < 1:
        raise ContractError("word_frame_similarity: empty sequence")
    _check_rows_nonzero(words, "word")
    _check_rows_nonzero(frames, "frame")
    sim = ad.matmul(ad.l2norm_rows(words), ad.transpose(ad.l2norm_rows(frames)))
    return SimilarityMatrix(matrix=sim,
                            word_max=ad.max_cols(sim),
                            argmax_frame=np.argmax(sim.value, axis=1))


@dataclass
class ConfidenceGates:
    """Normalized per-word weights: nonnegative, summing to one."""

    weights: Node  # [1, L]
    raw: Node  # [L, 1]

    @property
    def words(self) -> int:
        return self.weights.value.shape[1]


def confidence_gates(raw_scores: Node, mode: str = "softmax") -> ConfidenceGates:
    """Normalize raw per-word scores into a convex weighting.

    `softmax` exponentiates and normalizes; `sigmoid-normalize` squashes
    each score to (0, 1) and then normalizes by the sum.
    """
    if mode not in GATE_MODES:
        raise ContractError(f"unknown gate mode {mode!r}; expected one of {GATE_MODES}")
    row = ad.transpose(raw_scores)  # [1, L]
    if mode == "softmax":
        weights = ad.softmax_rows(row)
    else:
        squashed = ad.sigmoid(row)
        weights = ad.exp(ad.sub(ad.log(squashed), ad.log(ad.sum_all(squashed))))
    return ConfidenceGates(weights=weights, raw=raw_scores)


def uniform_gates(n_words: int) -> ConfidenceGates:
    w = np.full((1, n_words), 1.0 / n_words)
    return ConfidenceGates(weights=ad.constant(w), raw=ad.constant(np.zeros((n_words, 1))))


def gated_score(sim: SimilarityMatrix, gates: ConfidenceGates) -> Node:
    """Confidence-weighted query-video score, a convex combination in [-1, 1]."""
    if gates.words != sim.words:
        raise ContractError(f"gate length {gates.words} does not match word count {sim.words}")
    return ad.matmul(gates.weights, sim.word_max)  # [1, 1]


def mean_pooled_score(sim: SimilarityMatrix) -> Node:
    """Unweighted mean of the per-word maxima (the uniform-weight baseline)."""
    return ad.scale(ad.sum_all(sim.word_max), 1.0 / sim.words)
