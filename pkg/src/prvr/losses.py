"""Retrieval objectives: contrastive and triplet base losses, clip scoring,
score fusion, and the weighted total training objective."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ContractError, NumericError


@dataclass
class LossWeights:
    """Coefficients balancing the four loss terms, plus their scales."""

    lambda_nce: float = 0.05
    lambda_trip: float = 1.0
    lambda_da: float = 0.001
    lambda_pm: float = 0.004
    temperature_nce: float = 0.04
    margin: float = 0.2

    def __post_init__(self):
        for name in ("lambda_nce", "lambda_trip", "lambda_da", "lambda_pm"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"{name} must be a nonnegative finite value, got {v}")
        if self.temperature_nce <= 0:
            raise ContractError(f"temperature_nce must be positive, got {self.temperature_nce}")
        if self.margin <= 0:
            raise ContractError(f"margin must be positive, got {self.margin}")


@dataclass
class ClipBank:
    """Mean-pooled sliding-window clips over a frame sequence."""

    clips: Node  # [N_c, d]
    scales: list[int]

    @property
    def count(self) -> int:
        return self.clips.value.shape[0]


def _window_mean_matrix(n_frames: int, width: int) -> np.ndarray:
    n_clips = n_frames - width + 1
    mat = np.zeros((n_clips, n_frames))
    for i in range(n_clips):
        mat[i, i:i + width] = 1.0 / width
    return mat


def build_clips(frames: Node, scales) -> ClipBank:
    """Stride-1 sliding-window means at each requested window length.

    Windows longer than the sequence are skipped with a warning; if every
    scale is skipped the call fails.
    """
    n_frames = frames.value.shape[0]
    used, blocks = [], []
    for width in scales:
        if width > n_frames:
            warnings.warn(f"clip scale {width} exceeds frame count {n_frames}; skipped")
            continue
        if width < 1:
            raise ContractError(f"clip scale must be >= 1, got {width}")
        blocks.append(ad.matmul(ad.constant(_window_mean_matrix(n_frames, width)), frames))
        used.append(width)
    if not blocks:
        raise ContractError(f"no usable clip scale for a {n_frames}-frame video (scales={list(scales)})")
    return ClipBank(clips=ad.concat_rows(blocks) if len(blocks) > 1 else blocks[0], scales=used)


def clip_score(sentence: Node, bank: ClipBank) -> Node:
    """Maximum cosine similarity between a sentence embedding and the clips."""
    if bank.count < 1:
        raise ContractError("clip_score: empty clip bank")
    cos = ad.matmul(ad.l2norm_rows(sentence), ad.transpose(ad.l2norm_rows(bank.clips)))
    return ad.max_cols(cos)  # [1, 1]


def fused_score(frame_level: float, clip_level: float) -> float:
    """Final retrieval score: frame-level plus clip-level."""
    if not (np.isfinite(frame_level) and np.isfinite(clip_level)):
        raise NumericError(f"fused_score: non-finite inputs ({frame_level}, {clip_level})")
    return frame_level + clip_level


def _diagonal(scores: Node) -> Node:
    b = scores.value.shape[0]
    eye = ad.constant(np.eye(b))
    ones = ad.constant(np.ones((b, 1)))
    return ad.matmul(ad.mul(scores, eye), ones)  # [B, 1]


def infonce_base(scores: Node, temperature: float) -> Node:
    """Symmetric InfoNCE over a square score matrix with positives on the
    diagonal: mean over rows plus mean over columns, halved."""
    b, b2 = scores.value.shape
    if b != b2:
        raise ContractError(f"infonce: score matrix must be square, got {scores.value.shape}")
    if b < 2:
        raise ContractError("infonce: batch size >= 2 required")
    if temperature <= 0:
        raise ContractError(f"infonce: temperature must be positive, got {temperature}")

    def direction(mat):
        probs = ad.softmax_rows(ad.scale(mat, 1.0 / temperature))
        return ad.scale(ad.sum_all(ad.log(_diagonal(probs))), -1.0 / b)

    return ad.scale(ad.add(direction(scores), direction(ad.transpose(scores))), 0.5)


def triplet_base(scores: Node, margin: float) -> Node:
    """Hardest-negative hinge in both directions, averaged over the batch."""
    b, b2 = scores.value.shape
    if b != b2:
        raise ContractError(f"triplet: score matrix must be square, got {scores.value.shape}")
    if b < 2:
        raise ContractError("triplet: batch size >= 2 required")

    mask = ad.constant(np.where(np.eye(b) > 0, -1e9, 0.0))
    masked = ad.add(scores, mask)
    pos = _diagonal(scores)  # [B, 1]
    hardest_row = ad.max_cols(masked)  # best negative video per query
    hardest_col = ad.transpose(ad.max_rows(masked))  # best negative query per video
    m = ad.constant(np.full((b, 1), margin))
    hinge = ad.add(ad.relu(ad.add(m, ad.sub(hardest_row, pos))),
                   ad.relu(ad.add(m, ad.sub(hardest_col, pos))))
    return ad.scale(ad.sum_all(hinge), 1.0 / b)


def total_loss(l_nce: Node, l_trip: Node, l_da: Node | None, l_pm: Node | None,
               weights: LossWeights) -> Node:
    """Weighted sum of all active loss terms."""
    parts = [("nce", l_nce, weights.lambda_nce), ("trip", l_trip, weights.lambda_trip),
             ("da", l_da, weights.lambda_da), ("pm", l_pm, weights.lambda_pm)]
    total = None
    for name, node, lam in parts:
        if node is None:
            continue
        if not np.isfinite(node.value[0, 0]):
            raise NumericError(f"total_loss: non-finite component {name!r} = {node.value[0, 0]}")
        term = ad.scale(node, lam)
        total = term if total is None else ad.add(total, term)
    return total
