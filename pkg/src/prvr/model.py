"""The retrieval model: projectors, aggregators, uncertainty heads, gates.

Two scoring paths exist. `score_pair` composes the per-pair operations and
is the readable reference; `frame_score_matrix`/`clip_score_matrix` compute
all pairs of a batch through shared concatenated sequences so training and
gallery evaluation stay fast. Tests pin both paths together to 1e-12.

All parameters are created at construction (in a fixed order from the
"init" substream of the seed) regardless of which branches a training run
enables, so checkpoints and seeded trajectories are comparable across
configurations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .encoders import Aggregator, AttentionPool, ConfidenceMLP, Projector
from .errors import ContractError
from .losses import build_clips, clip_score
from .probabilistic import GaussianEmbedding, UncertaintyHead, estimate_gaussian
from .scoring import confidence_gates, gated_score, mean_pooled_score, uniform_gates, word_frame_similarity
from .seeding import substream


@dataclass
class ModelConfig:
    input_dim: int
    joint_dim: int = 32
    seed: int = 0
    gate_mode: str = "softmax"
    clip_scales: tuple[int, ...] = (4, 8, 16)


def _offsets(blocks) -> np.ndarray:
    return np.cumsum([0] + [b.shape[0] for b in blocks])


class RetrievalModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = substream(config.seed, "init")
        d = config.joint_dim
        self.text_proj = Projector(config.input_dim, d, rng, "text_proj")
        self.video_proj = Projector(config.input_dim, d, rng, "video_proj")
        self.sentence_pool = AttentionPool(d, rng, "sentence_pool")
        self.text_agg = Aggregator(d, rng, "text_agg")
        self.video_agg = Aggregator(d, rng, "video_agg")
        self.text_head = UncertaintyHead(d, rng, "text_head")
        self.video_head = UncertaintyHead(d, rng, "video_head")
        self.confidence = ConfidenceMLP(d, rng, "confidence")

    def parameters(self) -> list[Parameter]:
        params = (self.text_proj.parameters() + self.video_proj.parameters()
                  + self.sentence_pool.parameters()
                  + self.text_agg.parameters() + self.video_agg.parameters()
                  + self.text_head.parameters() + self.video_head.parameters()
                  + self.confidence.parameters())
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names in model")
        return params

    # -- per-pair reference path ------------------------------------------

    def score_pair(self, words: np.ndarray, frames: np.ndarray, gated: bool = True) -> float:
        """Frame-level score of one (query, video) pair via the per-pair ops."""
        q = self.text_proj(words)
        v = self.video_proj(frames)
        sim = word_frame_similarity(q, v)
        if gated:
            gates = confidence_gates(self.confidence(q), self.config.gate_mode)
            return float(gated_score(sim, gates).value[0, 0])
        return float(mean_pooled_score(sim).value[0, 0])

    def clip_score_pair(self, words: np.ndarray, frames: np.ndarray) -> float:
        q = self.sentence_pool(self.text_proj(words))
        bank = build_clips(self.video_proj(frames), self.config.clip_scales)
        return float(clip_score(q, bank).value[0, 0])

    def gate_weights(self, words: np.ndarray) -> np.ndarray:
        """Normalized per-word confidence weights for one query, shape [L]."""
        q = self.text_proj(words)
        return confidence_gates(self.confidence(q), self.config.gate_mode).weights.value[0]

    # -- Gaussian estimation ----------------------------------------------

    def query_gaussian(self, words: np.ndarray) -> GaussianEmbedding:
        """Distribution of a word sequence (single query or support set)."""
        return estimate_gaussian(self.text_proj(words), self.text_agg, self.text_head,
                                 label="query")

    def video_gaussian(self, frames: np.ndarray) -> GaussianEmbedding:
        return estimate_gaussian(self.video_proj(frames), self.video_agg, self.video_head,
                                 label="video")

    # -- batched scoring ----------------------------------------------------

    def frame_score_matrix(self, query_words: list[np.ndarray],
                           video_frames: list[np.ndarray], gated: bool) -> Node:
        """[B_q, B_v] frame-level scores for every query-video pair.

        Word-frame similarities are computed once over the concatenated
        batch; per-video maxima and per-query gate weighting are applied on
        row/column segments. `gated=False` weights words uniformly and is
        the exact mean-pooling baseline.
        """
        w_off = _offsets(query_words)
        f_off = _offsets(video_frames)
        q_all = self.text_proj(np.vstack(query_words))
        v_all = self.video_proj(np.vstack(video_frames))
        sim = ad.matmul(ad.l2norm_rows(q_all), ad.transpose(ad.l2norm_rows(v_all)))

        word_video_max = ad.concat_cols([
            ad.max_cols(ad.slice_cols(sim, f_off[j], f_off[j + 1]))
            for j in range(len(video_frames))])  # [W_total, B_v]

        raw = self.confidence(q_all) if gated else None
        rows = []
        for i in range(len(query_words)):
            lo, hi = w_off[i], w_off[i + 1]
            if gated:
                gates = confidence_gates(ad.slice_rows(raw, lo, hi), self.config.gate_mode)
                weights = gates.weights
            else:
                weights = uniform_gates(hi - lo).weights
            rows.append(ad.matmul(weights, ad.slice_rows(word_video_max, lo, hi)))
        return ad.concat_rows(rows)

    def clip_score_matrix(self, query_words: list[np.ndarray],
                          video_frames: list[np.ndarray]) -> Node:
        """[B_q, B_v] clip-level scores (sentence vs best sliding-window clip)."""
        w_off = _offsets(query_words)
        q_all = self.text_proj(np.vstack(query_words))
        sentences = ad.concat_rows([
            self.sentence_pool(ad.slice_rows(q_all, w_off[i], w_off[i + 1]))
            for i in range(len(query_words))])  # [B_q, d]

        v_all = self.video_proj(np.vstack(video_frames))
        f_off = _offsets(video_frames)
        banks = [build_clips(ad.slice_rows(v_all, f_off[j], f_off[j + 1]), self.config.clip_scales)
                 for j in range(len(video_frames))]
        clips_all = ad.concat_rows([b.clips for b in banks])
        c_off = np.cumsum([0] + [b.count for b in banks])

        cos = ad.matmul(ad.l2norm_rows(sentences), ad.transpose(ad.l2norm_rows(clips_all)))
        return ad.concat_cols([
            ad.max_cols(ad.slice_cols(cos, c_off[j], c_off[j + 1]))
            for j in range(len(video_frames))])

    def batch_gaussians(self, sequences: list[np.ndarray], modality: str) -> tuple[Node, Node]:
        """Distribution parameters for a batch of raw sequences.

        Returns (mu, log_var), each [B, d]; row i is exactly the
        per-sequence `estimate_gaussian` result for sequences[i].
        """
        if modality == "query":
            proj, agg, head = self.text_proj, self.text_agg, self.text_head
        elif modality == "video":
            proj, agg, head = self.video_proj, self.video_agg, self.video_head
        else:
            raise ContractError(f"unknown modality {modality!r}")

        off = _offsets(sequences)
        x_all = proj(np.vstack(sequences))
        lengths = np.diff(off)

        # global branch for every sequence at once: block-averaging matmul
        avg = np.zeros((len(sequences), off[-1]))
        for i, (lo, hi) in enumerate(zip(off[:-1], off[1:])):
            avg[i, lo:hi] = 1.0 / lengths[i]
        global_all = ad.add(ad.matmul(ad.matmul(ad.constant(avg), x_all), agg.fc_weight.node),
                            agg.fc_bias.node)

        # local branch: shared score pass, segmented softmax per sequence
        hidden = ad.tanh(ad.matmul(x_all, ad.transpose(agg.attn_w1.node)))
        scores = ad.matmul(hidden, agg.attn_w2.node)  # [rows, 1]
        local_rows = []
        for lo, hi in zip(off[:-1], off[1:]):
            w = ad.softmax_rows(ad.transpose(ad.slice_rows(scores, lo, hi)))
            local_rows.append(ad.matmul(w, ad.slice_rows(x_all, lo, hi)))
        local_all = ad.concat_rows(local_rows)

        pooled = ad.layernorm_rows(ad.add(global_all, local_all),
                                   agg.ln_gain.node, agg.ln_bias.node)
        mu = ad.add(ad.matmul(pooled, head.mu_weight.node), head.mu_bias.node)
        log_var = ad.clamp(ad.add(ad.matmul(pooled, head.var_weight.node), head.var_bias.node),
                           -10.0, 10.0)
        return mu, log_var

    # -- frozen-weights gallery scoring -------------------------------------

    def score_gallery(self, query_words: list[np.ndarray], video_frames: list[np.ndarray],
                      gated: bool, clip_branch: bool,
                      chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
        """Score every query against every video without building gradients.

        Returns (ranking_scores, frame_scores), each [n_q, n_v]: ranking
        scores are frame plus clip level when the clip branch is on,
        otherwise identical to the frame-level scores.
        """
        n_q, n_v = len(query_words), len(video_frames)
        frame = np.empty((n_q, n_v))
        ranking = np.empty((n_q, n_v))
        for lo in range(0, n_q, chunk):
            hi = min(lo + chunk, n_q)
            block = self.frame_score_matrix(query_words[lo:hi], video_frames, gated).value
            frame[lo:hi] = block
            if clip_branch:
                ranking[lo:hi] = block + self.clip_score_matrix(query_words[lo:hi], video_frames).value
            else:
                ranking[lo:hi] = block
        return ranking, frame

    # -- state ---------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise ContractError(f"checkpoint missing parameter {p.name!r}")
            if state[p.name].shape != p.value.shape:
                raise ContractError(f"checkpoint shape mismatch for {p.name!r}")
            p.node.value[...] = state[p.name]
