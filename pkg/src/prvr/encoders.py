"""Feature projection and sequence aggregation in the joint embedding space.

All components operate on row-sequences: frame features [N_f, dim] or word
features [L, dim]. Weights initialize uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
from a caller-supplied generator, so models are reproducible from one seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import ContractError


@dataclass
class EncoderConfig:
    input_dim: int
    joint_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.joint_dim < 2:
            raise ContractError(f"joint_dim must be >= 2, got {self.joint_dim}")
        if self.input_dim < 1:
            raise ContractError(f"input_dim must be positive, got {self.input_dim}")


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else ad.constant(np.asarray(x, dtype=np.float64))


class Projector:
    """Row-wise affine map into the joint space; preserves row order."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        self.weight = Parameter(_uniform_init(rng, n_in, (n_in, n_out)), f"{name}.weight")
        self.bias = Parameter(_uniform_init(rng, n_in, (1, n_out)), f"{name}.bias")

    def __call__(self, features) -> Node:
        x = _as_node(features)
        if x.value.shape[0] < 1:
            raise ContractError("project: empty feature sequence")
        return ad.add(ad.matmul(x, self.weight.node), self.bias.node)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class AttentionPool:
    """Summarizes a word sequence into one sentence embedding.

    A learned per-row score is softmaxed over rows, so the output is a
    convex combination of the input rows.
    """

    def __init__(self, dim: int, rng: np.random.Generator, name: str):
        self.score = Parameter(_uniform_init(rng, dim, (dim, 1)), f"{name}.score")

    def weights(self, seq: Node) -> Node:
        scores = ad.transpose(ad.matmul(seq, self.score.node))  # [1, L]
        return ad.softmax_rows(scores)

    def __call__(self, seq: Node) -> Node:
        if seq.value.shape[0] < 1:
            raise ContractError("attention_pool: empty sequence")
        return ad.matmul(self.weights(seq), seq)  # [1, d]

    def parameters(self) -> list[Parameter]:
        return [self.score]


class Aggregator:
    """Global + local sequence summary followed by layer normalization.

    The global branch mean-pools the rows and applies an affine map; the
    local branch is gated attention softmax(w2 . tanh(W1 x_i)) over rows.
    """

    def __init__(self, dim: int, rng: np.random.Generator, name: str):
        self.fc_weight = Parameter(_uniform_init(rng, dim, (dim, dim)), f"{name}.fc_weight")
        self.fc_bias = Parameter(_uniform_init(rng, dim, (1, dim)), f"{name}.fc_bias")
        self.attn_w1 = Parameter(_uniform_init(rng, dim, (dim, dim)), f"{name}.attn_w1")
        self.attn_w2 = Parameter(_uniform_init(rng, dim, (dim, 1)), f"{name}.attn_w2")
        self.ln_gain = Parameter(np.ones((1, dim)), f"{name}.ln_gain")
        self.ln_bias = Parameter(np.zeros((1, dim)), f"{name}.ln_bias")

    def global_branch(self, seq: Node) -> Node:
        if seq.value.shape[0] < 1:
            raise ContractError("global_branch: empty sequence")
        return ad.add(ad.matmul(ad.mean_rows(seq), self.fc_weight.node), self.fc_bias.node)

    def local_weights(self, seq: Node) -> Node:
        hidden = ad.tanh(ad.matmul(seq, ad.transpose(self.attn_w1.node)))  # [n, d]
        scores = ad.transpose(ad.matmul(hidden, self.attn_w2.node))  # [1, n]
        return ad.softmax_rows(scores)

    def local_branch(self, seq: Node) -> Node:
        if seq.value.shape[0] < 1:
            raise ContractError("local_branch: empty sequence")
        return ad.matmul(self.local_weights(seq), seq)  # [1, d]

    def __call__(self, seq: Node) -> Node:
        combined = ad.add(self.global_branch(seq), self.local_branch(seq))
        return ad.layernorm_rows(combined, self.ln_gain.node, self.ln_bias.node)

    def parameters(self) -> list[Parameter]:
        return [self.fc_weight, self.fc_bias, self.attn_w1, self.attn_w2,
                self.ln_gain, self.ln_bias]


class ConfidenceMLP:
    """Two-layer scorer producing one raw confidence score per word."""

    def __init__(self, dim: int, rng: np.random.Generator, name: str):
        self.w1 = Parameter(_uniform_init(rng, dim, (dim, dim)), f"{name}.w1")
        self.b1 = Parameter(_uniform_init(rng, dim, (1, dim)), f"{name}.b1")
        self.w2 = Parameter(_uniform_init(rng, dim, (dim, 1)), f"{name}.w2")
        self.b2 = Parameter(_uniform_init(rng, dim, (1, 1)), f"{name}.b2")

    def __call__(self, seq: Node) -> Node:
        if seq.value.shape[0] < 1:
            raise ContractError("confidence_mlp: empty sequence")
        hidden = ad.tanh(ad.add(ad.matmul(seq, self.w1.node), self.b1.node))
        return ad.add(ad.matmul(hidden, self.w2.node), self.b2.node)  # [L, 1]

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]
