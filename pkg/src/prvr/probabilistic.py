"""Probabilistic embeddings: diagonal Gaussians, alignment losses, proxies.

Videos and query support sets are encoded as N(mu, diag sigma^2) in the
joint space. Uncertainty is carried as log-variance, clamped to [-10, 10]
so sigma stays strictly positive and KL terms stay bounded. Proxies are
reparameterized draws mu + sigma * eps, so gradients reach both heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .encoders import Aggregator, _uniform_init
from .errors import ContractError, DataError, NumericError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


def make_gaussian(mu: Node, log_var: Node) -> "GaussianEmbedding":
    """Clamp the raw log-variance and wrap the pair as a distribution."""
    if mu.value.shape != log_var.value.shape or mu.value.shape[0] != 1:
        raise ContractError(
            f"gaussian: mu/log_var must be [1, d], got {mu.value.shape} and {log_var.value.shape}")
    return GaussianEmbedding(mu=mu, log_var=ad.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX))


@dataclass
class GaussianEmbedding:
    """Diagonal Gaussian N(mu, diag sigma^2) with sigma = exp(log_var / 2)."""

    mu: Node
    log_var: Node

    @property
    def dim(self) -> int:
        return self.mu.value.shape[1]

    @property
    def sigma(self) -> Node:
        return ad.exp(ad.scale(self.log_var, 0.5))

    def sigma_values(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.value[0])

    def mu_values(self) -> np.ndarray:
        return self.mu.value[0]


def standard_normal(dim: int) -> GaussianEmbedding:
    return GaussianEmbedding(mu=ad.constant(np.zeros((1, dim))),
                             log_var=ad.constant(np.zeros((1, dim))))


class UncertaintyHead:
    """Affine mean and log-variance estimators for one modality."""

    def __init__(self, dim: int, rng: np.random.Generator, name: str):
        self.mu_weight = Parameter(_uniform_init(rng, dim, (dim, dim)), f"{name}.mu_weight")
        self.mu_bias = Parameter(_uniform_init(rng, dim, (1, dim)), f"{name}.mu_bias")
        self.var_weight = Parameter(_uniform_init(rng, dim, (dim, dim)), f"{name}.var_weight")
        self.var_bias = Parameter(_uniform_init(rng, dim, (1, dim)), f"{name}.var_bias")

    def __call__(self, pooled: Node) -> GaussianEmbedding:
        mu = ad.add(ad.matmul(pooled, self.mu_weight.node), self.mu_bias.node)
        log_var = ad.add(ad.matmul(pooled, self.var_weight.node), self.var_bias.node)
        return make_gaussian(mu, log_var)

    def parameters(self) -> list[Parameter]:
        return [self.mu_weight, self.mu_bias, self.var_weight, self.var_bias]


def build_support_set(video_id: int, corpus) -> np.ndarray:
    """Row-wise concatenation of every query labeled to `video_id`.

    `corpus` iterates query records carrying `video_id` and `words`
    attributes; corpus order is preserved.
    """
    blocks = [np.asarray(q.words, dtype=np.float64) for q in corpus if q.video_id == video_id]
    if not blocks:
        raise DataError(f"no queries labeled to video {video_id}")
    return np.vstack(blocks)


def estimate_gaussian(seq: Node, aggregator: Aggregator, head: UncertaintyHead,
                      label: str = "input") -> GaussianEmbedding:
    """Aggregate a joint-space sequence and estimate its distribution."""
    if seq.value.shape[0] < 1:
        raise ContractError(f"estimate_gaussian: empty sequence for {label}")
    z = head(aggregator(seq))
    if not (np.all(np.isfinite(z.mu.value)) and np.all(np.isfinite(z.log_var.value))):
        raise NumericError(f"non-finite distribution parameters for modality {label!r}")
    return z


def kl_diag_gaussians(a: GaussianEmbedding, b: GaussianEmbedding) -> Node:
    """KL(a || b) for diagonal Gaussians, closed form, in log-variance terms.

    0.5 * sum[ exp(lva - lvb) + (mub - mua)^2 exp(-lvb) - 1 + lvb - lva ]
    """
    if a.dim != b.dim:
        raise ContractError(f"kl: dimension mismatch {a.dim} vs {b.dim}")
    lva, lvb = a.log_var, b.log_var
    ratio = ad.exp(ad.sub(lva, lvb))
    diff = ad.sub(b.mu, a.mu)
    maha = ad.mul(ad.mul(diff, diff), ad.exp(ad.scale(lvb, -1.0)))
    inner = ad.add(ad.add(ratio, maha), ad.sub(lvb, lva))
    return ad.scale(ad.sum_all(inner) - float(a.dim), 0.5)


def distribution_alignment_loss(zq: GaussianEmbedding, zv: GaussianEmbedding) -> Node:
    """Cross-modal KL plus standard-normal anchors for both distributions."""
    prior = standard_normal(zq.dim)
    return ad.add(ad.add(kl_diag_gaussians(zq, zv), kl_diag_gaussians(zq, prior)),
                  kl_diag_gaussians(zv, prior))


@dataclass
class ProxySet:
    """K reparameterized draws from one distribution."""

    proxies: Node  # [K, d]
    source: GaussianEmbedding
    eps: np.ndarray = field(repr=False)

    @property
    def count(self) -> int:
        return self.proxies.value.shape[0]


def sample_proxies(z: GaussianEmbedding, count: int, rng: np.random.Generator,
                   deterministic: bool = False) -> ProxySet:
    """Draw `count` proxies mu + sigma * eps with eps ~ N(0, I).

    `deterministic=True` forces eps = 0, collapsing every proxy onto the
    mean (the no-sampling ablation).
    """
    if count < 1:
        raise ContractError(f"proxy count must be >= 1, got {count}")
    if deterministic:
        eps = np.zeros((count, z.dim))
    else:
        eps = rng.standard_normal((count, z.dim))
    proxies = ad.add(z.mu, ad.mul(z.sigma, ad.constant(eps)))
    return ProxySet(proxies=proxies, source=z, eps=eps)


def proxy_matching_loss(pairs: list[tuple[ProxySet, ProxySet]], temperature: float) -> Node:
    """Multi-instance contrastive loss over proxy sets.

    For each positive (text, video) pair, every text proxy is attracted to
    all proxies of its video (numerator) and contrasted against the proxies
    of every other video in the batch (denominator). Invariant to video
    order and to proxy order within a set.
    """
    if len(pairs) < 2:
        raise ContractError("proxy matching: negatives required (batch size >= 2)")
    if temperature <= 0:
        raise ContractError(f"proxy matching: temperature must be positive, got {temperature}")

    video_norm = ad.l2norm_rows(ad.concat_rows([v.proxies for _, v in pairs]))
    counts = [v.count for _, v in pairs]
    offsets = np.cumsum([0] + counts)
    total = offsets[-1]
    ones = ad.constant(np.ones((total, 1)))

    terms = []
    for i, (text, _) in enumerate(pairs):
        pos = np.zeros((total, 1))
        pos[offsets[i]:offsets[i + 1]] = 1.0
        cos = ad.matmul(ad.l2norm_rows(text.proxies), ad.transpose(video_norm))
        expsim = ad.exp(ad.scale(cos, 1.0 / temperature))  # [K_i, total]
        numer = ad.matmul(expsim, ad.constant(pos))
        denom = ad.matmul(expsim, ones)
        terms.append(ad.mean_all(ad.sub(ad.log(numer), ad.log(denom))))
    return ad.scale(ad.mean_all(ad.concat_rows(terms)), -1.0)


def geometric_mean_uncertainty(z: GaussianEmbedding) -> float:
    """(prod sigma_i)^(1/d), evaluated in log space."""
    return float(np.exp(0.5 * z.log_var.value.mean()))


# ---------------------------------------------------------------------------
# batched forms used by the trainer (row i of each [B, d] input is pair i);
# tests pin them to the per-pair functions above


def batched_alignment_loss(mu_q: Node, lv_q: Node, mu_v: Node, lv_v: Node) -> Node:
    """Mean over pairs of the distribution alignment loss, vectorized.

    Row-wise sum of the three closed-form KL integrands: cross-modal
    KL(q||v) plus the standard-normal anchor for each modality.
    """
    b, d = mu_q.value.shape
    cross = ad.add(ad.exp(ad.sub(lv_q, lv_v)),
                   ad.add(ad.mul(ad.mul(ad.sub(mu_v, mu_q), ad.sub(mu_v, mu_q)),
                                 ad.exp(ad.scale(lv_v, -1.0))),
                          ad.sub(lv_v, lv_q)))
    prior_q = ad.sub(ad.add(ad.exp(lv_q), ad.mul(mu_q, mu_q)), lv_q)
    prior_v = ad.sub(ad.add(ad.exp(lv_v), ad.mul(mu_v, mu_v)), lv_v)
    inner = ad.add(cross, ad.add(prior_q, prior_v))
    return ad.scale(ad.sum_all(inner) - 3.0 * d * b, 0.5 / b)


def batched_proxy_matching_loss(mu_q: Node, lv_q: Node, mu_v: Node, lv_v: Node,
                                count: int, rng: np.random.Generator, temperature: float,
                                deterministic: bool = False) -> Node:
    """Proxy matching over a whole batch with one similarity matrix.

    Draws `count` proxies per modality per pair (queries first, then
    videos), builds the [B*K, B*K] cosine matrix, and contrasts each text
    proxy's positive video block against all other videos' proxies.
    """
    b, d = mu_q.value.shape
    if b < 2:
        raise ContractError("proxy matching: negatives required (batch size >= 2)")
    if temperature <= 0:
        raise ContractError(f"proxy matching: temperature must be positive, got {temperature}")
    if count < 1:
        raise ContractError(f"proxy count must be >= 1, got {count}")

    if deterministic:
        eps_q = eps_v = np.zeros((b * count, d))
    else:
        eps_q = rng.standard_normal((b * count, d))
        eps_v = rng.standard_normal((b * count, d))

    rep = ad.constant(np.repeat(np.eye(b), count, axis=0))  # [B*K, B]
    block = np.repeat(np.repeat(np.eye(b), count, axis=0), count, axis=1)

    def draw(mu, lv, eps):
        sigma = ad.exp(ad.scale(lv, 0.5))
        return ad.add(ad.matmul(rep, mu), ad.mul(ad.matmul(rep, sigma), ad.constant(eps)))

    text = ad.l2norm_rows(draw(mu_q, lv_q, eps_q))
    video = ad.l2norm_rows(draw(mu_v, lv_v, eps_v))
    expsim = ad.exp(ad.scale(ad.matmul(text, ad.transpose(video)), 1.0 / temperature))
    ones = ad.constant(np.ones((b * count, 1)))
    numer = ad.matmul(ad.mul(expsim, ad.constant(block)), ones)
    denom = ad.matmul(expsim, ones)
    return ad.scale(ad.mean_all(ad.sub(ad.log(numer), ad.log(denom))), -1.0)
