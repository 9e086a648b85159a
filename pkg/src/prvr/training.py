"""End-to-end training: batching, loss assembly, optimization, early stopping.

Batches contain at most one (query, video) pair per video so in-batch
negatives are never false negatives. Data order, weight init, and proxy
draws come from separate named substreams of the run seed, so disabling
one component never perturbs another's randomness and seeded runs are
byte-reproducible.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DataError, NumericError
from .evaluation import TracePoint, query_uncertainties, rank_all, video_uncertainties
from .losses import LossWeights, infonce_base, total_loss, triplet_base
from .model import ModelConfig, RetrievalModel
from .probabilistic import batched_alignment_loss, batched_proxy_matching_loss
from .seeding import fnv1a64, substream
from .synthetic import Dataset


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    proxies: int = 6
    weights: LossWeights = field(default_factory=LossWeights)
    temperature_pm: float = 0.1
    uncertainty_on: bool = True
    gating_on: bool = True
    clip_branch_on: bool = False
    support_set_on: bool = True
    deterministic_proxies: bool = False
    eval_every: int = 1
    patience: int = 10
    joint_dim: int = 32
    gate_mode: str = "softmax"
    clip_scales: tuple[int, ...] = (4, 8, 16)
    trace_every: int | None = None

    def __post_init__(self):
        if self.proxies < 1:
            raise ConfigError(f"proxies must be >= 1, got {self.proxies}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for contrastive losses, got {self.batch_size}")
        if self.epochs < 1 or self.eval_every < 1 or self.patience < 1:
            raise ConfigError("epochs, eval_every, and patience must all be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


@dataclass
class LogRow:
    epoch: int
    l_nce: float
    l_trip: float
    l_da: float | None
    l_pm: float | None
    total: float
    test_sum_recall: float | None


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)
    trace: list[TracePoint] = field(default_factory=list)

    def to_csv(self) -> str:
        def cell(x):
            return "" if x is None else repr(x)

        lines = ["epoch,L_nce,L_trip,L_DA,L_PM,total,test_SumR"]
        for r in self.rows:
            lines.append(",".join([str(r.epoch), repr(r.l_nce), repr(r.l_trip),
                                   cell(r.l_da), cell(r.l_pm), repr(r.total),
                                   cell(r.test_sum_recall)]))
        return "\n".join(lines) + "\n"


@dataclass
class Checkpoint:
    params: dict[str, dict]  # name -> {value, m, v, t}
    epoch: int
    best_sum_recall: float
    config_hash: str
    model_config: ModelConfig
    gating_on: bool
    clip_branch_on: bool

    def to_model(self) -> RetrievalModel:
        model = RetrievalModel(self.model_config)
        for p in model.parameters():
            entry = self.params.get(p.name)
            if entry is None:
                raise DataError(f"checkpoint missing parameter {p.name!r}")
            p.node.value[...] = entry["value"]
            p.m = entry["m"].copy()
            p.v = entry["v"].copy()
            p.t = entry["t"]
        return model


def config_hash(config: TrainConfig) -> str:
    return f"{fnv1a64(repr(config).encode('utf-8')):016x}"


def _support_sets(dataset: Dataset) -> dict[int, np.ndarray]:
    support: dict[int, list[np.ndarray]] = {}
    for q in dataset.train.queries:
        support.setdefault(q.video_id, []).append(q.words)
    return {vid: np.vstack(blocks) for vid, blocks in support.items()}


def _snapshot(params) -> dict[str, dict]:
    return {p.name: {"value": p.value.copy(), "m": p.m.copy(), "v": p.v.copy(), "t": p.t}
            for p in params}


def train(config: TrainConfig, dataset: Dataset) -> tuple[Checkpoint, TrainLog]:
    """Optimize the full model on the train split, early-stopping on test SumR.

    Returns the best checkpoint seen (by test SumR) and the per-epoch log.
    """
    model = RetrievalModel(ModelConfig(
        input_dim=dataset.config.input_dim, joint_dim=config.joint_dim,
        seed=config.seed, gate_mode=config.gate_mode, clip_scales=config.clip_scales))
    params = model.parameters()
    rng_data = substream(config.seed, "data-order")
    rng_proxy = substream(config.seed, "proxy")

    videos = dataset.train.videos
    queries_of: dict[int, list] = {}
    for q in dataset.train.queries:
        queries_of.setdefault(q.video_id, []).append(q)
    missing = [v.id for v in videos if v.id not in queries_of]
    if missing:
        raise DataError(f"train videos without queries: {missing}")
    support = _support_sets(dataset) if config.support_set_on else None

    batch_size = min(config.batch_size, len(videos))
    log = TrainLog()
    best: dict[str, dict] | None = None
    best_sumr = -np.inf
    best_epoch = 0
    stall = 0
    stopped = False

    def evaluate() -> float:
        report = rank_all(model, dataset.test.queries, dataset.test.videos,
                          gated=config.gating_on, clip_branch=config.clip_branch_on)
        return report.sum_recall

    for epoch in range(1, config.epochs + 1):
        order = rng_data.permutation(len(videos))
        epoch_parts = []
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            if len(chunk) < 2:
                continue  # contrastive losses need in-batch negatives
            batch_videos = [videos[i] for i in chunk]
            batch_queries = [queries_of[v.id][rng_data.integers(0, len(queries_of[v.id]))]
                             for v in batch_videos]
            parts = _batch_loss(model, config, batch_queries, batch_videos, support, rng_proxy)
            loss, l_nce, l_trip, l_da, l_pm = parts
            for p in params:
                p.zero_grad()
            loss.backward()
            try:
                ad.adam_step(params, lr=config.lr, betas=config.betas, eps=config.eps)
            except NumericError as err:
                norms = {p.name: float(np.linalg.norm(p.grad)) for p in params}
                worst = sorted(norms, key=norms.get, reverse=True)[:5]
                raise NumericError(
                    f"{err} at epoch {epoch}; loss parts: nce={l_nce}, trip={l_trip}, "
                    f"da={l_da}, pm={l_pm}; largest gradient norms: "
                    + ", ".join(f"{n}={norms[n]:.3e}" for n in worst)) from err
            epoch_parts.append((l_nce, l_trip, l_da, l_pm, float(loss.value[0, 0])))

        if not epoch_parts:
            raise DataError("no usable batches in epoch (corpus too small?)")
        means = [float(np.mean([p[i] for p in epoch_parts])) if epoch_parts[0][i] is not None else None
                 for i in range(5)]

        sumr = None
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            sumr = evaluate()
            if sumr > best_sumr:
                best_sumr, best, best_epoch, stall = sumr, _snapshot(params), epoch, 0
            else:
                stall += 1
        log.rows.append(LogRow(epoch, means[0], means[1], means[2], means[3], means[4], sumr))

        if config.trace_every is not None and (epoch % config.trace_every == 0
                                               or epoch == config.epochs):
            trace_sumr = sumr if sumr is not None else evaluate()
            log.trace.append(TracePoint(
                epoch=epoch,
                video_uncertainty=float(np.mean(video_uncertainties(model, dataset.test.videos))),
                query_uncertainty=float(np.mean(query_uncertainties(model, dataset.test.queries))),
                sum_recall=trace_sumr))

        if stall >= config.patience:
            stopped = True
            break

    if best is None:  # no eval ran before the final epoch forced one
        best, best_sumr, best_epoch = _snapshot(params), evaluate(), config.epochs
    checkpoint = Checkpoint(
        params=best, epoch=best_epoch, best_sum_recall=best_sumr,
        config_hash=config_hash(config), model_config=model.config,
        gating_on=config.gating_on, clip_branch_on=config.clip_branch_on)
    return checkpoint, log


def _batch_loss(model, config, batch_queries, batch_videos, support, rng_proxy):
    words = [q.words for q in batch_queries]
    frames = [v.frames for v in batch_videos]
    weights = config.weights

    frame_scores = model.frame_score_matrix(words, frames, gated=config.gating_on)
    l_nce = infonce_base(frame_scores, weights.temperature_nce)
    l_trip = triplet_base(frame_scores, weights.margin)
    if config.clip_branch_on:
        clip_scores = model.clip_score_matrix(words, frames)
        l_nce = ad.add(l_nce, infonce_base(clip_scores, weights.temperature_nce))
        l_trip = ad.add(l_trip, triplet_base(clip_scores, weights.margin))

    l_da = l_pm = None
    if config.uncertainty_on:
        text_inputs = ([support[v.id] for v in batch_videos] if support is not None else words)
        mu_q, lv_q = model.batch_gaussians(text_inputs, "query")
        mu_v, lv_v = model.batch_gaussians(frames, "video")
        l_da = batched_alignment_loss(mu_q, lv_q, mu_v, lv_v)
        l_pm = batched_proxy_matching_loss(mu_q, lv_q, mu_v, lv_v, config.proxies,
                                           rng_proxy, config.temperature_pm,
                                           deterministic=config.deterministic_proxies)

    loss = total_loss(l_nce, l_trip, l_da, l_pm, weights)
    return (loss,
            float(l_nce.value[0, 0]), float(l_trip.value[0, 0]),
            None if l_da is None else float(l_da.value[0, 0]),
            None if l_pm is None else float(l_pm.value[0, 0]))


# ---------------------------------------------------------------------------
# checkpoint serialization (flat binary + manifest, like the dataset format)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(checkpoint.params)
    buf = io.BytesIO()
    table = []
    for name in names:
        entry = checkpoint.params[name]
        rows, cols = entry["value"].shape
        table.append(f"param={name}:{rows}x{cols}:t={entry['t']}")
        for key in ("value", "m", "v"):
            buf.write(np.ascontiguousarray(entry[key], dtype="<f8").tobytes())
    payload = buf.getvalue()
    mc = checkpoint.model_config
    lines = [
        "format_version=1",
        f"epoch={checkpoint.epoch}",
        f"best_sum_recall={checkpoint.best_sum_recall!r}",
        f"config_hash={checkpoint.config_hash}",
        f"input_dim={mc.input_dim}",
        f"joint_dim={mc.joint_dim}",
        f"seed={mc.seed}",
        f"gate_mode={mc.gate_mode}",
        f"clip_scales={','.join(str(s) for s in mc.clip_scales)}",
        f"gating_on={checkpoint.gating_on}",
        f"clip_branch_on={checkpoint.clip_branch_on}",
        *table,
        f"checksum={fnv1a64(payload):016x}",
    ]
    (out / "checkpoint.bin").write_bytes(payload)
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"not a checkpoint directory (missing manifest.txt): {root}")
    entries: dict[str, str] = {}
    table: list[tuple[str, int, int, int]] = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        key, value = line.split("=", 1)
        if key == "param":
            name, shape, tpart = value.split(":")
            rows, cols = (int(x) for x in shape.split("x"))
            table.append((name, rows, cols, int(tpart.removeprefix("t="))))
        else:
            entries[key] = value

    payload = (root / "checkpoint.bin").read_bytes()
    actual = f"{fnv1a64(payload):016x}"
    if entries.get("checksum") != actual:
        raise DataError(f"corrupt checkpoint: checksum mismatch "
                        f"(manifest {entries.get('checksum')}, actual {actual})")

    params: dict[str, dict] = {}
    offset = 0
    for name, rows, cols, t in table:
        arrays = {}
        for key in ("value", "m", "v"):
            n = rows * cols * 8
            if offset + n > len(payload):
                raise DataError("corrupt checkpoint: payload truncated")
            arrays[key] = np.frombuffer(payload[offset:offset + n],
                                        dtype="<f8").reshape(rows, cols).astype(np.float64)
            offset += n
        params[name] = {**arrays, "t": t}
    if offset != len(payload):
        raise DataError("corrupt checkpoint: trailing bytes in payload")

    model_config = ModelConfig(
        input_dim=int(entries["input_dim"]), joint_dim=int(entries["joint_dim"]),
        seed=int(entries["seed"]), gate_mode=entries["gate_mode"],
        clip_scales=tuple(int(s) for s in entries["clip_scales"].split(",")))
    return Checkpoint(
        params=params, epoch=int(entries["epoch"]),
        best_sum_recall=float(entries["best_sum_recall"]),
        config_hash=entries["config_hash"], model_config=model_config,
        gating_on=entries["gating_on"] == "True",
        clip_branch_on=entries["clip_branch_on"] == "True")


# ---------------------------------------------------------------------------
# ablation grids


@dataclass
class AblationRow:
    label: str
    recall: dict[int, float]
    sum_recall: float


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def to_csv(self) -> str:
        lines = ["configuration,R@1,R@5,R@10,R@100,SumR"]
        for r in self.rows:
            cells = [r.label] + [f"{r.recall[m]:.4f}" for m in (1, 5, 10, 100)]
            lines.append(",".join(cells + [f"{r.sum_recall:.4f}"]))
        return "\n".join(lines) + "\n"


def named_grid(name: str, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """Built-in ablation grids over module toggles, proxy counts, and
    loss-weight assignments."""
    if name == "modules":
        return [
            ("baseline", replace(base, uncertainty_on=False, gating_on=False)),
            ("uncertainty-only", replace(base, uncertainty_on=True, gating_on=False)),
            ("gating-only", replace(base, uncertainty_on=False, gating_on=True)),
            ("full", replace(base, uncertainty_on=True, gating_on=True)),
        ]
    if name == "proxy-count":
        rows = [("no-sampling", replace(base, uncertainty_on=True, proxies=1,
                                        deterministic_proxies=True))]
        rows += [(f"K={k}", replace(base, uncertainty_on=True, proxies=k,
                                    deterministic_proxies=False)) for k in (2, 4, 6)]
        return rows
    if name == "loss-weights":
        def with_lambdas(da, pm):
            return replace(base, uncertainty_on=True,
                           weights=replace(base.weights, lambda_da=da, lambda_pm=pm))
        return [
            ("da=0.001,pm=0.004", with_lambdas(0.001, 0.004)),
            ("da=0.004,pm=0.001", with_lambdas(0.004, 0.001)),
            ("da=0.001,pm=0.00025", with_lambdas(0.001, 0.00025)),
        ]
    raise ConfigError(f"unknown ablation grid {name!r}; "
                      f"expected one of: modules, proxy-count, loss-weights")


def ablate(config: TrainConfig, dataset: Dataset,
           grid: str | list[tuple[str, TrainConfig]]) -> AblationTable:
    """Train every grid configuration with the shared seed and tabulate."""
    entries = named_grid(grid, config) if isinstance(grid, str) else grid
    if not entries:
        raise ConfigError("ablation grid is empty")
    rows = []
    for label, cfg in entries:
        checkpoint, _ = train(cfg, dataset)
        model = checkpoint.to_model()
        report = rank_all(model, dataset.test.queries, dataset.test.videos,
                          gated=cfg.gating_on, clip_branch=cfg.clip_branch_on)
        rows.append(AblationRow(label=label, recall=report.recall,
                                sum_recall=report.sum_recall))
    return AblationTable(rows=rows)
