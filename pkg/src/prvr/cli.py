"""Command-line entry point: dataset generation, training, evaluation,
ablations, and analysis sweeps.

Configuration is flat key=value text (same keys as the dataclass fields);
command-line flags override file values. Every command echoes its effective
configuration to `<out>/config.echo`, which is itself a valid config file.

Exit codes: 0 success, 2 configuration/contract error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, NumericError
from .evaluation import (
    group_by_mv,
    group_by_uncertainty,
    groups_to_csv,
    noise_sweep,
    profile_to_csv,
    query_uncertainties,
    rank_all,
    report_to_csv,
    report_to_json,
    similarity_profile,
    sweep_to_csv,
    trace_to_csv,
    uncertainty_groups_to_csv,
)
from .losses import LossWeights
from .seeding import substream
from .synthetic import Dataset, GenConfig, generate, load_dataset, save_dataset
from .training import TrainConfig, ablate, load_checkpoint, save_checkpoint, train

_GEN_KEYS = {
    "seed": int, "n_concepts": int, "train_videos": int, "test_videos": int,
    "queries_per_video": int, "function_pool_size": int, "input_dim": int,
    "function_word_rate": float, "noise_std": float,
    "segments_per_video": "pair", "frames_per_segment": "pair", "words_per_query": "pair",
}

_TRAIN_KEYS = {
    "seed": int, "epochs": int, "batch_size": int, "lr": float, "proxies": int,
    "temperature_pm": float, "uncertainty_on": "bool", "gating_on": "bool",
    "clip_branch_on": "bool", "support_set_on": "bool", "deterministic_proxies": "bool",
    "eval_every": int, "patience": int, "joint_dim": int, "gate_mode": str,
    "clip_scales": "ints", "trace_every": int,
}

_WEIGHT_KEYS = {
    "lambda_nce": float, "lambda_trip": float, "lambda_da": float, "lambda_pm": float,
    "temperature_nce": float, "margin": float,
}


def _parse_value(key: str, raw: str, kind):
    try:
        if kind == "bool":
            if raw not in ("true", "false", "True", "False"):
                raise ValueError(raw)
            return raw in ("true", "True")
        if kind == "pair":
            lo, hi = raw.split(",")
            return (int(lo), int(hi))
        if kind == "ints":
            return tuple(int(x) for x in raw.split(","))
        return kind(raw)
    except (ValueError, TypeError):
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def read_config_file(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def build_configs(entries: dict[str, str]) -> tuple[GenConfig, TrainConfig]:
    """Typed configuration from flat key=value entries; unknown keys rejected."""
    known = set(_GEN_KEYS) | set(_TRAIN_KEYS) | set(_WEIGHT_KEYS)
    unknown = sorted(set(entries) - known)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    gen_kwargs = {k: _parse_value(k, entries[k], kind)
                  for k, kind in _GEN_KEYS.items() if k in entries}
    train_kwargs = {k: _parse_value(k, entries[k], kind)
                    for k, kind in _TRAIN_KEYS.items() if k in entries}
    weight_kwargs = {k: _parse_value(k, entries[k], kind)
                     for k, kind in _WEIGHT_KEYS.items() if k in entries}
    try:
        weights = LossWeights(**weight_kwargs)
        return GenConfig(**gen_kwargs), TrainConfig(weights=weights, **train_kwargs)
    except ContractError as err:  # LossWeights validates via ContractError
        raise ConfigError(str(err)) from None


def echo_config(gen: GenConfig, tc: TrainConfig) -> str:
    lines = []
    for key, kind in _GEN_KEYS.items():
        value = getattr(gen, key)
        if kind in ("pair",):
            value = f"{value[0]},{value[1]}"
        lines.append(f"{key}={value}")
    for key, kind in _TRAIN_KEYS.items():
        if key == "seed":
            continue  # already echoed from the generation section
        value = getattr(tc, key)
        if value is None:
            continue
        if kind == "ints":
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    for key in _WEIGHT_KEYS:
        lines.append(f"{key}={getattr(tc.weights, key)}")
    return "\n".join(lines) + "\n"


def _load_dataset_arg(args) -> Dataset:
    if not args.dataset:
        raise ConfigError("--dataset is required for this command")
    return load_dataset(args.dataset)


def _prepare(args) -> tuple[GenConfig, TrainConfig, Path]:
    entries = read_config_file(args.config) if args.config else {}
    if args.seed is not None:
        entries["seed"] = str(args.seed)
    gen, tc = build_configs(entries)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(echo_config(gen, tc), encoding="utf-8")
    return gen, tc, out


def cmd_gen_data(args) -> int:
    gen, _, out = _prepare(args)
    target = Path(args.dataset) if args.dataset else out / "dataset"
    save_dataset(generate(gen), target)
    print(f"dataset written to {target}")
    return 0


def cmd_train(args) -> int:
    _, tc, out = _prepare(args)
    dataset = _load_dataset_arg(args)
    checkpoint, log = train(tc, dataset)
    target = Path(args.checkpoint) if args.checkpoint else out / "checkpoint"
    save_checkpoint(checkpoint, target)
    (out / "train_log.csv").write_text(log.to_csv(), encoding="utf-8")
    if log.trace:
        (out / "uncertainty_trace.csv").write_text(trace_to_csv(log.trace), encoding="utf-8")
    print(f"best SumR {checkpoint.best_sum_recall:.4f} at epoch {checkpoint.epoch}; "
          f"checkpoint written to {target}")
    return 0


def _restore(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    checkpoint = load_checkpoint(args.checkpoint)
    return checkpoint, checkpoint.to_model()


def cmd_eval(args) -> int:
    _, _, out = _prepare(args)
    dataset = _load_dataset_arg(args)
    checkpoint, model = _restore(args)
    report = rank_all(model, dataset.test.queries, dataset.test.videos,
                      gated=checkpoint.gating_on, clip_branch=checkpoint.clip_branch_on)
    (out / "report.json").write_text(report_to_json(report), encoding="utf-8")
    (out / "report.csv").write_text(report_to_csv(report), encoding="utf-8")
    recalls = " ".join(f"R@{m}={report.recall[m]:.2f}" for m in (1, 5, 10, 100))
    print(f"{recalls} SumR={report.sum_recall:.2f}")
    return 0


def cmd_ablate(args) -> int:
    _, tc, out = _prepare(args)
    dataset = _load_dataset_arg(args)
    table = ablate(tc, dataset, args.grid)
    (out / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
    print(table.to_csv(), end="")
    return 0


def cmd_analyze(args) -> int:
    _, tc, out = _prepare(args)
    dataset = _load_dataset_arg(args)

    if args.uncertainty_trace is not None:
        traced = replace(tc, trace_every=args.uncertainty_trace)
        _, log = train(traced, dataset)
        (out / "uncertainty_trace.csv").write_text(trace_to_csv(log.trace), encoding="utf-8")
        print(f"uncertainty trace with {len(log.trace)} checkpoints written")
        return 0

    checkpoint, model = _restore(args)
    report = rank_all(model, dataset.test.queries, dataset.test.videos,
                      gated=checkpoint.gating_on, clip_branch=checkpoint.clip_branch_on)
    ran_any = False
    if args.mv_groups:
        (out / "mv_groups.csv").write_text(groups_to_csv(group_by_mv(report)), encoding="utf-8")
        ran_any = True
    if args.uncertainty_groups is not None:
        unc = query_uncertainties(model, dataset.test.queries)
        groups = group_by_uncertainty(report, unc, set_size=args.uncertainty_groups)
        (out / "uncertainty_groups.csv").write_text(uncertainty_groups_to_csv(groups),
                                                    encoding="utf-8")
        ran_any = True
    if args.noise_sweep:
        levels = [float(p) for p in args.noise_sweep.split(",")]
        rng = substream(tc.seed, "noise")
        sweep = noise_sweep(model, dataset.test.queries, dataset.test.videos, levels, rng,
                            dataset.config.noise_std, gated=checkpoint.gating_on,
                            clip_branch=checkpoint.clip_branch_on,
                            pool=dataset.function_pool)
        (out / "noise_sweep.csv").write_text(sweep_to_csv(sweep), encoding="utf-8")
        ran_any = True
    if args.similarity_profile is not None:
        report_k = rank_all(model, dataset.test.queries, dataset.test.videos,
                            gated=checkpoint.gating_on, clip_branch=checkpoint.clip_branch_on,
                            top_k=args.similarity_profile)
        profile = similarity_profile(report_k, args.similarity_profile)
        (out / "similarity_profile.csv").write_text(profile_to_csv(profile), encoding="utf-8")
        ran_any = True
    if not ran_any:
        raise ConfigError("analyze: select at least one of --mv-groups, --uncertainty-groups, "
                          "--noise-sweep, --similarity-profile, --uncertainty-trace")
    print(f"analysis outputs written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prvr",
        description="Uncertainty-aware partially relevant video retrieval, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the top-level seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--dataset", default=None, help="dataset directory")
        p.add_argument("--checkpoint", default=None, help="checkpoint directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare a configuration grid")
    common(p)
    p.add_argument("--grid", default="modules",
                   help="ablation grid: modules, proxy-count, or loss-weights")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("analyze", help="analysis protocols on a trained checkpoint")
    common(p)
    p.add_argument("--mv-groups", action="store_true",
                   help="recall grouped by moment-to-video ratio bins")
    p.add_argument("--uncertainty-groups", type=int, default=None, metavar="SET_SIZE",
                   help="recall grouped by query uncertainty, sets of SET_SIZE")
    p.add_argument("--noise-sweep", default=None, metavar="LEVELS",
                   help="comma-separated noise levels starting at 0")
    p.add_argument("--similarity-profile", type=int, default=None, metavar="K",
                   help="emit top-K retrieved scores per query")
    p.add_argument("--uncertainty-trace", type=int, default=None, metavar="N",
                   help="retrain, recording uncertainty every N epochs")
    p.set_defaults(fn=cmd_analyze)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, ContractError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
