"""Retrieval evaluation: rank-based metrics, grouping, and analysis sweeps.

Ranks are 1-based. Ties in score break toward the lower video id, and every
aggregation follows a fixed ordering, so reports are byte-reproducible.
R@M values are percentages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError
from .probabilistic import geometric_mean_uncertainty
from .synthetic import SyntheticQuery, SyntheticVideo, inject_noise, requery_after_noise

RECALL_LEVELS = (1, 5, 10, 100)
MV_BINS = ((0.0, 0.2), (0.2, 0.4), (0.4, 1.0))


@dataclass
class QueryResult:
    query_id: int
    target_video: int
    rank: int
    target_score: float  # frame-level (gated) score of the target video
    top_ids: list[int]
    top_scores: list[float]  # ranking scores of the top-k videos
    top_gated: list[float]  # frame-level scores of the same videos
    mv_ratio: float


@dataclass
class RetrievalReport:
    results: list[QueryResult]
    recall: dict[int, float] = field(default_factory=dict)
    sum_recall: float = 0.0

    def __post_init__(self):
        if not self.recall:
            ranks = np.array([r.rank for r in self.results])
            self.recall = {m: recall_at(ranks, m) for m in RECALL_LEVELS}
            self.sum_recall = float(sum(self.recall.values()))

    @property
    def size(self) -> int:
        return len(self.results)


def recall_at(ranks: np.ndarray, m: int) -> float:
    """Percentage of queries whose target ranked within the top m."""
    if len(ranks) == 0:
        return 0.0
    return float(100.0 * np.mean(ranks <= m))


def rank_from_scores(ranking_scores: np.ndarray, frame_scores: np.ndarray,
                     queries: list[SyntheticQuery], video_ids: list[int],
                     top_k: int = 10) -> RetrievalReport:
    """Build a report from precomputed score matrices [n_q, n_v].

    Videos are ordered by descending ranking score, ties by ascending video
    id. Raises if any query's target is missing from the gallery.
    """
    ids = np.asarray(video_ids)
    known = set(video_ids)
    missing = [q.id for q in queries if q.video_id not in known]
    if missing:
        raise DataError(f"target video absent from gallery for queries {missing}")

    results = []
    for row, (scores, gated) in enumerate(zip(ranking_scores, frame_scores)):
        order = np.lexsort((ids, -scores))
        ranked_ids = ids[order]
        q = queries[row]
        rank = int(np.nonzero(ranked_ids == q.video_id)[0][0]) + 1
        target_col = int(np.nonzero(ids == q.video_id)[0][0])
        k = min(top_k, len(ids))
        results.append(QueryResult(
            query_id=q.id,
            target_video=q.video_id,
            rank=rank,
            target_score=float(gated[target_col]),
            top_ids=[int(i) for i in ranked_ids[:k]],
            top_scores=[float(scores[c]) for c in order[:k]],
            top_gated=[float(gated[c]) for c in order[:k]],
            mv_ratio=q.mv_ratio,
        ))
    return RetrievalReport(results=results)


def rank_all(model, queries: list[SyntheticQuery], gallery: list[SyntheticVideo],
             gated: bool = True, clip_branch: bool = False, top_k: int = 10) -> RetrievalReport:
    """Score every query against the whole gallery and rank."""
    if not gallery:
        raise ContractError("rank_all: empty gallery")
    ranking, frame = model.score_gallery([q.words for q in queries],
                                         [v.frames for v in gallery],
                                         gated=gated, clip_branch=clip_branch)
    return rank_from_scores(ranking, frame, queries, [v.id for v in gallery], top_k=top_k)


# ---------------------------------------------------------------------------
# grouping


def group_by_mv(report: RetrievalReport, bins=MV_BINS) -> dict[str, RetrievalReport]:
    """Split a report by moment-to-video ratio bins (left-open, right-closed).

    Empty bins appear as empty reports rather than errors; member counts
    over the default bins sum to the full query count.
    """
    groups = {}
    for lo, hi in bins:
        members = [r for r in report.results if lo < r.mv_ratio <= hi]
        groups[f"({lo:g},{hi:g}]"] = RetrievalReport(results=members)
    return groups


def query_uncertainties(model, queries: list[SyntheticQuery]) -> np.ndarray:
    """Per-query geometric-mean sigma, from the single query alone.

    Test-time queries arrive without their support set, so evaluation
    uncertainty always uses the standalone word sequence.
    """
    return np.array([geometric_mean_uncertainty(model.query_gaussian(q.words)) for q in queries])


def video_uncertainties(model, videos: list[SyntheticVideo]) -> np.ndarray:
    return np.array([geometric_mean_uncertainty(model.video_gaussian(v.frames)) for v in videos])


@dataclass
class UncertaintyGroup:
    mean_uncertainty: float
    recall_at_1: float
    query_ids: list[int]


def group_by_uncertainty(report: RetrievalReport, uncertainties: np.ndarray,
                         set_size: int = 5, mv_range: tuple[float, float] | None = None
                         ) -> list[UncertaintyGroup]:
    """Sort queries by uncertainty and chunk into consecutive sets.

    `uncertainties[i]` belongs to `report.results[i]`. An optional
    mv_range (lo, hi] prefilter is applied before sorting; the final
    partial chunk is kept.
    """
    if set_size < 1:
        raise ContractError(f"set size must be >= 1, got {set_size}")
    if len(uncertainties) != report.size:
        raise ContractError("one uncertainty value per query result required")
    rows = list(zip(report.results, uncertainties))
    if mv_range is not None:
        lo, hi = mv_range
        rows = [(r, u) for r, u in rows if lo < r.mv_ratio <= hi]
    rows.sort(key=lambda item: (item[1], item[0].query_id))
    groups = []
    for start in range(0, len(rows), set_size):
        chunk = rows[start:start + set_size]
        ranks = np.array([r.rank for r, _ in chunk])
        groups.append(UncertaintyGroup(
            mean_uncertainty=float(np.mean([u for _, u in chunk])),
            recall_at_1=recall_at(ranks, 1),
            query_ids=[r.query_id for r, _ in chunk],
        ))
    return groups


# ---------------------------------------------------------------------------
# analysis protocols


@dataclass
class NoiseSweepResult:
    levels: list[float]
    reports: list[RetrievalReport]

    def sum_recalls(self) -> list[float]:
        return [r.sum_recall for r in self.reports]

    def relative_drops(self) -> list[float]:
        base = self.reports[0].sum_recall
        if base == 0:
            raise ContractError("noise sweep: clean SumR is zero, relative drop undefined")
        return [(base - r.sum_recall) / base for r in self.reports]


def noise_sweep(model, queries: list[SyntheticQuery], gallery: list[SyntheticVideo],
                levels, rng: np.random.Generator, noise_std: float,
                gated: bool = True, clip_branch: bool = False,
                pool: np.ndarray | None = None) -> NoiseSweepResult:
    """Evaluate under distractor-segment injection at increasing levels.

    Levels must be strictly increasing and include 0 (the clean gallery).
    Each level uses its own generator spawned from `rng`, so a level's
    noise does not depend on which other levels run. `pool` makes the
    inserted segments background-like (see `inject_noise`).
    """
    levels = [float(p) for p in levels]
    if not levels or levels[0] != 0.0:
        raise ContractError("noise sweep: levels must start at 0")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ContractError("noise sweep: levels must be strictly increasing")

    by_id = {v.id: v for v in gallery}
    reports = []
    for p in levels:
        level_rng = rng.spawn(1)[0]
        if p == 0.0:
            noisy_gallery, noisy_queries = gallery, queries
        else:
            noisy = {v.id: inject_noise(v, p, level_rng, noise_std, pool=pool) for v in gallery}
            noisy_gallery = [noisy[v.id] for v in gallery]
            noisy_queries = [requery_after_noise(q, by_id[q.video_id], noisy[q.video_id])
                             for q in queries]
        reports.append(rank_all(model, noisy_queries, noisy_gallery,
                                gated=gated, clip_branch=clip_branch))
    return NoiseSweepResult(levels=levels, reports=reports)


def similarity_profile(report: RetrievalReport, k: int) -> list[tuple[int, list[float]]]:
    """Frame-level scores of each query's top-k retrieved videos."""
    if k < 1:
        raise ContractError(f"similarity profile: k must be >= 1, got {k}")
    return [(r.query_id, r.top_gated[:k]) for r in report.results]


@dataclass
class TracePoint:
    epoch: int
    video_uncertainty: float
    query_uncertainty: float
    sum_recall: float


# ---------------------------------------------------------------------------
# serialization


def report_to_dict(report: RetrievalReport) -> dict:
    return {
        "recall": {f"R@{m}": report.recall[m] for m in RECALL_LEVELS},
        "sum_recall": report.sum_recall,
        "queries": [
            {
                "query_id": r.query_id,
                "target_video": r.target_video,
                "rank": r.rank,
                "target_score": r.target_score,
                "mv_ratio": r.mv_ratio,
                "top_ids": r.top_ids,
                "top_scores": r.top_scores,
                "top_gated": r.top_gated,
            }
            for r in report.results
        ],
    }


def report_to_json(report: RetrievalReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"


def report_to_csv(report: RetrievalReport) -> str:
    lines = ["query_id,target_video,rank,target_score,mv_ratio"]
    for r in report.results:
        lines.append(f"{r.query_id},{r.target_video},{r.rank},{r.target_score!r},{r.mv_ratio!r}")
    return "\n".join(lines) + "\n"


def groups_to_csv(groups: dict[str, RetrievalReport]) -> str:
    lines = ["group,queries,R@1,R@5,R@10,R@100,SumR"]
    for label, rep in groups.items():
        cells = [label, str(rep.size)] + [f"{rep.recall[m]:.4f}" for m in RECALL_LEVELS]
        lines.append(",".join(cells + [f"{rep.sum_recall:.4f}"]))
    return "\n".join(lines) + "\n"


def uncertainty_groups_to_csv(groups: list[UncertaintyGroup]) -> str:
    lines = ["set,mean_uncertainty,R@1,queries"]
    for i, g in enumerate(groups):
        lines.append(f"{i},{g.mean_uncertainty!r},{g.recall_at_1:.4f},{len(g.query_ids)}")
    return "\n".join(lines) + "\n"


def sweep_to_csv(sweep: NoiseSweepResult) -> str:
    lines = ["noise_level,R@1,R@5,R@10,R@100,SumR,relative_drop"]
    drops = sweep.relative_drops()
    for p, rep, drop in zip(sweep.levels, sweep.reports, drops):
        cells = [f"{p:g}"] + [f"{rep.recall[m]:.4f}" for m in RECALL_LEVELS]
        lines.append(",".join(cells + [f"{rep.sum_recall:.4f}", f"{drop:.6f}"]))
    return "\n".join(lines) + "\n"


def profile_to_csv(profile: list[tuple[int, list[float]]]) -> str:
    lines = ["query_id,position,score"]
    for qid, scores in profile:
        for pos, s in enumerate(scores, 1):
            lines.append(f"{qid},{pos},{s!r}")
    return "\n".join(lines) + "\n"


def trace_to_csv(points: list[TracePoint]) -> str:
    lines = ["epoch,video_uncertainty,query_uncertainty,SumR"]
    for t in points:
        lines.append(f"{t.epoch},{t.video_uncertainty!r},{t.query_uncertainty!r},{t.sum_recall:.4f}")
    return "\n".join(lines) + "\n"
