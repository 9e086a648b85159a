"""Reproducible synthetic retrieval corpus with ground-truth structure.

Videos are sequences of concept segments (prototype + Gaussian noise per
frame); queries describe one target segment with content words perturbed
from the segment's prototype plus function words drawn from a small shared
pool that carries no concept information. Every query records its
moment-to-video ratio and per-word kind labels, so grouping and gating
analyses can be checked against ground truth.

On-disk layout (all integers little-endian int64, floats little-endian
float64; see README for the field-by-field description):

    manifest.txt   key=value generation config + per-file FNV-1a checksums
    videos.bin     per video: id, n_frames, n_segments,
                   then per segment (concept_id, frame_count),
                   then n_frames*input_dim frame features (row-major)
    queries.bin    per query: id, video_id, target_segment, n_words,
                   mv_ratio (float64), then n_words kind labels
                   (0 content / 1 function), then n_words*input_dim words
    labels.bin     per video: id, n_frames, then n_frames segment indices
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .seeding import fnv1a64, substream

FORMAT_VERSION = 1
DISTRACTOR_CONCEPT = -1
MAX_PROTOTYPE_COSINE = 0.3


@dataclass
class GenConfig:
    """Generation parameters; defaults give a corpus that trains in minutes."""

    seed: int = 0
    n_concepts: int = 40
    train_videos: int = 200
    test_videos: int = 100
    segments_per_video: tuple[int, int] = (3, 6)
    frames_per_segment: tuple[int, int] = (8, 20)
    queries_per_video: int = 5
    words_per_query: tuple[int, int] = (4, 10)
    function_word_rate: float = 0.3
    function_pool_size: int = 8
    noise_std: float = 0.3
    input_dim: int = 16

    def __post_init__(self):
        if self.n_concepts < 2:
            raise ConfigError(f"need at least 2 concepts, got {self.n_concepts}")
        for name in ("train_videos", "test_videos", "queries_per_video", "input_dim",
                     "function_pool_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.function_word_rate <= 1.0:
            raise ConfigError(f"function_word_rate must be in [0, 1], got {self.function_word_rate}")
        if self.segments_per_video[1] > self.n_concepts:
            raise ConfigError("segments_per_video upper bound exceeds concept count")


@dataclass
class Concept:
    id: int
    prototype: np.ndarray  # unit vector [input_dim]


@dataclass
class SyntheticVideo:
    id: int
    segments: list[tuple[int, int]]  # (concept id, frame count)
    frames: np.ndarray  # [N_f, input_dim]
    frame_segment: np.ndarray  # [N_f] segment index per frame

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SyntheticQuery:
    id: int
    video_id: int
    target_segment: int
    words: np.ndarray  # [L, input_dim]
    word_kind: np.ndarray  # [L], 0 content / 1 function
    mv_ratio: float

    @property
    def n_words(self) -> int:
        return self.words.shape[0]


@dataclass
class Split:
    videos: list[SyntheticVideo]
    queries: list[SyntheticQuery]


@dataclass
class Dataset:
    train: Split
    test: Split
    config: GenConfig
    concepts: list[Concept] = field(repr=False, default_factory=list)
    function_pool: np.ndarray = field(repr=False, default=None)


def _sample_prototypes(rng: np.random.Generator, cfg: GenConfig) -> list[Concept]:
    protos: list[np.ndarray] = []
    attempts = 0
    while len(protos) < cfg.n_concepts:
        attempts += 1
        if attempts > 200_000:
            raise ConfigError(
                f"could not place {cfg.n_concepts} prototypes with pairwise cosine "
                f"<= {MAX_PROTOTYPE_COSINE} in {cfg.input_dim} dimensions")
        cand = rng.standard_normal(cfg.input_dim)
        cand /= np.linalg.norm(cand)
        if all(float(cand @ p) <= MAX_PROTOTYPE_COSINE for p in protos):
            protos.append(cand)
    return [Concept(id=i, prototype=p) for i, p in enumerate(protos)]


def _make_video(video_id: int, rng, cfg: GenConfig, concepts) -> SyntheticVideo:
    lo, hi = cfg.segments_per_video
    n_seg = int(rng.integers(lo, hi + 1))
    concept_ids = rng.choice(len(concepts), size=n_seg, replace=False)
    segments, frame_blocks, labels = [], [], []
    for seg_idx, cid in enumerate(concept_ids):
        flo, fhi = cfg.frames_per_segment
        count = int(rng.integers(flo, fhi + 1))
        segments.append((int(cid), count))
        block = concepts[cid].prototype + cfg.noise_std * rng.standard_normal((count, cfg.input_dim))
        frame_blocks.append(block)
        labels.append(np.full(count, seg_idx, dtype=np.int64))
    return SyntheticVideo(id=video_id, segments=segments,
                          frames=np.vstack(frame_blocks),
                          frame_segment=np.concatenate(labels))


def _make_query(query_id: int, video: SyntheticVideo, rng, cfg: GenConfig,
                concepts, pool) -> SyntheticQuery:
    target = int(rng.integers(0, len(video.segments)))
    concept_id, seg_frames = video.segments[target]
    lo, hi = cfg.words_per_query
    n_words = int(rng.integers(lo, hi + 1))
    while True:
        kinds = (rng.random(n_words) < cfg.function_word_rate).astype(np.int64)
        if not kinds.all() or cfg.function_word_rate >= 1.0:
            break  # keep at least one content word so the query carries signal
    words = np.empty((n_words, cfg.input_dim))
    for i, kind in enumerate(kinds):
        base = pool[rng.integers(0, len(pool))] if kind else concepts[concept_id].prototype
        words[i] = base + cfg.noise_std * rng.standard_normal(cfg.input_dim)
    return SyntheticQuery(id=query_id, video_id=video.id, target_segment=target,
                          words=words, word_kind=kinds,
                          mv_ratio=seg_frames / video.n_frames)


def function_pool(cfg: GenConfig) -> np.ndarray:
    """The shared function-word pool, derivable from the config alone.

    Drawn from its own substream so loaded datasets (which store only the
    manifest config) can reconstruct it bit-identically, e.g. for
    background-like noise injection.
    """
    rng = substream(cfg.seed, "function-pool")
    pool = rng.standard_normal((cfg.function_pool_size, cfg.input_dim))
    return pool / np.linalg.norm(pool, axis=1, keepdims=True)


def generate(cfg: GenConfig) -> Dataset:
    """Build train and test splits with disjoint video ids from one seed."""
    rng = substream(cfg.seed, "data")
    concepts = _sample_prototypes(rng, cfg)
    pool = function_pool(cfg)

    def build_split(first_video_id: int, first_query_id: int, count: int) -> Split:
        videos, queries = [], []
        qid = first_query_id
        for v in range(count):
            video = _make_video(first_video_id + v, rng, cfg, concepts)
            videos.append(video)
            for _ in range(cfg.queries_per_video):
                queries.append(_make_query(qid, video, rng, cfg, concepts, pool))
                qid += 1
        return Split(videos=videos, queries=queries)

    train = build_split(0, 0, cfg.train_videos)
    test = build_split(cfg.train_videos, cfg.train_videos * cfg.queries_per_video,
                       cfg.test_videos)
    return Dataset(train=train, test=test, config=cfg, concepts=concepts, function_pool=pool)


def inject_noise(video: SyntheticVideo, level: float, rng: np.random.Generator,
                 noise_std: float = 0.3, pool: np.ndarray | None = None) -> SyntheticVideo:
    """Prepend a distractor segment of round(level * N_f) random frames.

    The inserted segment is generated background content: its pseudo-
    prototype is drawn from the function-word `pool` when given (random
    untrimmed footage is generic, which is exactly what uninformative query
    words weakly bind to), otherwise a fresh random unit vector. Existing
    segment indices shift by one; associated query mv_ratios scale by
    N_f / (N_f + inserted).
    """
    if not 0.0 <= level <= 1.0:
        raise ConfigError(f"noise level must be in [0, 1], got {level}")
    extra = int(round(level * video.n_frames))
    if extra == 0:
        return SyntheticVideo(id=video.id, segments=list(video.segments),
                              frames=video.frames.copy(),
                              frame_segment=video.frame_segment.copy())
    if pool is not None:
        proto = pool[rng.integers(0, pool.shape[0])]
    else:
        proto = rng.standard_normal(video.frames.shape[1])
        proto /= np.linalg.norm(proto)
    noise = proto + noise_std * rng.standard_normal((extra, video.frames.shape[1]))
    return SyntheticVideo(
        id=video.id,
        segments=[(DISTRACTOR_CONCEPT, extra)] + list(video.segments),
        frames=np.vstack([noise, video.frames]),
        frame_segment=np.concatenate([np.zeros(extra, dtype=np.int64), video.frame_segment + 1]),
    )


def requery_after_noise(query: SyntheticQuery, original: SyntheticVideo,
                        noisy: SyntheticVideo) -> SyntheticQuery:
    """Remap a query onto the noise-injected copy of its target video."""
    shift = len(noisy.segments) - len(original.segments)
    return replace(query,
                   target_segment=query.target_segment + shift,
                   mv_ratio=query.mv_ratio * original.n_frames / noisy.n_frames)


# ---------------------------------------------------------------------------
# serialization


def _pack_videos(videos: list[SyntheticVideo], dim: int) -> bytes:
    buf = io.BytesIO()
    for v in videos:
        buf.write(struct.pack("<qqq", v.id, v.n_frames, len(v.segments)))
        for cid, count in v.segments:
            buf.write(struct.pack("<qq", cid, count))
        buf.write(np.ascontiguousarray(v.frames, dtype="<f8").tobytes())
    return buf.getvalue()


def _pack_queries(queries: list[SyntheticQuery], dim: int) -> bytes:
    buf = io.BytesIO()
    for q in queries:
        buf.write(struct.pack("<qqqq", q.id, q.video_id, q.target_segment, q.n_words))
        buf.write(struct.pack("<d", q.mv_ratio))
        buf.write(np.ascontiguousarray(q.word_kind, dtype="<i8").tobytes())
        buf.write(np.ascontiguousarray(q.words, dtype="<f8").tobytes())
    return buf.getvalue()


def _pack_labels(videos: list[SyntheticVideo]) -> bytes:
    buf = io.BytesIO()
    for v in videos:
        buf.write(struct.pack("<qq", v.id, v.n_frames))
        buf.write(np.ascontiguousarray(v.frame_segment, dtype="<i8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"corrupt dataset: {self.path} truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def ints(self, n: int) -> tuple[int, ...]:
        return struct.unpack(f"<{n}q", self.take(8 * n))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)

    def int_array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<i8").astype(np.int64)

    def done(self) -> bool:
        return self.pos == len(self.data)


def _unpack_videos(data: bytes, n_videos: int, dim: int) -> list[SyntheticVideo]:
    reader = _Reader(data, "videos.bin")
    videos = []
    for _ in range(n_videos):
        vid, n_frames, n_segments = reader.ints(3)
        segments = [tuple(reader.ints(2)) for _ in range(n_segments)]
        frames = reader.floats((n_frames, dim))
        videos.append(SyntheticVideo(id=vid, segments=segments, frames=frames,
                                     frame_segment=np.empty(0, dtype=np.int64)))
    if not reader.done():
        raise DataError("corrupt dataset: videos.bin has trailing bytes")
    return videos


def _unpack_queries(data: bytes, n_queries: int, dim: int) -> list[SyntheticQuery]:
    reader = _Reader(data, "queries.bin")
    queries = []
    for _ in range(n_queries):
        qid, video_id, target, n_words = reader.ints(4)
        (mv,) = struct.unpack("<d", reader.take(8))
        kinds = reader.int_array(n_words)
        words = reader.floats((n_words, dim))
        queries.append(SyntheticQuery(id=qid, video_id=video_id, target_segment=target,
                                      words=words, word_kind=kinds, mv_ratio=mv))
    if not reader.done():
        raise DataError("corrupt dataset: queries.bin has trailing bytes")
    return queries


def _apply_labels(data: bytes, videos: list[SyntheticVideo]) -> None:
    reader = _Reader(data, "labels.bin")
    by_id = {v.id: v for v in videos}
    for _ in range(len(videos)):
        vid, n_frames = reader.ints(2)
        labels = reader.int_array(n_frames)
        if vid not in by_id or by_id[vid].n_frames != n_frames:
            raise DataError(f"corrupt dataset: labels.bin does not match video {vid}")
        by_id[vid].frame_segment = labels
    if not reader.done():
        raise DataError("corrupt dataset: labels.bin has trailing bytes")


_MANIFEST_INT_KEYS = ("seed", "n_concepts", "train_videos", "test_videos",
                      "queries_per_video", "function_pool_size", "input_dim")
_MANIFEST_PAIR_KEYS = ("segments_per_video", "frames_per_segment", "words_per_query")
_MANIFEST_FLOAT_KEYS = ("function_word_rate", "noise_std")


def save_dataset(dataset: Dataset, path) -> None:
    """Write the dataset directory: manifest.txt plus the three binaries."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    all_videos = dataset.train.videos + dataset.test.videos
    payloads = {
        "videos.bin": _pack_videos(all_videos, cfg.input_dim),
        "queries.bin": _pack_queries(dataset.train.queries + dataset.test.queries, cfg.input_dim),
        "labels.bin": _pack_labels(all_videos),
    }
    lines = [f"format_version={FORMAT_VERSION}"]
    for key in _MANIFEST_INT_KEYS:
        lines.append(f"{key}={getattr(cfg, key)}")
    for key in _MANIFEST_PAIR_KEYS:
        lo, hi = getattr(cfg, key)
        lines.append(f"{key}={lo},{hi}")
    for key in _MANIFEST_FLOAT_KEYS:
        lines.append(f"{key}={getattr(cfg, key)!r}")
    lines.append(f"train_queries={len(dataset.train.queries)}")
    lines.append(f"test_queries={len(dataset.test.queries)}")
    for name, payload in payloads.items():
        (out / name).write_bytes(payload)
        lines.append(f"checksum_{name}={fnv1a64(payload):016x}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_manifest(text: str) -> dict:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"corrupt dataset: manifest line {lineno} is not key=value")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def manifest_config(entries: dict) -> GenConfig:
    kwargs = {}
    for key in _MANIFEST_INT_KEYS:
        kwargs[key] = int(entries[key])
    for key in _MANIFEST_PAIR_KEYS:
        lo, hi = entries[key].split(",")
        kwargs[key] = (int(lo), int(hi))
    for key in _MANIFEST_FLOAT_KEYS:
        kwargs[key] = float(entries[key])
    return GenConfig(**kwargs)


def load_dataset(path) -> Dataset:
    """Load a dataset directory, verifying every payload checksum."""
    root = Path(path)
    manifest_path = root / "manifest.txt"
    if not manifest_path.exists():
        raise DataError(f"not a dataset directory (missing manifest.txt): {root}")
    entries = _parse_manifest(manifest_path.read_text(encoding="utf-8"))
    if int(entries.get("format_version", -1)) != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format version {entries.get('format_version')}")
    try:
        cfg = manifest_config(entries)
        n_train_q = int(entries["train_queries"])
        n_test_q = int(entries["test_queries"])
    except KeyError as missing:
        raise DataError(f"corrupt dataset: manifest missing key {missing}") from None

    payloads = {}
    for name in ("videos.bin", "queries.bin", "labels.bin"):
        blob = (root / name).read_bytes()
        expected = entries.get(f"checksum_{name}")
        actual = f"{fnv1a64(blob):016x}"
        if expected != actual:
            raise DataError(f"corrupt dataset: checksum mismatch for {name} "
                            f"(manifest {expected}, actual {actual})")
        payloads[name] = blob

    n_videos = cfg.train_videos + cfg.test_videos
    videos = _unpack_videos(payloads["videos.bin"], n_videos, cfg.input_dim)
    queries = _unpack_queries(payloads["queries.bin"], n_train_q + n_test_q, cfg.input_dim)
    _apply_labels(payloads["labels.bin"], videos)
    train = Split(videos=videos[:cfg.train_videos], queries=queries[:n_train_q])
    test = Split(videos=videos[cfg.train_videos:], queries=queries[n_train_q:])
    return Dataset(train=train, test=test, config=cfg, function_pool=function_pool(cfg))
