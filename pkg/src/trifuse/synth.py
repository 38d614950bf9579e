"""Deterministic synthetic tri-modal benchmark.

Each video carries three feature tracks (vision/audio/speech) of shape
(frames, 16, D) filled with Gaussian noise.  Every planted event raises
exactly one modality's slots by an orthonormal signature vector inside its
span, so a sliding-window correlation against the planted signature recovers
the span exactly on clean data — that brute-force oracle is the performance
ceiling and the gate run before any model training.

Spans are aligned to a coarse grid that subdivides evenly into 16, 32, and
64 frame bins, so the same corpus geometry is usable at every supported
frame count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .connector import MODALITIES
from .events import TimeSpan

MODALITY_WORD = {"vision": "visual", "audio": "audio", "speech": "speech"}
WORD_MODALITY = {w: m for m, w in MODALITY_WORD.items()}
MODALITY_LETTER = {"audio": "A", "vision": "V", "speech": "S"}
LETTER_ORDER = "AVS"

TEMPLATE_WORDS = ["find", "describe", "segment", "event"]
COARSE_BINS = 16


def modality_label(mods) -> str:
    letters = sorted((MODALITY_LETTER[m] for m in mods), key=LETTER_ORDER.index)
    return "".join(letters)


def label_modalities(label: str) -> tuple[str, ...]:
    rev = {v: k for k, v in MODALITY_LETTER.items()}
    mods = [rev[c] for c in label.upper()]
    return tuple(m for m in MODALITIES if m in mods)


ALL_SUBSETS = [
    ("vision",), ("audio",), ("speech",),
    ("vision", "audio"), ("vision", "speech"), ("audio", "speech"),
    ("vision", "audio", "speech"),
]


@dataclass(frozen=True)
class PlantedEvent:
    span: TimeSpan
    modality: str
    signature: int
    caption_words: tuple[str, ...]


@dataclass
class SyntheticVideo:
    video_id: str
    duration: float
    tracks: dict[str, np.ndarray]  # modality -> (F, 16, D)
    events: list[PlantedEvent]


@dataclass(frozen=True)
class SyntheticQuery:
    sample_id: str
    video_id: str
    task: str  # "MR" | "SC"
    modality_set: str  # e.g. "AVS"
    query_words: tuple[str, ...]
    signature: int
    event_modality: str
    gold_span: TimeSpan
    gold_caption_words: tuple[str, ...]


@dataclass
class CorpusConfig:
    n_videos: int = 40
    events_per_video: int = 2
    duration: float = 64.0
    frames: int = 32
    d: int = 64
    slots: int = 16
    n_signatures: int = 8
    amplitude: float = 3.0
    noise: float = 1.0
    min_width_bins: int = 2
    max_width_bins: int = 4

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SyntheticCorpus:
    seed: int
    config: CorpusConfig
    signatures: np.ndarray  # (n_signatures, D), orthonormal rows
    videos: list[SyntheticVideo]
    queries: list[SyntheticQuery] = field(default_factory=list)

    @property
    def vocab_words(self) -> list[str]:
        sig_words = [f"sig{i:02d}" for i in range(self.config.n_signatures)]
        return sig_words + list(MODALITY_WORD.values()) + TEMPLATE_WORDS

    def video(self, video_id: str) -> SyntheticVideo:
        return self._index()[video_id]

    def _index(self):
        if not hasattr(self, "_by_id"):
            self._by_id = {v.video_id: v for v in self.videos}
        return self._by_id

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {"signatures": self.signatures}
        for v in self.videos:
            for m in MODALITIES:
                arrays[f"{v.video_id}/{m}"] = v.tracks[m]
        np.savez_compressed(directory / "tracks.npz", **arrays)
        meta = {
            "seed": self.seed,
            "config": self.config.to_dict(),
            "videos": [
                {
                    "video_id": v.video_id,
                    "duration": v.duration,
                    "events": [
                        {
                            "span": e.span.as_list(),
                            "modality": e.modality,
                            "signature": e.signature,
                            "caption_words": list(e.caption_words),
                        }
                        for e in v.events
                    ],
                }
                for v in self.videos
            ],
            "queries": [
                {
                    "sample_id": q.sample_id,
                    "video_id": q.video_id,
                    "task": q.task,
                    "modality_set": q.modality_set,
                    "query_words": list(q.query_words),
                    "signature": q.signature,
                    "event_modality": q.event_modality,
                    "gold_span": q.gold_span.as_list(),
                    "gold_caption_words": list(q.gold_caption_words),
                }
                for q in self.queries
            ],
        }
        with open(directory / "corpus.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh)

    @classmethod
    def load(cls, directory) -> "SyntheticCorpus":
        directory = Path(directory)
        with open(directory / "corpus.json", "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        arrays = np.load(directory / "tracks.npz")
        videos = []
        for vm in meta["videos"]:
            tracks = {m: arrays[f"{vm['video_id']}/{m}"] for m in MODALITIES}
            events = [
                PlantedEvent(
                    span=TimeSpan(*e["span"]),
                    modality=e["modality"],
                    signature=e["signature"],
                    caption_words=tuple(e["caption_words"]),
                )
                for e in vm["events"]
            ]
            videos.append(
                SyntheticVideo(vm["video_id"], vm["duration"], tracks, events)
            )
        queries = [
            SyntheticQuery(
                sample_id=qm["sample_id"],
                video_id=qm["video_id"],
                task=qm["task"],
                modality_set=qm["modality_set"],
                query_words=tuple(qm["query_words"]),
                signature=qm["signature"],
                event_modality=qm["event_modality"],
                gold_span=TimeSpan(*qm["gold_span"]),
                gold_caption_words=tuple(qm["gold_caption_words"]),
            )
            for qm in meta["queries"]
        ]
        return cls(
            seed=meta["seed"],
            config=CorpusConfig.from_dict(meta["config"]),
            signatures=arrays["signatures"],
            videos=videos,
            queries=queries,
        )


class CapacityError(ValueError):
    """Raised when the requested events cannot fit in the video duration."""


def _orthonormal_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    if n > d:
        raise ValueError(f"cannot draw {n} orthonormal vectors in dimension {d}")
    q, _ = np.linalg.qr(rng.standard_normal((d, n)))
    return q.T[:n]


def _place_events(rng, cfg: CorpusConfig) -> list[tuple[int, int]]:
    """Non-overlapping (start_bin, width_bins) pairs on the coarse grid."""
    chosen: list[tuple[int, int]] = []
    for _ in range(cfg.events_per_video):
        for _attempt in range(200):
            width = int(rng.integers(cfg.min_width_bins, cfg.max_width_bins + 1))
            start = int(rng.integers(0, COARSE_BINS - width + 1))
            if all(start + width <= s or start >= s + w for s, w in chosen):
                chosen.append((start, width))
                break
        else:
            raise CapacityError(
                f"could not place {cfg.events_per_video} events of width "
                f"<= {cfg.max_width_bins} bins into {COARSE_BINS} bins"
            )
    return sorted(chosen)


def generate_corpus(
    seed: int,
    n_videos: int | None = None,
    events_per_video: int | None = None,
    config: CorpusConfig | None = None,
    query_subsets: list[tuple[str, ...]] | None = None,
) -> SyntheticCorpus:
    """Reproducible corpus: same seed, same bytes.

    Each video gets ``events_per_video`` planted events with pairwise
    distinct informative modalities (cycling when more than three).  Queries
    cover every modality subset containing the informative modality, for
    both tasks.
    """
    cfg = config or CorpusConfig()
    if n_videos is not None:
        cfg.n_videos = n_videos
    if events_per_video is not None:
        cfg.events_per_video = events_per_video
    if cfg.events_per_video < 1:
        raise ValueError("events_per_video must be >= 1")
    if cfg.events_per_video * cfg.max_width_bins > COARSE_BINS:
        raise CapacityError(
            f"{cfg.events_per_video} events x {cfg.max_width_bins} bins exceed "
            f"the {COARSE_BINS}-bin capacity"
        )
    if cfg.frames % COARSE_BINS != 0:
        raise ValueError(f"frames={cfg.frames} must be a multiple of {COARSE_BINS}")

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0FFEE)))
    signatures = _orthonormal_rows(rng, cfg.n_signatures, cfg.d)
    bin_w = cfg.duration / COARSE_BINS
    videos: list[SyntheticVideo] = []
    queries: list[SyntheticQuery] = []
    subsets = query_subsets or ALL_SUBSETS

    for vi in range(cfg.n_videos):
        video_id = f"vid{vi:04d}"
        placements = _place_events(rng, cfg)
        mods = [MODALITIES[(vi + k) % 3] for k in range(cfg.events_per_video)]
        rng.shuffle(mods)
        events = []
        for (start_bin, width), m in zip(placements, mods):
            sig = int(rng.integers(0, cfg.n_signatures))
            span = TimeSpan(round(start_bin * bin_w, 1), round((start_bin + width) * bin_w, 1))
            caption = (f"sig{sig:02d}", MODALITY_WORD[m], "event")
            events.append(PlantedEvent(span, m, sig, caption))

        tracks = {
            m: rng.standard_normal((cfg.frames, cfg.slots, cfg.d)) * cfg.noise
            for m in MODALITIES
        }
        midpoints = (np.arange(cfg.frames) + 0.5) * cfg.duration / cfg.frames
        for e in events:
            inside = (midpoints >= e.span.start) & (midpoints < e.span.end)
            tracks[e.modality][inside] += cfg.amplitude * signatures[e.signature]
        videos.append(SyntheticVideo(video_id, cfg.duration, tracks, events))

        for ei, e in enumerate(events):
            for subset in subsets:
                if e.modality not in subset:
                    continue
                label = modality_label(subset)
                base = f"{video_id}/e{ei}/{label}"
                queries.append(
                    SyntheticQuery(
                        sample_id=f"{base}/mr",
                        video_id=video_id,
                        task="MR",
                        modality_set=label,
                        query_words=("find", f"sig{e.signature:02d}", MODALITY_WORD[e.modality], "event"),
                        signature=e.signature,
                        event_modality=e.modality,
                        gold_span=e.span,
                        gold_caption_words=e.caption_words,
                    )
                )
                queries.append(
                    SyntheticQuery(
                        sample_id=f"{base}/sc",
                        video_id=video_id,
                        task="SC",
                        modality_set=label,
                        query_words=("describe", MODALITY_WORD[e.modality], "segment", "event"),
                        signature=e.signature,
                        event_modality=e.modality,
                        gold_span=e.span,
                        gold_caption_words=e.caption_words,
                    )
                )
    return SyntheticCorpus(seed=seed, config=cfg, signatures=signatures, videos=videos, queries=queries)


# -- brute-force oracle -----------------------------------------------------------------


def correlation_profile(video: SyntheticVideo, modality: str, signature: np.ndarray) -> np.ndarray:
    """Per-frame mean slot correlation with a unit signature vector."""
    track = video.tracks[modality]  # (F, slots, D)
    return (track @ signature).mean(axis=1)


def oracle_retrieve(
    video: SyntheticVideo,
    query: SyntheticQuery,
    signatures: np.ndarray,
    modality: str | None = None,
) -> TimeSpan:
    """Exhaustive correlation argmax: the half-max contiguous frame run around
    the best frame, converted back to seconds.

    ``modality`` overrides the query's informative modality (control runs)."""
    m = modality or query.event_modality
    c = correlation_profile(video, m, signatures[query.signature])
    f = len(c)
    best = int(np.argmax(c))
    thr = c[best] / 2.0
    lo = best
    while lo > 0 and c[lo - 1] >= thr:
        lo -= 1
    hi = best
    while hi < f - 1 and c[hi + 1] >= thr:
        hi += 1
    bin_w = video.duration / f
    return TimeSpan(round(lo * bin_w, 1), round((hi + 1) * bin_w, 1))


def oracle_gate(corpus: SyntheticCorpus) -> float:
    """Mean oracle IoU over all MR queries; 1.0 is the clean-corpus gate."""
    from .metrics import iou

    total, n = 0.0, 0
    for q in corpus.queries:
        if q.task != "MR":
            continue
        got = oracle_retrieve(corpus.video(q.video_id), q, corpus.signatures)
        total += iou(got, q.gold_span)
        n += 1
    if n == 0:
        raise ValueError("corpus has no MR queries")
    return total / n


def split_videos(corpus: SyntheticCorpus, eval_fraction: float = 0.25) -> tuple[list[str], list[str]]:
    """Deterministic train/eval split by video (last block held out)."""
    ids = [v.video_id for v in corpus.videos]
    n_eval = max(1, int(round(len(ids) * eval_fraction)))
    if n_eval >= len(ids):
        raise ValueError("eval fraction leaves no training videos")
    return ids[:-n_eval], ids[-n_eval:]
