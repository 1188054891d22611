"""Window estimation, overlap-ratio segment labeling, and training batches.

A keyword's analysis window grows linearly with its phoneme count plus a
fixed margin so that training segments and inference segments are cut the
same way. Candidate segments around a keyword occurrence are labeled
positive or negative by how much of the keyword span they cover; the band
between the two thresholds is discarded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .corpus import UtteranceRecord
from .errors import ContractError, DomainError

FrameRange = tuple[int, int]  # [start, end), frames


@dataclass
class WindowConfig:
    t_mean_ms: float = 90.0
    l_margin_ms: float = 300.0
    frame_rate_hz: float = 100.0

    def __post_init__(self):
        if self.t_mean_ms <= 0 or self.frame_rate_hz <= 0 or self.l_margin_ms < 0:
            raise ContractError("window config values out of range")


@dataclass
class SegmentLabelConfig:
    pos_overlap_min: float = 0.7
    neg_overlap_max: float = 0.3
    n_pos: int = 4
    m_neg: int = 8
    stride: int = 4

    def __post_init__(self):
        if not (0.0 < self.pos_overlap_min <= 1.0):
            raise ContractError("pos_overlap_min must be in (0, 1]")
        if not (0.0 <= self.neg_overlap_max < 1.0):
            raise ContractError("neg_overlap_max must be in [0, 1)")
        if self.neg_overlap_max >= self.pos_overlap_min:
            raise ContractError("neg_overlap_max must be below pos_overlap_min")
        if self.stride < 1 or self.n_pos < 1 or self.m_neg < 0:
            raise ContractError("counts and stride must be positive")


@dataclass
class SamplingConfig:
    keywords_per_utterance: int = 2
    min_phonemes: int = 6


@dataclass
class KeywordSpec:
    word: str
    phoneme_ids: tuple[int, ...]
    window_frames: int

    def __post_init__(self):
        if len(self.phoneme_ids) < 1:
            raise ContractError("keyword needs at least one phoneme")

    @property
    def n_phns(self) -> int:
        return len(self.phoneme_ids)


@dataclass
class BatchEntry:
    utterance_id: str
    keyword_index: int  # index into the utterance's word list
    keyword: KeywordSpec
    keyword_span: FrameRange
    positives: list[FrameRange]
    negatives: list[FrameRange]
    short: bool = False  # fewer positives/negatives than requested


@dataclass
class TrainingBatch:
    entries: list[BatchEntry] = field(default_factory=list)

    @property
    def segment_frames(self) -> int:
        return sum(
            (e - s)
            for entry in self.entries
            for s, e in list(entry.positives) + list(entry.negatives)
        )


def estimate_window(keyword_phoneme_count: int, config: WindowConfig) -> int:
    """Window length in frames: per-phoneme mean duration times the phoneme
    count plus a fixed margin, converted at the configured frame rate.
    Rounding is half-up."""
    if keyword_phoneme_count < 0:
        raise ContractError("phoneme count must be >= 0")
    ms = config.t_mean_ms * keyword_phoneme_count + config.l_margin_ms
    return int(math.floor(ms * config.frame_rate_hz / 1000.0 + 0.5))


def overlap_ratio(segment: FrameRange, keyword_span: FrameRange) -> float:
    """Fraction of the keyword span covered by the segment."""
    s0, s1 = segment
    k0, k1 = keyword_span
    if k1 <= k0:
        raise DomainError(f"empty keyword span [{k0},{k1})")
    if s1 <= s0:
        raise DomainError(f"empty segment [{s0},{s1})")
    inter = min(s1, k1) - max(s0, k0)
    return max(0, inter) / (k1 - k0)


def sample_keywords(
    utterance: UtteranceRecord,
    k: int,
    min_phonemes: int,
    rng: np.random.Generator,
) -> list[tuple[int, KeywordSpec]]:
    """Sample up to ``k`` distinct eligible words, uniformly without
    replacement. Window lengths are attached via the default WindowConfig;
    callers with a specific config should use :func:`keyword_specs`."""
    return keyword_specs(utterance, k, min_phonemes, rng, WindowConfig())


def keyword_specs(
    utterance: UtteranceRecord,
    k: int,
    min_phonemes: int,
    rng: np.random.Generator,
    window_config: WindowConfig,
) -> list[tuple[int, KeywordSpec]]:
    eligible = [
        i for i, w in enumerate(utterance.words) if len(w.phoneme_ids) >= min_phonemes
    ]
    if not eligible:
        return []
    take = min(k, len(eligible))
    chosen = rng.choice(len(eligible), size=take, replace=False)
    out = []
    for j in sorted(int(c) for c in chosen):
        idx = eligible[j]
        w = utterance.words[idx]
        spec = KeywordSpec(
            word=w.word,
            phoneme_ids=w.phoneme_ids,
            window_frames=estimate_window(len(w.phoneme_ids), window_config),
        )
        out.append((idx, spec))
    return out


def candidate_starts(t_frames: int, window_frames: int, stride: int) -> list[int]:
    """Stride grid of window start offsets over the utterance; the window is
    clamped (shifted inward) at the right edge."""
    if t_frames <= window_frames:
        return [0]
    last = t_frames - window_frames
    starts = list(range(0, last + 1, stride))
    if starts[-1] != last:
        starts.append(last)
    return starts


def slice_segments(
    utterance: UtteranceRecord,
    keyword_span: FrameRange,
    window_frames: int,
    label_config: SegmentLabelConfig,
    rng: np.random.Generator,
) -> tuple[list[FrameRange], list[FrameRange], bool]:
    """Sample positive/negative segments for one keyword occurrence.

    Candidates are window placements on the stride grid; each is labeled by
    its overlap ratio with the keyword span. Candidates between the two
    thresholds are discarded. Returns (positives, negatives, short) where
    ``short`` flags that fewer than the requested counts were available.
    """
    t = utterance.num_frames
    length = min(window_frames, t)
    pos_pool: list[FrameRange] = []
    neg_pool: list[FrameRange] = []
    for s in candidate_starts(t, length, label_config.stride):
        seg = (s, s + length)
        ratio = overlap_ratio(seg, keyword_span)
        if ratio >= label_config.pos_overlap_min:
            pos_pool.append(seg)
        elif ratio <= label_config.neg_overlap_max:
            neg_pool.append(seg)

    def pick(pool: list[FrameRange], count: int) -> list[FrameRange]:
        if len(pool) <= count:
            return list(pool)
        idx = rng.choice(len(pool), size=count, replace=False)
        return [pool[int(i)] for i in sorted(int(x) for x in idx)]

    positives = pick(pos_pool, label_config.n_pos)
    negatives = pick(neg_pool, label_config.m_neg)
    short = len(positives) < label_config.n_pos or len(negatives) < label_config.m_neg
    return positives, negatives, short


def iter_entries(
    utterances: Iterable[UtteranceRecord],
    window_config: WindowConfig,
    label_config: SegmentLabelConfig,
    sampling_config: SamplingConfig,
    rng: np.random.Generator,
) -> Iterator[BatchEntry]:
    """All batch entries for a pass over the utterance pool. Keywords with no
    positive candidate are skipped (they cannot form audio-text pairs)."""
    for utt in utterances:
        specs = keyword_specs(
            utt,
            sampling_config.keywords_per_utterance,
            sampling_config.min_phonemes,
            rng,
            window_config,
        )
        for idx, spec in specs:
            w = utt.words[idx]
            span = (w.start_frame, w.end_frame)
            positives, negatives, short = slice_segments(
                utt, span, spec.window_frames, label_config, rng
            )
            if not positives:
                continue
            yield BatchEntry(utt.utterance_id, idx, spec, span, positives, negatives, short)


def iter_batches(
    utterances: Iterable[UtteranceRecord],
    batch_frame_budget: int,
    window_config: WindowConfig,
    label_config: SegmentLabelConfig,
    sampling_config: SamplingConfig,
    rng: np.random.Generator,
) -> Iterator[TrainingBatch]:
    """Group entries into batches: a batch closes when adding the next entry
    would push its total segment frames over the budget. An entry larger than
    the whole budget is emitted alone."""
    batch = TrainingBatch()
    used = 0
    for entry in iter_entries(utterances, window_config, label_config, sampling_config, rng):
        cost = sum(e - s for s, e in entry.positives + entry.negatives)
        if batch.entries and used + cost > batch_frame_budget:
            yield batch
            batch, used = TrainingBatch(), 0
        batch.entries.append(entry)
        used += cost
    if batch.entries:
        yield batch


def build_batch(
    utterances: Iterable[UtteranceRecord],
    batch_frame_budget: int,
    window_config: WindowConfig,
    label_config: SegmentLabelConfig,
    sampling_config: SamplingConfig,
    rng: np.random.Generator,
) -> TrainingBatch | None:
    """First batch from the pool, or None if the pool yields no entries."""
    pool = list(utterances)
    if not pool:
        raise ContractError("utterance pool must be nonempty")
    return next(
        iter_batches(pool, batch_frame_budget, window_config, label_config, sampling_config, rng),
        None,
    )
