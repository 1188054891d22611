"""Metrics and experiment harnesses.

Detection quality is reported as micro recall at a threshold calibrated to a
false-alarm budget on a keyword-free split, plus EER/AUC over scored trials
built from held-out utterances. Trial negatives come in two flavors: windows
that barely graze the keyword occurrence ("easy") and windows centered on
confusable words sharing a phoneme prefix ("hard"). The speed harness
reports the execution-time ratio of a benchmark detector to the measured
detector over repeated runs on identical tracks.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import UtteranceRecord
from .errors import ContractError, DomainError
from .stream import DetectionEvent, StreamState, detect, detect_baseline, enroll, window_scores
from .trainer import ModelBundle
from .windowing import SegmentLabelConfig, WindowConfig, estimate_window, overlap_ratio


@dataclass
class Trial:
    score: float
    positive: bool
    keyword: str
    tag: str = ""  # "easy" | "hard" | ""


@dataclass
class TrialSet:
    trials: list[Trial]
    dataset_id: str = ""
    detector_id: str = ""

    def subset(self, tag: str) -> "TrialSet":
        kept = [t for t in self.trials if t.positive or t.tag == tag]
        return TrialSet(kept, dataset_id=f"{self.dataset_id}:{tag}", detector_id=self.detector_id)


@dataclass
class Occurrence:
    keyword: str
    start_s: float
    end_s: float


@dataclass
class EvalReport:
    recall_at_fa: dict[int, float] = field(default_factory=dict)  # keyword-count bucket -> recall
    eer: float | None = None
    auc: float | None = None
    per_keyword_recall_std: float | None = None
    threshold: float | None = None
    fa_budget: int | None = None
    rsa_table: dict | None = None

    def to_json(self) -> str:
        payload = asdict(self)
        payload["recall_at_fa"] = {str(k): v for k, v in self.recall_at_fa.items()}
        return json.dumps(payload, sort_keys=True, indent=2)


def calibrate_threshold(fa_scores, fa_budget: int) -> float:
    """Smallest threshold keeping at most ``fa_budget`` false-alarm scores at
    or above it. Candidate thresholds are the observed scores (ties therefore
    resolve toward the higher one) plus a value just above the maximum for a
    zero budget. A budget covering every score degenerates to the minimum
    score and is flagged with a warning."""
    scores = np.asarray(list(fa_scores), dtype=np.float64)
    if scores.size == 0:
        raise ContractError("false-alarm scores must be nonempty")
    if fa_budget < 0:
        raise ContractError("false-alarm budget must be >= 0")
    if fa_budget >= scores.size:
        warnings.warn("false-alarm budget covers every score; threshold degenerates to the minimum")
        return float(scores.min())
    ordered = np.sort(scores)
    uniq = np.unique(ordered)
    counts = scores.size - np.searchsorted(ordered, uniq, side="left")  # events >= each candidate
    ok = np.flatnonzero(counts <= fa_budget)
    if ok.size:
        return float(uniq[ok[0]])
    return float(np.nextafter(uniq[-1], np.inf))


def match_events(
    detections: list[DetectionEvent],
    occurrences: list[Occurrence],
    tolerance_s: float = 0.0,
) -> list[bool]:
    """Greedy time-order matching: an occurrence is hit when an unused event
    of the same keyword overlaps its (tolerance-expanded) span; each event
    matches at most one occurrence."""
    events = sorted(detections, key=lambda e: (e.start_s, e.keyword))
    hit = [False] * len(occurrences)
    used = [False] * len(events)
    order = sorted(range(len(occurrences)), key=lambda i: occurrences[i].start_s)
    for i in order:
        occ = occurrences[i]
        lo, hi = occ.start_s - tolerance_s, occ.end_s + tolerance_s
        for j, ev in enumerate(events):
            if used[j] or ev.keyword != occ.keyword:
                continue
            if ev.end_s > lo and ev.start_s < hi:
                hit[i] = True
                used[j] = True
                break
    return hit


def micro_recall(
    detections: list[DetectionEvent],
    occurrences: list[Occurrence],
    tolerance_s: float = 0.0,
) -> float:
    """Pooled hit count over pooled occurrence count across keywords."""
    if not occurrences:
        raise ContractError("ground truth occurrences must be nonempty")
    hit = match_events(detections, occurrences, tolerance_s)
    return sum(hit) / len(occurrences)


def _roc_points(trials: list[Trial]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC sweep over unique score thresholds, ties grouped.

    Returns (far, tpr, thresholds) from the most permissive operating point
    (threshold below min score) to the most restrictive (above max)."""
    scores = np.array([t.score for t in trials])
    labels = np.array([t.positive for t in trials])
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise DomainError("EER/AUC need at least one positive and one negative trial")
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    distinct = np.flatnonzero(np.diff(scores)) if scores.size > 1 else np.array([], dtype=int)
    cut = np.concatenate([distinct, [scores.size - 1]])
    tp = np.cumsum(labels)[cut]
    fp = np.cumsum(~labels)[cut]
    far = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    thresholds = np.concatenate([[np.inf], scores[cut]])
    return far, tpr, thresholds


def eer(trials: TrialSet | list[Trial]) -> float:
    """Operating point where the false-accept rate equals the false-reject
    rate, linearly interpolated between adjacent ROC points."""
    tl = trials.trials if isinstance(trials, TrialSet) else trials
    far, tpr, _ = _roc_points(tl)
    frr = 1.0 - tpr
    diff = far - frr
    idx = int(np.flatnonzero(diff >= 0)[0]) if (diff >= 0).any() else len(diff) - 1
    if idx == 0 or diff[idx] == 0:
        return float((far[idx] + frr[idx]) / 2.0)
    # interpolate between the straddling points
    d0, d1 = diff[idx - 1], diff[idx]
    w = -d0 / (d1 - d0)
    far_x = far[idx - 1] + w * (far[idx] - far[idx - 1])
    frr_x = frr[idx - 1] + w * (frr[idx] - frr[idx - 1])
    return float((far_x + frr_x) / 2.0)


def auc(trials: TrialSet | list[Trial]) -> float:
    """Area under the ROC by the trapezoid rule; tied scores earn half
    credit (equivalent to the pairwise-comparison statistic)."""
    tl = trials.trials if isinstance(trials, TrialSet) else trials
    far, tpr, _ = _roc_points(tl)
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    return float(trapezoid(tpr, far))


def rsa(benchmark_time: float, model_time: float) -> float:
    """Relative speed: benchmark time divided by measured-system time."""
    if benchmark_time <= 0 or model_time <= 0:
        raise DomainError("durations must be positive")
    return benchmark_time / model_time


def select_keywords(
    records: list[UtteranceRecord],
    lexicon: dict[str, tuple[int, ...]],
    k: int,
    min_phonemes: int,
) -> dict[str, tuple[int, ...]]:
    """Top-k eligible words by occurrence count (ties by name)."""
    counts: dict[str, int] = {}
    for rec in records:
        for w in rec.words:
            if len(w.phoneme_ids) >= min_phonemes:
                counts[w.word] = counts.get(w.word, 0) + 1
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    if len(ranked) < k:
        raise ContractError(
            f"only {len(ranked)} words with >= {min_phonemes} phonemes occur in the corpus, need {k}"
        )
    return {w: lexicon[w] for w in ranked[:k]}


# ---------------------------------------------------------------------------
# trial construction


def build_trial_set(
    bundle: ModelBundle,
    records: list[UtteranceRecord],
    keywords: dict[str, tuple[int, ...]],
    window_config: WindowConfig,
    label_config: SegmentLabelConfig,
    lexicon: dict[str, tuple[int, ...]],
    *,
    prefix_len: int = 2,
    max_easy_per_occurrence: int = 2,
    dataset_id: str = "",
) -> TrialSet:
    """Scored trials for EER/AUC.

    Positives: the window centered on each keyword occurrence. Easy
    negatives: windows grazing the occurrence at or below the negative
    overlap threshold. Hard negatives: windows centered on occurrences of
    other words sharing a phoneme prefix with the keyword.
    """
    state = StreamState(bundle=bundle)
    for word, seq in keywords.items():
        enroll(state, word, seq, window_config)
    rate = bundle.frame_rate_hz
    trials: list[Trial] = []

    confusable: dict[str, set[str]] = {w: set() for w in keywords}
    for word, seq in keywords.items():
        for other, other_seq in lexicon.items():
            if other != word and other_seq[:prefix_len] == seq[:prefix_len]:
                confusable[word].add(other)

    def centered_window(span: tuple[int, int], w: int, t: int) -> tuple[int, int]:
        mid = (span[0] + span[1]) // 2
        s = max(0, min(mid - w // 2, t - w))
        return (s, min(s + w, t))

    for rec in records:
        table = window_scores(state, rec.features)
        for word, seq in keywords.items():
            entry = state.enrolled[word]
            w = entry.spec.window_frames
            for ws in rec.words:
                span = (ws.start_frame, ws.end_frame)
                if ws.word == word:
                    seg = centered_window(span, w, rec.num_frames)
                    score = _score_single(state, word, seg)
                    trials.append(Trial(score, True, word))
                    grazing = [
                        s
                        for (rng_, s) in table[word]
                        if 0.0 < overlap_ratio(rng_, span) <= label_config.neg_overlap_max
                    ]
                    for s in grazing[:max_easy_per_occurrence]:
                        trials.append(Trial(s, False, word, tag="easy"))
                elif ws.word in confusable[word]:
                    seg = centered_window(span, w, rec.num_frames)
                    score = _score_single(state, word, seg)
                    trials.append(Trial(score, False, word, tag="hard"))
    return TrialSet(trials, dataset_id=dataset_id, detector_id="clad")


def _score_single(state: StreamState, word: str, seg: tuple[int, int]) -> float:
    entry = state.enrolled[word]
    reps = state.reps[seg[0] : seg[1]]
    emb = state.bundle.audio_encoder.encode_segments([reps]).data[0]
    return float(np.clip(emb @ entry.unit_embedding / np.linalg.norm(emb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# detection-level evaluation


def collect_fa_scores(
    bundle: ModelBundle,
    fa_records: list[UtteranceRecord],
    keywords: dict[str, tuple[int, ...]],
    window_config: WindowConfig,
    cooldown_s: float = 1.0,
) -> list[float]:
    """Candidate false-alarm event scores over a keyword-free split.

    A detector can fire at most once per cooldown span, so overlapping
    window scores of one occurrence collapse: per (record, keyword) we keep
    score-descending windows whose starts are pairwise at least the cooldown
    apart (non-maximum suppression). These are the scores the budget counts.
    """
    state = StreamState(bundle=bundle)
    for word, seq in keywords.items():
        enroll(state, word, seq, window_config)
    rate = bundle.frame_rate_hz
    out: list[float] = []
    for rec in fa_records:
        table = window_scores(state, rec.features)
        for word in keywords:
            kept: list[tuple[float, float]] = []
            for (s, _e), score in sorted(table[word], key=lambda item: -item[1]):
                start_s = s / rate
                if all(abs(start_s - ks) >= cooldown_s for ks, _ in kept):
                    kept.append((start_s, score))
            out.extend(score for _, score in kept)
    return out


def count_fa_events(
    bundle: ModelBundle,
    fa_records: list[UtteranceRecord],
    keywords: dict[str, tuple[int, ...]],
    window_config: WindowConfig,
    threshold: float,
) -> int:
    """Actual detection events fired on the keyword-free split."""
    state = StreamState(bundle=bundle)
    for word, seq in keywords.items():
        enroll(state, word, seq, window_config)
    total = 0
    for rec in fa_records:
        state.reset_stream()
        total += len(detect(state, rec.features, threshold))
    return total


def calibrate_fa_threshold(
    bundle: ModelBundle,
    fa_records: list[UtteranceRecord],
    keywords: dict[str, tuple[int, ...]],
    window_config: WindowConfig,
    fa_budget: int,
) -> float:
    """Threshold meeting the false-alarm budget, verified with the detector.

    The non-maximum-suppressed score population approximates cooldown
    chaining; the verification pass walks the threshold up the candidate
    scores until the detector itself stays within budget."""
    population = collect_fa_scores(bundle, fa_records, keywords, window_config)
    threshold = calibrate_threshold(population, fa_budget)
    remaining = sorted({s for s in population if s > threshold})
    while count_fa_events(bundle, fa_records, keywords, window_config, threshold) > fa_budget:
        if not remaining:
            threshold = float(np.nextafter(max(population), np.inf))
            break
        threshold = remaining.pop(0)
    return threshold


def evaluate_detection(
    bundle: ModelBundle,
    eval_records: list[UtteranceRecord],
    fa_records: list[UtteranceRecord],
    keywords: dict[str, tuple[int, ...]],
    window_config: WindowConfig,
    fa_budget: int = 2,
) -> EvalReport:
    """Micro recall at a threshold calibrated on the false-alarm split.

    Matching runs per track (events from one track never claim occurrences
    in another); recall is pooled across tracks and keywords."""
    if not keywords:
        raise ContractError("need at least one keyword")
    threshold = calibrate_fa_threshold(bundle, fa_records, keywords, window_config, fa_budget)
    state = StreamState(bundle=bundle)
    for word, seq in keywords.items():
        enroll(state, word, seq, window_config)

    rate = bundle.frame_rate_hz
    total_hits = total_occs = 0
    per_kw_hits: dict[str, list[int]] = {w: [0, 0] for w in keywords}
    for rec in eval_records:
        occs = [
            Occurrence(w.word, w.start_frame / rate, w.end_frame / rate)
            for w in rec.words
            if w.word in keywords
        ]
        if not occs:
            continue
        state.reset_stream()
        events = detect(state, rec.features, threshold)
        hits = match_events(events, occs)
        total_hits += sum(hits)
        total_occs += len(occs)
        for occ, hit in zip(occs, hits):
            per_kw_hits[occ.keyword][1] += 1
            per_kw_hits[occ.keyword][0] += int(hit)
    if total_occs == 0:
        raise ContractError("evaluation split contains no keyword occurrences")
    per_kw = [h / t for h, t in per_kw_hits.values() if t > 0]
    return EvalReport(
        recall_at_fa={len(keywords): total_hits / total_occs},
        per_keyword_recall_std=float(np.std(per_kw)) if per_kw else None,
        threshold=threshold,
        fa_budget=fa_budget,
    )


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationSeedResult:
    seed: int
    auc_with_discrimination: float
    auc_matching_only: float

    @property
    def delta(self) -> float:
        return self.auc_with_discrimination - self.auc_matching_only


@dataclass
class AblationReport:
    per_seed: list[AblationSeedResult] = field(default_factory=list)

    @property
    def median_with(self) -> float:
        return float(np.median([r.auc_with_discrimination for r in self.per_seed]))

    @property
    def median_without(self) -> float:
        return float(np.median([r.auc_matching_only for r in self.per_seed]))

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_seed": [
                    {
                        "seed": r.seed,
                        "auc_with_discrimination": r.auc_with_discrimination,
                        "auc_matching_only": r.auc_matching_only,
                        "delta": r.delta,
                    }
                    for r in self.per_seed
                ],
                "median_with_discrimination": self.median_with,
                "median_matching_only": self.median_without,
            },
            sort_keys=True,
            indent=2,
        )


def run_ablation(train_fn, trial_fn, seeds: list[int], alphas: tuple[float, float]) -> AblationReport:
    """Paired comparison of the combined loss against the matching-only arm.

    ``train_fn(seed, alpha)`` must train and return a model bundle using
    identical data batches for both arms of one seed; ``trial_fn(bundle)``
    builds the hard-negative trial set to score. Needs >= 3 seeds.
    """
    if len(seeds) < 3:
        raise ContractError("ablation needs at least 3 seeds")
    alpha_with, alpha_without = alphas
    report = AblationReport()
    for seed in seeds:
        bundle_with = train_fn(seed, alpha_with)
        auc_with = auc(trial_fn(bundle_with))
        bundle_without = train_fn(seed, alpha_without)
        auc_without = auc(trial_fn(bundle_without))
        report.per_seed.append(AblationSeedResult(seed, auc_with, auc_without))
    return report


# ---------------------------------------------------------------------------
# speed benchmark


@dataclass
class BenchResult:
    model_times: list[float]
    benchmark_times: list[float]

    @property
    def rsa_values(self) -> list[float]:
        return [rsa(b, m) for b, m in zip(self.benchmark_times, self.model_times)]

    @property
    def median_rsa(self) -> float:
        return float(np.median(self.rsa_values))

    @property
    def rsa_spread(self) -> float:
        """Population standard deviation of the per-repetition ratios."""
        return float(np.std(self.rsa_values))

    def table(self) -> dict:
        return {
            "model": {"median_s": float(np.median(self.model_times)), "times_s": self.model_times},
            "benchmark": {
                "median_s": float(np.median(self.benchmark_times)),
                "times_s": self.benchmark_times,
            },
            "rsa": {
                "values": self.rsa_values,
                "median": self.median_rsa,
                "benchmark_baseline": 1.0,
                "spread_std": self.rsa_spread,
            },
        }


def bench_detectors(
    bundle: ModelBundle,
    tracks: list[np.ndarray],
    keywords: dict[str, tuple[int, ...]],
    window_config: WindowConfig,
    *,
    smoothing_window: int = 5,
    threshold: float = 0.5,
    repetitions: int = 5,
) -> BenchResult:
    """Time the embedding detector against the posterior-handling baseline on
    identical tracks with identical enrollments.

    Both run single-threaded in-process; one warm-up repetition precedes
    timing so caches are hot. Model load and track I/O are outside the timed
    region; the acoustic-model forward pass is inside it for both systems.
    """
    if repetitions < 1:
        raise ContractError("need at least one repetition")
    state = StreamState(bundle=bundle)
    for word, seq in keywords.items():
        enroll(state, word, seq, window_config)
    windows = {
        word: estimate_window(len(seq), window_config) for word, seq in keywords.items()
    }

    def run_model() -> None:
        for track in tracks:
            state.reset_stream()
            detect(state, track, threshold)

    def run_benchmark() -> None:
        for track in tracks:
            post = bundle.am.posteriors(track)
            for word, seq in keywords.items():
                detect_baseline(
                    post,
                    seq,
                    smoothing_window,
                    threshold,
                    window_frames=windows[word],
                    frame_rate_hz=bundle.frame_rate_hz,
                    keyword=word,
                )

    run_model()
    run_benchmark()
    model_times, benchmark_times = [], []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        run_model()
        model_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        run_benchmark()
        benchmark_times.append(time.perf_counter() - t0)
    return BenchResult(model_times=model_times, benchmark_times=benchmark_times)
