"""Streaming detection over feature frames.

Each enrolled keyword gets its own analysis-window length and a half-overlap
window grid. A window is scored as the cosine similarity between the encoded
audio segment and the keyword's cached text embedding; a score at or above
the threshold emits an event and starts a one-second per-keyword cooldown.
Frames can arrive in chunks of any size: a window is scored once all of its
frames (plus the acoustic model's lookahead) have arrived, so chunking never
changes the emitted events.

A posterior-smoothing baseline detector is included for comparison: it
scores every frame by the geometric mean of each keyword phoneme's maximum
smoothed posterior inside the trailing window, with the per-phoneme maxima
constrained to occur in phoneme order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .encoders import cosine_sim, encode_text
from .errors import ContractError
from .trainer import ModelBundle
from .windowing import KeywordSpec, WindowConfig, estimate_window

COOLDOWN_S = 1.0

FrameRange = tuple[int, int]


@dataclass
class DetectionEvent:
    keyword: str
    start_s: float
    end_s: float
    score: float

    def to_json(self) -> str:
        return json.dumps(
            {"keyword": self.keyword, "start_s": self.start_s, "end_s": self.end_s, "score": self.score},
            sort_keys=True,
        )


@dataclass
class EnrolledKeyword:
    spec: KeywordSpec
    embedding: np.ndarray  # cached text embedding
    unit_embedding: np.ndarray
    next_start: int = 0  # next grid window start to score
    cooldown_until: float = 0.0  # seconds


@dataclass
class StreamState:
    """Mutable per-stream state; one instance per audio stream."""

    bundle: ModelBundle
    enrolled: dict[str, EnrolledKeyword] = field(default_factory=dict)
    frames: list[np.ndarray] = field(default_factory=list)
    total_frames: int = 0
    reps: np.ndarray | None = None  # finalized representation rows
    reps_done: int = 0
    finished: bool = False

    def reset_stream(self) -> None:
        """Forget buffered audio and cooldowns; keep enrollments."""
        self.frames = []
        self.total_frames = 0
        self.reps = None
        self.reps_done = 0
        self.finished = False
        for e in self.enrolled.values():
            e.next_start = 0
            e.cooldown_until = 0.0


def enroll(
    state: StreamState,
    word: str,
    phoneme_ids,
    window_config: WindowConfig | None = None,
) -> StreamState:
    """Cache the keyword's text embedding and window length. Re-enrolling a
    word replaces its entry."""
    seq = tuple(int(p) for p in phoneme_ids)
    if not seq:
        raise ContractError("keyword needs at least one phoneme")
    cfg = window_config or WindowConfig(frame_rate_hz=state.bundle.frame_rate_hz)
    spec = KeywordSpec(word=word, phoneme_ids=seq, window_frames=estimate_window(len(seq), cfg))
    emb = encode_text(state.bundle.text_encoder, seq)
    norm = np.linalg.norm(emb)
    if norm == 0.0:
        raise ContractError("text embedding has zero norm")
    state.enrolled[word] = EnrolledKeyword(spec=spec, embedding=emb, unit_embedding=emb / norm)
    return state


def segment_stream(track_length_frames: int, window_frames: int) -> list[FrameRange]:
    """Half-overlap window grid over a whole track.

    Starts at 0 with hop floor(window/2); a final window is clamped back to
    end exactly at the track end. Tracks shorter than the window yield one
    shortened window covering everything.
    """
    if window_frames < 2:
        raise ContractError("window must be at least 2 frames")
    if track_length_frames < 1:
        raise ContractError("track must have at least one frame")
    t, w = track_length_frames, window_frames
    if t <= w:
        return [(0, t)]
    hop = w // 2
    starts = list(range(0, t - w + 1, hop))
    if starts[-1] != t - w:
        starts.append(t - w)
    return [(s, s + w) for s in starts]


def _feature_matrix(state: StreamState) -> np.ndarray:
    if len(state.frames) == 1:
        return state.frames[0]
    merged = np.concatenate(state.frames, axis=0)
    state.frames = [merged]
    return merged


def _extend_reps(state: StreamState, upto: int) -> None:
    """Finalize representation rows [reps_done, upto).

    Rows are computed from a feature slice wide enough to cover the model's
    receptive field, so their values match a whole-track forward pass.
    """
    if upto <= state.reps_done:
        return
    am = state.bundle.am
    feats = _feature_matrix(state)
    lo = max(0, state.reps_done - am.left_receptive_frames)
    hi = min(state.total_frames, upto + am.lookahead_frames)
    block = am.representations(feats[lo:hi])
    rows = block[state.reps_done - lo : upto - lo]
    state.reps = rows.copy() if state.reps is None else np.concatenate([state.reps, rows], axis=0)
    state.reps_done = upto


def _score_windows(state: StreamState, entry: EnrolledKeyword, windows: list[FrameRange]) -> list[float]:
    segments = [state.reps[s:e] for s, e in windows]
    lengths = {seg.shape[0] for seg in segments}
    scores: list[float] = [0.0] * len(windows)
    enc = state.bundle.audio_encoder
    for length in sorted(lengths):
        idx = [i for i, seg in enumerate(segments) if seg.shape[0] == length]
        emb = enc.encode_segments([segments[i] for i in idx]).data
        norms = np.linalg.norm(emb, axis=1)
        sims = emb @ entry.unit_embedding / norms
        for i, s in zip(idx, sims):
            scores[i] = float(np.clip(s, -1.0, 1.0))
    return scores


def _emit(state: StreamState, entry: EnrolledKeyword, windows: list[FrameRange],
          scores: list[float], threshold: float) -> list[DetectionEvent]:
    rate = state.bundle.frame_rate_hz
    events = []
    for (s, e), score in zip(windows, scores):
        start_s = s / rate
        if score >= threshold and start_s >= entry.cooldown_until:
            events.append(DetectionEvent(entry.spec.word, start_s, e / rate, score))
            entry.cooldown_until = start_s + COOLDOWN_S
    return events


def push(state: StreamState, frames: np.ndarray, threshold: float) -> list[DetectionEvent]:
    """Feed frames; returns events whose windows became scorable."""
    if state.finished:
        raise ContractError("stream already finished; call reset_stream first")
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 1:
        frames = frames[None, :]
    if frames.shape[0]:
        state.frames.append(frames)
        state.total_frames += frames.shape[0]
    lookahead = state.bundle.am.lookahead_frames
    scorable = state.total_frames - lookahead  # rows whose lookahead arrived
    if scorable <= 0:
        return []
    events: list[DetectionEvent] = []
    for word in sorted(state.enrolled):
        entry = state.enrolled[word]
        w = entry.spec.window_frames
        hop = max(1, w // 2)
        ready: list[FrameRange] = []
        while entry.next_start + w <= scorable:
            ready.append((entry.next_start, entry.next_start + w))
            entry.next_start += hop
        if not ready:
            continue
        _extend_reps(state, ready[-1][1])
        scores = _score_windows(state, entry, ready)
        events.extend(_emit(state, entry, ready, scores, threshold))
    return events


def finish(state: StreamState, threshold: float) -> list[DetectionEvent]:
    """End-of-stream: scores remaining grid windows and the clamped tail."""
    if state.finished:
        return []
    state.finished = True
    t = state.total_frames
    if t == 0:
        return []
    _extend_reps(state, t)
    events: list[DetectionEvent] = []
    for word in sorted(state.enrolled):
        entry = state.enrolled[word]
        w = entry.spec.window_frames
        hop = max(1, w // 2)
        pending: list[FrameRange] = []
        if t <= w:
            if entry.next_start == 0:
                pending.append((0, t))
        else:
            while entry.next_start + w <= t:
                pending.append((entry.next_start, entry.next_start + w))
                entry.next_start += hop
            last_grid_start = entry.next_start - hop if entry.next_start > 0 else None
            if last_grid_start != t - w:
                pending.append((t - w, t))
        if not pending:
            continue
        scores = _score_windows(state, entry, pending)
        events.extend(_emit(state, entry, pending, scores, threshold))
    return events


def detect(state: StreamState, features: np.ndarray, threshold: float) -> list[DetectionEvent]:
    """Whole-track detection; equivalent to pushing the frames in any
    chunking followed by :func:`finish`. Events come back in canonical
    (start, keyword) order."""
    if not state.enrolled:
        raise ContractError("no enrolled keywords")
    events = push(state, features, threshold)
    events.extend(finish(state, threshold))
    return sort_events(events)


def detect_chunked(state: StreamState, features: np.ndarray, threshold: float,
                   chunk_frames: int = 1) -> list[DetectionEvent]:
    """Detection harness feeding ``chunk_frames`` frames per push."""
    if not state.enrolled:
        raise ContractError("no enrolled keywords")
    features = np.asarray(features, dtype=np.float32)
    events: list[DetectionEvent] = []
    for lo in range(0, features.shape[0], chunk_frames):
        events.extend(push(state, features[lo : lo + chunk_frames], threshold))
    events.extend(finish(state, threshold))
    return sort_events(events)


def sort_events(events: list[DetectionEvent]) -> list[DetectionEvent]:
    return sorted(events, key=lambda e: (e.start_s, e.keyword))


def window_scores(state: StreamState, features: np.ndarray) -> dict[str, list[tuple[FrameRange, float]]]:
    """All per-window scores for a whole track, per enrolled keyword, with no
    thresholding or cooldown. Used for calibration and trial building.

    Resets the stream first and leaves the track's representations loaded in
    the state so callers can score further ad-hoc segments."""
    if not state.enrolled:
        raise ContractError("no enrolled keywords")
    features = np.asarray(features, dtype=np.float32)
    state.reset_stream()
    state.frames = [features]
    state.total_frames = features.shape[0]
    _extend_reps(state, state.total_frames)
    out: dict[str, list[tuple[FrameRange, float]]] = {}
    for word in sorted(state.enrolled):
        entry = state.enrolled[word]
        windows = segment_stream(state.total_frames, entry.spec.window_frames)
        scores = _score_windows(state, entry, windows)
        out[word] = list(zip(windows, scores))
    return out


# ---------------------------------------------------------------------------
# posterior-smoothing baseline


def smooth_posteriors(posteriors: np.ndarray, smoothing_window: int) -> np.ndarray:
    """Trailing moving average over ``smoothing_window`` frames."""
    if smoothing_window < 1:
        raise ContractError("smoothing window must be >= 1")
    if smoothing_window == 1:
        return np.asarray(posteriors, dtype=np.float64)
    p = np.asarray(posteriors, dtype=np.float64)
    w = smoothing_window
    csum = np.cumsum(p, axis=0)
    out = np.empty_like(p)
    head = min(w - 1, p.shape[0])
    counts = np.arange(1, head + 1, dtype=np.float64)
    out[:head] = csum[:head] / counts[:, None]
    if p.shape[0] >= w:
        out[w - 1 :] = (csum[w - 1 :] - np.vstack([np.zeros((1, p.shape[1])), csum[: p.shape[0] - w]])) / w
    return out


def monotone_window_score(smoothed: np.ndarray, phoneme_ids, lo: int, hi: int) -> float:
    """Best product of per-phoneme posteriors at non-decreasing frames in
    [lo, hi), normalized to a geometric mean."""
    seq = list(phoneme_ids)
    best = np.ones(hi - lo)
    for ph in seq:
        best = np.maximum.accumulate(best * smoothed[lo:hi, ph])
    return float(best[-1]) ** (1.0 / len(seq))


def detect_baseline(
    posteriors: np.ndarray,
    phoneme_ids,
    smoothing_window: int,
    threshold: float,
    *,
    window_frames: int,
    frame_rate_hz: float,
    keyword: str = "keyword",
) -> list[DetectionEvent]:
    """Frame-synchronous posterior-handling detector for one keyword.

    Every frame closes a trailing window of ``window_frames`` frames (clamped
    at the track start) whose score is the monotone geometric-mean confidence;
    thresholding and the one-second cooldown mirror :func:`detect`.
    """
    seq = tuple(int(p) for p in phoneme_ids)
    if not seq:
        raise ContractError("keyword needs at least one phoneme")
    post = np.asarray(posteriors, dtype=np.float64)
    if post.ndim != 2:
        raise ContractError("posteriors must be [T, P]")
    if window_frames < 1:
        raise ContractError("window must be >= 1 frame")
    smoothed = smooth_posteriors(post, smoothing_window)
    t_total = post.shape[0]
    events: list[DetectionEvent] = []
    cooldown_until = 0.0
    for end in range(1, t_total + 1):
        lo = max(0, end - window_frames)
        score = monotone_window_score(smoothed, seq, lo, end)
        start_s = lo / frame_rate_hz
        if score >= threshold and start_s >= cooldown_until:
            events.append(DetectionEvent(keyword, start_s, end / frame_rate_hz, score))
            cooldown_until = start_s + COOLDOWN_S
    return events


def baseline_scores(
    posteriors: np.ndarray,
    phoneme_ids,
    smoothing_window: int,
    *,
    window_frames: int,
) -> np.ndarray:
    """Per-frame baseline confidences (no thresholding), for calibration."""
    seq = tuple(int(p) for p in phoneme_ids)
    smoothed = smooth_posteriors(np.asarray(posteriors, dtype=np.float64), smoothing_window)
    t_total = smoothed.shape[0]
    out = np.empty(t_total)
    for end in range(1, t_total + 1):
        lo = max(0, end - window_frames)
        out[end - 1] = monotone_window_score(smoothed, seq, lo, end)
    return out
