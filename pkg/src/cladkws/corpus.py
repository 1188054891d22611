"""Synthetic phoneme-aligned corpus.

Utterances are generated directly at the feature level: each phoneme owns an
anchor vector, frames are anchor + Gaussian noise, and adjacent phonemes are
blended across boundaries to imitate co-articulation. Word locations and
frame labels are exact by construction, so they can serve as supervised
targets and detection ground truth without any alignment tooling.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, ParseError

FEATURE_MAGIC = b"CLADFEAT"
MANIFEST_VERSION = 1


@dataclass
class PhonemeInventory:
    """Phoneme ids 0..P-1, one anchor vector each, and a mean duration."""

    base_vectors: np.ndarray  # [P, D] float32
    mean_duration_frames: np.ndarray  # [P] int

    def __post_init__(self):
        self.base_vectors = np.asarray(self.base_vectors, dtype=np.float32)
        self.mean_duration_frames = np.asarray(self.mean_duration_frames, dtype=np.int64)
        if self.base_vectors.ndim != 2:
            raise ContractError("base_vectors must be [P, D]")
        if len(self.mean_duration_frames) != self.num_phonemes:
            raise ContractError("one mean duration per phoneme required")
        if (self.mean_duration_frames < 1).any():
            raise ContractError("phoneme durations must be >= 1 frame")

    @property
    def num_phonemes(self) -> int:
        return self.base_vectors.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.base_vectors.shape[1]

    @property
    def phonemes(self) -> list[int]:
        return list(range(self.num_phonemes))


@dataclass
class WordSpan:
    word: str
    phoneme_ids: tuple[int, ...]
    start_frame: int
    end_frame: int  # exclusive


@dataclass
class UtteranceRecord:
    utterance_id: str
    features: np.ndarray  # [T, D] float32
    frame_labels: np.ndarray  # [T] int
    words: list[WordSpan]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64)
        t = self.features.shape[0]
        if len(self.frame_labels) != t:
            raise ContractError("frame_labels length must equal frame count")
        prev_end = 0
        for w in self.words:
            if not (0 <= w.start_frame < w.end_frame <= t):
                raise ContractError(f"word span [{w.start_frame},{w.end_frame}) outside [0,{t})")
            if w.start_frame < prev_end:
                raise ContractError("word spans must be sorted and non-overlapping")
            prev_end = w.end_frame

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class CorpusManifest:
    frame_rate_hz: float
    feature_dim: int
    inventory: PhonemeInventory
    lexicon: dict[str, tuple[int, ...]]
    records: list[dict] = field(default_factory=list)  # per-record metadata incl. file ref

    def __post_init__(self):
        if self.frame_rate_hz <= 0:
            raise ContractError("frame_rate_hz must be positive")


def synth_inventory(
    num_phonemes: int,
    feature_dim: int,
    seed: int,
    *,
    separation: float = 2.0,
    duration_range: tuple[int, int] = (4, 7),
    max_attempts_per_anchor: int = 200,
) -> PhonemeInventory:
    """Sample anchor vectors with a minimum pairwise distance.

    Deterministic for a given seed. Anchors are drawn from a unit-variance
    Gaussian and rejected while closer than ``separation`` to any accepted
    anchor; exhausting the retry budget raises ConfigurationError.
    """
    if num_phonemes < 2:
        raise ConfigurationError(f"need at least 2 phonemes, got {num_phonemes}")
    if feature_dim < 2:
        raise ConfigurationError(f"need feature_dim >= 2, got {feature_dim}")
    rng = np.random.default_rng(seed)
    anchors: list[np.ndarray] = []
    for _ in range(num_phonemes):
        for attempt in range(max_attempts_per_anchor + 1):
            if attempt == max_attempts_per_anchor:
                raise ConfigurationError(
                    f"could not place {num_phonemes} anchors with separation {separation} "
                    f"in {feature_dim} dimensions"
                )
            cand = rng.normal(size=feature_dim)
            if all(np.linalg.norm(cand - a) >= separation for a in anchors):
                anchors.append(cand)
                break
    lo, hi = duration_range
    durations = rng.integers(lo, hi + 1, size=num_phonemes)
    return PhonemeInventory(np.stack(anchors).astype(np.float32), durations)


def synth_lexicon(
    inventory: PhonemeInventory,
    num_words: int,
    seed: int,
    *,
    min_len: int = 3,
    max_len: int = 9,
    prefix_families: int = 0,
    family_size: int = 3,
    prefix_len: int = 3,
) -> dict[str, tuple[int, ...]]:
    """Random word -> phoneme-sequence map.

    ``prefix_families`` groups of ``family_size`` words share their first
    ``prefix_len`` phonemes; these are the confusable words used for
    hard-negative evaluation. Word names encode nothing but an index.
    """
    if num_words < 1:
        raise ConfigurationError("lexicon needs at least one word")
    rng = np.random.default_rng(seed)
    p = inventory.num_phonemes
    lexicon: dict[str, tuple[int, ...]] = {}
    idx = 0

    def fresh(seq_len: int) -> tuple[int, ...]:
        return tuple(int(x) for x in rng.integers(0, p, size=seq_len))

    for _ in range(prefix_families):
        prefix = fresh(prefix_len)
        for _ in range(family_size):
            if idx >= num_words:
                break
            tail_len = int(rng.integers(max(1, min_len - prefix_len), max_len - prefix_len + 1))
            lexicon[f"word{idx:02d}"] = prefix + fresh(tail_len)
            idx += 1
    while idx < num_words:
        seq_len = int(rng.integers(min_len, max_len + 1))
        lexicon[f"word{idx:02d}"] = fresh(seq_len)
        idx += 1
    return lexicon


def synth_utterance(
    inventory: PhonemeInventory,
    lexicon: dict[str, tuple[int, ...]],
    num_words: int,
    noise_sigma: float,
    coart_frames: int,
    seed: int,
) -> UtteranceRecord:
    """Generate one utterance with exact alignment.

    Per phoneme: duration = mean + jitter in {-1, 0, +1} (floor 1), frames =
    anchor + N(0, noise_sigma^2). Across each phoneme boundary the last/first
    ``coart_frames`` frames are replaced by a linear crossfade of the two
    adjacent anchors; a boundary frame keeps the label of the phoneme owning
    the majority of the mix (ties go to the earlier phoneme).
    """
    if not lexicon:
        raise ContractError("lexicon must be nonempty")
    if coart_frames < 0:
        raise ContractError("coart_frames must be >= 0")
    if noise_sigma < 0:
        raise ContractError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    words = sorted(lexicon)
    choice = [words[int(i)] for i in rng.integers(0, len(words), size=num_words)]

    # lay out phoneme segments
    seg_phonemes: list[int] = []
    seg_durations: list[int] = []
    word_bounds: list[tuple[str, tuple[int, ...], int, int]] = []
    for word in choice:
        seq = lexicon[word]
        start = int(np.sum(seg_durations))
        for ph in seq:
            base = int(inventory.mean_duration_frames[ph])
            dur = max(1, base + int(rng.integers(-1, 2)))
            seg_phonemes.append(ph)
            seg_durations.append(dur)
        end = int(np.sum(seg_durations))
        word_bounds.append((word, tuple(seq), start, end))

    total = int(np.sum(seg_durations))
    anchors = inventory.base_vectors.astype(np.float64)
    clean = np.empty((total, inventory.feature_dim), dtype=np.float64)
    labels = np.empty(total, dtype=np.int64)
    pos = 0
    for ph, dur in zip(seg_phonemes, seg_durations):
        clean[pos : pos + dur] = anchors[ph]
        labels[pos : pos + dur] = ph
        pos += dur

    # co-articulation: crossfade across each internal phoneme boundary
    if coart_frames > 0:
        boundary = 0
        for i in range(len(seg_phonemes) - 1):
            boundary += seg_durations[i]
            left, right = seg_phonemes[i], seg_phonemes[i + 1]
            if left == right:
                continue
            c = min(coart_frames, seg_durations[i] // 2, seg_durations[i + 1] // 2)
            if c == 0:
                continue
            zone = 2 * c
            for k in range(zone):
                w_right = (k + 1) / (zone + 1)
                t = boundary - c + k
                clean[t] = (1.0 - w_right) * anchors[left] + w_right * anchors[right]
                if w_right > 0.5:
                    labels[t] = right
                elif w_right < 0.5:
                    labels[t] = left
                else:
                    labels[t] = left  # tie: earlier phoneme

    feats = clean + rng.normal(size=clean.shape) * noise_sigma if noise_sigma > 0 else clean
    spans = [WordSpan(w, seq, s, e) for w, seq, s, e in word_bounds]
    return UtteranceRecord(
        utterance_id=f"utt-{seed:08x}",
        features=feats.astype(np.float32),
        frame_labels=labels,
        words=spans,
    )


def estimate_t_mean_ms(records: list[UtteranceRecord], frame_rate_hz: float) -> float:
    """Average phoneme duration in milliseconds over the given records."""
    total_frames = sum(r.num_frames for r in records)
    total_phonemes = sum(len(w.phoneme_ids) for r in records for w in r.words)
    if total_phonemes == 0:
        raise ContractError("no phonemes in records")
    return total_frames / total_phonemes * 1000.0 / frame_rate_hz


def holdout_split(
    records: list[UtteranceRecord], fraction: float, salt: str = ""
) -> tuple[list[UtteranceRecord], list[UtteranceRecord]]:
    """Deterministic (train, held-out) split keyed on a hash of utterance_id.

    Different ``salt`` values give statistically independent splits, so a
    validation split can be nested inside the complement of an eval split."""
    train, held = [], []
    cut = int(round(fraction * 10000))
    for r in records:
        digest = hashlib.md5((salt + r.utterance_id).encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:4], "little") % 10000
        (held if bucket < cut else train).append(r)
    return train, held


# ---------------------------------------------------------------------------
# persistence: JSON-lines manifest + one binary feature file per utterance


def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ContractError("features must be [T, D]")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", features.shape[0], features.shape[1]))
        fh.write(np.ascontiguousarray(features).tobytes())


def read_features(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise ParseError(f"feature file not found: {path}") from None
    if blob[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise ParseError(f"bad feature magic in {path}", offset=0)
    pos = len(FEATURE_MAGIC)
    if len(blob) < pos + 8:
        raise ParseError(f"truncated feature header in {path}", offset=pos)
    t_frames, d_feat = struct.unpack("<II", blob[pos : pos + 8])
    pos += 8
    need = 4 * t_frames * d_feat
    if len(blob) < pos + need:
        raise ParseError(f"truncated feature payload in {path}", offset=len(blob))
    arr = np.frombuffer(blob[pos : pos + need], dtype="<f4").reshape(t_frames, d_feat)
    return arr.astype(np.float32)


def write_manifest(manifest: CorpusManifest, records: list[UtteranceRecord], path) -> None:
    """Persist manifest + all feature files; lossless round-trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feature_dir = path.parent
    manifest.records = []
    lines = []
    header = {
        "version": MANIFEST_VERSION,
        "frame_rate_hz": manifest.frame_rate_hz,
        "feature_dim": manifest.feature_dim,
        "inventory": {
            "base_vectors": [[float(v) for v in row] for row in manifest.inventory.base_vectors],
            "mean_duration_frames": [int(d) for d in manifest.inventory.mean_duration_frames],
        },
        "lexicon": {w: list(seq) for w, seq in manifest.lexicon.items()},
    }
    lines.append(json.dumps(header, sort_keys=True))
    for rec in records:
        feature_file = f"{rec.utterance_id}.feat"
        write_features(feature_dir / feature_file, rec.features)
        meta = {
            "utterance_id": rec.utterance_id,
            "feature_file": feature_file,
            "num_frames": rec.num_frames,
            "frame_labels": [int(x) for x in rec.frame_labels],
            "words": [[w.word, list(w.phoneme_ids), w.start_frame, w.end_frame] for w in rec.words],
        }
        manifest.records.append(meta)
        lines.append(json.dumps(meta, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> tuple[CorpusManifest, list[UtteranceRecord]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError(f"manifest not found: {path}") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"empty manifest {path}", offset=0)

    def parse_line(i: int) -> dict:
        try:
            return json.loads(lines[i])
        except json.JSONDecodeError as err:
            raise ParseError(f"malformed manifest line {i + 1}: {err.msg}", offset=i + 1) from None

    header = parse_line(0)
    try:
        if header["version"] != MANIFEST_VERSION:
            raise ParseError(f"unsupported manifest version {header['version']}", offset=1)
        inventory = PhonemeInventory(
            np.asarray(header["inventory"]["base_vectors"], dtype=np.float32),
            np.asarray(header["inventory"]["mean_duration_frames"], dtype=np.int64),
        )
        lexicon = {w: tuple(int(p) for p in seq) for w, seq in header["lexicon"].items()}
        manifest = CorpusManifest(
            frame_rate_hz=float(header["frame_rate_hz"]),
            feature_dim=int(header["feature_dim"]),
            inventory=inventory,
            lexicon=lexicon,
        )
    except KeyError as err:
        raise ParseError(f"manifest header missing field {err}", offset=1) from None

    records = []
    for i in range(1, len(lines)):
        meta = parse_line(i)
        try:
            feats = read_features(path.parent / meta["feature_file"])
            rec = UtteranceRecord(
                utterance_id=meta["utterance_id"],
                features=feats,
                frame_labels=np.asarray(meta["frame_labels"], dtype=np.int64),
                words=[WordSpan(w, tuple(seq), s, e) for w, seq, s, e in meta["words"]],
            )
        except KeyError as err:
            raise ParseError(f"manifest record missing field {err}", offset=i + 1) from None
        manifest.records.append(meta)
        records.append(rec)
    return manifest, records
