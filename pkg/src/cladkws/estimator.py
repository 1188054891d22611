"""Scikit-learn style facade over the full pipeline.

``CladKeywordSpotter`` bundles acoustic-model pre-training, contrastive
encoder training, enrollment and streaming detection behind the familiar
``fit`` / ``predict`` / ``get_params`` surface, so the detector drops into
sklearn tooling (clone, grid search over the contrastive hyper-parameters,
pipelines feeding feature matrices).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .corpus import UtteranceRecord, estimate_t_mean_ms
from .encoders import AcousticModel, AcousticModelConfig, am_pretrain
from .errors import ContractError
from .evaluation import Occurrence, micro_recall
from .loss import LossConfig
from .stream import DetectionEvent, StreamState, detect, enroll
from .trainer import ModelBundle, TrainConfig, train_clad
from .windowing import SamplingConfig, SegmentLabelConfig, WindowConfig


def check_features(X, feature_dim: int | None = None) -> np.ndarray:
    """Validate one feature track: 2-D, finite, converted to float32."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ContractError(f"features must be a [T>=1, D] matrix, got shape {arr.shape}")
    if feature_dim is not None and arr.shape[1] != feature_dim:
        raise ContractError(f"features have {arr.shape[1]} dims, model expects {feature_dim}")
    if not np.isfinite(arr).all():
        raise ContractError("features contain non-finite values")
    return arr


def check_records(records) -> list[UtteranceRecord]:
    """Validate a training corpus: nonempty, consistent feature dims."""
    records = list(records)
    if not records:
        raise ContractError("training corpus is empty")
    dims = {r.features.shape[1] for r in records}
    if len(dims) != 1:
        raise ContractError(f"records disagree on feature dim: {sorted(dims)}")
    for r in records:
        if not isinstance(r, UtteranceRecord):
            raise ContractError(f"expected UtteranceRecord, got {type(r).__name__}")
    return records


class CladKeywordSpotter(BaseEstimator):
    """End-to-end customizable keyword spotter.

    ``fit`` pre-trains the frame-level acoustic model on the aligned corpus,
    freezes it, and trains the audio/text encoders with the combined
    audio-text + audio-audio contrastive objective. ``enroll`` registers
    keywords from text (phoneme sequences); ``predict`` returns detection
    events for a feature track.

    Parameters follow the sklearn convention: stored verbatim in
    ``__init__``, all work deferred to ``fit``.
    """

    def __init__(
        self,
        num_phonemes=None,
        am_hidden=64,
        am_projection=32,
        am_memory_layers=3,
        am_left_context=10,
        am_right_context=1,
        am_epochs=4,
        am_lr=0.05,
        encoder_layers=2,
        encoder_hidden=32,
        encoder_projection=16,
        embedding_dim=32,
        tau_at=0.12,
        tau_aa=0.2,
        alpha=0.15,
        lr=1e-3,
        max_epochs=10,
        early_stop_rounds=3,
        batch_frame_budget=12288,
        pos_overlap_min=0.7,
        neg_overlap_max=0.3,
        n_positives=4,
        m_negatives=8,
        stride=4,
        keywords_per_utterance=2,
        min_phonemes=6,
        t_mean_ms=None,
        l_margin_ms=300.0,
        frame_rate_hz=100.0,
        threshold=0.5,
        seed=0,
    ):
        self.num_phonemes = num_phonemes
        self.am_hidden = am_hidden
        self.am_projection = am_projection
        self.am_memory_layers = am_memory_layers
        self.am_left_context = am_left_context
        self.am_right_context = am_right_context
        self.am_epochs = am_epochs
        self.am_lr = am_lr
        self.encoder_layers = encoder_layers
        self.encoder_hidden = encoder_hidden
        self.encoder_projection = encoder_projection
        self.embedding_dim = embedding_dim
        self.tau_at = tau_at
        self.tau_aa = tau_aa
        self.alpha = alpha
        self.lr = lr
        self.max_epochs = max_epochs
        self.early_stop_rounds = early_stop_rounds
        self.batch_frame_budget = batch_frame_budget
        self.pos_overlap_min = pos_overlap_min
        self.neg_overlap_max = neg_overlap_max
        self.n_positives = n_positives
        self.m_negatives = m_negatives
        self.stride = stride
        self.keywords_per_utterance = keywords_per_utterance
        self.min_phonemes = min_phonemes
        self.t_mean_ms = t_mean_ms
        self.l_margin_ms = l_margin_ms
        self.frame_rate_hz = frame_rate_hz
        self.threshold = threshold
        self.seed = seed

    # -- sklearn plumbing ----------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "bundle_"):
            raise ContractError("estimator is not fitted; call fit(records) first")

    def _window_config(self) -> WindowConfig:
        self._check_fitted()
        return WindowConfig(
            t_mean_ms=self.t_mean_ms_, l_margin_ms=self.l_margin_ms, frame_rate_hz=self.frame_rate_hz
        )

    # -- estimator API ---------------------------------------------------------

    def fit(self, X, y=None):
        """Train on an aligned corpus (a list of UtteranceRecord).

        ``y`` is ignored; labels live inside the records.
        """
        records = check_records(X)
        num_phonemes = self.num_phonemes
        if num_phonemes is None:
            num_phonemes = int(max(r.frame_labels.max() for r in records)) + 1
        am = AcousticModel(
            AcousticModelConfig(
                feature_dim=records[0].features.shape[1],
                num_phonemes=num_phonemes,
                hidden=self.am_hidden,
                projection=self.am_projection,
                memory_layers=self.am_memory_layers,
                left_context=self.am_left_context,
                right_context=self.am_right_context,
            ),
            seed=self.seed,
        )
        am, self.am_history_ = am_pretrain(
            am, records, epochs=self.am_epochs, lr=self.am_lr, seed=self.seed
        )
        from .encoders import AcousticEncoder, EncoderConfig, TextEncoder

        enc_cfg = dict(
            input_dim=self.am_projection,
            layers=self.encoder_layers,
            hidden=self.encoder_hidden,
            projection=self.encoder_projection,
            embedding_dim=self.embedding_dim,
        )
        self.bundle_ = ModelBundle(
            am=am,
            audio_encoder=AcousticEncoder(EncoderConfig(**enc_cfg), seed=self.seed + 1),
            text_encoder=TextEncoder(EncoderConfig(**enc_cfg), num_phonemes, seed=self.seed + 2),
            frame_rate_hz=self.frame_rate_hz,
        )
        self.t_mean_ms_ = (
            self.t_mean_ms
            if self.t_mean_ms is not None
            else estimate_t_mean_ms(records, self.frame_rate_hz)
        )
        self.report_ = train_clad(
            self.bundle_,
            records,
            TrainConfig(
                initial_lr=self.lr,
                batch_frame_budget=self.batch_frame_budget,
                early_stop_rounds=self.early_stop_rounds,
                max_epochs=self.max_epochs,
                seed=self.seed,
            ),
            LossConfig(tau_at=self.tau_at, tau_aa=self.tau_aa, alpha=self.alpha),
            self._window_config(),
            SegmentLabelConfig(
                pos_overlap_min=self.pos_overlap_min,
                neg_overlap_max=self.neg_overlap_max,
                n_pos=self.n_positives,
                m_neg=self.m_negatives,
                stride=self.stride,
            ),
            SamplingConfig(
                keywords_per_utterance=self.keywords_per_utterance, min_phonemes=self.min_phonemes
            ),
        )
        self.enrolled_ = {}
        return self

    def enroll(self, word: str, phoneme_ids) -> "CladKeywordSpotter":
        """Register a keyword by its phoneme sequence."""
        self._check_fitted()
        self.enrolled_[word] = tuple(int(p) for p in phoneme_ids)
        return self

    def predict(self, X, threshold: float | None = None) -> list[DetectionEvent]:
        """Detection events for one feature track [T, feature_dim]."""
        self._check_fitted()
        if not self.enrolled_:
            raise ContractError("no enrolled keywords; call enroll(word, phoneme_ids) first")
        features = check_features(X, self.bundle_.am.config.feature_dim)
        state = StreamState(bundle=self.bundle_)
        for word, seq in self.enrolled_.items():
            enroll(state, word, seq, self._window_config())
        return detect(state, features, self.threshold if threshold is None else threshold)

    def score(self, X, y) -> float:
        """Micro recall of ``predict`` on tracks ``X`` against occurrence
        lists ``y`` (lists of (word, start_s, end_s))."""
        self._check_fitted()
        total = hits = 0.0
        for track, occs in zip(X, y):
            events = self.predict(track)
            occ_objs = [Occurrence(w, s, e) for w, s, e in occs]
            if not occ_objs:
                continue
            hits += micro_recall(events, occ_objs) * len(occ_objs)
            total += len(occ_objs)
        if total == 0:
            raise ContractError("score needs at least one ground-truth occurrence")
        return hits / total
