"""Customizable streaming keyword spotting via contrastive audio-text
representation learning, with a synthetic aligned corpus and an
evaluation/benchmark harness."""

from .corpus import (
    CorpusManifest,
    PhonemeInventory,
    UtteranceRecord,
    WordSpan,
    read_manifest,
    synth_inventory,
    synth_lexicon,
    synth_utterance,
    write_manifest,
)
from .encoders import (
    AcousticEncoder,
    AcousticModel,
    AcousticModelConfig,
    EncoderConfig,
    TextEncoder,
    am_forward,
    am_pretrain,
    cosine_sim,
    encode_audio,
    encode_text,
)
from .errors import CladError
from .estimator import CladKeywordSpotter, check_features, check_records
from .evaluation import (
    EvalReport,
    Occurrence,
    Trial,
    TrialSet,
    auc,
    calibrate_threshold,
    eer,
    micro_recall,
    rsa,
    run_ablation,
)
from .loss import BatchEmbeddings, LossConfig, loss_audio_audio, loss_audio_text, loss_clad, loss_triplet
from .stream import DetectionEvent, StreamState, detect, detect_baseline, enroll, segment_stream
from .trainer import ModelBundle, TrainConfig, TrainReport, load_checkpoint, save_checkpoint, train_clad
from .windowing import (
    KeywordSpec,
    SamplingConfig,
    SegmentLabelConfig,
    TrainingBatch,
    WindowConfig,
    build_batch,
    estimate_window,
    overlap_ratio,
    sample_keywords,
    slice_segments,
)

__version__ = "0.1.0"

__all__ = [
    "AcousticEncoder",
    "AcousticModel",
    "AcousticModelConfig",
    "BatchEmbeddings",
    "CladError",
    "CladKeywordSpotter",
    "CorpusManifest",
    "DetectionEvent",
    "EncoderConfig",
    "EvalReport",
    "KeywordSpec",
    "LossConfig",
    "ModelBundle",
    "Occurrence",
    "PhonemeInventory",
    "SamplingConfig",
    "SegmentLabelConfig",
    "StreamState",
    "TextEncoder",
    "TrainConfig",
    "TrainReport",
    "TrainingBatch",
    "Trial",
    "TrialSet",
    "UtteranceRecord",
    "WindowConfig",
    "WordSpan",
    "am_forward",
    "am_pretrain",
    "auc",
    "build_batch",
    "calibrate_threshold",
    "check_features",
    "check_records",
    "cosine_sim",
    "detect",
    "detect_baseline",
    "eer",
    "encode_audio",
    "encode_text",
    "enroll",
    "estimate_window",
    "load_checkpoint",
    "loss_audio_audio",
    "loss_audio_text",
    "loss_clad",
    "loss_triplet",
    "micro_recall",
    "overlap_ratio",
    "read_manifest",
    "rsa",
    "run_ablation",
    "sample_keywords",
    "save_checkpoint",
    "segment_stream",
    "slice_segments",
    "synth_inventory",
    "synth_lexicon",
    "synth_utterance",
    "train_clad",
    "write_manifest",
]
