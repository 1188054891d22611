"""Pipeline configuration: versioned JSON files validated against a schema.

A run is fully described by one JSON document; command-line flags override
individual values and every command writes the resolved document next to its
outputs so the run can be reproduced byte-for-byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from .errors import ConfigurationError
from .loss import LossConfig
from .trainer import TrainConfig
from .windowing import SamplingConfig, SegmentLabelConfig, WindowConfig

CONFIG_VERSION = 1

DEFAULT_CONFIG: dict = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "corpus": {
        "num_phonemes": 40,
        "feature_dim": 16,
        "separation": 2.0,
        "duration_range": [4, 7],
        "lexicon_words": 48,
        "min_word_len": 3,
        "max_word_len": 9,
        "prefix_families": 4,
        "family_size": 3,
        "prefix_len": 3,
        "num_utterances": 560,
        "words_per_utterance": 6,
        "noise_sigma": 0.08,
        "coart_frames": 2,
        "frame_rate_hz": 100.0,
    },
    "window": {"t_mean_ms": None, "l_margin_ms": 300.0},
    "labels": {"pos_overlap_min": 0.7, "neg_overlap_max": 0.3, "n_pos": 4, "m_neg": 8, "stride": 4},
    "sampling": {"keywords_per_utterance": 2, "min_phonemes": 6},
    "am": {
        "hidden": 64,
        "projection": 32,
        "memory_layers": 3,
        "left_context": 10,
        "right_context": 1,
        "pretrain_epochs": 4,
        "pretrain_lr": 0.05,
    },
    "encoder": {"layers": 2, "hidden": 32, "projection": 16, "embedding_dim": 32},
    "loss": {"tau_at": 0.12, "tau_aa": 0.2, "alpha": 0.15, "normalize": "mean"},
    "train": {
        "initial_lr": 1e-3,
        "batch_frame_budget": 12288,
        "halve_on_plateau": True,
        "early_stop_rounds": 3,
        "max_epochs": 10,
        "val_fraction": 0.1,
    },
    "eval": {"num_keywords": 10, "fa_budget": 2, "eval_fraction": 0.2, "write_roc_csv": False},
    "bench": {
        "num_tracks": 3,
        "track_words": 40,
        "repetitions": 5,
        "smoothing_window": 5,
        "num_keywords": 10,
        "threshold": 0.5,
    },
}

_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["version"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "corpus": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_phonemes": {"type": "integer", "minimum": 2},
                "feature_dim": {"type": "integer", "minimum": 2},
                "separation": _POS_NUM,
                "duration_range": {
                    "type": "array",
                    "items": _POS_INT,
                    "minItems": 2,
                    "maxItems": 2,
                },
                "lexicon_words": _POS_INT,
                "min_word_len": _POS_INT,
                "max_word_len": _POS_INT,
                "prefix_families": {"type": "integer", "minimum": 0},
                "family_size": _POS_INT,
                "prefix_len": _POS_INT,
                "num_utterances": _POS_INT,
                "words_per_utterance": _POS_INT,
                "noise_sigma": {"type": "number", "minimum": 0},
                "coart_frames": {"type": "integer", "minimum": 0},
                "frame_rate_hz": _POS_NUM,
            },
        },
        "window": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_mean_ms": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "l_margin_ms": {"type": "number", "minimum": 0},
            },
        },
        "labels": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pos_overlap_min": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "neg_overlap_max": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "n_pos": _POS_INT,
                "m_neg": {"type": "integer", "minimum": 0},
                "stride": _POS_INT,
            },
        },
        "sampling": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"keywords_per_utterance": _POS_INT, "min_phonemes": _POS_INT},
        },
        "am": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": _POS_INT,
                "projection": _POS_INT,
                "memory_layers": _POS_INT,
                "left_context": {"type": "integer", "minimum": 0},
                "right_context": {"type": "integer", "minimum": 0},
                "pretrain_epochs": {"type": "integer", "minimum": 0},
                "pretrain_lr": _POS_NUM,
            },
        },
        "encoder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "layers": _POS_INT,
                "hidden": _POS_INT,
                "projection": _POS_INT,
                "embedding_dim": _POS_INT,
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau_at": _POS_NUM,
                "tau_aa": _POS_NUM,
                "alpha": {"type": "number", "minimum": 0},
                "normalize": {"enum": ["mean", "sum"]},
                "dedup_text": {"type": "boolean"},
                "triplet_margin": {"type": "number", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "initial_lr": _POS_NUM,
                "batch_frame_budget": _POS_INT,
                "halve_on_plateau": {"type": "boolean"},
                "early_stop_rounds": _POS_INT,
                "max_epochs": _POS_INT,
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_keywords": _POS_INT,
                "fa_budget": {"type": "integer", "minimum": 0},
                "eval_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "write_roc_csv": {"type": "boolean"},
            },
        },
        "bench": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_tracks": _POS_INT,
                "track_words": _POS_INT,
                "repetitions": _POS_INT,
                "smoothing_window": _POS_INT,
                "num_keywords": _POS_INT,
                "threshold": {"type": "number"},
            },
        },
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def validate_config(config: dict) -> None:
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigurationError(f"config field {path}: {err.message}") from None
    duration = config["corpus"]["duration_range"]
    if duration[0] > duration[1]:
        raise ConfigurationError("corpus duration_range must be [low, high] with low <= high")
    if config["corpus"]["min_word_len"] > config["corpus"]["max_word_len"]:
        raise ConfigurationError("corpus word length bounds are inverted")
    if config["labels"]["neg_overlap_max"] >= config["labels"]["pos_overlap_min"]:
        raise ConfigurationError("labels: neg_overlap_max must be below pos_overlap_min")


def load_config(path: str | Path | None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then explicit overrides; validated."""
    merged = DEFAULT_CONFIG
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigurationError(f"config file {path} is not valid JSON: {err.msg}") from None
        if not isinstance(user, dict):
            raise ConfigurationError("config root must be a JSON object")
        merged = _deep_merge(merged, user)
    if overrides:
        merged = _deep_merge(merged, overrides)
    validate_config(merged)
    return merged


def write_snapshot(config: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(config, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


# --- typed views -------------------------------------------------------------


def window_config(config: dict, t_mean_ms: float | None = None) -> WindowConfig:
    """t_mean falls back to the configured value; a corpus-estimated value
    can be injected when the config leaves it null."""
    section = config["window"]
    t_mean = section["t_mean_ms"] if section["t_mean_ms"] is not None else t_mean_ms
    if t_mean is None:
        raise ConfigurationError("window.t_mean_ms is null and no corpus estimate was supplied")
    return WindowConfig(
        t_mean_ms=float(t_mean),
        l_margin_ms=float(section["l_margin_ms"]),
        frame_rate_hz=float(config["corpus"]["frame_rate_hz"]),
    )


def label_config(config: dict) -> SegmentLabelConfig:
    return SegmentLabelConfig(**config["labels"])


def sampling_config(config: dict) -> SamplingConfig:
    return SamplingConfig(**config["sampling"])


def loss_config(config: dict) -> LossConfig:
    return LossConfig(**config["loss"])


def train_config(config: dict, seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, **config["train"])
