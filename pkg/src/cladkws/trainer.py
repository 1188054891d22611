"""Training orchestration: contrastive training loop, LR schedule, checkpoints.

The schedule follows a plateau rule: whenever the validation loss fails to
improve on the best seen so far, the learning rate is halved; after a
configurable number of consecutive non-improving rounds (a round is one
epoch) training stops. Validation batches are built once with a fixed seed
so every epoch scores the same data.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .corpus import UtteranceRecord, holdout_split
from .encoders import AcousticEncoder, AcousticModel, AcousticModelConfig, EncoderConfig, TextEncoder
from .errors import ContractError, ParseError
from .loss import BatchEmbeddings, LossConfig, loss_clad
from .windowing import (
    SamplingConfig,
    SegmentLabelConfig,
    TrainingBatch,
    WindowConfig,
    iter_batches,
)

CHECKPOINT_META_VERSION = 1


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    batch_frame_budget: int = 12288
    halve_on_plateau: bool = True
    early_stop_rounds: int = 3
    max_epochs: int = 20
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.initial_lr <= 0 or self.max_epochs < 1 or self.batch_frame_budget < 1:
            raise ContractError("train config values out of range")
        if self.early_stop_rounds < 1:
            raise ContractError("early_stop_rounds must be >= 1")


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    train_loss: float
    val_loss: float
    lr: float  # rate used during this epoch
    halved: bool  # halving event triggered by this epoch's validation


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    stopping_reason: str = ""
    wall_clock_s: float = 0.0
    skipped_keywords: int = 0

    def to_json(self, include_timing: bool = True) -> str:
        payload = {
            "epochs": [asdict(e) for e in self.epochs],
            "stopping_reason": self.stopping_reason,
            "skipped_keywords": self.skipped_keywords,
        }
        if include_timing:
            payload["wall_clock_s"] = self.wall_clock_s
        return json.dumps(payload, sort_keys=True, indent=2)


class PlateauSchedule:
    """Halve-on-plateau with early stop after N consecutive bad rounds.

    ``observe`` is fed one validation loss per round and reports whether a
    halving event fired and whether training should stop. ``lr`` always
    equals initial_lr / 2**halvings.
    """

    def __init__(self, initial_lr: float, early_stop_rounds: int = 3, halve_on_plateau: bool = True):
        self.initial_lr = initial_lr
        self.early_stop_rounds = early_stop_rounds
        self.halve_on_plateau = halve_on_plateau
        self.best = np.inf
        self.halvings = 0
        self.bad_rounds = 0

    @property
    def lr(self) -> float:
        return self.initial_lr / (2.0**self.halvings)

    def observe(self, val_loss: float) -> tuple[bool, bool]:
        """Returns (halved_now, stop_now)."""
        if val_loss < self.best:
            self.best = val_loss
            self.bad_rounds = 0
            return False, False
        self.bad_rounds += 1
        if self.halve_on_plateau:
            self.halvings += 1
        return self.halve_on_plateau, self.bad_rounds >= self.early_stop_rounds


@dataclass
class ModelBundle:
    am: AcousticModel
    audio_encoder: AcousticEncoder
    text_encoder: TextEncoder
    frame_rate_hz: float = 100.0

    def __post_init__(self):
        if self.audio_encoder.embedding_dim != self.text_encoder.embedding_dim:
            raise ContractError(
                f"audio and text embedding dims differ: "
                f"{self.audio_encoder.embedding_dim} vs {self.text_encoder.embedding_dim}"
            )
        if self.audio_encoder.config.input_dim != self.am.config.projection:
            raise ContractError("audio encoder input must match acoustic model projection")

    def trainable_parameters(self) -> dict[str, nn.Tensor]:
        out = {}
        out.update(self.audio_encoder.parameters("audio_encoder"))
        out.update(self.text_encoder.parameters("text_encoder"))
        return out

    def all_parameters(self) -> dict[str, nn.Tensor]:
        out = self.am.parameters("am")
        out.update(self.trainable_parameters())
        return out


def build_bundle(
    am_config: AcousticModelConfig,
    encoder_config_kw: dict | None = None,
    *,
    num_phonemes: int | None = None,
    frame_rate_hz: float = 100.0,
    seed: int = 0,
) -> ModelBundle:
    """Construct a fresh acoustic model plus paired encoders."""
    kw = dict(encoder_config_kw or {})
    kw.setdefault("input_dim", am_config.projection)
    audio_cfg = EncoderConfig(**kw)
    text_kw = dict(kw)
    text_cfg = EncoderConfig(**text_kw)
    p = num_phonemes if num_phonemes is not None else am_config.num_phonemes
    return ModelBundle(
        am=AcousticModel(am_config, seed=seed),
        audio_encoder=AcousticEncoder(audio_cfg, seed=seed + 1),
        text_encoder=TextEncoder(text_cfg, p, seed=seed + 2),
        frame_rate_hz=frame_rate_hz,
    )


def embed_training_batch(
    bundle: ModelBundle,
    batch: TrainingBatch,
    records_by_id: dict[str, UtteranceRecord],
    rep_cache: dict[str, np.ndarray] | None = None,
) -> BatchEmbeddings:
    """Encode all batch segments and texts into a BatchEmbeddings.

    Segments are grouped by length so each group runs as one batched
    recurrent pass; rows are then reassembled in entry order (positives of
    entry 0, entry 1, ... then negatives likewise), which keeps them
    contiguous per keyword as the losses require.
    """
    entries = batch.entries
    reps: dict[str, np.ndarray] = {}
    for e in entries:
        uid = e.utterance_id
        if uid in reps:
            continue
        if rep_cache is not None and uid in rep_cache:
            reps[uid] = rep_cache[uid]
            continue
        rec = records_by_id[uid]
        reps[uid] = bundle.am.representations(rec.features)
        if rep_cache is not None:
            rep_cache[uid] = reps[uid]

    def encode_grouped(items: list[tuple[int, np.ndarray]]) -> nn.Tensor:
        """items: (original position, segment matrix); returns rows in
        original position order."""
        by_len: dict[int, list[tuple[int, np.ndarray]]] = {}
        for pos, seg in items:
            by_len.setdefault(seg.shape[0], []).append((pos, seg))
        chunks: list[tuple[list[int], nn.Tensor]] = []
        for length in sorted(by_len):
            group = by_len[length]
            emb = bundle.audio_encoder.encode_segments([seg for _, seg in group])
            chunks.append(([pos for pos, _ in group], emb))
        order = np.argsort(np.concatenate([np.array(p) for p, _ in chunks]))
        stacked = nn.concat([emb for _, emb in chunks], axis=0)
        return nn.take_rows(stacked, order)

    pos_items: list[tuple[int, np.ndarray]] = []
    neg_items: list[tuple[int, np.ndarray]] = []
    pos_owner: list[int] = []
    neg_owner: list[int] = []
    for j, e in enumerate(entries):
        rep = reps[e.utterance_id]
        for s, t in e.positives:
            pos_items.append((len(pos_items), rep[s:t]))
            pos_owner.append(j)
        for s, t in e.negatives:
            neg_items.append((len(neg_items), rep[s:t]))
            neg_owner.append(j)

    positives = encode_grouped(pos_items)
    negatives = encode_grouped(neg_items) if neg_items else None

    # texts: encode each distinct word once, expand back to per-entry rows
    distinct: dict[tuple[int, ...], int] = {}
    for e in entries:
        distinct.setdefault(e.keyword.phoneme_ids, len(distinct))
    seqs = list(distinct)
    by_len: dict[int, list[tuple[int, tuple[int, ...]]]] = {}
    for i, seq in enumerate(seqs):
        by_len.setdefault(len(seq), []).append((i, seq))
    chunks = []
    for length in sorted(by_len):
        group = by_len[length]
        emb = bundle.text_encoder.encode_sequences([seq for _, seq in group])
        chunks.append(([i for i, _ in group], emb))
    order = np.argsort(np.concatenate([np.array(p) for p, _ in chunks]))
    distinct_emb = nn.take_rows(nn.concat([emb for _, emb in chunks], axis=0), order)
    text = nn.take_rows(distinct_emb, [distinct[e.keyword.phoneme_ids] for e in entries])

    return BatchEmbeddings(
        text=text,
        positives=positives,
        pos_owner=np.asarray(pos_owner),
        negatives=negatives,
        neg_owner=np.asarray(neg_owner) if neg_items else None,
        words=[e.keyword.word for e in entries],
    )


def train_clad(
    bundle: ModelBundle,
    records: list[UtteranceRecord],
    train_config: TrainConfig,
    loss_config: LossConfig,
    window_config: WindowConfig,
    label_config: SegmentLabelConfig,
    sampling_config: SamplingConfig,
) -> TrainReport:
    """Contrastive training of both encoders over a frozen acoustic model.

    Deterministic given (seed, records, configs): batch composition, loss
    values and the stopping epoch are all reproducible. On a non-finite loss
    the parameters are rolled back to the end of the previous epoch.
    """
    if not bundle.am.frozen:
        raise ContractError("acoustic model must be pre-trained and frozen before training")
    start = time.perf_counter()
    train_records, val_records = holdout_split(records, train_config.val_fraction, salt="val")
    if not train_records:
        raise ContractError("no training records after validation split")
    if not val_records:
        val_records = train_records[:1]
    records_by_id = {r.utterance_id: r for r in records}
    rep_cache: dict[str, np.ndarray] = {}

    val_rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 0x56414C]))
    val_batches = [
        b
        for b in iter_batches(
            val_records,
            train_config.batch_frame_budget,
            window_config,
            label_config,
            sampling_config,
            val_rng,
        )
        if len(b.entries) >= 2
    ]
    if not val_batches:
        raise ContractError("validation split produced no usable batches")

    params = bundle.trainable_parameters()
    param_list = list(params.values())
    schedule = PlateauSchedule(
        train_config.initial_lr, train_config.early_stop_rounds, train_config.halve_on_plateau
    )
    report = TrainReport()
    skipped_total = 0

    def validation_loss() -> float:
        total = 0.0
        for b in val_batches:
            emb = embed_training_batch(bundle, b, records_by_id, rep_cache)
            total += loss_clad(emb, loss_config).total.item()
        return total / len(val_batches)

    snapshot = {k: v.data.copy() for k, v in params.items()}
    stopping = "max_epochs"
    for epoch in range(1, train_config.max_epochs + 1):
        lr = schedule.lr
        epoch_rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, epoch]))
        order = epoch_rng.permutation(len(train_records))
        shuffled = [train_records[int(i)] for i in order]
        losses = []
        aborted = False
        for b in iter_batches(
            shuffled,
            train_config.batch_frame_budget,
            window_config,
            label_config,
            sampling_config,
            epoch_rng,
        ):
            if len(b.entries) < 2:
                continue
            emb = embed_training_batch(bundle, b, records_by_id, rep_cache)
            result = loss_clad(emb, loss_config)
            value = result.total.item()
            if not np.isfinite(value):
                for k, v in params.items():
                    v.data[...] = snapshot[k]
                stopping = f"non-finite loss at epoch {epoch}; restored last checkpoint"
                aborted = True
                break
            skipped_total += result.skipped_keywords
            losses.append(value)
            nn.zero_gradients(param_list)
            result.total.backward()
            nn.apply_gradients(param_list, lr)
        if aborted:
            break
        if not losses:
            raise ContractError("training pool produced no usable batches")
        val = validation_loss()
        halved, stop = schedule.observe(val)
        report.epochs.append(
            EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=val, lr=lr, halved=halved)
        )
        snapshot = {k: v.data.copy() for k, v in params.items()}
        if stop:
            stopping = f"validation loss flat for {train_config.early_stop_rounds} rounds"
            break
    report.stopping_reason = stopping
    report.skipped_keywords = skipped_total
    report.wall_clock_s = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# checkpointing: binary tensor table + JSON sidecar with model shapes


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_checkpoint(path, bundle: ModelBundle) -> None:
    path = Path(path)
    named = {k: v.data for k, v in bundle.all_parameters().items()}
    nn.save_tensors(path, named)
    meta = {
        "meta_version": CHECKPOINT_META_VERSION,
        "frame_rate_hz": bundle.frame_rate_hz,
        "am": asdict(bundle.am.config),
        "am_frozen": bundle.am.frozen,
        "audio_encoder": asdict(bundle.audio_encoder.config),
        "text_encoder": asdict(bundle.text_encoder.config),
        "num_phonemes": bundle.text_encoder.num_phonemes,
    }
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")


def save_am_checkpoint(path, am: AcousticModel, history: list[float] | None = None) -> None:
    """Acoustic-model-only checkpoint (same binary format, its own sidecar)."""
    path = Path(path)
    nn.save_tensors(path, {k: v.data for k, v in am.parameters("am").items()})
    meta = {
        "meta_version": CHECKPOINT_META_VERSION,
        "kind": "am",
        "am": asdict(am.config),
        "am_frozen": am.frozen,
        "pretrain_history": history or [],
    }
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True, indent=2), encoding="utf-8")


def load_am_checkpoint(path) -> AcousticModel:
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise ParseError(f"missing checkpoint sidecar {side}")
    meta = json.loads(side.read_text(encoding="utf-8"))
    if meta.get("kind") != "am":
        raise ParseError(f"{path} is not an acoustic-model checkpoint")
    am = AcousticModel(AcousticModelConfig(**meta["am"]))
    named = nn.load_tensors(path)
    for k, tensor in am.parameters("am").items():
        if k not in named:
            raise ParseError(f"acoustic-model checkpoint missing tensor {k}")
        tensor.data[...] = named[k]
    if meta["am_frozen"]:
        am.freeze()
    return am


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise ParseError(f"missing checkpoint sidecar {side}")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ParseError(f"malformed checkpoint sidecar: {err.msg}") from None
    if meta.get("meta_version") != CHECKPOINT_META_VERSION:
        raise ParseError(f"unsupported checkpoint sidecar version {meta.get('meta_version')}")
    named = nn.load_tensors(path)
    bundle = ModelBundle(
        am=AcousticModel(AcousticModelConfig(**meta["am"])),
        audio_encoder=AcousticEncoder(EncoderConfig(**meta["audio_encoder"])),
        text_encoder=TextEncoder(EncoderConfig(**meta["text_encoder"]), meta["num_phonemes"]),
        frame_rate_hz=meta["frame_rate_hz"],
    )
    params = bundle.all_parameters()
    missing = set(params) - set(named)
    extra = set(named) - set(params)
    if missing or extra:
        raise ParseError(f"checkpoint tensor names do not match model (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for k, tensor in params.items():
        if tensor.data.shape != named[k].shape:
            raise ParseError(f"checkpoint tensor {k} has shape {named[k].shape}, expected {tensor.data.shape}")
        tensor.data[...] = named[k]
    if meta["am_frozen"]:
        bundle.am.freeze()
    return bundle
