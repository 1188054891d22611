"""Frame-level acoustic model and the two contrastive-space encoders.

The acoustic model is a small feedforward sequential-memory network: each
block projects down and adds learned taps over a fixed left/right frame
context, so its streaming lookahead is exactly the sum of the per-layer
right contexts. After supervised frame-label pre-training it is frozen and
serves only as a feature extractor.

Both encoders share one structure: a bidirectional GRU stack with per-layer
projections, a scalar weight-prediction layer whose softmax over frames
pools the last layer, and a final affine map into the shared embedding
space. The text encoder prepends a phoneme embedding table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .corpus import UtteranceRecord, holdout_split
from .errors import ContractError, DomainError, TrainingError

EmbeddingVector = np.ndarray  # 1-D float64; not necessarily unit norm


@dataclass
class AcousticModelConfig:
    feature_dim: int
    num_phonemes: int
    hidden: int = 64
    projection: int = 32
    memory_layers: int = 3
    left_context: int = 10
    right_context: int = 1

    def __post_init__(self):
        if min(self.feature_dim, self.num_phonemes, self.hidden, self.projection) < 1:
            raise ContractError("acoustic model dimensions must be positive")
        if self.memory_layers < 1 or self.left_context < 0 or self.right_context < 0:
            raise ContractError("acoustic model context configuration out of range")


@dataclass
class EncoderConfig:
    input_dim: int
    layers: int = 2
    hidden: int = 32
    projection: int = 16
    embedding_dim: int = 32

    def __post_init__(self):
        if min(self.input_dim, self.layers, self.hidden, self.projection, self.embedding_dim) < 1:
            raise ContractError("encoder dimensions must be positive")


class AcousticModel:
    def __init__(self, config: AcousticModelConfig, seed: int = 0):
        self.config = config
        self.frozen = False
        rng = np.random.default_rng(seed)
        c = config
        self.layers = []
        in_dim = c.feature_dim
        for _ in range(c.memory_layers):
            layer = {
                "w_h": nn.init_uniform(rng, (in_dim, c.hidden), in_dim),
                "b_h": nn.parameter(np.zeros(c.hidden)),
                "v_p": nn.init_uniform(rng, (c.hidden, c.projection), c.hidden),
                "left_taps": nn.init_uniform(rng, (max(1, c.left_context), c.projection), c.projection),
                "right_taps": nn.init_uniform(rng, (max(1, c.right_context), c.projection), c.projection),
            }
            self.layers.append(layer)
            in_dim = c.projection
        self.w_out = nn.init_uniform(rng, (c.projection, c.num_phonemes), c.projection)
        self.b_out = nn.parameter(np.zeros(c.num_phonemes))

    @property
    def lookahead_frames(self) -> int:
        return self.config.memory_layers * self.config.right_context

    @property
    def left_receptive_frames(self) -> int:
        return self.config.memory_layers * self.config.left_context

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters().values():
            p.requires_grad = False
            p.zero_grad()

    def parameters(self, prefix: str = "am") -> dict[str, nn.Tensor]:
        out: dict[str, nn.Tensor] = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"{prefix}.layer{i}.{k}"] = v
        out[f"{prefix}.w_out"] = self.w_out
        out[f"{prefix}.b_out"] = self.b_out
        return out

    def _memory(self, p: nn.Tensor, layer: dict) -> nn.Tensor:
        """p plus learned taps over shifted copies of p (zeros at the edges)."""
        t, d = p.shape
        c = self.config
        m = p
        for k in range(1, c.left_context + 1):
            if k > t:
                break
            tap = nn.slice_rows(layer["left_taps"], k - 1, k)
            shifted = nn.concat([nn.constant(np.zeros((k, d))), nn.slice_rows(p, 0, t - k)], axis=0)
            m = nn.add(m, nn.mul(shifted, tap))
        for k in range(1, c.right_context + 1):
            if k > t:
                break
            tap = nn.slice_rows(layer["right_taps"], k - 1, k)
            shifted = nn.concat([nn.slice_rows(p, k, t), nn.constant(np.zeros((k, d)))], axis=0)
            m = nn.add(m, nn.mul(shifted, tap))
        return m

    def forward(self, features: np.ndarray) -> tuple[nn.Tensor, nn.Tensor]:
        """(representations [T, projection], phoneme logits [T, P])."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.config.feature_dim:
            raise ContractError(
                f"features shape {feats.shape}, expected (T, {self.config.feature_dim})"
            )
        if feats.shape[0] < 1:
            raise ContractError("need at least one frame")
        x = nn.constant(feats)
        m = None
        for layer in self.layers:
            h = nn.relu(nn.add(nn.matmul(x, layer["w_h"]), layer["b_h"]))
            p = nn.matmul(h, layer["v_p"])
            mem = self._memory(p, layer)
            m = mem if m is None else nn.add(m, mem)
            x = m
        logits = nn.add(nn.matmul(m, self.w_out), self.b_out)
        return m, logits

    def representations(self, features: np.ndarray) -> np.ndarray:
        """Frozen-path forward returning plain arrays."""
        with nn.no_grad():
            reps, _ = self.forward(features)
        return reps.data

    def posteriors(self, features: np.ndarray) -> np.ndarray:
        """Per-frame phoneme posteriors [T, P]."""
        with nn.no_grad():
            _, logits = self.forward(features)
            probs = nn.softmax(logits, axis=1)
        return probs.data


def am_forward(model: AcousticModel, features: np.ndarray) -> np.ndarray:
    """Per-frame representations for a feature matrix [T, feature_dim]."""
    return model.representations(features)


def _cross_entropy(logits: nn.Tensor, labels: np.ndarray) -> nn.Tensor:
    t, p = logits.shape
    one_hot = np.zeros((t, p))
    one_hot[np.arange(t), labels] = 1.0
    return nn.scale(nn.tsum(nn.mul(nn.log_softmax(logits, axis=1), nn.constant(one_hot))), -1.0 / t)


def am_pretrain(
    model: AcousticModel,
    records: list[UtteranceRecord],
    epochs: int,
    lr: float,
    *,
    holdout_fraction: float = 0.1,
    seed: int = 0,
) -> tuple[AcousticModel, list[float]]:
    """Supervised frame-label pre-training; freezes the model afterwards.

    Returns the model and the held-out cross-entropy trace, entry 0 being
    the value before any update. Raises TrainingError if the loss diverges.
    """
    if model.frozen:
        raise ContractError("model is already frozen")
    train, held = holdout_split(records, holdout_fraction)
    if not train:
        train = records
    if not held:
        held = records

    def held_ce() -> float:
        with nn.no_grad():
            total = 0.0
            for rec in held:
                _, logits = model.forward(rec.features)
                total += _cross_entropy(logits, rec.frame_labels).item()
        return total / len(held)

    history = [held_ce()]
    params = list(model.parameters().values())
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for i in order:
            rec = train[int(i)]
            _, logits = model.forward(rec.features)
            loss = _cross_entropy(logits, rec.frame_labels)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError("cross-entropy diverged", epoch=epoch + 1)
            nn.zero_gradients(params)
            loss.backward()
            nn.apply_gradients(params, lr)
        history.append(held_ce())
    model.freeze()
    return model, history


def frame_accuracy(model: AcousticModel, records: list[UtteranceRecord]) -> float:
    hits = total = 0
    for rec in records:
        pred = model.posteriors(rec.features).argmax(axis=1)
        hits += int((pred == rec.frame_labels).sum())
        total += rec.num_frames
    return hits / total


# ---------------------------------------------------------------------------
# sequence encoders


class SequenceEncoder:
    """Bidirectional GRU stack + attention pooling + projection head."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.layers = []
        in_dim = c.input_dim
        for _ in range(c.layers):
            layer = {
                "fwd": nn.GRUCell(in_dim, c.hidden, rng),
                "bwd": nn.GRUCell(in_dim, c.hidden, rng),
                "w_p": nn.init_uniform(rng, (2 * c.hidden, c.projection), 2 * c.hidden),
                "b_p": nn.parameter(np.zeros(c.projection)),
            }
            self.layers.append(layer)
            in_dim = c.projection
        # the attention logit carries no bias (softmax is shift-invariant) and
        # the head carries none either: a shared additive offset only pulls
        # every embedding toward one direction in cosine space
        self.w_attn = nn.init_uniform(rng, (c.projection, 1), c.projection)
        self.w_emb = nn.init_uniform(rng, (c.projection, c.embedding_dim), c.projection)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def parameters(self, prefix: str) -> dict[str, nn.Tensor]:
        out: dict[str, nn.Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer["fwd"].parameters(f"{prefix}.layer{i}.fwd"))
            out.update(layer["bwd"].parameters(f"{prefix}.layer{i}.bwd"))
            out[f"{prefix}.layer{i}.w_p"] = layer["w_p"]
            out[f"{prefix}.layer{i}.b_p"] = layer["b_p"]
        out[f"{prefix}.w_attn"] = self.w_attn
        out[f"{prefix}.w_emb"] = self.w_emb
        return out

    def encode_steps(self, steps: list[nn.Tensor]) -> tuple[nn.Tensor, nn.Tensor, nn.Tensor]:
        """Encode a batch of equal-length sequences.

        ``steps[t]`` is the [B, input_dim] slice at time t. Returns
        (embedding [B, E], pooled [B, projection], attention [B, T]).
        """
        if not steps:
            raise ContractError("cannot encode an empty segment")
        b = steps[0].shape[0]
        x_all = steps[0] if len(steps) == 1 else nn.concat(steps, axis=0)
        return self.encode_stacked(x_all, len(steps), b)

    def encode_stacked(self, x_all: nn.Tensor, t_len: int, b: int) -> tuple[nn.Tensor, nn.Tensor, nn.Tensor]:
        """Core encode on a time-major stack (row t*B+b is sequence b at time
        t). The input-side GRU projections run as one matmul per direction;
        only the hidden-side matmuls stay inside the recurrence."""
        if t_len < 1 or x_all.shape[0] != t_len * b:
            raise ContractError(f"stacked input {x_all.shape} does not match T={t_len}, B={b}")
        for layer in self.layers:
            fwd_cell, bwd_cell = layer["fwd"], layer["bwd"]
            xzr_f, xc_f = fwd_cell.project_inputs(x_all)
            xzr_b, xc_b = bwd_cell.project_inputs(x_all)
            fwd = fwd_cell.sequence(xzr_f, xc_f, t_len, b)
            bwd = bwd_cell.sequence(xzr_b, xc_b, t_len, b, reverse=True)
            states = nn.concat([fwd, bwd], axis=1)  # [T*B, 2H]
            x_all = nn.add(nn.matmul(states, layer["w_p"]), layer["b_p"])
        logits = nn.matmul(x_all, self.w_attn)  # [T*B, 1]
        attn = nn.softmax(nn.transpose(nn.reshape(logits, (t_len, b))), axis=1)  # [B, T]
        weights_col = nn.reshape(nn.transpose(attn), (t_len * b, 1))
        weighted = nn.mul(x_all, weights_col)
        pooled = nn.reshape(
            nn.tsum(nn.reshape(weighted, (t_len, b * self.config.projection)), axis=0),
            (b, self.config.projection),
        )
        embedding = nn.matmul(pooled, self.w_emb)
        return embedding, pooled, attn


class AcousticEncoder(SequenceEncoder):
    """Encodes acoustic-model representations of one segment."""

    def encode_segments(self, segments: list[np.ndarray]) -> nn.Tensor:
        """Batch-encode equal-length representation matrices [T, input_dim]."""
        lengths = {s.shape[0] for s in segments}
        if len(lengths) != 1:
            raise ContractError(f"segments must share a length, got {sorted(lengths)}")
        t = lengths.pop()
        if t < 1:
            raise ContractError("cannot encode an empty segment")
        stacked = np.stack([np.asarray(s, dtype=np.float64) for s in segments])  # [B, T, D]
        x_all = nn.constant(stacked.transpose(1, 0, 2).reshape(t * len(segments), -1))
        emb, _, _ = self.encode_stacked(x_all, t, len(segments))
        return emb


class TextEncoder(SequenceEncoder):
    """Encodes phoneme-id sequences through an embedding table."""

    def __init__(self, config: EncoderConfig, num_phonemes: int, seed: int = 0):
        super().__init__(config, seed=seed)
        self.num_phonemes = num_phonemes
        rng = np.random.default_rng(seed + 101)
        # lookup rows want unit scale: a fan-in bound would leave the inputs
        # too weak to steer the recurrence
        self.phoneme_table = nn.init_normal(rng, (num_phonemes, config.input_dim))

    def parameters(self, prefix: str) -> dict[str, nn.Tensor]:
        out = super().parameters(prefix)
        out[f"{prefix}.phoneme_table"] = self.phoneme_table
        return out

    def encode_sequences(self, sequences: list[tuple[int, ...]]) -> nn.Tensor:
        """Batch-encode equal-length phoneme sequences."""
        lengths = {len(s) for s in sequences}
        if len(lengths) != 1:
            raise ContractError(f"sequences must share a length, got {sorted(lengths)}")
        t = lengths.pop()
        if t < 1:
            raise ContractError("cannot encode an empty phoneme sequence")
        for seq in sequences:
            for ph in seq:
                if not (0 <= ph < self.num_phonemes):
                    raise ContractError(f"unknown phoneme id {ph}")
        ids = np.asarray(sequences, dtype=np.intp)  # [B, T]
        x_all = nn.take_rows(self.phoneme_table, ids.T.reshape(-1))  # time-major [T*B, emb]
        emb, _, _ = self.encode_stacked(x_all, t, len(sequences))
        return emb


def encode_audio(encoder: AcousticEncoder, representations: np.ndarray) -> EmbeddingVector:
    """Embedding for one segment of acoustic-model representations."""
    reps = np.asarray(representations, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[0] < 1:
        raise ContractError(f"segment representations must be [T>=1, D], got {reps.shape}")
    with nn.no_grad():
        emb = encoder.encode_segments([reps])
    return emb.data[0]


def encode_text(encoder: TextEncoder, phoneme_ids) -> EmbeddingVector:
    """Embedding for one phoneme-id sequence."""
    seq = tuple(int(p) for p in phoneme_ids)
    if not seq:
        raise ContractError("phoneme sequence must be nonempty")
    with nn.no_grad():
        emb = encoder.encode_sequences([seq])
    return emb.data[0]


def cosine_sim(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity in [-1, 1]; rejects zero-norm inputs."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ContractError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity undefined for zero vectors")
    return float(np.clip(a.dot(b) / (na * nb), -1.0, 1.0))
