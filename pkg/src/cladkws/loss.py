"""Contrastive objectives over batch embeddings.

Two InfoNCE-style terms: audio-text matching contrasts each positive audio
segment against its own keyword text versus every other keyword text in the
mini-batch; audio-audio discrimination contrasts each ordered pair of
positive segments of one keyword against that keyword's negative segments.
The combined objective is ``alpha * audio_audio + audio_text``.

Both terms are written as sums in their defining formulas; by default each
is divided by its term count so that ``alpha`` keeps the same meaning at any
batch size (``normalize="sum"`` restores the plain sums).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ContractError

Array = np.ndarray


@dataclass
class LossConfig:
    tau_at: float = 0.12
    tau_aa: float = 0.2
    alpha: float = 0.15
    triplet_margin: float = 0.5
    normalize: str = "mean"  # "mean" | "sum"
    dedup_text: bool = False  # mask same-word texts out of the in-batch negatives

    def __post_init__(self):
        if self.tau_at <= 0 or self.tau_aa <= 0:
            raise ContractError("temperatures must be positive")
        if self.alpha < 0 or self.triplet_margin < 0:
            raise ContractError("alpha and triplet_margin must be >= 0")
        if self.normalize not in ("mean", "sum"):
            raise ContractError("normalize must be 'mean' or 'sum'")


@dataclass
class BatchEmbeddings:
    """Embeddings for one training batch.

    ``text`` has one row per keyword entry (duplicated words keep separate
    rows). ``positives``/``negatives`` rows are grouped by owning keyword:
    all rows with ``owner == j`` must be contiguous and in entry order.
    """

    text: nn.Tensor  # [K, E]
    positives: nn.Tensor  # [P, E]
    pos_owner: Array  # [P] row index into text
    negatives: nn.Tensor | None = None  # [Q, E]
    neg_owner: Array | None = None
    words: list[str] = field(default_factory=list)

    @property
    def num_keywords(self) -> int:
        return self.text.shape[0]


@dataclass
class SimilarityTable:
    """Cosine similarities realized inside the losses, for inspection."""

    audio_text: Array  # [P, K]
    pos_pos: list[Array]  # per keyword [N_j, N_j]
    pos_neg: list[Array]  # per keyword [N_j, M_j]


@dataclass
class CladLossResult:
    total: nn.Tensor
    audio_text: nn.Tensor
    audio_audio: nn.Tensor | None
    skipped_keywords: int = 0


def _normalize_rows(x: nn.Tensor) -> nn.Tensor:
    sq = nn.tsum(nn.mul(x, x), axis=1, keepdims=True)
    return nn.mul(x, nn.pow_const(sq, -0.5))


def _owner_slices(owner: Array, num_keywords: int) -> list[tuple[int, int]]:
    """Contiguous [start, stop) row range per keyword (may be empty)."""
    owner = np.asarray(owner)
    out = []
    pos = 0
    for j in range(num_keywords):
        start = pos
        while pos < len(owner) and owner[pos] == j:
            pos += 1
        out.append((start, pos))
    if pos != len(owner):
        raise ContractError("owner indices must be contiguous and sorted by keyword")
    return out


def build_similarity_table(batch: BatchEmbeddings) -> SimilarityTable:
    """Plain-array cosine tables (no gradients); entries lie in [-1, 1]."""
    with nn.no_grad():
        tn = _normalize_rows(batch.text).data
        pn = _normalize_rows(batch.positives).data
        at = pn @ tn.T
        pos_pos, pos_neg = [], []
        k = batch.num_keywords
        pos_ranges = _owner_slices(batch.pos_owner, k)
        if batch.negatives is not None:
            nnorm = _normalize_rows(batch.negatives).data
            neg_ranges = _owner_slices(batch.neg_owner, k)
        for j in range(k):
            p0, p1 = pos_ranges[j]
            pj = pn[p0:p1]
            pos_pos.append(pj @ pj.T)
            if batch.negatives is not None:
                q0, q1 = neg_ranges[j]
                pos_neg.append(pj @ nnorm[q0:q1].T)
            else:
                pos_neg.append(np.zeros((p1 - p0, 0)))
    return SimilarityTable(audio_text=at, pos_pos=pos_pos, pos_neg=pos_neg)


def loss_audio_text(batch: BatchEmbeddings, tau_at: float, normalize: str = "mean",
                    dedup_text: bool = False) -> nn.Tensor:
    """Audio-text InfoNCE over all positive segments in the batch.

    Each positive segment is scored against every keyword text; the target
    is its own keyword, all other texts act as in-batch negatives. Negative
    audio segments do not participate.
    """
    k = batch.num_keywords
    if k < 2:
        raise ContractError("audio-text loss needs >= 2 keywords in the batch "
                            "(otherwise there are no in-batch text negatives)")
    p = batch.positives.shape[0]
    if p < 1:
        raise ContractError("no positive segments in batch")
    tn = _normalize_rows(batch.text)
    pn = _normalize_rows(batch.positives)
    logits = nn.scale(nn.matmul(pn, nn.transpose(tn)), 1.0 / tau_at)  # [P, K]
    owner = np.asarray(batch.pos_owner, dtype=np.intp)
    if dedup_text:
        if len(batch.words) != k:
            raise ContractError("dedup_text requires batch words")
        words = np.array(batch.words)
        same = words[owner][:, None] == words[None, :]  # [P, K]
        own_col = np.zeros((p, k), dtype=bool)
        own_col[np.arange(p), owner] = True
        mask = same & ~own_col  # duplicates of the target word, excluding it
        logits = nn.add(logits, nn.constant(np.where(mask, -1e30, 0.0)))
    target = np.zeros((p, k))
    target[np.arange(p), owner] = 1.0
    picked = nn.tsum(nn.mul(nn.log_softmax(logits, axis=1), nn.constant(target)))
    factor = -1.0 / p if normalize == "mean" else -1.0
    return nn.scale(picked, factor)


def loss_audio_audio(batch: BatchEmbeddings, tau_aa: float,
                     normalize: str = "mean") -> tuple[nn.Tensor, int]:
    """Audio-audio InfoNCE summed over keywords and ordered positive pairs.

    For each keyword, every ordered pair (k, l) of its positive segments is
    scored against that keyword's negative segments; the pair similarity is
    the target and the anchor-negative similarities complete the denominator.
    Keywords with fewer than two positives or no negatives contribute
    nothing; their count is returned alongside the loss.
    """
    if batch.negatives is None or batch.neg_owner is None:
        raise ContractError("audio-audio loss requires negative segments")
    k = batch.num_keywords
    pn = _normalize_rows(batch.positives)
    nnorm = _normalize_rows(batch.negatives)
    pos_ranges = _owner_slices(batch.pos_owner, k)
    neg_ranges = _owner_slices(batch.neg_owner, k)
    terms: list[nn.Tensor] = []
    term_count = 0
    skipped = 0
    for j in range(k):
        p0, p1 = pos_ranges[j]
        q0, q1 = neg_ranges[j]
        n_j, m_j = p1 - p0, q1 - q0
        if n_j < 2 or m_j < 1:
            skipped += 1
            continue
        pj = nn.slice_rows(pn, p0, p1)  # [N, E]
        nj = nn.slice_rows(nnorm, q0, q1)  # [M, E]
        spp = nn.matmul(pj, nn.transpose(pj))  # [N, N]
        spn = nn.matmul(pj, nn.transpose(nj))  # [N, M]
        for a in range(n_j):
            row_pp = nn.slice_block(spp, a, a + 1, 0, n_j)  # [1, N]
            if a == 0:
                off_diag = nn.slice_block(row_pp, 0, 1, 1, n_j)
            elif a == n_j - 1:
                off_diag = nn.slice_block(row_pp, 0, 1, 0, n_j - 1)
            else:
                off_diag = nn.concat(
                    [nn.slice_block(row_pp, 0, 1, 0, a), nn.slice_block(row_pp, 0, 1, a + 1, n_j)],
                    axis=1,
                )
            pair_col = nn.transpose(off_diag)  # [N-1, 1]
            neg_row = nn.slice_block(spn, a, a + 1, 0, m_j)  # [1, M]
            tiled = nn.concat([neg_row] * (n_j - 1), axis=0)  # [N-1, M]
            rows = nn.scale(nn.concat([pair_col, tiled], axis=1), 1.0 / tau_aa)
            log_probs = nn.log_softmax(rows, axis=1)
            terms.append(nn.tsum(nn.slice_block(log_probs, 0, n_j - 1, 0, 1)))
            term_count += n_j - 1
    if not terms:
        return nn.constant(0.0), skipped
    total = terms[0]
    for t in terms[1:]:
        total = nn.add(total, t)
    factor = -1.0 / term_count if normalize == "mean" else -1.0
    return nn.scale(total, factor), skipped


def loss_clad(batch: BatchEmbeddings, config: LossConfig) -> CladLossResult:
    """Combined objective: alpha * audio_audio + audio_text."""
    at = loss_audio_text(batch, config.tau_at, config.normalize, config.dedup_text)
    if config.alpha == 0.0:
        return CladLossResult(total=at, audio_text=at, audio_audio=None)
    aa, skipped = loss_audio_audio(batch, config.tau_aa, config.normalize)
    total = nn.add(nn.scale(aa, config.alpha), at)
    return CladLossResult(total=total, audio_text=at, audio_audio=aa, skipped_keywords=skipped)


def _cosine_node(a: nn.Tensor, b: nn.Tensor) -> nn.Tensor:
    dot = nn.tsum(nn.mul(a, b))
    na = nn.pow_const(nn.tsum(nn.mul(a, a)), 0.5)
    nb = nn.pow_const(nn.tsum(nn.mul(b, b)), 0.5)
    return nn.mul(dot, nn.pow_const(nn.mul(na, nb), -1.0))


def loss_triplet(anchor: nn.Tensor, positive: nn.Tensor, negative: nn.Tensor,
                 margin: float) -> nn.Tensor:
    """Hinge on cosine similarities: max(0, margin - Sim(a,p) + Sim(a,n))."""
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise ContractError(
            f"triplet embeddings must share a shape, got {anchor.shape}, "
            f"{positive.shape}, {negative.shape}"
        )
    gap = nn.add(nn.scale(_cosine_node(anchor, positive), -1.0), _cosine_node(anchor, negative))
    return nn.relu(nn.add(gap, nn.constant(float(margin))))
