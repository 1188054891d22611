"""Contrastive losses against an independent direct-summation reference."""

import math

import numpy as np
import pytest

from cladkws import nn
from cladkws.errors import ContractError
from cladkws.loss import (
    BatchEmbeddings,
    CladLossResult,
    LossConfig,
    build_similarity_table,
    loss_audio_audio,
    loss_audio_text,
    loss_clad,
    loss_triplet,
)

# --- scalar reference implementations (kept independent of the graph code) --


def _cos(a, b):
    num = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    return num / (na * nb)


def ref_audio_text(text, positives, owners, tau, normalize="mean", skip_cols=None):
    terms = []
    for p_vec, j in zip(positives, owners):
        numer = math.exp(_cos(p_vec, text[j]) / tau)
        denom = numer
        for w in range(len(text)):
            if w == j or (skip_cols is not None and skip_cols(j, w)):
                continue
            denom += math.exp(_cos(p_vec, text[w]) / tau)
        terms.append(-math.log(numer / denom))
    return sum(terms) / len(terms) if normalize == "mean" else sum(terms)


def ref_audio_audio(pos_groups, neg_groups, tau, normalize="mean"):
    terms = []
    for pos, neg in zip(pos_groups, neg_groups):
        if len(pos) < 2 or len(neg) < 1:
            continue
        for k in range(len(pos)):
            for l in range(len(pos)):
                if k == l:
                    continue
                numer = math.exp(_cos(pos[k], pos[l]) / tau)
                denom = numer + sum(math.exp(_cos(pos[k], nx) / tau) for nx in neg)
                terms.append(-math.log(numer / denom))
    if not terms:
        return 0.0
    return sum(terms) / len(terms) if normalize == "mean" else sum(terms)


def random_batch(rng, num_keywords, n_pos, m_neg, dim=6):
    text = rng.normal(size=(num_keywords, dim))
    positives = rng.normal(size=(num_keywords * n_pos, dim))
    negatives = rng.normal(size=(num_keywords * m_neg, dim))
    pos_owner = np.repeat(np.arange(num_keywords), n_pos)
    neg_owner = np.repeat(np.arange(num_keywords), m_neg)
    batch = BatchEmbeddings(
        text=nn.constant(text),
        positives=nn.constant(positives),
        pos_owner=pos_owner,
        negatives=nn.constant(negatives),
        neg_owner=neg_owner,
        words=[f"w{j}" for j in range(num_keywords)],
    )
    groups_p = [positives[pos_owner == j] for j in range(num_keywords)]
    groups_n = [negatives[neg_owner == j] for j in range(num_keywords)]
    return batch, text, positives, pos_owner, groups_p, groups_n


class TestAudioTextLoss:
    def test_matches_reference_on_random_batches(self):
        rng = np.random.default_rng(0)
        for trial in range(30):
            k = int(rng.integers(2, 6))
            batch, text, positives, owner, _, _ = random_batch(rng, k, n_pos=3, m_neg=2)
            got = loss_audio_text(batch, tau_at=0.12).item()
            want = ref_audio_text(text.tolist(), positives.tolist(), owner.tolist(), 0.12)
            assert got == pytest.approx(want, abs=1e-10)

    def test_equal_logit_closed_form(self):
        for m in (1, 4, 8, 64):
            k = m + 1
            vec = np.tile(np.array([0.3, -0.8, 0.5]), (1, 1))
            text = np.tile(vec, (k, 1))
            positives = np.tile(vec, (k, 1))
            batch = BatchEmbeddings(
                text=nn.constant(text),
                positives=nn.constant(positives),
                pos_owner=np.arange(k),
            )
            got = loss_audio_text(batch, tau_at=0.12).item()
            assert got == pytest.approx(math.log(1 + m), abs=1e-10)

    def test_opposed_negatives_closed_form(self):
        tau = 0.12
        e = np.array([1.0, 0.0])
        text = np.stack([e, -e])
        positives = np.stack([e, -e])  # each keyword's positive equals its text
        batch = BatchEmbeddings(
            text=nn.constant(text), positives=nn.constant(positives), pos_owner=np.array([0, 1])
        )
        got = loss_audio_text(batch, tau_at=tau).item()
        want = math.log(1 + 1 * math.exp(-2 / tau))
        assert got == pytest.approx(want, abs=1e-12)

    def test_single_keyword_rejected(self):
        batch = BatchEmbeddings(
            text=nn.constant(np.ones((1, 4))),
            positives=nn.constant(np.ones((2, 4))),
            pos_owner=np.zeros(2, dtype=int),
        )
        with pytest.raises(ContractError, match="keywords"):
            loss_audio_text(batch, tau_at=0.12)

    def test_sum_mode_scales_by_term_count(self):
        rng = np.random.default_rng(1)
        batch, text, positives, owner, _, _ = random_batch(rng, 3, n_pos=2, m_neg=2)
        mean_loss = loss_audio_text(batch, 0.12, normalize="mean").item()
        sum_loss = loss_audio_text(batch, 0.12, normalize="sum").item()
        assert sum_loss == pytest.approx(mean_loss * positives.shape[0], abs=1e-9)

    def test_dedup_masks_duplicate_words(self):
        rng = np.random.default_rng(2)
        batch, text, positives, owner, _, _ = random_batch(rng, 3, n_pos=2, m_neg=1)
        batch.words = ["same", "other", "same"]
        got = loss_audio_text(batch, 0.12, dedup_text=True).item()
        words = batch.words

        def skip(j, w):
            return words[j] == words[w]

        want = ref_audio_text(text.tolist(), positives.tolist(), owner.tolist(), 0.12, skip_cols=skip)
        assert got == pytest.approx(want, abs=1e-10)


class TestAudioAudioLoss:
    def test_matches_reference_on_random_batches(self):
        rng = np.random.default_rng(3)
        for trial in range(30):
            k = int(rng.integers(1, 5))
            n = int(rng.integers(2, 5))
            m = int(rng.integers(1, 6))
            batch, _, _, _, groups_p, groups_n = random_batch(rng, k, n_pos=n, m_neg=m)
            got, skipped = loss_audio_audio(batch, tau_aa=0.2)
            want = ref_audio_audio(
                [g.tolist() for g in groups_p], [g.tolist() for g in groups_n], 0.2
            )
            assert skipped == 0
            assert got.item() == pytest.approx(want, abs=1e-10)

    def test_equal_logit_closed_form(self):
        for m in (1, 4, 8, 64):
            vec = np.array([[0.3, -0.8, 0.5]])
            batch = BatchEmbeddings(
                text=nn.constant(np.tile(vec, (2, 1))),
                positives=nn.constant(np.tile(vec, (4, 1))),
                pos_owner=np.repeat(np.arange(2), 2),
                negatives=nn.constant(np.tile(vec, (2 * m, 1))),
                neg_owner=np.repeat(np.arange(2), m),
            )
            got, _ = loss_audio_audio(batch, tau_aa=0.2)
            assert got.item() == pytest.approx(math.log(1 + m), abs=1e-10)

    def test_ordered_pair_count_via_sum_mode(self):
        # N=2 gives exactly 2 ordered pairs per keyword
        vec = np.array([[1.0, 0.2]])
        k, n, m = 3, 2, 4
        batch = BatchEmbeddings(
            text=nn.constant(np.tile(vec, (k, 1))),
            positives=nn.constant(np.tile(vec, (k * n, 1))),
            pos_owner=np.repeat(np.arange(k), n),
            negatives=nn.constant(np.tile(vec, (k * m, 1))),
            neg_owner=np.repeat(np.arange(k), m),
        )
        total, _ = loss_audio_audio(batch, tau_aa=0.2, normalize="sum")
        per_term = math.log(1 + m)
        assert total.item() == pytest.approx(k * n * (n - 1) * per_term, abs=1e-9)

    def test_underfilled_keywords_are_skipped(self):
        rng = np.random.default_rng(4)
        text = rng.normal(size=(2, 4))
        positives = rng.normal(size=(3, 4))  # kw0 has 2, kw1 has 1 (skipped)
        negatives = rng.normal(size=(2, 4))  # all owned by kw0
        batch = BatchEmbeddings(
            text=nn.constant(text),
            positives=nn.constant(positives),
            pos_owner=np.array([0, 0, 1]),
            negatives=nn.constant(negatives),
            neg_owner=np.array([0, 0]),
        )
        got, skipped = loss_audio_audio(batch, tau_aa=0.2)
        assert skipped == 1
        want = ref_audio_audio([positives[:2].tolist()], [negatives.tolist()], 0.2)
        assert got.item() == pytest.approx(want, abs=1e-10)

    def test_missing_negatives_rejected(self):
        batch = BatchEmbeddings(
            text=nn.constant(np.ones((2, 3))),
            positives=nn.constant(np.ones((4, 3))),
            pos_owner=np.repeat(np.arange(2), 2),
        )
        with pytest.raises(ContractError):
            loss_audio_audio(batch, tau_aa=0.2)


class TestCombinedLoss:
    def test_alpha_zero_is_audio_text_only(self):
        rng = np.random.default_rng(5)
        batch, text, positives, owner, _, _ = random_batch(rng, 3, 2, 3)
        res = loss_clad(batch, LossConfig(alpha=0.0))
        assert res.audio_audio is None
        assert res.total.item() == loss_audio_text(batch, 0.12).item()

    def test_weighted_combination_exact(self):
        rng = np.random.default_rng(6)
        batch, *_ = random_batch(rng, 3, 3, 2)
        cfg = LossConfig(alpha=0.15)
        res = loss_clad(batch, cfg)
        assert res.total.item() == pytest.approx(
            0.15 * res.audio_audio.item() + res.audio_text.item(), abs=1e-12
        )

    def test_alpha_collinearity(self):
        rng = np.random.default_rng(7)
        batch, *_ = random_batch(rng, 4, 2, 3)
        values = {}
        for alpha in (0.0, 0.15, 1.0):
            values[alpha] = loss_clad(batch, LossConfig(alpha=alpha)).total.item()
        interpolated = values[0.0] + 0.15 * (values[1.0] - values[0.0])
        assert values[0.15] == pytest.approx(interpolated, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        k, n, m, dim = 2, 2, 3, 4
        text = nn.parameter(rng.normal(size=(k, dim)))
        positives = nn.parameter(rng.normal(size=(k * n, dim)))
        negatives = nn.parameter(rng.normal(size=(k * m, dim)))
        params = [text, positives, negatives]

        def make():
            return BatchEmbeddings(
                text=text,
                positives=positives,
                pos_owner=np.repeat(np.arange(k), n),
                negatives=negatives,
                neg_owner=np.repeat(np.arange(k), m),
            )

        cfg = LossConfig()
        loss_clad(make(), cfg).total.backward()
        from test_nn import assert_grads_close, finite_difference

        numeric = finite_difference(lambda: loss_clad(make(), cfg).total.item(), params)
        assert_grads_close([p.grad for p in params], numeric)

    def test_large_temperature_limit(self):
        rng = np.random.default_rng(9)
        k, n, m = 4, 3, 5
        batch, *_ = random_batch(rng, k, n, m)
        at = loss_audio_text(batch, tau_at=1e6).item()
        assert at == pytest.approx(math.log(k), abs=1e-6)  # 1 + (k-1) in-batch negatives
        aa, _ = loss_audio_audio(batch, tau_aa=1e6)
        assert aa.item() == pytest.approx(math.log(1 + m), abs=1e-6)

    def test_monotone_in_similarities(self):
        # move one negative toward the anchor: loss must not decrease;
        # move the text toward its positive: loss must not increase
        rng = np.random.default_rng(10)
        batch, text, positives, owner, gp, gn = random_batch(rng, 2, 2, 2)
        base = loss_clad(batch, LossConfig()).total.item()
        anchor = positives[0]
        harder_negs = batch.negatives.data.copy()
        harder_negs[0] = 0.9 * anchor + 0.1 * harder_negs[0]
        batch_harder = BatchEmbeddings(
            text=batch.text,
            positives=batch.positives,
            pos_owner=batch.pos_owner,
            negatives=nn.constant(harder_negs),
            neg_owner=batch.neg_owner,
        )
        assert loss_clad(batch_harder, LossConfig()).total.item() >= base - 1e-12

    def test_similarity_table_entries_bounded(self):
        rng = np.random.default_rng(11)
        batch, *_ = random_batch(rng, 3, 2, 2)
        table = build_similarity_table(batch)
        assert np.all(np.abs(table.audio_text) <= 1 + 1e-12)
        for ppij, pnij in zip(table.pos_pos, table.pos_neg):
            assert np.all(np.abs(ppij) <= 1 + 1e-12)
            assert np.all(np.abs(pnij) <= 1 + 1e-12)


class TestTripletLoss:
    def test_inactive_hinge(self):
        a = nn.constant(np.array([[1.0, 0.0]]))
        assert loss_triplet(a, a, nn.constant(np.array([[-1.0, 0.0]])), margin=0.5).item() == 0.0

    def test_hand_computed_random_triple(self):
        rng = np.random.default_rng(12)
        a, p, n = rng.normal(size=(3, 5))
        want = max(0.0, 0.4 - _cos(a.tolist(), p.tolist()) + _cos(a.tolist(), n.tolist()))
        got = loss_triplet(
            nn.constant(a[None]), nn.constant(p[None]), nn.constant(n[None]), margin=0.4
        ).item()
        assert got == pytest.approx(want, abs=1e-12)

    def test_active_hinge_value(self):
        a = np.array([[0.0, 1.0]])
        p = np.array([[1.0, 0.0]])  # cos 0
        n = np.array([[0.0, 2.0]])  # cos 1
        got = loss_triplet(nn.constant(a), nn.constant(p), nn.constant(n), margin=0.25).item()
        assert got == pytest.approx(1.25, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            loss_triplet(nn.constant(np.ones((1, 2))), nn.constant(np.ones((1, 3))),
                         nn.constant(np.ones((1, 2))), margin=0.1)
