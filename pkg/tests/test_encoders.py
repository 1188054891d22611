"""Acoustic model, sequence encoders, and cosine scoring."""

import numpy as np
import pytest

from cladkws import corpus, nn
from cladkws.encoders import (
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
    frame_accuracy,
)
from cladkws.errors import ContractError, DomainError


@pytest.fixture(scope="module")
def tiny_corpus():
    inv = corpus.synth_inventory(6, 4, seed=0, separation=2.0)
    lex = corpus.synth_lexicon(inv, 5, seed=1, min_len=3, max_len=5)
    recs = [corpus.synth_utterance(inv, lex, 3, 0.0, 0, seed=s) for s in range(24)]
    return inv, lex, recs


def _am_config(inv, **kw):
    base = dict(feature_dim=inv.feature_dim, num_phonemes=inv.num_phonemes,
                hidden=16, projection=8, memory_layers=2, left_context=4, right_context=1)
    base.update(kw)
    return AcousticModelConfig(**base)


class TestAcousticModel:
    def test_single_frame_shape(self, tiny_corpus):
        inv, _, _ = tiny_corpus
        model = AcousticModel(_am_config(inv), seed=1)
        reps = am_forward(model, np.zeros((1, inv.feature_dim)))
        assert reps.shape == (1, model.config.projection)

    def test_deterministic(self, tiny_corpus):
        inv, _, recs = tiny_corpus
        model = AcousticModel(_am_config(inv), seed=1)
        a = am_forward(model, recs[0].features)
        b = am_forward(model, recs[0].features)
        np.testing.assert_array_equal(a, b)

    def test_receptive_field_single_memory_layer(self, tiny_corpus):
        # left 10 / right 1 with one memory layer: frame t+2 is out of reach
        inv, _, _ = tiny_corpus
        cfg = _am_config(inv, memory_layers=1, left_context=10, right_context=1)
        model = AcousticModel(cfg, seed=3)
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(30, inv.feature_dim))
        base = am_forward(model, feats)
        t = 12
        bumped = feats.copy()
        bumped[t + 2] += 5.0
        np.testing.assert_array_equal(am_forward(model, bumped)[t], base[t])
        bumped = feats.copy()
        bumped[t + 1] += 5.0
        assert not np.array_equal(am_forward(model, bumped)[t], base[t])

    def test_lookahead_scales_with_layers(self, tiny_corpus):
        inv, _, _ = tiny_corpus
        cfg = _am_config(inv, memory_layers=3, right_context=1)
        assert AcousticModel(cfg).lookahead_frames == 3

    def test_posteriors_rows_normalized(self, tiny_corpus):
        inv, _, recs = tiny_corpus
        model = AcousticModel(_am_config(inv), seed=1)
        post = model.posteriors(recs[0].features)
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)


class TestPretrain:
    def test_zero_epochs_returns_frozen_unchanged(self, tiny_corpus):
        inv, _, recs = tiny_corpus
        model = AcousticModel(_am_config(inv), seed=2)
        before = {k: v.data.copy() for k, v in model.parameters().items()}
        model, history = am_pretrain(model, recs, epochs=0, lr=0.01)
        assert model.frozen
        assert len(history) == 1
        for k, v in model.parameters().items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_learns_separable_corpus(self, tiny_corpus):
        inv, _, recs = tiny_corpus
        model = AcousticModel(_am_config(inv), seed=2)
        model, history = am_pretrain(model, recs, epochs=8, lr=0.05, seed=0)
        assert history[-1] < history[0]
        _, held = corpus.holdout_split(recs, 0.1)
        assert frame_accuracy(model, held or recs) > 0.95
        assert model.frozen

    def test_frozen_params_take_no_gradient(self, tiny_corpus):
        inv, _, recs = tiny_corpus
        model = AcousticModel(_am_config(inv), seed=2)
        model, _ = am_pretrain(model, recs, epochs=0, lr=0.01)
        reps, logits = model.forward(recs[0].features)
        assert not reps.requires_grad and not logits.requires_grad


@pytest.fixture(scope="module")
def audio_encoder():
    return AcousticEncoder(EncoderConfig(input_dim=8, layers=2, hidden=8, projection=6, embedding_dim=10), seed=4)


@pytest.fixture(scope="module")
def text_encoder():
    return TextEncoder(EncoderConfig(input_dim=8, layers=2, hidden=8, projection=6, embedding_dim=10), num_phonemes=6, seed=5)


class TestAcousticEncoder:
    def test_attention_weights_are_distribution(self, audio_encoder):
        rng = np.random.default_rng(1)
        seg = rng.normal(size=(9, 8))
        steps = [nn.constant(seg[None, t]) for t in range(9)]
        _, _, attn = audio_encoder.encode_steps(steps)
        np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-12)
        assert (attn.data >= 0).all()

    def test_single_frame_pooled_equals_frame_state(self, audio_encoder):
        rng = np.random.default_rng(2)
        seg = rng.normal(size=(1, 8))
        steps = [nn.constant(seg)]
        _, pooled, attn = audio_encoder.encode_steps(steps)
        np.testing.assert_allclose(attn.data, [[1.0]], atol=1e-15)
        # with one frame, pooling must reproduce that frame's top-layer state
        x = steps
        for layer in audio_encoder.layers:
            h = nn.constant(np.zeros((1, layer["fwd"].hidden_dim)))
            f = layer["fwd"].step(x[0], h)
            b = layer["bwd"].step(x[0], nn.constant(np.zeros((1, layer["bwd"].hidden_dim))))
            x = [nn.add(nn.matmul(nn.concat([f, b], axis=1), layer["w_p"]), layer["b_p"])]
        np.testing.assert_allclose(pooled.data, x[0].data, atol=1e-12)

    def test_order_sensitivity(self, audio_encoder):
        rng = np.random.default_rng(3)
        seg = rng.normal(size=(7, 8))
        emb = encode_audio(audio_encoder, seg)
        emb_shuffled = encode_audio(audio_encoder, seg[::-1].copy())
        assert not np.allclose(emb, emb_shuffled)

    def test_empty_segment_rejected(self, audio_encoder):
        with pytest.raises(ContractError):
            encode_audio(audio_encoder, np.zeros((0, 8)))

    def test_batch_matches_single(self, audio_encoder):
        rng = np.random.default_rng(4)
        segs = [rng.normal(size=(6, 8)) for _ in range(3)]
        batch = audio_encoder.encode_segments(segs).data
        for i, seg in enumerate(segs):
            np.testing.assert_allclose(batch[i], encode_audio(audio_encoder, seg), atol=1e-12)


class TestTextEncoder:
    def test_deterministic(self, text_encoder):
        a = encode_text(text_encoder, (0, 2, 4))
        b = encode_text(text_encoder, (0, 2, 4))
        np.testing.assert_array_equal(a, b)

    def test_one_phoneme_difference_changes_embedding(self, text_encoder):
        a = encode_text(text_encoder, (0, 2, 4))
        b = encode_text(text_encoder, (0, 3, 4))
        assert not np.allclose(a, b)

    def test_length_one_sequence(self, text_encoder):
        emb = encode_text(text_encoder, (5,))
        assert emb.shape == (10,)
        assert np.isfinite(emb).all()

    def test_unknown_phoneme_rejected(self, text_encoder):
        with pytest.raises(ContractError):
            encode_text(text_encoder, (0, 99))
        with pytest.raises(ContractError):
            encode_text(text_encoder, ())


class TestCosine:
    def test_self_similarity(self):
        x = np.array([1.0, 2.0, -3.0])
        assert cosine_sim(x, x) == pytest.approx(1.0)

    def test_opposite(self):
        x = np.array([1.0, 2.0, -3.0])
        assert cosine_sim(x, -x) == pytest.approx(-1.0)

    def test_orthogonal(self):
        assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 5.0])) == pytest.approx(0.0, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=6), rng.normal(size=6)
        assert cosine_sim(2.5 * a, 7.1 * b) == pytest.approx(cosine_sim(a, b), abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(DomainError):
            cosine_sim(np.zeros(3), np.ones(3))

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ContractError):
            cosine_sim(np.ones(3), np.ones(4))
