"""Streaming detector: segmentation, chunking equivalence, cooldown, baseline."""

import numpy as np
import pytest

from cladkws import corpus
from cladkws.encoders import (
    AcousticEncoder,
    AcousticModel,
    AcousticModelConfig,
    EncoderConfig,
    TextEncoder,
    am_pretrain,
    encode_text,
)
from cladkws.errors import ContractError
from cladkws.stream import (
    StreamState,
    baseline_scores,
    detect,
    detect_baseline,
    detect_chunked,
    enroll,
    finish,
    push,
    segment_stream,
    smooth_posteriors,
    window_scores,
)
from cladkws.trainer import ModelBundle
from cladkws.windowing import WindowConfig


class TestSegmentStream:
    def test_half_overlap_grid(self):
        got = segment_stream(300, 100)
        assert [s for s, _ in got] == [0, 50, 100, 150, 200]

    def test_track_shorter_than_window(self):
        assert segment_stream(80, 100) == [(0, 80)]

    def test_tail_clamped(self):
        got = segment_stream(310, 100)
        assert got[-1] == (210, 310)

    def test_full_coverage_exhaustive(self):
        for t in range(2, 501):
            for w in (2, 5, 24, 100):
                windows = segment_stream(t, w)
                covered = np.zeros(t, dtype=bool)
                for s, e in windows:
                    assert 0 <= s < e <= t
                    covered[s:e] = True
                assert covered.all(), (t, w)

    def test_adjacent_overlap_except_tail(self):
        for t, w in [(300, 100), (307, 100), (41, 8)]:
            windows = segment_stream(t, w)
            hop = w // 2
            for (s0, _), (s1, _) in zip(windows[:-2], windows[1:-1]):
                assert s1 - s0 == hop


@pytest.fixture(scope="module")
def world():
    inv = corpus.synth_inventory(10, 5, seed=0, separation=2.2)
    lex = corpus.synth_lexicon(inv, 8, seed=1, min_len=4, max_len=8)
    recs = [corpus.synth_utterance(inv, lex, 5, 0.05, 1, seed=s) for s in range(30)]
    am = AcousticModel(
        AcousticModelConfig(feature_dim=inv.feature_dim, num_phonemes=inv.num_phonemes,
                            hidden=16, projection=8, memory_layers=2, left_context=4, right_context=1),
        seed=7,
    )
    am, _ = am_pretrain(am, recs, epochs=6, lr=0.1, seed=0)
    enc_cfg = dict(input_dim=8, layers=1, hidden=8, projection=6, embedding_dim=8)
    bundle = ModelBundle(
        am=am,
        audio_encoder=AcousticEncoder(EncoderConfig(**enc_cfg), seed=3),
        text_encoder=TextEncoder(EncoderConfig(**enc_cfg), inv.num_phonemes, seed=4),
    )
    window_cfg = WindowConfig(t_mean_ms=55.0, l_margin_ms=150.0)
    return inv, lex, recs, bundle, window_cfg


def _fresh_state(world, words=None):
    inv, lex, recs, bundle, window_cfg = world
    state = StreamState(bundle=bundle)
    for w in words or sorted(lex)[:2]:
        enroll(state, w, lex[w], window_cfg)
    return state


class TestEnroll:
    def test_cached_embedding_matches_encoder(self, world):
        inv, lex, recs, bundle, window_cfg = world
        state = _fresh_state(world)
        word = sorted(lex)[0]
        np.testing.assert_array_equal(
            state.enrolled[word].embedding, encode_text(bundle.text_encoder, lex[word])
        )

    def test_reenroll_replaces_entry(self, world):
        inv, lex, recs, bundle, window_cfg = world
        state = _fresh_state(world)
        word = sorted(lex)[0]
        enroll(state, word, lex[word], window_cfg)
        assert list(state.enrolled).count(word) == 1

    def test_independent_cooldowns(self, world):
        state = _fresh_state(world)
        words = sorted(state.enrolled)
        state.enrolled[words[0]].cooldown_until = 5.0
        assert state.enrolled[words[1]].cooldown_until == 0.0

    def test_empty_sequence_rejected(self, world):
        state = _fresh_state(world)
        with pytest.raises(ContractError):
            enroll(state, "x", ())


class TestDetect:
    def test_streaming_matches_whole_track(self, world):
        inv, lex, recs, bundle, window_cfg = world
        for rec in recs[:6]:
            whole = detect(_fresh_state(world), rec.features, threshold=-1.1)
            chunked = detect_chunked(_fresh_state(world), rec.features, threshold=-1.1, chunk_frames=1)
            assert len(whole) == len(chunked)
            for a, b in zip(whole, chunked):
                assert a.keyword == b.keyword
                assert a.start_s == b.start_s and a.end_s == b.end_s
                assert abs(a.score - b.score) < 1e-12

    def test_streaming_matches_random_chunkings(self, world):
        inv, lex, recs, bundle, window_cfg = world
        rec = recs[7]
        whole = detect(_fresh_state(world), rec.features, threshold=-1.1)
        for chunk in (3, 17, 64):
            got = detect_chunked(_fresh_state(world), rec.features, threshold=-1.1, chunk_frames=chunk)
            assert [(e.keyword, e.start_s) for e in got] == [(e.keyword, e.start_s) for e in whole]
            assert np.allclose([e.score for e in got], [e.score for e in whole], atol=1e-12)

    def test_no_events_below_threshold(self, world):
        inv, lex, recs, bundle, window_cfg = world
        events = detect(_fresh_state(world), recs[0].features, threshold=1.1)
        assert events == []

    def test_no_enrollment_rejected(self, world):
        inv, lex, recs, bundle, window_cfg = world
        state = StreamState(bundle=bundle)
        with pytest.raises(ContractError):
            detect(state, recs[0].features, 0.5)

    def test_cooldown_suppresses_nearby_events(self, world):
        inv, lex, recs, bundle, window_cfg = world
        word = sorted(lex)[0]
        state = _fresh_state(world, words=[word])
        # threshold -1.1 makes every window fire; windows are ~0.3 s apart,
        # so within each 1 s stretch only the first can emit
        track = recs[1].features
        events = detect(state, track, threshold=-1.1)
        times = [e.start_s for e in events]
        assert times, "expected at least one event"
        for a, b in zip(times, times[1:]):
            assert b - a >= 1.0 - 1e-9

    def test_events_for_different_keywords_not_mutually_suppressed(self, world):
        inv, lex, recs, bundle, window_cfg = world
        words = sorted(lex)[:2]
        state = _fresh_state(world, words=words)
        events = detect(state, recs[2].features, threshold=-1.1)
        seen = {w: [e.start_s for e in events if e.keyword == w] for w in words}
        assert all(seen[w] for w in words)
        for w in words:
            for a, b in zip(seen[w], seen[w][1:]):
                assert b - a >= 1.0 - 1e-9

    def test_finish_idempotent(self, world):
        inv, lex, recs, bundle, window_cfg = world
        state = _fresh_state(world)
        push(state, recs[0].features, 0.0)
        finish(state, 0.0)
        assert finish(state, 0.0) == []

    def test_window_scores_match_detect_scores(self, world):
        inv, lex, recs, bundle, window_cfg = world
        word = sorted(lex)[0]
        state = _fresh_state(world, words=[word])
        rec = recs[3]
        table = window_scores(state, rec.features)[word]
        state2 = _fresh_state(world, words=[word])
        events = detect(state2, rec.features, threshold=-1.1)
        # the first event's window must appear in the score table with
        # exactly the same score
        first = events[0]
        rate = bundle.frame_rate_hz
        match = [s for (rng_, s) in table if rng_[0] / rate == first.start_s]
        assert match and abs(match[0] - first.score) < 1e-12


class TestBaseline:
    def _posteriors(self, world, rec):
        inv, lex, recs, bundle, window_cfg = world
        return bundle.am.posteriors(rec.features)

    def test_smoothing_window_one_is_identity(self, world):
        inv, lex, recs, bundle, window_cfg = world
        post = self._posteriors(world, recs[0])
        np.testing.assert_array_equal(smooth_posteriors(post, 1), post.astype(np.float64))

    def test_smoothing_matches_naive_average(self, world):
        post = self._posteriors(world, world[2][0])
        w = 5
        got = smooth_posteriors(post, w)
        for t in range(post.shape[0]):
            lo = max(0, t - w + 1)
            np.testing.assert_allclose(got[t], post[lo : t + 1].mean(axis=0), atol=1e-12)

    def test_present_keyword_fires_absent_does_not(self, world):
        inv, lex, recs, bundle, window_cfg = world
        # zero-noise corpus: posteriors are near-one-hot after pre-training
        clean = [corpus.synth_utterance(inv, lex, 4, 0.0, 0, seed=900 + s) for s in range(8)]
        target = None
        for rec in clean:
            for w in rec.words:
                if len(w.phoneme_ids) >= 5:
                    target, rec_with = w, rec
                    break
            if target:
                break
        assert target is not None
        window = int(round(len(target.phoneme_ids) * 5.5 + 15))
        post = bundle.am.posteriors(rec_with.features)
        events = detect_baseline(
            post, target.phoneme_ids, smoothing_window=3, threshold=0.5,
            window_frames=window, frame_rate_hz=100.0, keyword=target.word,
        )
        assert len(events) >= 1
        absent = [r for r in clean if all(w.word != target.word for w in r.words)]
        assert absent
        for rec in absent[:3]:
            post = bundle.am.posteriors(rec.features)
            scores = baseline_scores(post, target.phoneme_ids, 3, window_frames=window)
            present_scores = [e.score for e in events]
            assert scores.max() < min(present_scores)

    def test_cooldown_applies(self, world):
        inv, lex, recs, bundle, window_cfg = world
        post = np.full((400, inv.num_phonemes), 1.0 / inv.num_phonemes)
        events = detect_baseline(
            post, (0, 1), smoothing_window=1, threshold=0.0,
            window_frames=20, frame_rate_hz=100.0,
        )
        times = [e.start_s for e in events]
        for a, b in zip(times, times[1:]):
            assert b - a >= 1.0 - 1e-9
