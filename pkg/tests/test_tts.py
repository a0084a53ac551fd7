import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from afvoice.dsp import AudioBuffer
from afvoice.errors import ConfigMismatch, InvalidConfig, SessionClosed, ShapeMismatch, SpeakerMismatch
from afvoice.events import AUDIO, TEXT
from afvoice.nn import LOG_VAR_FLOOR, MoGParams
from afvoice.rvq import CodebookSet, rvq_decode, rvq_encode
from afvoice.tts import (
    PAD,
    StreamingTTS,
    TTSConfig,
    UnmaskSchedule,
    build_training_sample,
    encode_text,
    iterative_unmask,
    sample_mog,
    synthesize,
    teacher_forced_loss,
)

TINY = TTSConfig(layers=2, heads=2, width=32, ff_width=64, max_seq_len=512, mixtures=2, head_hidden=32)


@pytest.fixture(scope="module")
def tts(toy_books):
    return StreamingTTS(toy_books, TINY, random_state=0).initialize()


def constant_head(model, mean, log_var=-50.0):
    """Make the head ignore its input and emit one component at ``mean``."""
    last = model.head.net[-1]
    M, D = model.head.mixtures, model.head.audio_dim
    with torch.no_grad():
        last.weight.zero_()
        bias = torch.full((M * (1 + 2 * D),), 0.0)
        rest = bias[M:].view(M, 2 * D)
        rest[:, :D] = torch.as_tensor(mean)
        rest[:, D:] = log_var
        last.bias.copy_(bias)


# -- schedule -------------------------------------------------------------------


def test_schedule_examples():
    assert [list(g) for g in UnmaskSchedule(4, 4).groups] == [[0], [1], [2], [3]]
    assert [len(g) for g in UnmaskSchedule(72, 4).groups] == [18] * 4
    assert UnmaskSchedule(72, 4).starts == [0, 18, 36, 54]
    with pytest.raises(InvalidConfig):
        UnmaskSchedule(3, 4)


@given(st.integers(1, 200), st.integers(1, 16))
def test_schedule_partition_properties(levels, steps):
    if steps > levels:
        return
    groups = UnmaskSchedule(levels, steps).groups
    flat = [l for g in groups for l in g]
    assert flat == list(range(levels))
    sizes = [len(g) for g in groups]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)


# -- sampling and unmasking -------------------------------------------------------


def test_sample_mog_zero_temperature_is_argmax_mean():
    p = MoGParams(torch.tensor([0.1, 2.0, -1.0]), torch.arange(6.0).view(3, 2), torch.zeros(3, 2))
    np.testing.assert_array_equal(sample_mog(p, np.random.default_rng(0), 0.0), [2.0, 3.0])


@pytest.mark.parametrize("temperature", [1.0, 0.5])
def test_sample_mog_moments(temperature):
    p = MoGParams(torch.zeros(1), torch.tensor([[1.0, -2.0]]), torch.log(torch.tensor([[4.0, 0.25]])))
    rng = np.random.default_rng(0)
    draws = np.array([sample_mog(p, rng, temperature) for _ in range(20000)])
    np.testing.assert_allclose(draws.mean(0), [1.0, -2.0], atol=0.05)
    np.testing.assert_allclose(draws.std(0), temperature * np.array([2.0, 0.5]), rtol=0.03)


def test_sample_mog_component_frequencies():
    p = MoGParams(torch.log(torch.tensor([0.2, 0.8])), torch.tensor([[-10.0], [10.0]]), torch.zeros(2, 1))
    rng = np.random.default_rng(1)
    draws = np.array([sample_mog(p, rng, 1.0)[0] for _ in range(5000)])
    assert abs(np.mean(draws > 0) - 0.8) < 0.02


def test_zero_temperature_single_mixture_gives_rvq_encode_of_mean(toy_books):
    model = StreamingTTS(toy_books, TTSConfig(**{**TINY.__dict__, "mixtures": 1})).initialize().model_
    mu = np.random.default_rng(0).standard_normal(24).astype(np.float32)
    constant_head(model, mu)
    code = iterative_unmask(torch.zeros(32), model.head, toy_books, UnmaskSchedule(8, 4), np.random.default_rng(0), 0.0)
    np.testing.assert_array_equal(code, rvq_encode(mu, toy_books))


def test_unmasking_commits_monotonically_and_never_revises(tts, toy_books):
    trace = []
    hidden = torch.randn(32)
    code = iterative_unmask(hidden, tts.model_.head, toy_books, UnmaskSchedule(8, 4), np.random.default_rng(3), 1.0, trace)
    assert [len(t) for t in trace] == [2, 4, 6, 8]
    for shorter, longer in zip(trace, trace[1:]):
        np.testing.assert_array_equal(longer[: len(shorter)], shorter)
    np.testing.assert_array_equal(trace[-1], code)


# -- teacher forcing ---------------------------------------------------------------


def test_loss_reaches_closed_form_floor_for_exact_constant_head(toy_books):
    est = StreamingTTS(toy_books, TTSConfig(**{**TINY.__dict__, "mixtures": 1})).initialize()
    code = np.arange(8) % 64
    target = rvq_decode(code, toy_books)
    constant_head(est.model_, target)
    texts = [encode_text("abc"), encode_text("hello")]
    codes = [np.tile(code, (3, 1)), np.tile(code, (5, 1))]
    with torch.no_grad():
        loss = est.loss(texts, codes).item()
    bound = 0.5 * 24 * (math.log(2 * math.pi) + LOG_VAR_FLOOR)
    assert loss == pytest.approx(bound, abs=2e-2)


def test_loss_is_invariant_to_pair_order(tts):
    rng = np.random.default_rng(0)
    texts = [list(rng.integers(0, 256, 6)) for _ in range(4)]
    codes = [rng.integers(0, 64, (6, 8)) for _ in range(4)]
    with torch.no_grad():
        a = tts.loss(texts, codes, mask_levels=2).item()
        b = tts.loss(texts[::-1], codes[::-1], mask_levels=2).item()
    assert a == pytest.approx(b, rel=1e-6)


def test_loss_rejects_length_mismatch(tts):
    with pytest.raises(ShapeMismatch):
        teacher_forced_loss(torch.zeros(1, 3, dtype=torch.long), torch.zeros(1, 4, 8, dtype=torch.long), tts.model_)
    with pytest.raises(ShapeMismatch):
        tts.loss([[1, 2]], [np.zeros((3, 8), int)])


# -- sessions -------------------------------------------------------------------------


def test_one_audio_token_per_text_token(tts):
    s = tts.new_session(seed=0)
    for i, tok in enumerate(encode_text("hello")):
        code = s.step(tok)
        assert code.shape == (8,)
        assert s.text_consumed == s.audio_emitted == i + 1


def test_sessions_are_deterministic_per_seed(tts):
    toks = encode_text("deterministic")
    out = [np.stack([s.step(t) for t in toks]) for s in (tts.new_session(7), tts.new_session(7))]
    np.testing.assert_array_equal(out[0], out[1])
    other = np.stack([tts.new_session(8).step(t) for t in toks])
    assert not np.array_equal(out[0], other)


def test_history_conditioning(tts):
    a, b = tts.new_session(0), tts.new_session(0)
    a.prime([10], [np.zeros(8, int)])
    b.prime([10], [np.full(8, 5)])
    pa, pb = a.peek(11), b.peek(11)
    assert not torch.allclose(pa.means, pb.means)


def test_session_cache_matches_teacher_forced_pass(tts):
    rng = np.random.default_rng(0)
    text = list(rng.integers(0, 256, 5))
    codes = rng.integers(0, 64, (5, 8))
    s = tts.new_session(0)
    s.prime(text[:4], codes[:4])
    streamed = s.peek(text[4])
    with torch.no_grad():
        model = tts.model_
        hidden = model.text_hidden(torch.tensor([text]), torch.tensor(codes[None]))[0, 4]
        full = model.head(hidden, torch.zeros(24))
    torch.testing.assert_close(streamed.means, full.means, atol=1e-5, rtol=1e-5)


def test_closed_session_refuses_steps(tts):
    s = tts.new_session()
    s.close()
    with pytest.raises(SessionClosed):
        s.step(1)


# -- synthesis -------------------------------------------------------------------


def test_synthesize_length_events_and_alternation(tts, small_codec):
    s = tts.new_session(1)
    audio, events = synthesize(encode_text("hello"), s, small_codec)
    assert len(audio) == 5 * 4096 and audio.sample_rate == 44100
    assert [e.kind for e in events] == [TEXT, AUDIO] * 5
    assert [e.index for e in events] == [i for i in range(5) for _ in range(2)]
    stamps = [e.timestamp_ns for e in events]
    assert stamps == sorted(stamps)


def test_synthesize_empty_text(tts, small_codec):
    audio, events = synthesize([], tts.new_session(), small_codec)
    assert len(audio) == 0 and events == []


def test_threaded_synthesis_matches_sequential(tts, small_codec):
    toks = encode_text("threads!")
    a, ea = synthesize(toks, tts.new_session(4), small_codec)
    b, eb = synthesize(toks, tts.new_session(4), small_codec, threaded=True)
    assert a.samples.tobytes() == b.samples.tobytes()
    audio_idx = [e.index for e in eb if e.kind == AUDIO]
    assert audio_idx == list(range(len(toks)))


def test_seeded_end_to_end_determinism(tts, small_codec):
    a, _ = synthesize(encode_text("same"), tts.new_session(9), small_codec)
    b, _ = synthesize(encode_text("same"), tts.new_session(9), small_codec)
    assert a.samples.tobytes() == b.samples.tobytes()


def test_synthesize_checks_codebook_compatibility(small_codec):
    other = CodebookSet(np.random.default_rng(0).standard_normal((4, 64, 24)))
    est = StreamingTTS(other, TINY).initialize()
    with pytest.raises(ConfigMismatch):
        synthesize([1, 2], est.new_session(), small_codec)


# -- training sample construction --------------------------------------------------


def seg(seconds, rate=100, value=1.0):
    return AudioBuffer(np.full(int(seconds * rate), value, np.float32), rate)


def test_single_short_segment_alone():
    out = build_training_sample([(seg(3), "spk")], np.random.default_rng(0), max_seconds=3.0)
    assert out.duration == pytest.approx(3.0)


def test_training_sample_duration_bounds():
    segments = [(seg(2, value=1), "a"), (seg(5, value=2), "a"), (seg(0.5, value=3), "a")]
    rng = np.random.default_rng(0)
    durations = [build_training_sample(segments, rng).duration for _ in range(10000)]
    assert min(durations) >= 1.0 and max(durations) <= 120.0 + 5.0


def test_mixed_speakers_rejected():
    with pytest.raises(SpeakerMismatch):
        build_training_sample([(seg(1), "a"), (seg(1), "b")], np.random.default_rng(0))


# -- estimator ----------------------------------------------------------------------


def test_estimator_save_load_and_params(tmp_path, toy_books):
    texts = [encode_text("ab"), encode_text("cde")]
    codes = [np.zeros((2, 8), int), np.ones((3, 8), int)]
    est = StreamingTTS(toy_books, TINY, n_steps=3).fit(texts, codes)
    assert len(est.loss_history_) == 3
    est.save(tmp_path / "tts.ckpt")
    back = StreamingTTS.load(tmp_path / "tts.ckpt", toy_books)
    for x, y in zip(est.predict(texts), back.predict(texts)):
        np.testing.assert_array_equal(x, y)
    with pytest.raises(ConfigMismatch):
        StreamingTTS.load(tmp_path / "tts.ckpt", CodebookSet(toy_books.codewords[:4]))
    assert clone(est).get_params()["n_steps"] == 3


def test_fit_rejects_codes_that_do_not_match_codebooks(toy_books):
    with pytest.raises(ConfigMismatch):
        StreamingTTS(toy_books, TINY, n_steps=1).fit([[1, 2]], [np.full((2, 8), 64)])
    with pytest.raises(ConfigMismatch):
        StreamingTTS(toy_books, TINY, n_steps=1).fit([[1, 2]], [np.zeros((2, 5), int)])


def test_pad_token_is_outside_byte_range():
    assert PAD == 256 and max(encode_text("ÿ")) < 256
