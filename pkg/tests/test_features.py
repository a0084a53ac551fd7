import numpy as np
import pytest
from sklearn.base import clone

from afvoice.dsp import AudioBuffer, MelSpectrogram, mel_spectrogram
from afvoice.errors import EmptyAudio, EmptyInput, RateMismatch, ShapeMismatch
from afvoice.features import (
    Adaptor,
    EncoderStem,
    FeatureExtractor,
    FeatureSequence,
    WindowPlan,
    adapt,
    chunk_windows,
    encoder_stem,
    pool_stride2,
    pooled_token_count,
    stage_frame_counts,
)

SR = 16000


def silence(seconds):
    return AudioBuffer.silence(int(seconds * SR), SR)


def test_75s_gives_three_windows_last_padded():
    chunks = chunk_windows(silence(75))
    assert len(chunks) == 3
    assert [len(w.audio) for w in chunks] == [30 * SR] * 3
    assert [w.valid_samples for w in chunks] == [30 * SR, 30 * SR, 15 * SR]
    assert not chunks.truncated


def test_30s_is_one_unpadded_window():
    (w,) = chunk_windows(silence(30)).windows
    assert w.valid_samples == len(w.audio) == 30 * SR


def test_ten_minutes_fills_the_window_cap_exactly():
    chunks = chunk_windows(silence(600), WindowPlan(max_windows=20))
    assert len(chunks) == 20 and chunks.truncated_samples == 0
    over = chunk_windows(silence(601), WindowPlan(max_windows=20))
    assert len(over) == 20 and over.truncated_samples == SR


def test_chunking_contract_errors():
    with pytest.raises(EmptyAudio):
        chunk_windows(AudioBuffer(np.zeros(0), SR))
    with pytest.raises(RateMismatch):
        chunk_windows(AudioBuffer(np.zeros(10), 44100))


def test_last_window_content_is_zero_padded_copy():
    x = np.random.default_rng(0).standard_normal(31 * SR).astype(np.float32)
    chunks = chunk_windows(AudioBuffer(x, SR))
    np.testing.assert_array_equal(chunks[1].audio.samples[:SR], x[30 * SR :])
    assert not chunks[1].audio.samples[SR:].any()


def test_stem_30s_gives_1500_frames_at_50hz():
    mel = mel_spectrogram(silence(30))
    out = encoder_stem(mel, EncoderStem(width=16))
    assert len(mel) == 3000 and len(out) == 1500 and out.frame_rate == 50 and out.dim == 16


def test_stem_single_frame():
    mel = MelSpectrogram(np.ones((1, 128), np.float32), 128, 0.01, 0.025, SR)
    assert len(encoder_stem(mel, EncoderStem(width=8))) == 1


@pytest.mark.parametrize("n", [1, 2, 5, 3000, 3001])
def test_stem_frame_count_is_ceil_half(n):
    mel = MelSpectrogram(np.zeros((n, 128), np.float32), 128, 0.01, 0.025, SR)
    assert len(encoder_stem(mel, EncoderStem(width=4))) == -(-n // 2)


def test_identity_stem_equals_strided_projection():
    rng = np.random.default_rng(0)
    frames = rng.standard_normal((11, 128)).astype(np.float32)
    mel = MelSpectrogram(frames, 128, 0.01, 0.025, SR)
    stem = EncoderStem(width=64, activation="identity", init="identity")
    got = encoder_stem(mel, stem).frames
    # identity centre taps: output t is input 2t, restricted to the first 64 channels
    np.testing.assert_allclose(got, frames[0::2, :64], atol=1e-6)


def test_stem_matches_direct_convolution():
    rng = np.random.default_rng(1)
    frames = rng.standard_normal((9, 128))
    stem = EncoderStem(width=5, activation="identity", seed=3)
    got = encoder_stem(MelSpectrogram(frames.astype(np.float32), 128, 0.01, 0.025, SR), stem).frames
    padded = np.vstack([np.zeros((1, 128)), frames.astype(np.float32), np.zeros((1, 128))])
    h = np.array([sum(stem.w1[:, :, j] @ padded[t + j] for j in range(3)) for t in range(9)])
    hp = np.vstack([np.zeros((1, 5)), h, np.zeros((1, 5))])
    expected = np.array([sum(stem.w2[:, :, j] @ hp[2 * t + j] for j in range(3)) for t in range(5)])
    np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-5)


def test_stem_rejects_wrong_channel_count():
    mel = MelSpectrogram(np.zeros((4, 80), np.float32), 80, 0.01, 0.025, SR)
    with pytest.raises(ShapeMismatch):
        encoder_stem(mel, EncoderStem())


def test_pool_examples():
    v, w = np.array([1.0, 2.0]), np.array([3.0, 6.0])
    out = pool_stride2(FeatureSequence(np.stack([v, w]), 50))
    np.testing.assert_allclose(out.frames, [[2.0, 4.0]])
    same = pool_stride2(FeatureSequence(np.stack([v, v]), 50))
    np.testing.assert_allclose(same.frames, [v])
    assert len(pool_stride2(FeatureSequence(np.zeros((1500, 3)), 50))) == 750
    assert len(pool_stride2(FeatureSequence(np.zeros((3, 3)), 50))) == 1


def test_pool_errors():
    with pytest.raises(EmptyInput):
        pool_stride2(FeatureSequence(np.zeros((0, 3)), 50))
    with pytest.raises(RateMismatch):
        pool_stride2(FeatureSequence(np.zeros((4, 3)), 25))


def test_adaptor_identity_and_matrix_oracle():
    x = np.random.default_rng(0).standard_normal((7, 6)).astype(np.float32)
    feats = FeatureSequence(x, 25)
    np.testing.assert_allclose(adapt(feats, Adaptor(6, 6, activation="identity", init="identity")).frames, x)
    proj = Adaptor(6, 4, hidden=5, activation="identity", seed=2)
    np.testing.assert_allclose(adapt(feats, proj).frames, x @ proj.w1.T @ proj.w2.T, rtol=1e-5, atol=1e-6)
    with pytest.raises(ShapeMismatch):
        adapt(feats, Adaptor(5, 4))


def test_frame_arithmetic():
    assert stage_frame_counts() == (3000, 1500, 750)
    assert pooled_token_count(30.0) == 750
    assert pooled_token_count(75.0) == 2250
    assert pooled_token_count(600.0) == 15000


def test_extractor_end_to_end_resamples_and_tracks_valid_frames():
    rng = np.random.default_rng(0)
    audio = AudioBuffer(rng.standard_normal(44100 * 45).astype(np.float32) * 0.1, 44100)
    fx = FeatureExtractor(encoder_width=8, lm_width=6).fit()
    chunks, stages = fx.stages(audio)
    assert len(chunks) == 2
    mel, stem, pooled, out = stages[1]
    assert (len(mel), len(stem), len(pooled)) == (3000, 1500, 750)
    assert pooled.valid_frames == 375 and out.dim == 6 and out.frame_rate == 25
    threaded = FeatureExtractor(encoder_width=8, lm_width=6, n_jobs=2).fit().transform(audio)
    for a, b in zip(fx.transform(audio), threaded):
        np.testing.assert_array_equal(a.frames, b.frames)


def test_extractor_params_round_trip():
    fx = FeatureExtractor(encoder_width=12)
    assert clone(fx).get_params() == fx.get_params()
    with pytest.raises(EmptyAudio):
        fx.fit().transform([])
