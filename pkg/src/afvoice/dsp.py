"""Signal-processing kernels: audio container, resampling, STFT/iSTFT and mel features.

Everything here is a pure function of its arguments. Transforms accumulate in
float64 and hand back float32 storage unless the caller passes float64 data,
in which case float64 is preserved end to end (used by the round-trip tests).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
import math

import numpy as np
from scipy import signal as sps

from .errors import EmptyAudio, InvalidConfig, InvalidSignal, ShapeMismatch

# Mel-scale constants surfaced through the run config.
MEL_SCALE = "htk"
MEL_NORM = None
LOG_FLOOR = 1e-10

RESAMPLER_TAPS_PER_PHASE = 32
RESAMPLER_KAISER_BETA = 8.0


def _as_storage(samples) -> np.ndarray:
    arr = np.asarray(samples)
    if arr.dtype == np.float64:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float32)


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono audio. ``samples`` is float32 unless float64 was passed in."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = _as_storage(self.samples)
        if arr.ndim != 1:
            raise ShapeMismatch(f"audio must be 1-D mono, got shape {arr.shape}")
        if int(self.sample_rate) <= 0:
            raise InvalidConfig(f"sample_rate must be positive, got {self.sample_rate}")
        if arr.size and not np.all(np.isfinite(arr)):
            raise InvalidSignal("audio contains NaN or Inf samples")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    @classmethod
    def silence(cls, n_samples: int, sample_rate: int) -> "AudioBuffer":
        return cls(np.zeros(n_samples, dtype=np.float32), sample_rate)


@dataclass(frozen=True, eq=False)
class StftFrames:
    frames: np.ndarray  # (n_frames, n_fft // 2 + 1) complex
    hop: int
    window_size: int
    sample_rate: int
    n_fft: int = field(default=0)

    def __post_init__(self):
        n_fft = self.n_fft or self.window_size
        object.__setattr__(self, "n_fft", n_fft)
        if self.hop > self.window_size:
            raise InvalidConfig("hop must not exceed window_size")
        if self.frames.ndim != 2 or self.frames.shape[1] != n_fft // 2 + 1:
            raise ShapeMismatch(
                f"expected frames with {n_fft // 2 + 1} bins, got shape {self.frames.shape}"
            )

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    frames: np.ndarray  # (n_frames, n_mels)
    n_mels: int
    hop_seconds: float
    window_seconds: float
    sample_rate: int
    log_scaled: bool = True

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.n_mels:
            raise ShapeMismatch(f"mel frames must have {self.n_mels} columns")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def frame_rate(self) -> float:
        return 1.0 / self.hop_seconds


def check_audio(audio, sample_rate: int | None = None) -> AudioBuffer:
    """Coerce ``audio`` to a non-empty :class:`AudioBuffer`."""
    if not isinstance(audio, AudioBuffer):
        if sample_rate is None:
            raise InvalidConfig("raw sample arrays need an explicit sample_rate")
        audio = AudioBuffer(audio, sample_rate)
    if len(audio) == 0:
        raise EmptyAudio("audio buffer is empty")
    return audio


def hann_window(size: int) -> np.ndarray:
    """Periodic Hann window (the DFT-even variant used for analysis)."""
    n = np.arange(size, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / size)


def _check_frame_config(window_size: int, hop: int):
    if hop < 1 or window_size < 1:
        raise InvalidConfig("window_size and hop must be >= 1")
    if hop > window_size:
        raise InvalidConfig(f"hop {hop} exceeds window_size {window_size}")


def check_cola(window_size: int, hop: int, tol: float = 1e-10) -> None:
    """Raise InvalidConfig unless squared-Hann overlap-add is constant for this hop."""
    _check_frame_config(window_size, hop)
    if window_size % hop:
        raise InvalidConfig(f"window {window_size} is not a multiple of hop {hop}")
    w2 = hann_window(window_size) ** 2
    total = w2.reshape(-1, hop).sum(axis=0)
    if np.ptp(total) > tol * total.max():
        raise InvalidConfig(f"Hann window {window_size} with hop {hop} violates COLA")


def n_frames(length: int, hop: int) -> int:
    """Frame count of the centered STFT: one frame per hop position inside the signal."""
    return -(-length // hop)


def _frame_signal(x: np.ndarray, window_size: int, hop: int) -> np.ndarray:
    count = n_frames(x.shape[0], hop)
    left = window_size // 2
    right = (count - 1) * hop + window_size - left - x.shape[0]
    padded = np.pad(x, (left, max(right, 0)), mode="reflect" if x.shape[0] > 1 else "edge")
    return np.lib.stride_tricks.sliding_window_view(padded, window_size)[::hop][:count]


def stft(audio: AudioBuffer, window_size: int, hop: int) -> StftFrames:
    """Centered, reflect-padded Hann STFT with ``n_fft == window_size``.

    Frame ``i`` is centred on sample ``i * hop``, so the frame count is
    ``ceil(len / hop)``.
    """
    audio = check_audio(audio)
    _check_frame_config(window_size, hop)
    x = audio.samples.astype(np.float64)
    frames = _frame_signal(x, window_size, hop) * hann_window(window_size)
    spec = np.fft.rfft(frames, n=window_size, axis=-1)
    if audio.samples.dtype == np.float32:
        spec = spec.astype(np.complex64)
    return StftFrames(spec, hop=hop, window_size=window_size, sample_rate=audio.sample_rate)


def istft(frames: StftFrames, length: int | None = None) -> AudioBuffer:
    """Inverse of :func:`stft` by weighted overlap-add.

    Output defaults to ``len(frames) * hop`` samples; pass ``length`` to crop
    to a known original length.
    """
    window_size, hop = frames.window_size, frames.hop
    check_cola(window_size, hop)
    count = len(frames)
    out_len = count * hop if length is None else int(length)
    if count == 0:
        return AudioBuffer(np.zeros(out_len, dtype=np.float32), frames.sample_rate)

    w = hann_window(window_size)
    segs = np.fft.irfft(frames.frames.astype(np.complex128), n=window_size, axis=-1) * w
    left = window_size // 2
    total = (count - 1) * hop + window_size
    acc = np.zeros(total)
    norm = np.zeros(total)
    w2 = w * w
    # window is a whole number of hops (COLA check), so overlap-add block by block
    for j in range(window_size // hop):
        sl = slice(j * hop, j * hop + count * hop)
        acc[sl] += segs[:, j * hop : (j + 1) * hop].reshape(-1)
        norm[sl] += np.tile(w2[j * hop : (j + 1) * hop], count)
    nz = norm > 1e-11
    acc[nz] /= norm[nz]
    acc[~nz] = 0.0
    y = acc[left : left + out_len]
    if y.shape[0] < out_len:
        y = np.pad(y, (0, out_len - y.shape[0]))
    if frames.frames.dtype != np.complex128:
        y = y.astype(np.float32)
    return AudioBuffer(y, frames.sample_rate)


def hz_to_mel(f, scale: str = "htk"):
    f = np.asarray(f, dtype=np.float64)
    if scale == "htk":
        return 2595.0 * np.log10(1.0 + f / 700.0)
    if scale == "slaney":
        f_sp = 200.0 / 3
        min_log_hz = 1000.0
        min_log_mel = min_log_hz / f_sp
        logstep = math.log(6.4) / 27.0
        return np.where(
            f >= min_log_hz,
            min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
            f / f_sp,
        )
    raise InvalidConfig(f"unknown mel scale {scale!r}")


def mel_to_hz(m, scale: str = "htk"):
    m = np.asarray(m, dtype=np.float64)
    if scale == "htk":
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    if scale == "slaney":
        f_sp = 200.0 / 3
        min_log_hz = 1000.0
        min_log_mel = min_log_hz / f_sp
        logstep = math.log(6.4) / 27.0
        return np.where(
            m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m
        )
    raise InvalidConfig(f"unknown mel scale {scale!r}")


@lru_cache(maxsize=32)
def _mel_filterbank_cached(sample_rate, n_fft, n_mels, fmin, fmax, scale, norm):
    fmax = sample_rate / 2.0 if fmax is None else fmax
    bin_hz = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin, scale), hz_to_mel(fmax, scale), n_mels + 2), scale)
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lower) / (centre - lower)
    falling = (upper - bin_hz[None, :]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    if norm == "slaney":
        fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    elif norm is not None:
        raise InvalidConfig(f"unknown mel norm {norm!r}")
    fb.setflags(write=False)
    return fb


def mel_filterbank(
    sample_rate: int,
    n_fft: int,
    n_mels: int,
    fmin: float = 0.0,
    fmax: float | None = None,
    scale: str = MEL_SCALE,
    norm: str | None = MEL_NORM,
) -> np.ndarray:
    """Triangular filterbank of shape ``(n_mels, n_fft // 2 + 1)`` spanning fmin..fmax."""
    return _mel_filterbank_cached(sample_rate, n_fft, n_mels, float(fmin), fmax, scale, norm)


def mel_spectrogram(
    audio: AudioBuffer,
    n_mels: int = 128,
    window: float = 0.025,
    hop: float = 0.010,
    *,
    log: bool = True,
    floor: float = LOG_FLOOR,
    power: float = 2.0,
    scale: str = MEL_SCALE,
    norm: str | None = MEL_NORM,
) -> MelSpectrogram:
    """Log10 mel energies; ``window`` and ``hop`` are in seconds.

    Values are clamped to ``floor`` before the log, so silence maps to
    ``log10(floor)`` in every bin.
    """
    audio = check_audio(audio)
    win = int(round(window * audio.sample_rate))
    hop_n = int(round(hop * audio.sample_rate))
    if win < 1 or hop_n < 1:
        raise InvalidConfig("mel window and hop must each span at least one sample")
    spec = stft(AudioBuffer(audio.samples.astype(np.float64), audio.sample_rate), win, hop_n)
    mag = np.abs(spec.frames) ** power
    mel = mag @ mel_filterbank(audio.sample_rate, win, n_mels, scale=scale, norm=norm).T
    if log:
        mel = np.log10(np.maximum(mel, floor))
    return MelSpectrogram(
        mel.astype(np.float32),
        n_mels=n_mels,
        hop_seconds=hop_n / audio.sample_rate,
        window_seconds=win / audio.sample_rate,
        sample_rate=audio.sample_rate,
        log_scaled=log,
    )


@lru_cache(maxsize=16)
def _resampling_filter(up: int, down: int) -> np.ndarray:
    numtaps = RESAMPLER_TAPS_PER_PHASE * up
    cutoff = 1.0 / max(up, down)
    h = sps.firwin(numtaps, cutoff, window=("kaiser", RESAMPLER_KAISER_BETA))
    h *= up
    h.setflags(write=False)
    return h


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Polyphase windowed-sinc resampling (Kaiser window, 32 taps per phase)."""
    audio = check_audio(audio)
    if target_rate <= 0:
        raise InvalidConfig("target_rate must be positive")
    if target_rate == audio.sample_rate:
        return AudioBuffer(audio.samples.copy(), target_rate)
    ratio = Fraction(int(target_rate), audio.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    y = sps.resample_poly(audio.samples.astype(np.float64), up, down, window=_resampling_filter(up, down))
    return AudioBuffer(y.astype(audio.samples.dtype), int(target_rate))
