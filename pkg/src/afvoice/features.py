"""Encoder-side feature pipeline.

16 kHz audio is cut into fixed 30 s windows, each window becomes a 100 Hz
log-mel spectrogram, a two-layer convolutional stem brings it to 50 Hz,
mean pooling over frame pairs brings it to 25 Hz, and a two-layer MLP maps
every frame into the language-model embedding width.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.special import erf
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dsp import AudioBuffer, MelSpectrogram, check_audio, mel_spectrogram, resample
from .errors import EmptyAudio, EmptyInput, InvalidConfig, InvalidSignal, RateMismatch, ShapeMismatch

FEATURE_RATE = 16000
WINDOW_SECONDS = 30.0
MEL_CHANNELS = 128
MEL_WINDOW = 0.025
MEL_HOP = 0.010
PAPER_ENCODER_WIDTH = 1280
MAX_WINDOWS_10_MIN = 20


@dataclass(frozen=True)
class WindowPlan:
    window_seconds: float = WINDOW_SECONDS
    max_windows: int = MAX_WINDOWS_10_MIN
    pad_policy: str = "zero-pad-to-full"

    def __post_init__(self):
        if self.window_seconds <= 0:
            raise InvalidConfig("window_seconds must be positive")
        if self.max_windows < 1:
            raise InvalidConfig("max_windows must be >= 1")
        if self.pad_policy != "zero-pad-to-full":
            raise InvalidConfig(f"unsupported pad policy {self.pad_policy!r}")


@dataclass(frozen=True, eq=False)
class AudioWindow:
    audio: AudioBuffer  # always exactly one full window long
    index: int
    valid_samples: int


@dataclass(frozen=True, eq=False)
class Chunking:
    windows: list
    truncated_samples: int = 0

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    def __getitem__(self, i):
        return self.windows[i]

    @property
    def truncated(self) -> bool:
        return self.truncated_samples > 0


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    frames: np.ndarray  # (N, d)
    frame_rate: int
    window_index: int = 0
    valid_frames: int = field(default=-1)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2:
            raise ShapeMismatch("feature frames must be (N, d)")
        if not np.all(np.isfinite(frames)):
            raise InvalidSignal("feature frames must be finite")
        if self.frame_rate not in (100, 50, 25):
            raise RateMismatch(f"unexpected feature frame rate {self.frame_rate}")
        object.__setattr__(self, "frames", frames)
        if self.valid_frames < 0:
            object.__setattr__(self, "valid_frames", frames.shape[0])
        if self.valid_frames > frames.shape[0]:
            raise ShapeMismatch("valid_frames exceeds frame count")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def chunk_windows(audio: AudioBuffer, plan: WindowPlan = WindowPlan()) -> Chunking:
    """Split 16 kHz audio into non-overlapping windows, zero-padding the last one.

    Audio beyond ``plan.max_windows`` windows is dropped and reported through
    ``Chunking.truncated_samples``.
    """
    audio = check_audio(audio)
    if audio.sample_rate != FEATURE_RATE:
        raise RateMismatch(f"feature path expects {FEATURE_RATE} Hz, got {audio.sample_rate}")
    size = int(round(plan.window_seconds * audio.sample_rate))
    count = -(-len(audio) // size)
    kept = min(count, plan.max_windows)
    truncated = max(0, len(audio) - kept * size)
    windows = []
    for i in range(kept):
        part = audio.samples[i * size : (i + 1) * size]
        valid = part.shape[0]
        if valid < size:
            part = np.concatenate([part, np.zeros(size - valid, dtype=part.dtype)])
        windows.append(AudioWindow(AudioBuffer(part, audio.sample_rate), i, valid))
    return Chunking(windows, truncated)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


_ACTIVATIONS = {"gelu": gelu, "identity": lambda x: x}


def _activation(name):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise InvalidConfig(f"unknown activation {name!r}") from None


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0):
    """Time-major 1-D convolution. ``x`` is (T, C_in), ``weight`` (C_out, C_in, k)."""
    k = weight.shape[2]
    xp = np.pad(x, ((padding, padding), (0, 0)))
    t_out = (xp.shape[0] - k) // stride + 1
    out = np.tile(bias, (t_out, 1)).astype(np.float64)
    for j in range(k):
        out += xp[j : j + stride * (t_out - 1) + 1 : stride] @ weight[:, :, j].T
    return out


def _identity_kernel(c_out, c_in, k):
    w = np.zeros((c_out, c_in, k))
    n = min(c_out, c_in)
    w[np.arange(n), np.arange(n), k // 2] = 1.0
    return w


@dataclass(eq=False)
class EncoderStem:
    """Two kernel-3 convolutions, the second with stride 2: 100 Hz mels to 50 Hz features.

    ``init="identity"`` puts an identity matrix on the centre tap of both
    kernels, which (with ``activation="identity"``) makes the stem a strided,
    zero-padded/truncated copy of its input.
    """

    width: int = 64
    n_mels: int = MEL_CHANNELS
    activation: str = "gelu"
    init: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.init == "identity":
            self.w1 = _identity_kernel(self.width, self.n_mels, 3)
            self.w2 = _identity_kernel(self.width, self.width, 3)
        elif self.init == "random":
            rng = np.random.default_rng(self.seed)
            self.w1 = rng.standard_normal((self.width, self.n_mels, 3)) / math.sqrt(3 * self.n_mels)
            self.w2 = rng.standard_normal((self.width, self.width, 3)) / math.sqrt(3 * self.width)
        else:
            raise InvalidConfig(f"unknown init {self.init!r}")
        self.b1 = np.zeros(self.width)
        self.b2 = np.zeros(self.width)

    def __call__(self, mel: MelSpectrogram, window_index: int = 0, valid_frames: int | None = None):
        return encoder_stem(mel, self, window_index, valid_frames)


def encoder_stem(mel: MelSpectrogram, stem: EncoderStem, window_index: int = 0, valid_frames=None):
    if mel.n_mels != stem.n_mels:
        raise ShapeMismatch(f"stem expects {stem.n_mels} mel channels, got {mel.n_mels}")
    if len(mel) == 0:
        raise EmptyInput("mel spectrogram has no frames")
    if round(mel.frame_rate) != 100:
        raise RateMismatch(f"stem expects 100 Hz mel frames, got {mel.frame_rate:g} Hz")
    act = _activation(stem.activation)
    h = act(conv1d(mel.frames.astype(np.float64), stem.w1, stem.b1, 1, 1))
    h = act(conv1d(h, stem.w2, stem.b2, 2, 1))
    valid = h.shape[0] if valid_frames is None else -(-valid_frames // 2)
    rate = int(round(mel.frame_rate / 2))
    return FeatureSequence(h.astype(np.float32), rate, window_index, valid)


def pool_stride2(feats: FeatureSequence) -> FeatureSequence:
    """Mean of adjacent frame pairs; an odd trailing frame is dropped."""
    if len(feats) == 0:
        raise EmptyInput("cannot pool an empty feature sequence")
    if feats.frame_rate != 50:
        raise RateMismatch(f"pooling expects 50 Hz features, got {feats.frame_rate} Hz")
    n = len(feats) // 2
    x = feats.frames[: 2 * n].astype(np.float64)
    pooled = 0.5 * (x[0::2] + x[1::2])
    return FeatureSequence(
        pooled.astype(feats.frames.dtype), 25, feats.window_index, min(n, feats.valid_frames // 2)
    )


@dataclass(eq=False)
class Adaptor:
    """Per-frame two-layer MLP ``W2 · act(W1 · h + b1) + b2``."""

    in_dim: int
    out_dim: int
    hidden: int | None = None
    activation: str = "gelu"
    init: str = "random"
    seed: int = 0

    def __post_init__(self):
        hidden = self.hidden or self.out_dim
        self.hidden = hidden
        if self.init == "identity":
            self.w1 = np.eye(hidden, self.in_dim)
            self.w2 = np.eye(self.out_dim, hidden)
        elif self.init == "random":
            rng = np.random.default_rng(self.seed)
            self.w1 = rng.standard_normal((hidden, self.in_dim)) / math.sqrt(self.in_dim)
            self.w2 = rng.standard_normal((self.out_dim, hidden)) / math.sqrt(hidden)
        else:
            raise InvalidConfig(f"unknown init {self.init!r}")
        self.b1 = np.zeros(hidden)
        self.b2 = np.zeros(self.out_dim)

    def __call__(self, feats: FeatureSequence) -> FeatureSequence:
        return adapt(feats, self)


def adapt(feats: FeatureSequence, proj: Adaptor) -> FeatureSequence:
    if feats.dim != proj.in_dim:
        raise ShapeMismatch(f"adaptor expects width {proj.in_dim}, got {feats.dim}")
    act = _activation(proj.activation)
    h = act(feats.frames.astype(np.float64) @ proj.w1.T + proj.b1)
    out = h @ proj.w2.T + proj.b2
    return FeatureSequence(out.astype(np.float32), feats.frame_rate, feats.window_index, feats.valid_frames)


def stage_frame_counts(window_seconds: float = WINDOW_SECONDS, hop: float = MEL_HOP) -> tuple[int, int, int]:
    """(mel frames, stem frames, pooled frames) for one full window."""
    mel = math.ceil(round(window_seconds / hop, 9))
    stem = -(-mel // 2)
    return mel, stem, stem // 2


def pooled_token_count(duration: float, plan: WindowPlan = WindowPlan()) -> int:
    """Audio tokens produced for ``duration`` seconds (every window is padded to full length)."""
    if duration <= 0:
        return 0
    n_windows = min(math.ceil(round(duration / plan.window_seconds, 9)), plan.max_windows)
    return n_windows * stage_frame_counts(plan.window_seconds)[2]


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Audio to adaptor embeddings, one :class:`FeatureSequence` per 30 s window.

    ``fit`` only materializes the (randomly initialized, seeded) stem and
    adaptor; there is nothing to learn at this scale.
    """

    def __init__(
        self,
        encoder_width=64,
        lm_width=64,
        max_windows=MAX_WINDOWS_10_MIN,
        window_seconds=WINDOW_SECONDS,
        n_mels=MEL_CHANNELS,
        n_jobs=1,
        random_state=0,
    ):
        self.encoder_width = encoder_width
        self.lm_width = lm_width
        self.max_windows = max_windows
        self.window_seconds = window_seconds
        self.n_mels = n_mels
        self.n_jobs = n_jobs
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.plan_ = WindowPlan(self.window_seconds, self.max_windows)
        self.stem_ = EncoderStem(self.encoder_width, self.n_mels, seed=self.random_state)
        self.adaptor_ = Adaptor(self.encoder_width, self.lm_width, seed=self.random_state + 1)
        return self

    def _window(self, win: AudioWindow):
        mel = mel_spectrogram(win.audio, self.n_mels, MEL_WINDOW, MEL_HOP)
        valid_mel = -(-win.valid_samples // int(round(MEL_HOP * FEATURE_RATE)))
        stem = encoder_stem(mel, self.stem_, win.index, valid_mel)
        pooled = pool_stride2(stem)
        return mel, stem, pooled, adapt(pooled, self.adaptor_)

    def stages(self, audio: AudioBuffer):
        """Run the pipeline keeping every intermediate stage, ordered by window index."""
        check_is_fitted(self, "stem_")
        audio = check_audio(audio)
        if audio.sample_rate != FEATURE_RATE:
            audio = resample(audio, FEATURE_RATE)
        chunks = chunk_windows(audio, self.plan_)
        if self.n_jobs and self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                results = list(pool.map(self._window, chunks.windows))
        else:
            results = [self._window(w) for w in chunks.windows]
        return chunks, results

    def transform(self, X):
        """``X`` is one AudioBuffer or a list of them; returns a list per input."""
        single = isinstance(X, AudioBuffer)
        items = [X] if single else list(X)
        if not items:
            raise EmptyAudio("no audio given")
        out = [[r[3] for r in self.stages(a)[1]] for a in items]
        return out[0] if single else out
