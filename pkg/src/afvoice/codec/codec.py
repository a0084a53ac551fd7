from __future__ import annotations

from dataclasses import dataclass
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .. import formats
from ..dsp import AudioBuffer, check_audio, mel_filterbank, mel_spectrogram, resample
from ..errors import ConfigMismatch, CorruptCode, InsufficientData, InvalidState, RateMismatch, ShapeMismatch
from ..nn import make_optimizer
from ..rvq import CodebookSet, rvq_decode, rvq_encode, train_codebooks
from .config import CodecConfig
from .layers import StreamState
from .model import Decoder, Encoder, assign_cache_keys

log = logging.getLogger(__name__)

# Mel reconstruction loss settings at 44.1 kHz.
LOSS_MELS = 128
LOSS_WINDOW = 1024
LOSS_HOP = 256
LOSS_FLOOR = 1e-5
COMMITMENT_WEIGHT = 0.25


@dataclass(frozen=True, eq=False)
class LatentSequence:
    frames: np.ndarray  # (T, D)
    frames_per_second: float

    def __len__(self):
        return self.frames.shape[0]


def mel_recon_loss(original: AudioBuffer, reconstructed: AudioBuffer, floor: float = LOSS_FLOOR) -> float:
    """Mean absolute difference between the two log10-mel spectrograms."""
    if len(original) != len(reconstructed) or original.sample_rate != reconstructed.sample_rate:
        raise ShapeMismatch("mel loss needs equal lengths and sample rates")
    sr = original.sample_rate
    kw = dict(n_mels=LOSS_MELS, window=LOSS_WINDOW / sr, hop=LOSS_HOP / sr, floor=floor)
    a = mel_spectrogram(original, **kw).frames.astype(np.float64)
    b = mel_spectrogram(reconstructed, **kw).frames.astype(np.float64)
    return float(np.mean(np.abs(a - b)))


def torch_log_mel(x: torch.Tensor, sample_rate: int, floor: float = LOSS_FLOOR, soft: bool = False) -> torch.Tensor:
    """Differentiable twin of :func:`afvoice.dsp.mel_spectrogram` for (B, N) audio.

    ``soft=True`` adds the floor instead of clamping to it, so energies below
    the floor still receive gradient (used as the training objective).
    """
    n = x.shape[-1]
    count = -(-n // LOSS_HOP)
    left = LOSS_WINDOW // 2
    right = (count - 1) * LOSS_HOP + LOSS_WINDOW - left - n
    padded = F.pad(x.unsqueeze(1), (left, max(right, 0)), mode="reflect").squeeze(1)
    frames = padded.unfold(-1, LOSS_WINDOW, LOSS_HOP)[:, :count]
    n_ = torch.arange(LOSS_WINDOW, dtype=torch.float64)
    w = (0.5 - 0.5 * torch.cos(2 * np.pi * n_ / LOSS_WINDOW)).to(x.dtype)
    power = torch.fft.rfft(frames * w, dim=-1).abs() ** 2
    fb = torch.tensor(mel_filterbank(sample_rate, LOSS_WINDOW, LOSS_MELS), dtype=x.dtype)
    mel = power @ fb.T
    return torch.log10(mel + floor) if soft else torch.log10(torch.clamp(mel, min=floor))


def commitment_loss(latents: torch.Tensor, books: CodebookSet, weight: float = COMMITMENT_WEIGHT):
    """Straight-through RVQ for end-to-end runs.

    ``latents`` is (B, D, T). Returns ``(quantized, loss)`` where ``quantized``
    carries the encoder gradient unchanged and ``loss`` pulls latents toward
    their quantized values.
    """
    z = latents.transpose(1, 2)
    flat = z.reshape(-1, z.shape[-1]).detach().cpu().numpy()
    q = rvq_decode(rvq_encode(flat, books), books)
    q = torch.as_tensor(q, dtype=z.dtype).reshape(z.shape)
    loss = weight * F.mse_loss(z, q)
    return (z + (q - z).detach()).transpose(1, 2), loss


def synthetic_tones(n: int, seconds: float = 1.0, sample_rate: int = 44100, seed: int = 0):
    """Seeded harmonic tones (55 Hz..1.76 kHz fundamentals) for toy training."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    out = []
    for _ in range(n):
        f0 = 55.0 * 2 ** rng.uniform(1, 5)
        amp = rng.uniform(0.2, 0.6)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        x = sum(amp / (h + 1) * np.sin(2 * np.pi * f0 * (h + 1) * t + phase[h]) for h in range(3))
        out.append(AudioBuffer(x.astype(np.float32), sample_rate))
    return out


class NeuralCodec(TransformerMixin, BaseEstimator):
    """Causal STFT-domain codec with residual vector quantization.

    ``fit`` trains encoder/decoder on mel reconstruction, then learns the
    codebooks on the trained encoder's latents. ``transform`` maps audio to
    integer codes ``(T, L)``; ``inverse_transform`` maps codes back to audio.
    """

    def __init__(
        self,
        config=None,
        n_steps=500,
        batch_size=8,
        segment_units=2,
        learning_rate=6e-3,
        kmeans_iter=20,
        random_state=0,
    ):
        self.config = config
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.segment_units = segment_units
        self.learning_rate = learning_rate
        self.kmeans_iter = kmeans_iter
        self.random_state = random_state

    # -- construction -------------------------------------------------------

    @property
    def cfg(self) -> CodecConfig:
        return self.config if self.config is not None else CodecConfig()

    def _build(self):
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state)
            self.encoder_ = Encoder(self.cfg)
            self.decoder_ = Decoder(self.cfg)
        assign_cache_keys(self.decoder_)
        return self

    def initialize(self, codebooks: CodebookSet | None = None):
        """Build untrained networks; optionally attach existing codebooks."""
        self._build()
        if codebooks is not None:
            self.set_codebooks(codebooks)
        return self

    def set_codebooks(self, books: CodebookSet):
        if books.dim != self.cfg.latent_dim:
            raise ConfigMismatch(f"codebook dim {books.dim} != latent dim {self.cfg.latent_dim}")
        self.codebooks_ = books
        return self

    # -- audio helpers ------------------------------------------------------

    def _audio(self, audio) -> AudioBuffer:
        audio = check_audio(audio, self.cfg.sample_rate)
        if audio.sample_rate != self.cfg.sample_rate:
            raise RateMismatch(f"codec expects {self.cfg.sample_rate} Hz audio, got {audio.sample_rate}")
        return audio

    @torch.no_grad()
    def _latents(self, samples: np.ndarray) -> np.ndarray:
        x = torch.tensor(np.asarray(samples, dtype=np.float32))[None]
        return self.encoder_(x)[0].T.numpy()

    # -- operations ---------------------------------------------------------

    def encode(self, audio) -> LatentSequence:
        check_is_fitted(self, "encoder_")
        audio = self._audio(audio)
        return LatentSequence(self._latents(audio.samples), self.cfg.frames_per_second)

    def quantize(self, latents: LatentSequence) -> np.ndarray:
        check_is_fitted(self, "codebooks_")
        frames = np.asarray(latents.frames if isinstance(latents, LatentSequence) else latents)
        if frames.ndim != 2 or frames.shape[1] != self.codebooks_.dim:
            raise ShapeMismatch(f"latents must be (T, {self.codebooks_.dim})")
        return rvq_encode(frames, self.codebooks_)

    def embed(self, codes) -> np.ndarray:
        check_is_fitted(self, "codebooks_")
        codes = np.atleast_2d(np.asarray(codes))
        if codes.shape[1] != self.codebooks_.levels:
            raise CorruptCode(f"codes have {codes.shape[1]} levels, codec has {self.codebooks_.levels}")
        return rvq_decode(codes, self.codebooks_)

    @torch.no_grad()
    def decode(self, codes) -> AudioBuffer:
        codes = np.asarray(codes)
        if codes.size == 0:
            raise CorruptCode("no codes to decode")
        z = torch.as_tensor(self.embed(codes).T[None].copy())
        return AudioBuffer(self.decoder_(z)[0].numpy(), self.cfg.sample_rate)

    @torch.no_grad()
    def decode_latents(self, latents: LatentSequence) -> AudioBuffer:
        z = torch.as_tensor(np.ascontiguousarray(latents.frames.T[None], dtype=np.float32))
        return AudioBuffer(self.decoder_(z)[0].numpy(), self.cfg.sample_rate)

    def _signature(self):
        return (json.dumps(self.cfg.to_dict(), sort_keys=True), id(self.decoder_))

    def new_stream(self) -> StreamState:
        check_is_fitted(self, "decoder_")
        return StreamState(self._signature())

    @torch.no_grad()
    def streaming_decode(self, state: StreamState, next_code) -> np.ndarray:
        """Decode one code into exactly ``compression`` samples, advancing ``state``."""
        if not isinstance(state, StreamState) or state.signature != self._signature():
            raise InvalidState("stream state was created for a different codec")
        z = torch.as_tensor(self.embed(next_code).T[None].copy())
        return self.decoder_(z, state)[0].numpy()

    def transform(self, X):
        return self.quantize(self.encode(X))

    def inverse_transform(self, codes):
        return self.decode(codes)

    def reconstruct(self, audio) -> AudioBuffer:
        """Quantized round trip cropped to the input length."""
        audio = self._audio(audio)
        out = self.decode(self.transform(audio))
        return AudioBuffer(out.samples[: len(audio)], audio.sample_rate)

    # -- training -----------------------------------------------------------

    def _batch(self, waves, rng):
        seg = self.segment_units * self.cfg.compression
        batch = np.zeros((self.batch_size, seg), dtype=np.float32)
        for b in range(self.batch_size):
            w = waves[rng.integers(len(waves))]
            if w.shape[0] <= seg:
                batch[b, : w.shape[0]] = w
            else:
                start = rng.integers(w.shape[0] - seg + 1)
                batch[b] = w[start : start + seg]
        return torch.from_numpy(batch)

    def training_loss(self, batch: torch.Tensor) -> torch.Tensor:
        recon = self.decoder_(self.encoder_(batch))[:, : batch.shape[-1]]
        sr = self.cfg.sample_rate
        return (torch_log_mel(recon, sr, soft=True) - torch_log_mel(batch, sr, soft=True)).abs().mean()

    def fit(self, X, y=None, callback=None):
        """Train on a list of AudioBuffers (any rate; resampled to the codec rate)."""
        waves = [resample(check_audio(a), self.cfg.sample_rate).samples for a in X]
        if not waves:
            raise InsufficientData("no training audio")
        self._build()
        rng = np.random.default_rng(self.random_state)
        params = [*self.encoder_.parameters(), *self.decoder_.parameters()]
        opt, sched = make_optimizer(params, self.learning_rate, self.n_steps, warmup=min(20, self.n_steps // 10))
        self.loss_history_ = []
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state)
            for step in range(self.n_steps):
                loss = self.training_loss(self._batch(waves, rng))
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params, 1.0)
                opt.step()
                sched.step()
                self.loss_history_.append(loss.item())
                if callback is not None:
                    callback(step, self.loss_history_[-1])
        self.encoder_.eval()
        self.decoder_.eval()
        self.fit_codebooks(waves)
        return self

    def fit_codebooks(self, waves):
        """Learn RVQ codebooks from encoder latents of ``waves`` (shifted copies if data is short)."""
        cfg = self.cfg
        vecs = [self._latents(w) for w in waves]
        need = 4 * cfg.entries
        shift = cfg.compression // 4
        k = 1
        while sum(v.shape[0] for v in vecs) < need and k < 64:
            vecs += [self._latents(w[(k * shift) % max(1, w.shape[0]) :]) for w in waves if w.shape[0] > k * shift]
            k += 1
        data = np.concatenate(vecs)
        books, self.codebook_history_ = train_codebooks(data, cfg.levels, cfg.entries, self.kmeans_iter, self.random_state)
        self.codebooks_ = books
        return self

    # -- persistence ----------------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tensors = {f"encoder.{k}": v.numpy() for k, v in self.encoder_.state_dict().items()}
        tensors.update({f"decoder.{k}": v.numpy() for k, v in self.decoder_.state_dict().items()})
        meta = {"kind": "codec", "config": self.cfg.to_dict(), "random_state": self.random_state}
        formats.write_checkpoint(d / "codec.ckpt", tensors, meta)
        self.codebooks_.save(d / "codebooks.afcb")

    @classmethod
    def load(cls, directory) -> "NeuralCodec":
        d = Path(directory)
        tensors, meta = formats.read_checkpoint(d / "codec.ckpt")
        if meta.get("kind") != "codec":
            raise ConfigMismatch(f"{d / 'codec.ckpt'} is not a codec checkpoint")
        codec = cls(config=CodecConfig.from_dict(meta["config"]), random_state=meta.get("random_state", 0))
        codec._build()
        for prefix, module in (("encoder.", codec.encoder_), ("decoder.", codec.decoder_)):
            state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}
            try:
                module.load_state_dict(state)
            except RuntimeError as exc:
                raise ConfigMismatch(f"checkpoint does not match its config: {exc}") from exc
            module.eval()
        books = CodebookSet.load(d / "codebooks.afcb")
        cfg = codec.cfg
        if (books.levels, books.entries, books.dim) != (cfg.levels, cfg.entries, cfg.latent_dim):
            raise ConfigMismatch("codebooks do not match codec config")
        codec.codebooks_ = books
        return codec
