"""Streaming text-to-speech runtime.

The decoder reads an interleaved stream ``t1 a1 t2 a2 ...`` of text tokens and
audio tokens. The hidden state at each text position conditions a mixture of
Gaussians over the cumulative RVQ embedding of the next audio token, which is
turned into discrete codes coarse-to-fine over a few unmasking steps. Every
text token yields exactly one audio token.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
import queue
import threading

import numpy as np
import torch
from torch import nn
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import formats
from .dsp import AudioBuffer
from .errors import ConfigMismatch, InvalidConfig, SessionClosed, ShapeMismatch, SpeakerMismatch
from .events import AUDIO, TEXT, EventRecorder, MonotonicClock
from .nn import DecoderConfig, KVCache, MoGHead, MoGParams, TransformerDecoder, make_optimizer, mog_nll
from .rvq import CodebookSet, rvq_decode, rvq_encode

PAPER_UNMASK_STEPS = 4
BYTE_VOCAB = 256
PAD, BOS, EOS = 256, 257, 258
TEXT_VOCAB = 259
MIN_SAMPLE_SECONDS = 1.0
MAX_SAMPLE_SECONDS = 120.0


def encode_text(text: str) -> list[int]:
    """Byte-level tokenization."""
    return list(text.encode("utf-8"))


@dataclass(frozen=True)
class UnmaskSchedule:
    """Contiguous coarse-to-fine partition of ``levels`` into ``steps`` groups."""

    levels: int
    steps: int = PAPER_UNMASK_STEPS

    def __post_init__(self):
        if self.levels < 1 or not 1 <= self.steps <= self.levels:
            raise InvalidConfig(f"cannot split {self.levels} levels into {self.steps} steps")

    @property
    def groups(self) -> list[range]:
        base, extra = divmod(self.levels, self.steps)
        out, start = [], 0
        for s in range(self.steps):
            size = base + (1 if s < extra else 0)
            out.append(range(start, start + size))
            start += size
        return out

    @property
    def starts(self) -> list[int]:
        """Committed-level counts seen by the head at each step."""
        return [g.start for g in self.groups]


@dataclass(frozen=True)
class TTSConfig:
    layers: int = 4
    heads: int = 4
    width: int = 128
    ff_width: int = 512
    max_seq_len: int = 1024
    mixtures: int = 2
    head_hidden: int = 256
    unmask_steps: int = PAPER_UNMASK_STEPS
    temperature: float = 1.0

    def decoder_config(self, audio_dim: int) -> DecoderConfig:
        return DecoderConfig(
            self.layers, self.heads, self.width, self.ff_width, self.max_seq_len, TEXT_VOCAB, audio_dim
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TTSConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown tts config keys: {sorted(unknown)}")
        return cls(**d)


class TTSModel(nn.Module):
    def __init__(self, cfg: TTSConfig, books: CodebookSet):
        super().__init__()
        self.cfg = cfg
        self.books = books
        D = books.dim
        self.text_emb = nn.Embedding(TEXT_VOCAB, cfg.width)
        self.audio_proj = nn.Linear(D, cfg.width)
        self.kind_emb = nn.Embedding(2, cfg.width)
        self.decoder = TransformerDecoder(cfg.decoder_config(D))
        self.head = MoGHead(cfg.width, D, cfg.mixtures, cfg.head_hidden)
        self.register_buffer("codewords", torch.from_numpy(books.codewords.copy()), persistent=False)

    def cumulative(self, codes: torch.Tensor, levels: torch.Tensor | int | None = None) -> torch.Tensor:
        """Sum of codewords over the first ``levels`` levels of ``codes`` (..., L) -> (..., D)."""
        L = self.codewords.shape[0]
        parts = torch.stack([self.codewords[l][codes[..., l]] for l in range(L)], dim=-2)
        if levels is None:
            return parts.sum(-2)
        keep = torch.arange(L) < torch.as_tensor(levels)[..., None]
        return (parts * keep[..., None].to(parts.dtype)).sum(-2)

    def embed_text(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.text_emb(tokens) + self.kind_emb.weight[0]

    def embed_audio(self, cumulative: torch.Tensor) -> torch.Tensor:
        return self.audio_proj(cumulative) + self.kind_emb.weight[1]

    def text_hidden(self, text: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        """Teacher-forced hidden states at the text positions. text (B, T), codes (B, T, L)."""
        B, T = text.shape
        x = torch.stack([self.embed_text(text), self.embed_audio(self.cumulative(codes))], dim=2)
        h = self.decoder(x.reshape(B, 2 * T, -1))
        return h[:, 0::2]


def teacher_forced_loss(text, codes, model: TTSModel, mask_levels=None, generator=None, lengths=None):
    """Mean mixture NLL of the ground-truth cumulative embeddings.

    ``text`` is (B, T) and ``codes`` (B, T, L). ``mask_levels`` gives the
    committed-level count the head is conditioned on at each position; when
    omitted it is drawn uniformly from the unmask schedule's group starts.
    ``lengths`` masks padded positions out of the mean.
    """
    text = torch.as_tensor(text)
    codes = torch.as_tensor(codes)
    if text.dim() == 1:
        text, codes = text[None], codes[None]
    if text.shape != codes.shape[:2]:
        raise ShapeMismatch(f"text {tuple(text.shape)} and codes {tuple(codes.shape)} lengths differ")
    B, T = text.shape
    if mask_levels is None:
        starts = torch.tensor(UnmaskSchedule(codes.shape[-1], model.cfg.unmask_steps).starts)
        mask_levels = starts[torch.randint(len(starts), (B, T), generator=generator)]
    mask_levels = torch.as_tensor(mask_levels).expand(B, T)
    hidden = model.text_hidden(text, codes)
    target = model.cumulative(codes).to(hidden.dtype)
    partial = model.cumulative(codes, mask_levels).to(hidden.dtype)
    nll = mog_nll(model.head(hidden, partial), target)
    if lengths is None:
        return nll.mean()
    valid = torch.arange(T)[None, :] < torch.as_tensor(lengths)[:, None]
    return nll[valid].mean()


def sample_mog(params: MoGParams, rng: np.random.Generator, temperature: float = 1.0) -> np.ndarray:
    """Draw one vector from a single (unbatched) mixture.

    Temperature scales logits by 1/T and standard deviations by T; T == 0
    returns the mean of the most likely component.
    """
    logits = params.logits.detach().double().numpy()
    means = params.means.detach().double().numpy()
    if temperature <= 0:
        return means[int(np.argmax(logits))]
    z = logits / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    m = int(rng.choice(len(p), p=p))
    std = np.exp(0.5 * params.log_vars.detach().double().numpy()[m])
    return means[m] + temperature * std * rng.standard_normal(means.shape[-1])


def iterative_unmask(hidden, head, books: CodebookSet, schedule: UnmaskSchedule, rng, temperature=1.0, trace=None):
    """Commit RVQ levels coarse-to-fine, one schedule group per step.

    Each step samples a cumulative embedding conditioned on the levels
    committed so far, re-quantizes it with those levels held fixed, and
    commits the next group. ``trace`` (a list) receives the partial code after
    every step.
    """
    committed = np.zeros(0, dtype=np.int64)
    dtype = hidden.dtype
    code = None
    for group in schedule.groups:
        if committed.size:
            partial = rvq_decode(committed, books)
        else:
            partial = np.zeros(books.dim, dtype=np.float32)
        params = head(hidden, torch.as_tensor(partial, dtype=dtype))
        z = sample_mog(params, rng, temperature)
        code = rvq_encode(z, books, committed=committed if committed.size else None)
        committed = code[: group.stop].copy()
        if trace is not None:
            trace.append(committed.copy())
    return code


class Session:
    """One single-owner decoding session with its own KV cache and RNG."""

    def __init__(self, model: TTSModel, seed: int = 0, temperature: float | None = None, steps: int | None = None):
        self.model = model.eval()
        self.books = model.books
        self.schedule = UnmaskSchedule(self.books.levels, steps or model.cfg.unmask_steps)
        self.temperature = model.cfg.temperature if temperature is None else temperature
        self.rng = np.random.default_rng(seed)
        self.cache = KVCache(model.cfg.layers)
        self._pending = None  # embedded last audio token, not yet fed to the decoder
        self.text_consumed = 0
        self.audio_emitted = 0
        self.closed = False

    def _hidden(self, text_token: int, cache: KVCache) -> torch.Tensor:
        x = self.model.embed_text(torch.tensor([[int(text_token)]]))
        if self._pending is not None:
            x = torch.cat([self._pending, x], dim=1)
        return self.model.decoder(x, cache)[0, -1]

    def _embed_code(self, code) -> torch.Tensor:
        cum = torch.as_tensor(rvq_decode(code, self.books))
        return self.model.embed_audio(cum)[None, None]

    @torch.no_grad()
    def step(self, text_token: int) -> np.ndarray:
        """Consume one text token and return the one audio token it produces."""
        if self.closed:
            raise SessionClosed("session is closed")
        if not 0 <= int(text_token) < TEXT_VOCAB:
            raise InvalidConfig(f"text token {text_token} outside vocabulary")
        hidden = self._hidden(text_token, self.cache)
        self.text_consumed += 1
        code = iterative_unmask(hidden, self.model.head, self.books, self.schedule, self.rng, self.temperature)
        self._pending = self._embed_code(code)
        self.audio_emitted += 1
        return code

    @torch.no_grad()
    def prime(self, text_tokens, codes) -> None:
        """Feed known (text, audio) pairs as history without sampling."""
        for tok, code in zip(text_tokens, codes):
            self._hidden(tok, self.cache)
            self._pending = self._embed_code(np.asarray(code))
            self.text_consumed += 1
            self.audio_emitted += 1

    @torch.no_grad()
    def peek(self, text_token: int) -> MoGParams:
        """First-step mixture for ``text_token`` without advancing the session."""
        cache = KVCache(len(self.cache.keys))
        cache.keys, cache.values, cache.length = list(self.cache.keys), list(self.cache.values), self.cache.length
        hidden = self._hidden(text_token, cache)
        return self.model.head(hidden, torch.zeros(self.books.dim, dtype=hidden.dtype))

    def close(self) -> None:
        self.closed = True


def check_compatible(books_a: CodebookSet, books_b: CodebookSet) -> None:
    a = (books_a.levels, books_a.entries, books_a.dim)
    b = (books_b.levels, books_b.entries, books_b.dim)
    if a != b:
        raise ConfigMismatch(f"codebook shapes differ: (L, K, D) {a} vs {b}")


def synthesize(text_tokens, session, codec, clock=None, threaded: bool = False):
    """Step the session once per text token and stream-decode each audio token.

    Returns ``(AudioBuffer, events)``. ``session`` needs ``step(token)`` and
    ``codec`` needs ``new_stream()``, ``streaming_decode(state, code)`` and
    ``sample_rate``; mocks with the same surface work too. With
    ``threaded=True`` stepping and waveform synthesis run on separate threads
    joined by an ordered queue.
    """
    books = getattr(session, "books", None)
    codec_books = getattr(codec, "codebooks_", None)
    if isinstance(books, CodebookSet) and isinstance(codec_books, CodebookSet):
        check_compatible(books, codec_books)
    rec = EventRecorder(clock or MonotonicClock())
    rate = getattr(codec, "sample_rate", None) or codec.cfg.sample_rate
    tokens = list(text_tokens)
    if not tokens:
        return AudioBuffer(np.zeros(0, dtype=np.float32), rate), []
    state = codec.new_stream()
    chunks = []

    def generate(i, tok):
        rec.emit(TEXT, i)
        t0 = rec.clock.now_ns()
        code = session.step(tok)
        return code, rec.clock.now_ns() - t0

    def render(i, code, gen_ns):
        t0 = rec.clock.now_ns()
        chunks.append(np.asarray(codec.streaming_decode(state, code), dtype=np.float32))
        rec.emit(AUDIO, i, gen_ns, rec.clock.now_ns() - t0)

    if not threaded:
        for i, tok in enumerate(tokens):
            render(i, *generate(i, tok))
    else:
        q: queue.Queue = queue.Queue(maxsize=4)
        errors = []

        def producer():
            try:
                for i, tok in enumerate(tokens):
                    q.put((i, *generate(i, tok)))
            except Exception as exc:  # surfaced on the caller's thread
                errors.append(exc)
            finally:
                q.put(None)

        worker = threading.Thread(target=producer, daemon=True)
        worker.start()
        while (item := q.get()) is not None:
            render(*item)
        worker.join()
        if errors:
            raise errors[0]
    return AudioBuffer(np.concatenate(chunks), rate), rec.events


def build_training_sample(segments, rng: np.random.Generator, min_seconds=MIN_SAMPLE_SECONDS, max_seconds=MAX_SAMPLE_SECONDS):
    """Concatenate random same-speaker segments up to a random target duration.

    ``segments`` holds ``(AudioBuffer, speaker_id)`` pairs. The target is drawn
    uniformly from ``[min_seconds, max_seconds]``; segments are drawn with
    replacement until the running duration reaches it.
    """
    segments = list(segments)
    if not segments:
        raise InvalidConfig("no segments to build from")
    speakers = {spk for _, spk in segments}
    if len(speakers) > 1:
        raise SpeakerMismatch(f"segments from several speakers: {sorted(map(str, speakers))}")
    rates = {a.sample_rate for a, _ in segments}
    if len(rates) > 1:
        raise InvalidConfig("segments have different sample rates")
    if any(len(a) == 0 for a, _ in segments):
        raise InvalidConfig("empty segment")
    target = rng.uniform(min_seconds, max_seconds)
    parts, total = [], 0.0
    while total < target:
        audio, _ = segments[rng.integers(len(segments))]
        parts.append(audio.samples)
        total += audio.duration
    return AudioBuffer(np.concatenate(parts), rates.pop())


def _pad_pairs(texts, codes):
    lengths = [len(t) for t in texts]
    for t, c in zip(texts, codes):
        if len(t) != len(c):
            raise ShapeMismatch("each text sequence needs exactly one code per token")
    T = max(lengths)
    L = np.asarray(codes[0]).shape[-1]
    text = np.full((len(texts), T), PAD, dtype=np.int64)
    code = np.zeros((len(texts), T, L), dtype=np.int64)
    for i, (t, c) in enumerate(zip(texts, codes)):
        text[i, : len(t)] = t
        code[i, : len(t)] = c
    return torch.from_numpy(text), torch.from_numpy(code), torch.tensor(lengths)


class StreamingTTS(BaseEstimator):
    """Estimator wrapper around :class:`TTSModel`.

    ``fit(texts, codes)`` runs teacher-forced training; ``predict(texts)``
    returns greedily decoded codes; ``new_session`` opens a streaming session.
    """

    def __init__(self, codebooks=None, config=None, n_steps=200, learning_rate=6e-3, random_state=0):
        self.codebooks = codebooks
        self.config = config
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.random_state = random_state

    @property
    def cfg(self) -> TTSConfig:
        return self.config if self.config is not None else TTSConfig()

    def _build(self):
        if self.codebooks is None:
            raise ConfigMismatch("StreamingTTS needs codebooks")
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state)
            self.model_ = TTSModel(self.cfg, self.codebooks)
        return self

    def initialize(self):
        return self._build()

    def loss(self, texts, codes, generator=None, mask_levels=None):
        text, code, lengths = _pad_pairs(texts, codes)
        return teacher_forced_loss(text, code, self.model_, mask_levels, generator, lengths)

    def fit(self, X, y, callback=None):
        """``X``: list of token sequences; ``y``: matching list of (T, L) code arrays."""
        if not hasattr(self, "model_"):
            self._build()
        for c in y:
            if np.asarray(c).shape[-1] != self.codebooks.levels or np.max(c) >= self.codebooks.entries:
                raise ConfigMismatch("training codes do not match the codebooks")
        text, code, lengths = _pad_pairs(X, y)
        params = list(self.model_.parameters())
        opt, sched = make_optimizer(params, self.learning_rate, self.n_steps, warmup=min(20, self.n_steps // 10))
        gen = torch.Generator().manual_seed(self.random_state)
        self.model_.train()
        self.loss_history_ = []
        for step in range(self.n_steps):
            loss = teacher_forced_loss(text, code, self.model_, None, gen, lengths)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 1.0)
            opt.step()
            sched.step()
            self.loss_history_.append(loss.item())
            if callback is not None:
                callback(step, self.loss_history_[-1])
        self.model_.eval()
        return self

    def new_session(self, seed: int = 0, temperature: float | None = None) -> Session:
        check_is_fitted(self, "model_")
        return Session(self.model_, seed, temperature)

    def predict(self, X, temperature: float = 0.0, seed: int = 0):
        out = []
        for tokens in X:
            s = self.new_session(seed, temperature)
            out.append(np.stack([s.step(t) for t in tokens]) if len(tokens) else np.zeros((0, self.codebooks.levels), int))
        return out

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        tensors = {k: v.numpy() for k, v in self.model_.state_dict().items()}
        books = self.codebooks
        meta = {
            "kind": "tts",
            "config": self.cfg.to_dict(),
            "codebooks": {"levels": books.levels, "entries": books.entries, "dim": books.dim},
        }
        formats.write_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path, codebooks: CodebookSet) -> "StreamingTTS":
        tensors, meta = formats.read_checkpoint(path)
        if meta.get("kind") != "tts":
            raise ConfigMismatch(f"{path} is not a TTS checkpoint")
        shape = meta["codebooks"]
        if (shape["levels"], shape["entries"], shape["dim"]) != (codebooks.levels, codebooks.entries, codebooks.dim):
            raise ConfigMismatch(f"TTS checkpoint expects codebooks {shape}")
        est = cls(codebooks=codebooks, config=TTSConfig.from_dict(meta["config"]))._build()
        try:
            est.model_.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
        except RuntimeError as exc:
            raise ConfigMismatch(f"TTS checkpoint does not match its config: {exc}") from exc
        est.model_.eval()
        return est


__all__ = [
    "Session",
    "StreamingTTS",
    "TTSConfig",
    "TTSModel",
    "UnmaskSchedule",
    "build_training_sample",
    "encode_text",
    "iterative_unmask",
    "sample_mog",
    "synthesize",
    "teacher_forced_loss",
]
