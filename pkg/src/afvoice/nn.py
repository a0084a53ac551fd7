"""Transformer decoder, mixture-of-Gaussians head and training helpers.

Tensors are ``torch.Tensor``; reverse-mode gradients come from torch autograd.
Everything runs in float32 unless a module is explicitly cast with ``.double()``,
which the gradient tests do.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import torch
from torch import nn

from .errors import GraphError, InvalidSignal, SequenceTooLong, ShapeMismatch

PAPER_MIXTURES = 1024
PAPER_HEAD_LAYERS = 3
# DiT-XL shape, which the production decoder is described as resembling.
PAPER_DIT_XL = {"layers": 28, "heads": 16, "width": 1152}
LOG_VAR_FLOOR = math.log(1e-4)
ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 4
    heads: int = 4
    width: int = 128
    ff_width: int = 512
    max_seq_len: int = 1024
    text_vocab: int = 259
    audio_dim: int = 24
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.width % self.heads:
            raise ShapeMismatch(f"width {self.width} is not divisible by heads {self.heads}")
        if (self.width // self.heads) % 2:
            raise ShapeMismatch("rotary embeddings need an even head dimension")


def _rotate(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotary position embedding on the last dim of ``x`` (B, H, T, Dh)."""
    half = x.shape[-1] // 2
    freqs = base ** (-torch.arange(half, dtype=x.dtype, device=x.device) / half)
    angles = positions.to(x.dtype)[:, None] * freqs[None, :]
    cos, sin = angles.cos(), angles.sin()
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class KVCache:
    """Per-layer key/value history for incremental decoding."""

    def __init__(self, layers: int):
        self.keys = [None] * layers
        self.values = [None] * layers
        self.length = 0


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.width // cfg.heads
        self.base = cfg.rope_base
        self.qkv = nn.Linear(cfg.width, 3 * cfg.width)
        self.out = nn.Linear(cfg.width, cfg.width)

    def attention_weights(self, x, positions, past_k=None, past_v=None):
        B, T, W = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q = _rotate(q, positions, self.base)
        k = _rotate(k, positions, self.base)
        if past_k is not None:
            k = torch.cat([past_k, k], dim=2)
            v = torch.cat([past_v, v], dim=2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        key_pos = torch.arange(k.shape[2], device=x.device)
        visible = key_pos[None, :] <= positions[:, None]
        scores = scores.masked_fill(~visible, float("-inf"))
        return torch.softmax(scores, dim=-1), k, v

    def forward(self, x, positions, cache: KVCache | None = None, layer: int = 0):
        past_k = past_v = None
        if cache is not None and cache.keys[layer] is not None:
            past_k, past_v = cache.keys[layer], cache.values[layer]
        probs, k, v = self.attention_weights(x, positions, past_k, past_v)
        if cache is not None:
            cache.keys[layer], cache.values[layer] = k, v
        y = (probs @ v).transpose(1, 2).reshape(x.shape)
        return self.out(y)


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.width)
        self.attn = CausalSelfAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.width)
        self.ff = nn.Sequential(nn.Linear(cfg.width, cfg.ff_width), nn.GELU(), nn.Linear(cfg.ff_width, cfg.width))

    def forward(self, x, positions, cache=None, layer=0):
        x = x + self.attn(self.norm1(x), positions, cache, layer)
        return x + self.ff(self.norm2(x))


class TransformerDecoder(nn.Module):
    """Pre-norm causal decoder over already-embedded inputs (B, T, width)."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.width)

    def forward(self, x: torch.Tensor, cache: KVCache | None = None) -> torch.Tensor:
        start = cache.length if cache is not None else 0
        T = x.shape[1]
        if start + T > self.cfg.max_seq_len:
            raise SequenceTooLong(f"sequence of {start + T} exceeds max_seq_len {self.cfg.max_seq_len}")
        positions = torch.arange(start, start + T, device=x.device)
        for i, block in enumerate(self.blocks):
            x = block(x, positions, cache, i)
        if cache is not None:
            cache.length = start + T
        return self.norm(x)


def decoder_forward(tokens: torch.Tensor, decoder: TransformerDecoder) -> torch.Tensor:
    return decoder(tokens)


@dataclass
class MoGParams:
    logits: torch.Tensor  # (..., M)
    means: torch.Tensor  # (..., M, D)
    log_vars: torch.Tensor  # (..., M, D)

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def mixtures(self) -> int:
        return self.logits.shape[-1]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]


class MoGHead(nn.Module):
    """Three-layer MLP from (decoder hidden, committed-level embedding) to mixture parameters."""

    def __init__(self, width: int, audio_dim: int, mixtures: int, hidden: int = 256, log_var_floor=LOG_VAR_FLOOR):
        super().__init__()
        self.width, self.audio_dim, self.mixtures = width, audio_dim, mixtures
        self.log_var_floor = log_var_floor
        self.net = nn.Sequential(
            nn.Linear(width + audio_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, mixtures * (1 + 2 * audio_dim)),
        )

    def forward(self, hidden: torch.Tensor, unmasked: torch.Tensor) -> MoGParams:
        if hidden.shape[-1] != self.width or unmasked.shape[-1] != self.audio_dim:
            raise ShapeMismatch(
                f"head expects widths ({self.width}, {self.audio_dim}), "
                f"got ({hidden.shape[-1]}, {unmasked.shape[-1]})"
            )
        out = self.net(torch.cat([hidden, unmasked], dim=-1))
        M, D = self.mixtures, self.audio_dim
        logits = out[..., :M]
        rest = out[..., M:].reshape(*out.shape[:-1], M, 2 * D)
        log_vars = torch.clamp(rest[..., D:], min=self.log_var_floor)
        return MoGParams(logits, rest[..., :D], log_vars)


def mlp_head(hidden, unmasked_embedding, head: MoGHead) -> MoGParams:
    return head(hidden, unmasked_embedding)


def mog_log_prob(params: MoGParams, target: torch.Tensor) -> torch.Tensor:
    """log p(target) under the diagonal mixture; batch dims broadcast."""
    for t in (params.logits, params.means, params.log_vars, target):
        if not torch.isfinite(t).all():
            raise InvalidSignal("mixture parameters or target contain NaN/Inf")
    diff = target.unsqueeze(-2) - params.means
    comp = -0.5 * ((diff * diff) * torch.exp(-params.log_vars) + params.log_vars + math.log(2 * math.pi)).sum(-1)
    return torch.logsumexp(torch.log_softmax(params.logits, dim=-1) + comp, dim=-1)


def mog_nll(params: MoGParams, target: torch.Tensor) -> torch.Tensor:
    """Negative log-likelihood of ``target``; one value per batch element."""
    return -mog_log_prob(params, target)


def backward(loss: torch.Tensor, parameters) -> list[torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. ``parameters`` (zeros for unused ones)."""
    parameters = list(parameters)
    if loss.numel() != 1:
        raise GraphError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise GraphError("loss is not attached to a recorded computation")
    grads = torch.autograd.grad(loss, parameters, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(parameters, grads)]


def make_optimizer(parameters, lr: float, total_steps: int, warmup: int = 0):
    """Adam (betas 0.9/0.95) with linear warmup and cosine decay to zero."""
    opt = torch.optim.Adam(parameters, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)

    def schedule(step):
        if warmup and step < warmup:
            return (step + 1) / warmup
        progress = min(1.0, (step - warmup) / max(1, total_steps - warmup))
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, schedule)
