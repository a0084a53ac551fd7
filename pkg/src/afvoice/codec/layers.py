"""Causal building blocks and the STFT front/back ends of the codec.

Every layer takes an optional ``stream`` (a :class:`StreamState`). Without it
the layer zero-pads on the left; with it, the left context comes from the
stream's buffer and the buffer is advanced.
"""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

MAG_EPS = 1e-4
MAX_LOG_MAG = 12.0


class StreamState:
    """Left-context buffers for one streaming decode session."""

    def __init__(self, signature):
        self.signature = signature
        self.buffers: dict[str, torch.Tensor] = {}
        self.tail: torch.Tensor | None = None
        self.frames = 0


def hann(window: int, dtype=torch.float32) -> torch.Tensor:
    n = torch.arange(window, dtype=torch.float64)
    return (0.5 - 0.5 * torch.cos(2 * math.pi * n / window)).to(dtype)


def analysis_frames(x: torch.Tensor, window: int, hop: int) -> torch.Tensor:
    """Causal STFT of (B, N) audio, N a multiple of hop.

    Frame ``i`` covers samples ``[i*hop - (window - hop), (i+1)*hop)`` with
    zeros before the start, so it never looks past its own hop.
    """
    padded = F.pad(x, (window - hop, 0))
    frames = padded.unfold(-1, window, hop) * hann(window, x.dtype)
    return torch.fft.rfft(frames, n=window, dim=-1)


def encoder_features(spec: torch.Tensor) -> torch.Tensor:
    """(B, F, bins) complex -> (B, 2*bins, F): compressed log-magnitude then phase."""
    mag = torch.log1p(spec.abs() / MAG_EPS)
    # empty bins get phase 0 (rfft can return -0.0 real parts, whose angle is pi)
    phase = torch.where(spec.abs() > 0, torch.angle(spec), torch.zeros_like(mag))
    return torch.cat([mag, phase], dim=-1).transpose(1, 2)


def synthesis_spectrum(params: torch.Tensor) -> torch.Tensor:
    """(B, 2*bins, F) predicted parameters -> (B, F, bins) complex spectrum.

    Magnitude is the inverse of :func:`encoder_features`' compression; a
    negative value is a half-turn phase flip, so zero parameters give silence.
    """
    bins = params.shape[1] // 2
    log_mag, phase = params[:, :bins].transpose(1, 2), params[:, bins:].transpose(1, 2)
    mag = MAG_EPS * torch.expm1(torch.clamp(log_mag, max=MAX_LOG_MAG))
    return torch.complex(mag * torch.cos(phase), mag * torch.sin(phase))


def overlap_add(spec: torch.Tensor, window: int, hop: int, tail: torch.Tensor | None = None):
    """Inverse STFT by overlap-add; frame ``i`` lands on samples ``[i*hop, i*hop + window)``.

    Returns ``(audio[B, F*hop], new_tail[B, window - hop])``. Feeding the tail
    back in makes chunked synthesis identical to one-shot synthesis.
    """
    B, n, _ = spec.shape
    w = hann(window, spec.real.dtype)
    norm = float((hann(window, torch.float64) ** 2).reshape(-1, hop).sum(0)[0])
    segs = torch.fft.irfft(spec, n=window, dim=-1) * (w / norm)
    total = (n - 1) * hop + window
    out = F.fold(segs.transpose(1, 2), output_size=(1, total), kernel_size=(1, window), stride=(1, hop))
    out = out.reshape(B, total)
    if tail is not None:
        out = torch.cat([out[:, : window - hop] + tail, out[:, window - hop :]], dim=1)
    return out[:, : n * hop], out[:, n * hop :]


class CausalConv1d(nn.Module):
    """Conv1d on (B, C, T) whose output at t sees inputs <= t only.

    With ``stride == kernel`` the layer is a non-overlapping downsampler that
    needs no padding or state.
    """

    def __init__(self, c_in, c_out, kernel, stride=1, groups=1, bias=True):
        super().__init__()
        if stride != 1 and stride != kernel:
            raise ValueError("strided causal conv requires stride == kernel")
        self.kernel, self.stride = kernel, stride
        self.conv = nn.Conv1d(c_in, c_out, kernel, stride=stride, groups=groups, bias=bias)
        self.cache_key = ""

    def forward(self, x: torch.Tensor, stream: StreamState | None = None) -> torch.Tensor:
        ctx = self.kernel - 1 if self.stride == 1 else 0
        if ctx:
            if stream is None:
                x = F.pad(x, (ctx, 0))
            else:
                prev = stream.buffers.get(self.cache_key)
                if prev is None:
                    prev = x.new_zeros(x.shape[0], x.shape[1], ctx)
                x = torch.cat([prev, x], dim=-1)
                stream.buffers[self.cache_key] = x[..., -ctx:]
        return self.conv(x)


class ConvNeXtBlock(nn.Module):
    """Causal depthwise conv, channel LayerNorm, pointwise expand, GELU, project, residual."""

    def __init__(self, dim, kernel=7, expansion=3, layer_scale=0.1):
        super().__init__()
        self.dwconv = CausalConv1d(dim, dim, kernel, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Linear(dim, expansion * dim)
        self.pw2 = nn.Linear(expansion * dim, dim)
        self.gamma = nn.Parameter(torch.full((dim,), float(layer_scale)))

    def forward(self, x, stream=None):
        h = self.dwconv(x, stream).transpose(1, 2)
        h = self.pw2(F.gelu(self.pw1(self.norm(h))))
        return x + (self.gamma * h).transpose(1, 2)
