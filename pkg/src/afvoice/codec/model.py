from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .config import CodecConfig
from .layers import (
    CausalConv1d,
    ConvNeXtBlock,
    StreamState,
    analysis_frames,
    encoder_features,
    overlap_add,
    synthesis_spectrum,
)

HEAD_LOG_MAG_INIT = 7.0  # start near |X| ~ 0.1 instead of silence
LAYER_SCALE_INIT = 1.0


class Encoder(nn.Module):
    """Audio (B, N) -> latents (B, D, N / compression)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv1d(cfg.spectral_channels, cfg.initial_width, 1)
        dims = [cfg.initial_width, *cfg.widths]
        self.stages = nn.ModuleList()
        for c_in, c_out in zip(dims[:-1], dims[1:]):
            blocks = nn.ModuleList(
                ConvNeXtBlock(c_in, cfg.convnext_kernel, cfg.expansion, LAYER_SCALE_INIT) for _ in range(cfg.blocks_per_stage)
            )
            self.stages.append(nn.ModuleDict({"blocks": blocks, "down": CausalConv1d(c_in, c_out, cfg.kernel, cfg.stride)}))

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        unit = self.cfg.compression
        pad = (-audio.shape[-1]) % unit
        if pad:
            audio = F.pad(audio, (0, pad))
        x = self.stem(encoder_features(analysis_frames(audio, self.cfg.window, self.cfg.hop)))
        for stage in self.stages:
            for block in stage["blocks"]:
                x = block(x)
            x = stage["down"](x)
        return x


class Decoder(nn.Module):
    """Latents (B, D, T) -> audio (B, T * compression), mirroring :class:`Encoder`."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.initial_width, *cfg.widths][::-1]
        self.stages = nn.ModuleList()
        for c_in, c_out in zip(dims[:-1], dims[1:]):
            up = nn.ConvTranspose1d(c_in, c_out, cfg.kernel, stride=cfg.stride)
            blocks = nn.ModuleList(
                ConvNeXtBlock(c_out, cfg.convnext_kernel, cfg.expansion, LAYER_SCALE_INIT) for _ in range(cfg.blocks_per_stage)
            )
            self.stages.append(nn.ModuleDict({"up": up, "blocks": blocks}))
        self.head = nn.Conv1d(cfg.initial_width, cfg.spectral_channels, 1)
        with torch.no_grad():
            self.head.bias[: cfg.bins] += HEAD_LOG_MAG_INIT

    def spectral_params(self, z: torch.Tensor, stream: StreamState | None = None) -> torch.Tensor:
        x = z
        for stage in self.stages:
            # kernel == stride: every input frame maps to its own block of outputs
            x = stage["up"](x)
            for block in stage["blocks"]:
                x = block(x, stream)
        return self.head(x)

    def forward(self, z: torch.Tensor, stream: StreamState | None = None) -> torch.Tensor:
        spec = synthesis_spectrum(self.spectral_params(z, stream))
        tail = None if stream is None else stream.tail
        audio, tail = overlap_add(spec, self.cfg.window, self.cfg.hop, tail)
        if stream is not None:
            stream.tail = tail
            stream.frames += z.shape[-1]
        return audio


def assign_cache_keys(module: nn.Module) -> None:
    for name, m in module.named_modules():
        if isinstance(m, CausalConv1d):
            m.cache_key = name
