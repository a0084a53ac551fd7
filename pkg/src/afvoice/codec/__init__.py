"""Causal convolutional audio codec with residual vector quantization."""
from .codec import (
    LatentSequence,
    NeuralCodec,
    commitment_loss,
    mel_recon_loss,
    synthetic_tones,
    torch_log_mel,
)
from .config import PAPER_CODEC, CodecConfig
from .layers import StreamState

__all__ = [
    "CodecConfig",
    "LatentSequence",
    "NeuralCodec",
    "PAPER_CODEC",
    "StreamState",
    "commitment_loss",
    "mel_recon_loss",
    "synthetic_tones",
    "torch_log_mel",
]
