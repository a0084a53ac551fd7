"""RIFF/WAVE reading and writing for 16-bit PCM and 32-bit IEEE-float audio.

Multi-channel input is downmixed to mono by averaging channels. Compressed
formats (ADPCM, mu-law, ...) are rejected with FormatError.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .dsp import AudioBuffer
from .errors import FormatError

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        yield cid, body
        pos += 8 + size + (size & 1)


def parse_wav(data: bytes) -> AudioBuffer:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE file")
    fmt = None
    payload = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError("truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 26:
                    raise FormatError("truncated WAVE_FORMAT_EXTENSIBLE header")
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None:
        raise FormatError("missing fmt or data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise FormatError("invalid channel count or sample rate")
    if tag == WAVE_FORMAT_PCM and bits == 16:
        x = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float32) / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        x = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float32)
    else:
        raise FormatError(f"unsupported WAV encoding (format tag {tag:#x}, {bits} bits)")
    x = x[: x.size // channels * channels].reshape(-1, channels)
    mono = x.mean(axis=1, dtype=np.float64).astype(np.float32) if channels > 1 else x[:, 0].copy()
    return AudioBuffer(mono, rate)


def read_wav(path) -> AudioBuffer:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return parse_wav(data)


def wav_bytes(audio: AudioBuffer, subtype: str = "PCM_16") -> bytes:
    x = np.asarray(audio.samples, dtype=np.float64)
    if subtype == "PCM_16":
        pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = WAVE_FORMAT_PCM, 16
    elif subtype == "FLOAT":
        pcm = x.astype("<f4").tobytes()
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown subtype {subtype!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, audio.sample_rate, audio.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(pcm)) + pcm
    if len(pcm) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, audio: AudioBuffer, subtype: str = "PCM_16") -> None:
    Path(path).write_bytes(wav_bytes(audio, subtype))
