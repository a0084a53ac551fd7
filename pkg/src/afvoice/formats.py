"""Bit-exact binary containers.

All integers and floats are little-endian.

AFFE  feature dump    magic, u16 version, u16 frame_rate, u32 N, u32 d, N*d f32
AFCB  codebooks       magic, u16 version, u16 L, u32 K, u32 D, L*K*D f32
AFRQ  token stream    magic, u16 version, u32 sample_rate, u16 L, u32 K, u64 T, T*L u16
AFCK  checkpoint      magic, u16 version, u32 manifest bytes, JSON manifest, f32 blobs

A feature dump may hold several AFFE records back to back, one per window.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch, CorruptCode, FormatError

VERSION = 1

_AFFE = struct.Struct("<4sHHII")
_AFCB = struct.Struct("<4sHHII")
_AFRQ = struct.Struct("<4sHIHIQ")
_AFCK = struct.Struct("<4sHI")


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def _check_magic(data: bytes, magic: bytes, header: struct.Struct, offset: int = 0):
    if len(data) - offset < header.size:
        raise FormatError(f"truncated {magic.decode()} header")
    fields = header.unpack_from(data, offset)
    if fields[0] != magic:
        raise FormatError(f"bad magic {fields[0]!r}, expected {magic!r}")
    if fields[1] != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {fields[1]}")
    return fields[2:]


def _floats(data: bytes, offset: int, count: int, what: str) -> np.ndarray:
    end = offset + 4 * count
    if len(data) < end:
        raise FormatError(f"truncated {what} payload")
    return np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32)


# -- AFFE ---------------------------------------------------------------------

def pack_features(frames: np.ndarray, frame_rate: int) -> bytes:
    frames = np.asarray(frames, dtype="<f4")
    n, d = frames.shape
    return _AFFE.pack(b"AFFE", VERSION, int(frame_rate), n, d) + frames.tobytes()


def unpack_features(data: bytes) -> list[tuple[np.ndarray, int]]:
    """Return ``[(frames, frame_rate), ...]`` for every record in the dump."""
    out = []
    pos = 0
    while pos < len(data):
        frame_rate, n, d = _check_magic(data, b"AFFE", _AFFE, pos)
        pos += _AFFE.size
        frames = _floats(data, pos, n * d, "AFFE").reshape(n, d)
        pos += 4 * n * d
        out.append((frames, frame_rate))
    if not out:
        raise FormatError("empty feature dump")
    return out


def write_features(path, records) -> None:
    Path(path).write_bytes(b"".join(pack_features(f, r) for f, r in records))


def read_features(path):
    return unpack_features(_read(path))


# -- AFCB ---------------------------------------------------------------------

def pack_codebooks(codewords: np.ndarray) -> bytes:
    L, K, D = codewords.shape
    return _AFCB.pack(b"AFCB", VERSION, L, K, D) + np.asarray(codewords, dtype="<f4").tobytes()


def unpack_codebooks(data: bytes) -> np.ndarray:
    L, K, D = _check_magic(data, b"AFCB", _AFCB)
    return _floats(data, _AFCB.size, L * K * D, "AFCB").reshape(L, K, D)


# -- AFRQ ---------------------------------------------------------------------

def pack_tokens(codes: np.ndarray, sample_rate: int, n_codes: int) -> bytes:
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise FormatError("token array must be (frames, levels)")
    if n_codes > 65536:
        raise ConfigMismatch("AFRQ stores u16 indices; K must be <= 65536")
    if codes.size and (codes.min() < 0 or codes.max() >= n_codes):
        raise CorruptCode(f"token indices must lie in [0, {n_codes})")
    T, L = codes.shape
    return _AFRQ.pack(b"AFRQ", VERSION, sample_rate, L, n_codes, T) + codes.astype("<u2").tobytes()


def unpack_tokens(data: bytes) -> tuple[np.ndarray, int, int]:
    """Return ``(codes[T, L], sample_rate, K)``."""
    sample_rate, L, K, T = _check_magic(data, b"AFRQ", _AFRQ)
    need = _AFRQ.size + 2 * T * L
    if len(data) < need:
        raise FormatError("truncated AFRQ payload")
    codes = np.frombuffer(data, dtype="<u2", count=T * L, offset=_AFRQ.size).reshape(T, L)
    return codes.astype(np.int64), sample_rate, K


def write_tokens(path, codes, sample_rate, n_codes) -> None:
    Path(path).write_bytes(pack_tokens(codes, sample_rate, n_codes))


def read_tokens(path):
    return unpack_tokens(_read(path))


# -- checkpoint container -------------------------------------------------------

def pack_checkpoint(tensors: dict, meta: dict | None = None) -> bytes:
    """Serialize named float arrays plus a JSON-able ``meta`` dict."""
    manifest = {"meta": meta or {}, "tensors": []}
    blobs = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(manifest, sort_keys=True).encode()
    return _AFCK.pack(b"AFCK", VERSION, len(head)) + head + b"".join(blobs)


def unpack_checkpoint(data: bytes) -> tuple[dict, dict]:
    (size,) = _check_magic(data, b"AFCK", _AFCK)
    start = _AFCK.size + size
    try:
        manifest = json.loads(data[_AFCK.size : start])
    except ValueError as exc:
        raise FormatError("corrupt checkpoint manifest") from exc
    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = _floats(data, start + entry["offset"], count, "checkpoint")
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, manifest["meta"]


def write_checkpoint(path, tensors, meta=None) -> None:
    Path(path).write_bytes(pack_checkpoint(tensors, meta))


def read_checkpoint(path):
    return unpack_checkpoint(_read(path))
