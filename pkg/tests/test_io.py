import io
import json
import struct
import wave

import numpy as np
import pytest

from afvoice import formats
from afvoice.dsp import AudioBuffer
from afvoice.errors import ConfigMismatch, CorruptCode, FormatError
from afvoice.events import AUDIO, TEXT, TokenEvent, read_event_log, write_event_log
from afvoice.wavio import parse_wav, read_wav, wav_bytes, write_wav


def stdlib_wav(samples_i16: np.ndarray, rate: int, channels: int = 1) -> bytes:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(samples_i16.astype("<i2").tobytes())
    return buf.getvalue()


def test_pcm16_reader_agrees_with_stdlib_writer():
    pcm = np.random.default_rng(0).integers(-32768, 32767, 1000, dtype=np.int16)
    audio = parse_wav(stdlib_wav(pcm, 22050))
    assert audio.sample_rate == 22050
    np.testing.assert_array_equal(audio.samples, pcm.astype(np.float32) / 32768)


def test_pcm16_writer_is_readable_by_stdlib():
    x = np.linspace(-0.5, 0.5, 101).astype(np.float32)
    with wave.open(io.BytesIO(wav_bytes(AudioBuffer(x, 16000))), "rb") as w:
        assert (w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()) == (1, 2, 16000, 101)
        raw = np.frombuffer(w.readframes(101), dtype="<i2")
    np.testing.assert_array_equal(raw, np.round(x.astype(np.float64) * 32767).astype(np.int16))


def test_stereo_downmix_averages_channels():
    left = np.full(10, 1000, dtype=np.int16)
    right = np.full(10, -3000, dtype=np.int16)
    inter = np.stack([left, right], axis=1).reshape(-1)
    audio = parse_wav(stdlib_wav(inter, 8000, channels=2))
    np.testing.assert_allclose(audio.samples, np.full(10, -1000 / 32768), rtol=1e-6)


def test_float_round_trip_is_exact(tmp_path):
    x = np.random.default_rng(1).uniform(-1, 1, 257).astype(np.float32)
    write_wav(tmp_path / "f.wav", AudioBuffer(x, 44100), subtype="FLOAT")
    np.testing.assert_array_equal(read_wav(tmp_path / "f.wav").samples, x)


def test_extensible_header_with_pcm_subformat():
    fmt = struct.pack("<HHIIHH", 0xFFFE, 1, 8000, 16000, 2, 16) + struct.pack("<HHI", 22, 16, 3) + struct.pack("<H", 1) + b"\x00" * 14
    data = np.array([100, -200], dtype="<i2").tobytes()
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    audio = parse_wav(b"RIFF" + struct.pack("<I", len(body)) + body)
    np.testing.assert_array_equal(audio.samples, np.array([100, -200], dtype=np.float32) / 32768)


@pytest.mark.parametrize("tag,bits", [(0x0007, 8), (0x0002, 4), (0x0001, 24)])
def test_compressed_or_unsupported_wav_is_rejected(tag, bits):
    fmt = struct.pack("<HHIIHH", tag, 1, 8000, 8000, 1, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", 2) + b"\x00\x00"
    with pytest.raises(FormatError):
        parse_wav(b"RIFF" + struct.pack("<I", len(body)) + body)


def test_garbage_is_not_a_wav(tmp_path):
    with pytest.raises(FormatError):
        parse_wav(b"hello world, not audio")
    with pytest.raises(FormatError):
        read_wav(tmp_path / "missing.wav")


def test_afrq_layout_is_bit_exact():
    codes = np.array([[1, 2], [65535, 0], [7, 8]])
    blob = formats.pack_tokens(codes, 44100, 65536)
    header = struct.pack("<4sHIHIQ", b"AFRQ", 1, 44100, 2, 65536, 3)
    assert blob == header + np.array([1, 2, 65535, 0, 7, 8], dtype="<u2").tobytes()
    back, rate, k = formats.unpack_tokens(blob)
    assert rate == 44100 and k == 65536
    np.testing.assert_array_equal(back, codes)


def test_afrq_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigMismatch):
        formats.pack_tokens(np.zeros((1, 1), int), 44100, 70000)
    with pytest.raises(CorruptCode):
        formats.pack_tokens(np.array([[64]]), 44100, 64)
    blob = formats.pack_tokens(np.zeros((4, 2), int), 44100, 64)
    with pytest.raises(FormatError):
        formats.unpack_tokens(blob[:-1])
    with pytest.raises(FormatError):
        formats.unpack_tokens(b"AFRX" + blob[4:])
    with pytest.raises(FormatError):
        formats.unpack_tokens(blob[:4] + struct.pack("<H", 9) + blob[6:])


def test_affe_multi_record_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
    b = np.random.default_rng(1).standard_normal((2, 3)).astype(np.float32)
    formats.write_features(tmp_path / "x.affe", [(a, 25), (b, 50)])
    blob = (tmp_path / "x.affe").read_bytes()
    assert blob[: formats._AFFE.size] == struct.pack("<4sHHII", b"AFFE", 1, 25, 5, 3)
    (ra, rr), (rb, rb_rate) = formats.read_features(tmp_path / "x.affe")
    np.testing.assert_array_equal(ra, a)
    np.testing.assert_array_equal(rb, b)
    assert (rr, rb_rate) == (25, 50)


def test_afcb_round_trip_and_header():
    cw = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    blob = formats.pack_codebooks(cw)
    assert blob[:16] == struct.pack("<4sHHII", b"AFCB", 1, 2, 3, 4)
    np.testing.assert_array_equal(formats.unpack_codebooks(blob), cw)
    with pytest.raises(FormatError):
        formats.unpack_codebooks(blob[:-4])


def test_checkpoint_container_round_trip():
    tensors = {"w": np.ones((2, 3), np.float32), "b": np.arange(4, dtype=np.float32)}
    blob = formats.pack_checkpoint(tensors, {"kind": "demo"})
    magic, version, size = struct.unpack_from("<4sHI", blob)
    manifest = json.loads(blob[10 : 10 + size])
    assert (magic, version) == (b"AFCK", 1)
    assert [t["shape"] for t in manifest["tensors"]] == [[2, 3], [4]]
    back, meta = formats.unpack_checkpoint(blob)
    assert meta == {"kind": "demo"}
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    with pytest.raises(FormatError):
        formats.unpack_checkpoint(blob[:-1])


def test_event_log_round_trip(tmp_path):
    events = [TokenEvent(TEXT, 0, 5), TokenEvent(AUDIO, 0, 150_000_000, 100, 7)]
    write_event_log(tmp_path / "e.log", events)
    lines = (tmp_path / "e.log").read_text().splitlines()
    assert json.loads(lines[0]) == {"kind": "text", "index": 0, "timestamp_ns": 5}
    assert read_event_log(tmp_path / "e.log") == events


@pytest.mark.parametrize("line", ["{", '{"kind": "video", "index": 0, "timestamp_ns": 1}', '{"kind": "text"}'])
def test_event_log_rejects_bad_lines(tmp_path, line):
    (tmp_path / "bad.log").write_text(line + "\n")
    with pytest.raises(FormatError):
        read_event_log(tmp_path / "bad.log")
