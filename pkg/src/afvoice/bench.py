"""Latency analysis over token event streams.

All arithmetic runs on integer nanoseconds and converts to seconds once at the
end, so reports built from simulated streams are exact and re-analysis of a
saved log is bitwise reproducible.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
import json
import math

import numpy as np

from .errors import EmptyStream
from .events import AUDIO, TEXT, SimulatedClock, TokenEvent
from .tts import synthesize

PAPER_TTFT = 0.15
PAPER_ITL = 0.06
PAPER_TOKEN_GEN_SECONDS = 5.94  # hardware-bound; documented, never asserted
PAPER_WAVEFORM_SECONDS = 0.02
PAPER_TOTAL_SECONDS = 6.68
DEFAULT_BENCH_TOKENS = 108  # ~10 s of audio at 4096 samples / 44.1 kHz
COMPRESSION = 4096
CODEC_RATE = 44100
NS = 1_000_000_000


@dataclass(frozen=True)
class LatencyReport:
    ttft: float
    itl_mean: float | None
    itl_p50: float | None
    itl_p95: float | None
    token_gen_total: float
    waveform_total: float
    audio_seconds_out: float
    wall_total: float
    n_tokens: int
    degenerate: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return str(v).lower()
    return repr(v)


def nearest_rank(sorted_values, q: float) -> int:
    """Nearest-rank percentile of an ascending sequence, ``0 < q <= 100``."""
    rank = max(1, math.ceil(q / 100 * len(sorted_values)))
    return sorted_values[rank - 1]


def analyze(events, t0: float = 0.0, *, t0_ns: int | None = None, compression: int = COMPRESSION, sample_rate: int = CODEC_RATE) -> LatencyReport:
    """Summarize a time-ordered event stream; ``t0`` marks the request start."""
    start = int(t0_ns) if t0_ns is not None else int(round(t0 * NS))
    audio = [e for e in events if e.kind == AUDIO]
    if not audio:
        raise EmptyStream("no audio events to analyze")
    stamps = [e.timestamp_ns for e in audio]
    gaps = [b - a for a, b in zip(stamps, stamps[1:])]
    ordered = sorted(gaps)
    n = len(audio)
    return LatencyReport(
        ttft=(stamps[0] - start) / NS,
        itl_mean=sum(gaps) / len(gaps) / NS if gaps else None,
        itl_p50=nearest_rank(ordered, 50) / NS if gaps else None,
        itl_p95=nearest_rank(ordered, 95) / NS if gaps else None,
        token_gen_total=sum(e.token_gen_ns or 0 for e in audio) / NS,
        waveform_total=sum(e.waveform_ns or 0 for e in audio) / NS,
        audio_seconds_out=n * compression / sample_rate,
        wall_total=(stamps[-1] - start) / NS,
        n_tokens=n,
        degenerate=not gaps,
    )


def simulated_events(n_tokens: int, ttft: float = PAPER_TTFT, itl: float = PAPER_ITL, t0: float = 0.0) -> list[TokenEvent]:
    """Alternating text/audio events with audio at ``t0 + ttft + i*itl``.

    Text event ``i`` is stamped at the previous audio emission (``t0`` for the
    first); analysis only reads audio stamps.
    """
    start, first, gap = (int(round(v * NS)) for v in (t0, ttft, itl))
    out, prev = [], start
    for i in range(n_tokens):
        at = start + first + i * gap
        out.append(TokenEvent(TEXT, i, prev))
        out.append(TokenEvent(AUDIO, i, at))
        prev = at
    return out


class MockSession:
    """Stands in for a TTS session: each step costs ``step_seconds`` of simulated time."""

    def __init__(self, clock: SimulatedClock, step_seconds: float = 0.01, levels: int = 8, seed: int = 0):
        self.clock = clock
        self.step_seconds = step_seconds
        self.levels = levels
        self.text_consumed = self.audio_emitted = 0
        self._rng = np.random.default_rng(seed)

    def step(self, token) -> np.ndarray:
        self.clock.advance(self.step_seconds)
        self.text_consumed += 1
        self.audio_emitted += 1
        return self._rng.integers(0, 64, self.levels)


class MockCodec:
    """Emits silent compression units, each costing ``synth_seconds`` of simulated time."""

    def __init__(self, clock: SimulatedClock, synth_seconds: float = 0.0, compression: int = COMPRESSION, sample_rate: int = CODEC_RATE):
        self.clock = clock
        self.synth_seconds = synth_seconds
        self.compression = compression
        self.sample_rate = sample_rate

    def new_stream(self):
        return object()

    def streaming_decode(self, state, code) -> np.ndarray:
        self.clock.advance(self.synth_seconds)
        return np.zeros(self.compression, dtype=np.float32)


def bench_synthesize(text_tokens, session, codec, clock, threaded: bool = False):
    """Run :func:`synthesize` under ``clock`` and return ``(report, audio, events)``."""
    t0 = clock.now_ns()
    audio, events = synthesize(text_tokens, session, codec, clock=clock, threaded=threaded)
    compression = getattr(codec, "compression", None) or codec.cfg.compression
    rate = getattr(codec, "sample_rate", None) or codec.cfg.sample_rate
    return analyze(events, t0_ns=t0, compression=compression, sample_rate=rate), audio, events
