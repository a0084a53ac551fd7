"""Token events, clocks and the line-oriented event log.

Each log line is a JSON object ``{"kind", "index", "timestamp_ns"}``; audio
events may add ``token_gen_ns`` and ``waveform_ns`` phase durations.
"""
from __future__ import annotations

from dataclasses import dataclass
import json
from pathlib import Path
import threading
import time

from .errors import FormatError

TEXT = "text"
AUDIO = "audio"


@dataclass(frozen=True)
class TokenEvent:
    kind: str
    index: int
    timestamp_ns: int
    token_gen_ns: int | None = None
    waveform_ns: int | None = None

    @property
    def timestamp(self) -> float:
        return self.timestamp_ns / 1e9

    def to_json(self) -> str:
        rec = {"kind": self.kind, "index": self.index, "timestamp_ns": self.timestamp_ns}
        if self.token_gen_ns is not None:
            rec["token_gen_ns"] = self.token_gen_ns
        if self.waveform_ns is not None:
            rec["waveform_ns"] = self.waveform_ns
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TokenEvent":
        try:
            rec = json.loads(line)
            ev = cls(
                rec["kind"],
                int(rec["index"]),
                int(rec["timestamp_ns"]),
                rec.get("token_gen_ns"),
                rec.get("waveform_ns"),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad event record: {line!r}") from exc
        if ev.kind not in (TEXT, AUDIO):
            raise FormatError(f"unknown event kind {ev.kind!r}")
        return ev


def write_event_log(path, events) -> None:
    Path(path).write_text("".join(e.to_json() + "\n" for e in events))


def read_event_log(path) -> list[TokenEvent]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return [TokenEvent.from_json(line) for line in text.splitlines() if line.strip()]


class MonotonicClock:
    def now_ns(self) -> int:
        return time.perf_counter_ns()


class SimulatedClock:
    """Manually advanced clock for deterministic timing tests. Thread-safe."""

    def __init__(self, start_ns: int = 0):
        self._now = int(start_ns)
        self._lock = threading.Lock()

    def now_ns(self) -> int:
        with self._lock:
            return self._now

    def advance(self, seconds: float = 0.0, ns: int | None = None) -> None:
        with self._lock:
            self._now += int(ns) if ns is not None else int(round(seconds * 1e9))


class EventRecorder:
    """Collects events from any thread; append order is emission order."""

    def __init__(self, clock):
        self.clock = clock
        self.events: list[TokenEvent] = []
        self._lock = threading.Lock()

    def emit(self, kind, index, token_gen_ns=None, waveform_ns=None) -> TokenEvent:
        with self._lock:
            ev = TokenEvent(kind, index, self.clock.now_ns(), token_gen_ns, waveform_ns)
            self.events.append(ev)
        return ev
