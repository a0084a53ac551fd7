"""Command-line entry point: ``afvoice {codec,tts,features,bench} ...``.

Exit status is 0 on success, 1 on runtime errors, 2 on malformed input files
and 3 on configuration mismatches.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path
import sys

import numpy as np
import torch

from . import formats
from .bench import MockCodec, MockSession, analyze, bench_synthesize
from .config import RunConfig
from .dsp import AudioBuffer
from .errors import AFVoiceError, ConfigMismatch, FormatError, InvalidConfig
from .events import MonotonicClock, SimulatedClock, read_event_log, write_event_log
from .tts import PAD, StreamingTTS, check_compatible, encode_text, synthesize
from .wavio import read_wav, write_wav

DEFAULT_BENCH_TEXT = "The quick brown fox jumps over the lazy dog while streaming speech flows token by token."


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are runtime errors here, not format errors
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON run config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="afvoice", description="Streaming speech codec and TTS toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    codec = sub.add_parser("codec", help="neural codec").add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = codec.add_parser("train", parents=[common], help="train codec and codebooks")
    p.add_argument("data", nargs="?", type=Path, help="directory of WAV files (synthetic tones if omitted)")
    p = codec.add_parser("encode", parents=[common], help="WAV -> AFRQ tokens")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True, help="codec directory")
    p = codec.add_parser("decode", parents=[common], help="AFRQ tokens -> WAV")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True, help="codec directory")

    tts = sub.add_parser("tts", help="text to speech").add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = tts.add_parser("train", parents=[common], help="teacher-forced training")
    p.add_argument("data", type=Path, help="directory of NAME.txt files with NAME.afrq or NAME.wav")
    p.add_argument("--codec", type=Path, required=True, help="codec directory")
    p = tts.add_parser("synth", parents=[common], help="synthesize text")
    p.add_argument("text")
    p.add_argument("--codec", type=Path, required=True, help="codec directory")
    p.add_argument("--tts", type=Path, required=True, help="TTS directory")

    p = sub.add_parser("features", parents=[common], help="feature front end")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path, help="AFFE dump")

    p = sub.add_parser("bench", parents=[common], help="latency benchmark")
    p.add_argument("--mock", action="store_true", help="use a simulated model and clock")
    p.add_argument("--replay", type=Path, help="analyze a saved event log")
    p.add_argument("--codec", type=Path, help="codec directory")
    p.add_argument("--tts", type=Path, help="TTS directory")
    p.add_argument("--text", help="input text (default: a fixed sentence)")
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise InvalidConfig("seed must be non-negative")
        cfg.seed = args.seed
    return cfg


def _emit(args, payload: dict) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for k, v in payload.items():
            print(f"{k}={v}")


def _load_codec(path: Path, cfg: RunConfig, explicit: bool):
    from .codec import NeuralCodec

    if path is None or not (path / "codec.ckpt").exists():
        raise ConfigMismatch(f"no codec checkpoint in {path}")
    codec = NeuralCodec.load(path)
    if explicit and codec.cfg != cfg.codec_config():
        raise ConfigMismatch("codec checkpoint does not match the given config")
    return codec


def _load_tts(path: Path, codec):
    if path is None or not (path / "tts.ckpt").exists():
        raise ConfigMismatch(f"no TTS checkpoint in {path}")
    return StreamingTTS.load(path / "tts.ckpt", codec.codebooks_)


def _wav_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FormatError(f"{directory} is not a directory")
    files = sorted(directory.glob("*.wav"))
    if not files:
        raise FormatError(f"no WAV files in {directory}")
    return files


# -- commands -----------------------------------------------------------------


def cmd_codec(args) -> int:
    from .codec import synthetic_tones

    cfg = _run_config(args)
    if args.action == "train":
        c = cfg["codec"]
        if args.data is not None:
            audio = [read_wav(p) for p in _wav_files(args.data)]
        else:
            audio = synthetic_tones(c["n_tones"], c["tone_seconds"], c["sample_rate"], seed=cfg.seed)
        out = args.out or Path("codec_out")
        codec = cfg.codec_estimator()
        log_every = max(1, c["n_steps"] // 20)

        def report(step, loss):
            if step % log_every == 0 or step == c["n_steps"] - 1:
                print(f"step={step} loss={loss:.6f}", flush=True)

        codec.fit(audio, callback=report)
        codec.save(out)
        cfg.echo(out)
        hist = codec.loss_history_
        _emit(args, {"initial_loss": hist[0], "final_loss": hist[-1], "checkpoint": str(out)})
        return 0

    codec = _load_codec(args.checkpoint, cfg, args.config is not None)
    if args.action == "encode":
        audio = read_wav(args.input)
        codes = codec.transform(audio)
        formats.write_tokens(args.output, codes, codec.cfg.sample_rate, codec.cfg.entries)
        _emit(args, {"frames": len(codes), "levels": codes.shape[1], "output": str(args.output)})
    else:
        codes, rate, n_codes = formats.read_tokens(args.input)
        if (codes.shape[1], n_codes, rate) != (codec.cfg.levels, codec.cfg.entries, codec.cfg.sample_rate):
            raise ConfigMismatch(
                f"token file (L={codes.shape[1]}, K={n_codes}, {rate} Hz) does not match codec "
                f"(L={codec.cfg.levels}, K={codec.cfg.entries}, {codec.cfg.sample_rate} Hz)"
            )
        audio = codec.inverse_transform(codes)
        write_wav(args.output, audio)
        _emit(args, {"samples": len(audio), "output": str(args.output)})
    return 0


def _training_pairs(directory: Path, codec) -> tuple[list, list]:
    """Text/code pairs from ``NAME.txt`` plus ``NAME.afrq`` (or ``NAME.wav``).

    Sequences are aligned to one code per text byte: short text is padded with
    PAD, short code sequences with the code of silence.
    """
    if not directory.is_dir():
        raise FormatError(f"{directory} is not a directory")
    books = codec.codebooks_
    silence = codec.transform(AudioBuffer.silence(codec.cfg.compression, codec.cfg.sample_rate))[0]
    texts, codes = [], []
    for txt in sorted(directory.glob("*.txt")):
        tokens = encode_text(txt.read_text().strip())
        afrq, wav = txt.with_suffix(".afrq"), txt.with_suffix(".wav")
        if afrq.exists():
            code, _, n_codes = formats.read_tokens(afrq)
            if code.shape[1] != books.levels or n_codes != books.entries:
                raise ConfigMismatch(f"{afrq} has (L={code.shape[1]}, K={n_codes}); codec has (L={books.levels}, K={books.entries})")
        elif wav.exists():
            code = codec.transform(read_wav(wav))
        else:
            raise FormatError(f"no .afrq or .wav next to {txt}")
        n = max(len(tokens), len(code))
        tokens = tokens + [PAD] * (n - len(tokens))
        if len(code) < n:
            code = np.concatenate([code, np.tile(silence, (n - len(code), 1))])
        texts.append(tokens)
        codes.append(code.astype(np.int64))
    if not texts:
        raise FormatError(f"no training pairs in {directory}")
    return texts, codes


def cmd_tts(args) -> int:
    cfg = _run_config(args)
    codec = _load_codec(args.codec, cfg, args.config is not None)
    if args.action == "train":
        out = args.out or Path("tts_out")
        out.mkdir(parents=True, exist_ok=True)
        texts, codes = _training_pairs(args.data, codec)
        t = cfg["tts"]
        est = StreamingTTS(codec.codebooks_, cfg.tts_config(), t["n_steps"], t["learning_rate"], cfg.seed)
        every = max(1, t["checkpoint_every"])

        def checkpoint(step, loss):
            if (step + 1) % every == 0:
                est.save(out / "tts.ckpt")
                print(f"step={step} loss={loss:.6f} checkpoint", flush=True)

        est.fit(texts, codes, callback=checkpoint)
        est.save(out / "tts.ckpt")
        cfg.echo(out)
        _emit(args, {"initial_loss": est.loss_history_[0], "final_loss": est.loss_history_[-1], "checkpoint": str(out / "tts.ckpt")})
        return 0

    est = _load_tts(args.tts, codec)
    check_compatible(est.codebooks, codec.codebooks_)
    torch.manual_seed(cfg.seed)
    session = est.new_session(cfg.seed, cfg["tts"]["temperature"])
    audio, events = synthesize(encode_text(args.text), session, codec)
    out = args.out or Path("synth_out")
    out.mkdir(parents=True, exist_ok=True)
    write_wav(out / "synth.wav", audio)
    write_event_log(out / "events.log", _rebase(events, events[0].timestamp_ns if events else 0))
    cfg.echo(out)
    _emit(args, {"tokens": session.audio_emitted, "samples": len(audio), "output": str(out / "synth.wav")})
    return 0


def cmd_features(args) -> int:
    cfg = _run_config(args)
    audio = read_wav(args.input)
    fx = cfg.feature_extractor().fit()
    chunks, results = fx.stages(audio)
    formats.write_features(args.output, [(r[3].frames, int(r[3].frame_rate)) for r in results])
    windows = []
    for mel, stem, pooled, _ in results:
        windows.append(
            {
                "index": stem.window_index,
                "mel_frames": mel.frames.shape[0],
                "stem_frames": stem.frames.shape[0],
                "pooled_frames": pooled.frames.shape[0],
                "valid_pooled_frames": pooled.valid_frames,
            }
        )
    if args.json:
        print(json.dumps({"windows": windows, "truncated_samples": chunks.truncated_samples}, sort_keys=True))
    else:
        print(f"windows={len(windows)}")
        print(f"truncated_samples={chunks.truncated_samples}")
        for w in windows:
            print(
                f"window={w['index']} frames={w['mel_frames']}/{w['stem_frames']}/{w['pooled_frames']} "
                f"valid_pooled={w['valid_pooled_frames']}"
            )
    if args.out:
        cfg.echo(args.out)
    return 0


def _rebase(events, t0_ns: int):
    from dataclasses import replace

    return [replace(e, timestamp_ns=e.timestamp_ns - t0_ns) for e in events]


def _bench_tokens(text: str | None, n_tokens: int) -> list[int]:
    if text is not None:
        return encode_text(text)
    base = encode_text(DEFAULT_BENCH_TEXT)
    return (base * (n_tokens // len(base) + 1))[:n_tokens]


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    b = cfg["bench"]
    if args.replay:
        events = read_event_log(args.replay)
        report = analyze(events, t0_ns=0)
    else:
        tokens = _bench_tokens(args.text, b["n_tokens"])
        if args.mock:
            clock = SimulatedClock()
            session = MockSession(clock, b["mock_step_seconds"], cfg["rvq"]["levels"], cfg.seed)
            codec = MockCodec(clock, b["mock_synth_seconds"])
        else:
            codec = _load_codec(args.codec, cfg, args.config is not None)
            est = _load_tts(args.tts, codec)
            session = est.new_session(cfg.seed, cfg["tts"]["temperature"])
            clock = MonotonicClock()
        t0 = clock.now_ns()
        report, _, events = bench_synthesize(tokens, session, codec, clock, threaded=b["threaded"])
        events = _rebase(events, t0)
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            write_event_log(args.out / "events.log", events)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.txt").write_text(report.to_text())
        (args.out / "report.json").write_text(report.to_json() + "\n")
        cfg.echo(args.out)
    sys.stdout.write(report.to_json() + "\n" if args.json else report.to_text())
    return 0


COMMANDS = {"codec": cmd_codec, "tts": cmd_tts, "features": cmd_features, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except AFVoiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
