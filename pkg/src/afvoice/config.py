"""Run configuration: one JSON document with a fixed schema.

Every key has a toy-scale default. Keys whose full-scale value is published
carry a ``paper_value`` annotation in the echoed document. Keys marked fixed
document a built-in choice; they may appear in a config file but only with
their built-in value.
"""
from __future__ import annotations

from dataclasses import dataclass
import copy
import json
import math
from pathlib import Path

from .errors import FormatError, InvalidConfig


@dataclass(frozen=True)
class Field:
    default: object
    paper_value: object = None
    fixed: bool = False


SCHEMA: dict[str, dict[str, Field]] = {
    "dsp": {
        "window": Field("hann", fixed=True),
        "stft_center_pad": Field("reflect", fixed=True),
        "mel_scale": Field("htk", fixed=True),
        "mel_norm": Field(None, fixed=True),
        "log_floor": Field(1e-10, fixed=True),
        "resample_taps_per_phase": Field(32, fixed=True),
        "resample_kaiser_beta": Field(8.0, fixed=True),
    },
    "features": {
        "sample_rate": Field(16000, 16000, fixed=True),
        "n_mels": Field(128, 128),
        "mel_window_seconds": Field(0.025, 0.025, fixed=True),
        "mel_hop_seconds": Field(0.010, 0.010, fixed=True),
        "window_seconds": Field(30.0, 30.0),
        "max_windows": Field(20, 20),
        "pad_policy": Field("zero-pad-to-full", fixed=True),
        "pooling": Field("mean", fixed=True),
        "encoder_width": Field(64, 1280),
        "lm_width": Field(64),
        "n_jobs": Field(1),
    },
    "codec": {
        "sample_rate": Field(44100, 44100),
        "window": Field(32, 32),
        "hop": Field(8, 8),
        "initial_width": Field(16, 384),
        "widths": Field([32, 64, 24], [768, 1536, 512]),
        "blocks_per_stage": Field(3, 3),
        "stride": Field(8, 8),
        "kernel": Field(8, 8),
        "convnext_kernel": Field(7),
        "expansion": Field(3),
        "n_steps": Field(500),
        "batch_size": Field(8),
        "segment_units": Field(2),
        "learning_rate": Field(6e-3),
        "n_tones": Field(100),
        "tone_seconds": Field(1.0),
        "loss_mels": Field(128, fixed=True),
        "loss_window": Field(1024, fixed=True),
        "loss_hop": Field(256, fixed=True),
        "loss_floor": Field(1e-5, fixed=True),
    },
    "rvq": {
        "levels": Field(8, 72),
        "entries": Field(64, 1024),
        "kmeans_iter": Field(20),
    },
    "nn": {
        "layers": Field(4),
        "heads": Field(4),
        "width": Field(128),
        "ff_width": Field(512),
        "max_seq_len": Field(1024),
        "adam_beta1": Field(0.9, fixed=True),
        "adam_beta2": Field(0.95, fixed=True),
        "adam_eps": Field(1e-8, fixed=True),
        "log_var_floor": Field(math.log(1e-4), fixed=True),
    },
    "tts": {
        "mixtures": Field(2, 1024),
        "head_layers": Field(3, 3, fixed=True),
        "head_hidden": Field(256),
        "unmask_steps": Field(4, 4),
        "temperature": Field(1.0),
        "n_steps": Field(200),
        "learning_rate": Field(6e-3),
        "checkpoint_every": Field(50),
        "min_sample_seconds": Field(1.0, 1.0),
        "max_sample_seconds": Field(120.0, 120.0),
    },
    "bench": {
        "n_tokens": Field(108),
        "mock_step_seconds": Field(0.01),
        "mock_synth_seconds": Field(0.0),
        "threaded": Field(False),
    },
}


def _unwrap(section, key, value):
    if isinstance(value, dict):
        extra = set(value) - {"value", "paper_value"}
        if extra or "value" not in value:
            raise InvalidConfig(f"{section}.{key}: annotated entries need 'value' (and optionally 'paper_value')")
        if "paper_value" in value and value["paper_value"] != SCHEMA[section][key].paper_value:
            raise InvalidConfig(f"{section}.{key}: paper_value annotation does not match the recorded value")
        value = value["value"]
    return value


class RunConfig:
    """Effective configuration: schema defaults overlaid by a user document."""

    def __init__(self, sections: dict | None = None, seed: int = 0):
        self.seed = int(seed)
        self.sections = {s: {k: copy.deepcopy(f.default) for k, f in keys.items()} for s, keys in SCHEMA.items()}
        for section, values in (sections or {}).items():
            self.update(section, values)

    def update(self, section: str, values: dict) -> None:
        if section not in SCHEMA:
            raise InvalidConfig(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise InvalidConfig(f"section {section!r} must be an object")
        for key, raw in values.items():
            if key not in SCHEMA[section]:
                raise InvalidConfig(f"unknown config key {section}.{key}")
            field = SCHEMA[section][key]
            value = _unwrap(section, key, raw)
            if field.fixed and value != field.default:
                raise InvalidConfig(f"{section}.{key} is fixed at {field.default!r}")
            self.sections[section][key] = value

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise InvalidConfig("config document must be a JSON object")
        doc = dict(doc)
        seed = doc.pop("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise InvalidConfig("seed must be a non-negative integer")
        return cls(doc, seed)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self, annotate: bool = True) -> dict:
        doc: dict = {"seed": self.seed}
        for section, values in self.sections.items():
            out = {}
            for key, value in values.items():
                field = SCHEMA[section][key]
                if annotate and field.paper_value is not None:
                    out[key] = {"value": value, "paper_value": field.paper_value}
                else:
                    out[key] = value
            doc[section] = out
        return doc

    def echo(self, out_dir) -> Path:
        """Write the effective config to ``out_dir/config.json``."""
        path = Path(out_dir) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    # -- builders -----------------------------------------------------------

    def codec_config(self):
        from .codec import CodecConfig

        c = self["codec"]
        keys = ("sample_rate", "window", "hop", "initial_width", "widths", "blocks_per_stage", "stride", "kernel", "convnext_kernel", "expansion")
        return CodecConfig(**{k: c[k] for k in keys}, levels=self["rvq"]["levels"], entries=self["rvq"]["entries"])

    def codec_estimator(self):
        from .codec import NeuralCodec

        c = self["codec"]
        return NeuralCodec(
            config=self.codec_config(),
            n_steps=c["n_steps"],
            batch_size=c["batch_size"],
            segment_units=c["segment_units"],
            learning_rate=c["learning_rate"],
            kmeans_iter=self["rvq"]["kmeans_iter"],
            random_state=self.seed,
        )

    def tts_config(self):
        from .tts import TTSConfig

        n, t = self["nn"], self["tts"]
        return TTSConfig(
            layers=n["layers"],
            heads=n["heads"],
            width=n["width"],
            ff_width=n["ff_width"],
            max_seq_len=n["max_seq_len"],
            mixtures=t["mixtures"],
            head_hidden=t["head_hidden"],
            unmask_steps=t["unmask_steps"],
            temperature=t["temperature"],
        )

    def feature_extractor(self):
        from .features import FeatureExtractor

        f = self["features"]
        return FeatureExtractor(
            encoder_width=f["encoder_width"],
            lm_width=f["lm_width"],
            max_windows=f["max_windows"],
            window_seconds=f["window_seconds"],
            n_mels=f["n_mels"],
            n_jobs=f["n_jobs"],
            random_state=self.seed,
        )
