from __future__ import annotations

from dataclasses import asdict, dataclass
import math

from ..errors import InvalidConfig


@dataclass(frozen=True)
class CodecConfig:
    """Codec shape. Defaults are the toy scale; :data:`PAPER_CODEC` is the full one."""

    sample_rate: int = 44100
    window: int = 32
    hop: int = 8
    initial_width: int = 16
    widths: tuple = (32, 64, 24)
    blocks_per_stage: int = 3
    stride: int = 8
    kernel: int = 8
    convnext_kernel: int = 7
    expansion: int = 3
    levels: int = 8
    entries: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise InvalidConfig("codec needs at least one downsampling stage")
        if self.kernel != self.stride:
            raise InvalidConfig("strided layers must have kernel == stride for causal alignment")
        if self.window % self.hop or self.window // self.hop < 3:
            raise InvalidConfig("window must be a multiple of hop with at least 3 overlapping frames")
        if self.levels < 1 or self.entries < 2:
            raise InvalidConfig("need >= 1 RVQ level and >= 2 entries")

    @property
    def stages(self) -> int:
        return len(self.widths)

    @property
    def latent_dim(self) -> int:
        return self.widths[-1]

    @property
    def compression(self) -> int:
        return self.hop * self.stride ** self.stages

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.compression

    @property
    def bins(self) -> int:
        return self.window // 2 + 1

    @property
    def spectral_channels(self) -> int:
        return 2 * self.bins

    def n_latents(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.compression)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown codec config keys: {sorted(unknown)}")
        return cls(**d)


PAPER_CODEC = CodecConfig(
    initial_width=384, widths=(768, 1536, 512), levels=72, entries=1024
)
