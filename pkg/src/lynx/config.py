"""Model configuration records shared by every module."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any


class ConfigError(ValueError):
    """A configuration value violates its contract."""


@dataclass(frozen=True)
class PatchSpec:
    pt: int = 1
    ph: int = 2
    pw: int = 2

    def __post_init__(self):
        for name in ("pt", "ph", "pw"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"patch.{name} must be a positive integer, got {v!r}")

    @property
    def volume(self) -> int:
        return self.pt * self.ph * self.pw

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.pt, self.ph, self.pw)


@dataclass(frozen=True)
class PaperScale:
    """Full-scale reference values, kept for documentation only."""

    face_dim: int = 512
    n_id: int = 16
    n_reg: int = 16
    token_dim: int = 5120
    image_iterations: int = 40_000
    video_iterations: int = 60_000
    benchmark_subjects: int = 40
    benchmark_prompts: int = 20


PAPER_SCALE = PaperScale()


def rope_bands(head_dim: int) -> tuple[int, int, int]:
    """Split ``head_dim`` into even (time, height, width) bands.

    Time gets ``ceil(head_dim / 3)`` rounded up to even; the remainder is
    split equally between height and width. If that half is odd, two more
    channels move to the time band so all three stay even.
    """
    if head_dim <= 0 or head_dim % 2:
        raise ConfigError(f"head_dim must be a positive even integer, got {head_dim}")
    t = -(-head_dim // 3)
    t += t % 2
    rest = head_dim - t
    if (rest // 2) % 2:
        t += 2
        rest -= 2
    h = w = rest // 2
    if min(t, h, w) <= 0:
        raise ConfigError(f"head_dim={head_dim} too small for three even rope bands")
    return t, h, w


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    patch: PatchSpec = field(default_factory=PatchSpec)
    text_dim: int = 32
    latent_channels: int = 4
    mlp_ratio: int = 4
    freq_dim: int = 32
    rope_base: float = 10000.0
    face_dim: int = 64
    n_id: int = 16
    n_reg: int = 16
    face_ctx_tokens: int = 4
    resampler_depth: int = 2
    resampler_heads: int = 4
    paper_scale: PaperScale = field(default_factory=PaperScale)

    def __post_init__(self):
        for name in ("hidden_dim", "num_blocks", "num_heads", "text_dim", "latent_channels",
                     "mlp_ratio", "freq_dim", "face_dim", "n_id", "face_ctx_tokens",
                     "resampler_depth", "resampler_heads"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"model.{name} must be a positive integer, got {v!r}")
        if not isinstance(self.n_reg, int) or self.n_reg < 0:
            raise ConfigError(f"model.n_reg must be a nonnegative integer, got {self.n_reg!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"model.hidden_dim={self.hidden_dim} not divisible by num_heads={self.num_heads}")
        if self.hidden_dim % self.resampler_heads:
            raise ConfigError(
                f"model.hidden_dim={self.hidden_dim} not divisible by "
                f"resampler_heads={self.resampler_heads}")
        try:
            rope_bands(self.head_dim)
        except ConfigError as e:
            raise ConfigError(f"model.hidden_dim={self.hidden_dim} / num_heads={self.num_heads}: {e}") from None
        if isinstance(self.patch, dict):
            object.__setattr__(self, "patch", PatchSpec(**self.patch))

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.patch.volume * self.latent_channels

    @property
    def bands(self) -> tuple[int, int, int]:
        return rope_bands(self.head_dim)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("paper_scale")
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d.pop("paper_scale", None)
        if "patch" in d and not isinstance(d["patch"], PatchSpec):
            d["patch"] = PatchSpec(**d["patch"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model field(s): {sorted(unknown)}")
        return cls(**d)
