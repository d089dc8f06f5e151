"""Run configuration: one YAML file merged with dotted ``--set`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from .config import ConfigError, ModelConfig
from .data_pipeline import DEFAULT_THRESHOLD, DEFAULT_WEIGHTS, PAIR_TYPES
from .eval_harness import DEFAULT_STRIDE
from .flow_match import SamplerConfig, TrainConfig

DTYPES = ("float32", "float64")


@dataclass
class DataSection:
    source: str = "synthetic"            # "synthetic" desk clips or a "manifest"
    manifest: Optional[str] = None
    num_clips: int = 4
    frames: int = 4
    height: int = 64
    width: int = 64
    codec_factor: int = 8
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    threshold: float = DEFAULT_THRESHOLD
    face_seed: int = 0

    def validate(self):
        if self.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data.source must be 'synthetic' or 'manifest', got {self.source!r}")
        if self.source == "manifest":
            if not self.manifest:
                raise ConfigError("data.manifest is required when data.source is 'manifest'")
            if not Path(self.manifest).is_file():
                raise ConfigError(f"data.manifest: file not found: {self.manifest}")
        for name in ("num_clips", "frames", "height", "width", "codec_factor"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"data.{name} must be a positive integer, got {v!r}")
        for name in ("height", "width"):
            if getattr(self, name) % self.codec_factor:
                raise ConfigError(f"data.{name}={getattr(self, name)} is not a multiple of "
                                  f"data.codec_factor={self.codec_factor}")
        bad = set(self.weights) - set(PAIR_TYPES)
        if bad:
            raise ConfigError(f"data.weights: unknown pair type(s) {sorted(bad)}")
        if not -1.0 <= self.threshold <= 1.0:
            raise ConfigError(f"data.threshold must lie in [-1, 1], got {self.threshold}")


@dataclass
class SamplerSection:
    num_steps: int = 16
    num_frames: int = 4
    guidance: Optional[float] = None

    def validate(self):
        SamplerConfig(self.num_steps, self.guidance)
        if not isinstance(self.num_frames, int) or self.num_frames < 1:
            raise ConfigError(f"sampler.num_frames must be an integer >= 1, got {self.num_frames!r}")

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.num_steps, self.guidance)


@dataclass
class EvalSection:
    subjects: Optional[str] = None
    prompts: Optional[str] = None
    embedders: list = field(default_factory=lambda: ["stub-a", "stub-b", "stub-c"])
    frame_stride: int = DEFAULT_STRIDE
    judge: bool = False
    workers: int = 4
    model_name: str = "lynx"

    def validate(self):
        from .eval_harness import embedder_names

        unknown = [e for e in self.embedders if e not in embedder_names()]
        if unknown:
            raise ConfigError(f"eval.embedders: unknown embedder(s) {unknown}")
        if not isinstance(self.frame_stride, int) or self.frame_stride < 1:
            raise ConfigError(f"eval.frame_stride must be an integer >= 1, got {self.frame_stride!r}")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError(f"eval.workers must be an integer >= 1, got {self.workers!r}")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "sampler": SamplerSection,
            "data": DataSection, "eval": EvalSection}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    dtype: str = "float32"
    run_dir: str = "runs/default"

    def to_dict(self) -> dict[str, Any]:
        out = {"model": self.model.to_dict()}
        for name in ("train", "sampler", "data", "eval"):
            out[name] = asdict(getattr(self, name))
        out.update(seed=self.seed, dtype=self.dtype, run_dir=self.run_dir)
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def torch_dtype(self):
        import torch

        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def _section(name: str, raw: Any):
    cls = SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be a mapping, got {type(raw).__name__}")
    if cls is ModelConfig:
        return ModelConfig.from_dict(raw)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown {name} field(s): {unknown}")
    try:
        obj = cls(**raw)
    except TypeError as e:
        raise ConfigError(f"{name}: {e}") from None
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    path = key.strip().split(".")
    if not all(path):
        raise ConfigError(f"override {text!r} has an empty key segment")
    try:
        parsed = yaml.safe_load(value) if value.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"override {text!r}: bad value ({e})") from None
    return path, parsed


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {text!r}: {part!r} is not a section")
            node = nxt
        node[path[-1]] = value
    return raw


def build_config(raw: dict) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top = {"seed", "dtype", "run_dir"}
    unknown = sorted(set(raw) - set(SECTIONS) - top)
    if unknown:
        raise ConfigError(f"unknown config field(s): {unknown}")
    kw = {name: _section(name, raw.get(name)) for name in SECTIONS}
    cfg = RunConfig(**kw, **{k: raw[k] for k in top if k in raw})
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError(f"seed must be an integer, got {cfg.seed!r}")
    if cfg.dtype not in DTYPES:
        raise ConfigError(f"dtype must be one of {DTYPES}, got {cfg.dtype!r}")
    return cfg


def load_config(path: Optional[str | Path], overrides: Sequence[str] = ()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    return build_config(apply_overrides(raw, overrides))


def echo_config(cfg: RunConfig, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path
