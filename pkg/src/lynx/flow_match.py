"""Rectified-flow objective, two-stage trainer and Euler sampler.

Convention: ``x_t = (1 - t) x0 + t noise`` with velocity target
``noise - x0``; t=0 is clean data and sampling integrates from t=1 to t=0.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import torch
from torch import Tensor

from .checkpoint import load_checkpoint, save_checkpoint
from .config import PAPER_SCALE, ConfigError, PatchSpec
from .encoders import HashTextEmbedder
from .model import Conditioning, Lynx
from .rope_pack import PackedBatch
from .tokens import NonFiniteError, ShapeError, TokenSeq, patchify, token_grid, unpatchify

STAGES = ("image", "video")


@dataclass
class FlowSample:
    x0: Tensor
    noise: Tensor
    t: Tensor
    xt: Tensor
    v_target: Tensor


def uniform_t(n: int, generator: torch.Generator) -> Tensor:
    return torch.rand(n, generator=generator, dtype=torch.float64)


def make_flow_sample(x0: Tensor, generator: torch.Generator, t=None,
                     t_dist: Callable[[int, torch.Generator], Tensor] = uniform_t,
                     noise: Optional[Tensor] = None) -> FlowSample:
    """Draw noise (and t, unless given) and build the interpolant.

    ``t`` is a scalar or a per-row vector for (rows, dim) inputs.
    """
    if not torch.isfinite(x0).all():
        raise NonFiniteError("x0 is not finite")
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    if t is None:
        t = t_dist(1, generator)[0]
    t = torch.as_tensor(t, dtype=x0.dtype)
    tb = t.reshape(-1, *([1] * (x0.ndim - 1))) if t.ndim == 1 else t
    xt = (1 - tb) * x0 + tb * noise
    return FlowSample(x0, noise, t, xt, noise - x0)


def fm_loss(pred_v: Tensor, v_target: Tensor, loss_mask: Optional[Tensor] = None) -> Tensor:
    """Mean squared error over the entries selected by ``loss_mask``.

    A mask with fewer dimensions than the inputs selects whole rows.
    """
    if pred_v.shape != v_target.shape:
        raise ShapeError(f"prediction {tuple(pred_v.shape)} vs target {tuple(v_target.shape)}")
    err = (pred_v - v_target) ** 2
    if loss_mask is None:
        return err.mean()
    m = loss_mask.to(torch.bool)
    while m.ndim < err.ndim:
        m = m.unsqueeze(-1)
    m = m.expand_as(err)
    count = int(m.sum())
    if count == 0:
        raise ValueError("loss mask selects no entries")
    return torch.where(m, err, torch.zeros_like(err)).sum() / count


@dataclass
class TrainConfig:
    image_iterations: int = 500
    video_iterations: int = 500
    learning_rate: float = 1e-4
    budget: int = 256
    seed: int = 0
    id_dropout: float = 0.1
    trainable: str = "adapters"
    lr_schedule: str = "constant"
    decay_steps: Optional[int] = None

    def __post_init__(self):
        for name in ("image_iterations", "video_iterations", "budget"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"train.{name} must be a positive integer, got {v!r}")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"train.learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not 0 <= self.id_dropout <= 1:
            raise ConfigError(f"train.id_dropout must lie in [0, 1], got {self.id_dropout}")
        if self.trainable not in ("adapters", "all"):
            raise ConfigError(f"train.trainable must be 'adapters' or 'all', got {self.trainable!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"train.lr_schedule must be 'constant' or 'cosine', "
                              f"got {self.lr_schedule!r}")
        if self.decay_steps is not None and (not isinstance(self.decay_steps, int)
                                             or self.decay_steps <= 0):
            raise ConfigError(f"train.decay_steps must be a positive integer, got {self.decay_steps!r}")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return cls(image_iterations=PAPER_SCALE.image_iterations,
                   video_iterations=PAPER_SCALE.video_iterations, **overrides)

    @property
    def total_iterations(self) -> int:
        return self.image_iterations + self.video_iterations

    def lr_at(self, step: int) -> float:
        """Learning rate for the update made at global ``step`` (0-based)."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        n = self.decay_steps or self.total_iterations
        return self.learning_rate * 0.5 * (1 + math.cos(math.pi * min(step, n) / n))


@dataclass(frozen=True)
class Stage:
    name: str
    iterations: int
    start: int
    local_start: int = 0

    @property
    def end(self) -> int:
        return self.start + self.iterations


def stage_scheduler(cfg: TrainConfig, resume_step: int = 0) -> list[Stage]:
    """Stages still to run, image before video; a resumed stage carries its local offset."""
    if resume_step < 0:
        raise ConfigError(f"resume step must be >= 0, got {resume_step}")
    if resume_step >= cfg.total_iterations:
        raise ConfigError(f"step {resume_step} is past the end of training "
                         f"({cfg.total_iterations} iterations); nothing left to resume")
    plan = [Stage("image", cfg.image_iterations, 0),
            Stage("video", cfg.video_iterations, cfg.image_iterations)]
    out = []
    for s in plan:
        if resume_step >= s.end:
            continue
        out.append(Stage(s.name, s.iterations, s.start, max(0, resume_step - s.start)))
    return out


@dataclass
class TrainBatch:
    x0: PackedBatch
    texts: list[Tensor]
    conds: list[Conditioning]


class NonFiniteLossError(NonFiniteError):
    pass


class Trainer:
    """Owns the optimizer over the trainable set and a seeded generator."""

    def __init__(self, model: Lynx, cfg: TrainConfig,
                 metrics_path: Optional[Union[str, Path]] = None):
        self.model = model
        self.cfg = cfg
        if cfg.trainable == "adapters":
            model.freeze_backbone()
        if model.frozen is None:
            model.attach_reference_copy()
        self.params = [p for p in model.parameters() if p.requires_grad]
        if cfg.trainable == "adapters":
            adapters = {id(p) for p in model.adapter_parameters()}
            assert all(id(p) in adapters for p in self.params)
        self.opt = torch.optim.Adam(self.params, lr=cfg.learning_rate)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.step_index = 0
        self.metrics_path = Path(metrics_path) if metrics_path else None

    def named_trainable(self) -> list[str]:
        ids = {id(p) for p in self.params}
        return [n for n, p in self.model.named_parameters() if id(p) in ids]

    def _draw(self, batch: TrainBatch):
        g = self.generator
        n = batch.x0.num_segments
        t = uniform_t(n, g)
        seg = batch.x0.segment_ids()
        row_t = t[seg.clamp(min=0)]
        fs = make_flow_sample(batch.x0.tokens, g, t=row_t)
        drop = torch.rand(n, generator=g, dtype=torch.float64) < self.cfg.id_dropout
        conds = [c.as_dropped() if bool(d) else c for c, d in zip(batch.conds, drop)]
        return t, fs, conds

    def loss(self, batch: TrainBatch) -> tuple[Tensor, Tensor]:
        t, fs, conds = self._draw(batch)
        pred = self.model(batch.x0.with_tokens(fs.xt), batch.texts, t, conds)
        return fm_loss(pred, fs.v_target.to(pred.dtype), batch.x0.valid_mask()), t

    def train_step(self, batch: TrainBatch, stage: str = "video") -> dict:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        t0 = time.perf_counter()
        self.model.train()
        try:
            loss, t = self.loss(batch)
        except NonFiniteError as e:
            raise NonFiniteLossError(f"step {self.step_index} ({stage}): {e}") from e
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss {loss.item()} at step {self.step_index} ({stage}); "
                f"t={t.tolist()}, segments={batch.x0.lengths}")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        grads = [p.grad for p in self.params if p.grad is not None]
        grad_norm = float(torch.linalg.vector_norm(torch.stack(
            [torch.linalg.vector_norm(g) for g in grads]))) if grads else 0.0
        for group in self.opt.param_groups:
            group["lr"] = self.cfg.lr_at(self.step_index)
        self.opt.step()
        self.step_index += 1
        m = {"step": self.step_index, "stage": stage, "loss": loss.item(),
             "grad_norm": grad_norm, "lr": self.cfg.lr_at(self.step_index - 1), "wall_ms": (time.perf_counter() - t0) * 1e3}
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as f:
                f.write(json.dumps(m) + "\n")
        return m

    def save(self, path: Union[str, Path], stage: str, extra: Optional[dict] = None) -> Path:
        path = Path(path)
        meta = {"step": self.step_index, "stage": stage, "train": asdict(self.cfg),
                "rng_state": self.generator.get_state().tolist(), **(extra or {})}
        save_checkpoint(path, self.model.state_dict(), self.model.cfg.to_dict(), meta)
        torch.save(self.opt.state_dict(), path.with_suffix(".optim"))
        return path

    def load(self, path: Union[str, Path]) -> dict:
        path = Path(path)
        ck = load_checkpoint(path)
        load_state(self.model, ck.tensors)
        opt_path = path.with_suffix(".optim")
        if opt_path.exists():
            self.opt.load_state_dict(torch.load(opt_path, weights_only=True))
        self.step_index = int(ck.metadata.get("step", 0))
        if "rng_state" in ck.metadata:
            self.generator.set_state(torch.tensor(ck.metadata["rng_state"], dtype=torch.uint8))
        if self.model.frozen is not None:
            self.model.attach_reference_copy()
        return ck.metadata


def load_state(model: Lynx, tensors: dict[str, Tensor]):
    own = model.state_dict()
    missing = set(own) - set(tensors)
    unexpected = set(tensors) - set(own)
    if missing or unexpected:
        raise ShapeError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, "
                         f"unexpected {sorted(unexpected)[:5]}")
    for k, v in tensors.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise ShapeError(f"{k}: checkpoint shape {tuple(v.shape)} vs model {tuple(own[k].shape)}")
    with torch.no_grad():
        for k, v in tensors.items():
            own[k].copy_(v.to(own[k].dtype))


@dataclass
class SamplerConfig:
    num_steps: int = 16
    guidance: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.num_steps, int) or self.num_steps < 1:
            raise ConfigError(f"sampler.num_steps must be an integer >= 1, got {self.num_steps!r}")


Velocity = Callable[[Tensor, float], Tensor]


def model_velocity(model: Lynx, grid, text: Tensor, cond: Optional[Conditioning] = None,
                   guidance: Optional[float] = None) -> Velocity:
    """Wrap the model as ``v(tokens, t)`` for a single sample, optionally with guidance."""

    def call(x: Tensor, t: float, c: Optional[Conditioning]) -> Tensor:
        packed = PackedBatch(x, [0, x.shape[0]], [grid], x.shape[0])
        return model(packed, [text], t, None if c is None else [c])

    def v(x: Tensor, t: float) -> Tensor:
        with torch.no_grad():
            if guidance is None or cond is None:
                return call(x, t, cond)
            vc = call(x, t, cond)
            vu = call(x, t, cond.as_dropped())
            return vu + guidance * (vc - vu)

    return v


def euler(velocity: Velocity, x1: Tensor, num_steps: int) -> Tensor:
    x = x1
    dt = 1.0 / num_steps
    for k in range(num_steps):
        t = 1.0 - k * dt
        x = x - dt * velocity(x, t)
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"sampler state became non-finite at step {k} (t={t})")
    return x


def sample(model: Union[Lynx, Velocity], shape: tuple[int, int, int, int], sampler_cfg: SamplerConfig,
           generator: torch.Generator, cond: Optional[Conditioning] = None,
           text: Optional[Tensor] = None, patch: Optional[PatchSpec] = None,
           dtype=torch.float64) -> Tensor:
    """Integrate from standard normal noise at t=1 down to t=0; returns a (t, h, w, c) latent.

    ``model`` is either a :class:`Lynx` or a bare velocity callable over tokens.
    """
    if isinstance(model, Lynx):
        patch = model.cfg.patch
        if text is None:
            text = HashTextEmbedder(model.cfg.text_dim)("", dtype)
    patch = patch or PatchSpec()
    grid = token_grid(shape[:3], patch)
    noise = torch.randn(shape, generator=generator, dtype=dtype)
    x1 = patchify(noise, patch).data
    if isinstance(model, Lynx):
        velocity = model_velocity(model, grid, text, cond, sampler_cfg.guidance)
    else:
        velocity = model
    x0 = euler(velocity, x1, sampler_cfg.num_steps)
    return unpatchify(TokenSeq(x0, grid), patch, shape[3])
