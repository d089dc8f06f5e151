"""Run orchestration shared by the command line and the demos.

Turns a :class:`RunConfig` into training clips, runs the staged schedule
with checkpoints at stage boundaries, and samples from a trained model.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor

from .checkpoint import load_checkpoint, read_header
from .config import ConfigError
from .data_pipeline import PairRecord, load_manifest, weighted_sampler
from .desk import DeskClip, make_desk_clips
from .encoders import HashTextEmbedder, ToyLatentCodec
from .faces import StubFaceEmbedder
from .flow_match import TrainBatch, Trainer, load_state, sample, stage_scheduler
from .media import load_frames, load_image
from .model import Conditioning, Lynx, build_model
from .rope_pack import pack
from .runconfig import RunConfig
from .tokens import ShapeError, patchify

CHECKPOINT_DIR = "checkpoints"


def codec_for(cfg: RunConfig) -> ToyLatentCodec:
    return ToyLatentCodec(cfg.model.latent_channels, cfg.data.codec_factor, seed=cfg.data.face_seed)


def face_embedder_for(cfg: RunConfig) -> StubFaceEmbedder:
    return StubFaceEmbedder(dim=cfg.model.face_dim, seed=cfg.data.face_seed)


def clip_from_record(rec: PairRecord, cfg: RunConfig, codec, embedder, dtype) -> DeskClip:
    frames = load_frames(rec.path("target"), max_frames=cfg.data.frames)
    cond = load_image(rec.path("condition_image"))
    face = torch.tensor(embedder(cond), dtype=dtype)
    return DeskClip(codec.encode(frames).to(dtype), face, rec.caption,
                    ref_latent=codec.encode(cond).to(dtype))


def load_clips(cfg: RunConfig) -> tuple[list[DeskClip], list[PairRecord]]:
    dtype = cfg.torch_dtype()
    if cfg.data.source == "synthetic":
        f = cfg.data.codec_factor
        shape = (cfg.data.frames, cfg.data.height // f, cfg.data.width // f,
                 cfg.model.latent_channels)
        return make_desk_clips(cfg.data.num_clips, shape, cfg.model.face_dim,
                               seed=cfg.data.face_seed, dtype=dtype), []
    records = load_manifest(cfg.data.manifest)
    if not records:
        raise ConfigError(f"data.manifest: {cfg.data.manifest} has no records")
    codec, emb = codec_for(cfg), face_embedder_for(cfg)
    return [clip_from_record(r, cfg, codec, emb, dtype) for r in records], records


def clip_tokens(clip: DeskClip, cfg: RunConfig, frames: Optional[int]) -> int:
    t, h, w, _ = clip.latent[:frames].shape
    p = cfg.model.patch
    return (t // p.pt) * (h // p.ph) * (w // p.pw)


class BatchSource:
    """Deterministic batch for each global step.

    Synthetic data packs every clip into every batch. Manifest data draws
    records with the weighted sampler, seeded by (seed, step), and fills one
    pack greedily, so resuming at step k reproduces the uninterrupted run.
    """

    def __init__(self, model: Lynx, cfg: RunConfig, clips: list[DeskClip],
                 records: list[PairRecord]):
        self.model, self.cfg, self.clips, self.records = model, cfg, clips, records
        self.text = HashTextEmbedder(cfg.model.text_dim)
        self.dtype = cfg.torch_dtype()
        self._fixed: dict[str, TrainBatch] = {}
        if records:
            try:
                weighted_sampler(records, cfg.data.weights, seed=0)
            except ValueError as e:
                raise ConfigError(f"data.weights: {e}") from None
        for stage, frames in (("image", 1), ("video", cfg.data.frames)):
            need = max(clip_tokens(c, cfg, frames) for c in clips)
            if need > cfg.train.budget:
                raise ConfigError(f"train.budget={cfg.train.budget} is below the {need} tokens "
                                  f"of one {stage}-stage sample")
            if not records:
                total = sum(clip_tokens(c, cfg, frames) for c in clips)
                if total > cfg.train.budget:
                    raise ConfigError(f"train.budget={cfg.train.budget} cannot hold all "
                                      f"{len(clips)} synthetic clips ({total} tokens, {stage} stage)")

    def _batch(self, clips: list[DeskClip], frames: int) -> TrainBatch:
        toks = [patchify(c.latent[:frames].to(self.dtype), self.cfg.model.patch) for c in clips]
        (packed,) = pack(toks, self.cfg.train.budget)
        conds = [Conditioning(face=c.face.to(self.dtype),
                              ref=self.model.encode_reference(c.reference.to(self.dtype)))
                 for c in clips]
        return TrainBatch(packed.pad(), [self.text(c.caption, self.dtype) for c in clips], conds)

    def __call__(self, stage: str, step: int) -> TrainBatch:
        frames = 1 if stage == "image" else self.cfg.data.frames
        if not self.records:
            if stage not in self._fixed:
                self._fixed[stage] = self._batch(self.clips, frames)
            return self._fixed[stage]
        index = {id(r): i for i, r in enumerate(self.records)}
        draws = weighted_sampler(self.records, self.cfg.data.weights,
                                 seed=[self.cfg.train.seed, step])
        chosen, used = [], 0
        for rec in draws:
            clip = self.clips[index[id(rec)]]
            n = clip_tokens(clip, self.cfg, frames)
            if used + n > self.cfg.train.budget:
                break
            chosen.append(clip)
            used += n
        return self._batch(chosen, frames)


@dataclass
class TrainResult:
    steps: int
    checkpoints: list[Path]
    final_loss: Optional[float]


def train_run(cfg: RunConfig, run_dir: Path, resume: Optional[Path] = None,
              log: Callable[[str], None] = print) -> TrainResult:
    run_dir = Path(run_dir)
    (run_dir / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model, seed=cfg.seed, dtype=cfg.torch_dtype())
    trainer = Trainer(model, cfg.train, metrics_path=run_dir / "metrics.jsonl")
    if resume is not None:
        meta = trainer.load(resume)
        log(f"resumed from {resume} at step {trainer.step_index} ({meta.get('stage')})")
    clips, records = load_clips(cfg)
    source = BatchSource(model, cfg, clips, records)
    saved, last = [], None
    for stage in stage_scheduler(cfg.train, trainer.step_index):
        for local in range(stage.local_start, stage.iterations):
            step = stage.start + local
            try:
                m = trainer.train_step(source(stage.name, step), stage.name)
            except KeyboardInterrupt:
                path = trainer.save(run_dir / CHECKPOINT_DIR / "interrupted.lynx", stage.name,
                                    {"config_digest": cfg.digest()})
                log(f"interrupted; saved {path} at step {trainer.step_index}")
                raise
            last = m["loss"]
            if m["step"] % 100 == 0 or local == stage.iterations - 1:
                log(f"{stage.name} step {m['step']}/{cfg.train.total_iterations} "
                    f"loss {m['loss']:.4f} grad_norm {m['grad_norm']:.3f}")
        path = trainer.save(run_dir / CHECKPOINT_DIR / f"{stage.name}.lynx", stage.name,
                            {"config_digest": cfg.digest()})
        saved.append(path)
        log(f"saved {path}")
    return TrainResult(trainer.step_index, saved, last)


def check_checkpoint(path: Path, cfg: RunConfig) -> dict:
    """Refuse a checkpoint whose stored model dims disagree with the config."""
    header = read_header(path)
    stored = header.get("config", {})
    want = cfg.model.to_dict()
    for key in ("hidden_dim", "num_blocks", "num_heads", "latent_channels", "face_dim",
                "text_dim", "n_id", "n_reg"):
        if key in stored and stored[key] != want[key]:
            raise ShapeError(f"checkpoint {path} has model.{key}={stored[key]} "
                             f"but the config has model.{key}={want[key]}")
    return header


def load_trained(cfg: RunConfig, path: Path) -> Lynx:
    check_checkpoint(path, cfg)
    model = build_model(cfg.model, seed=cfg.seed, dtype=cfg.torch_dtype())
    load_state(model, load_checkpoint(path).tensors)
    model.freeze_backbone()
    model.attach_reference_copy()
    model.eval()
    return model


def sample_from_image(model: Lynx, cfg: RunConfig, ref_image: np.ndarray, prompt: str,
                      seed: int) -> tuple[Tensor, np.ndarray]:
    """Sample a latent clip conditioned on the face in ``ref_image``; returns (latent, frames)."""
    f = cfg.data.codec_factor
    h, w = ref_image.shape[:2]
    if h % f or w % f:
        raise ConfigError(f"reference image size {(h, w)} is not a multiple of "
                          f"data.codec_factor={f}")
    codec, emb = codec_for(cfg), face_embedder_for(cfg)
    dtype = cfg.torch_dtype()
    ref_latent = codec.encode(ref_image).to(dtype)
    cond = Conditioning(face=torch.tensor(emb(ref_image), dtype=dtype),
                        ref=model.encode_reference(ref_latent))
    text = HashTextEmbedder(cfg.model.text_dim)(prompt, dtype)
    shape = (cfg.sampler.num_frames, h // f, w // f, cfg.model.latent_channels)
    g = torch.Generator().manual_seed(seed)
    latent = sample(model, shape, cfg.sampler.sampler_config(), g, cond=cond, text=text,
                    dtype=dtype)
    return latent, codec.decode(latent)


def tensor_digest(t: Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def write_json(path: Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path
