"""Desk-scale fixtures: a handful of synthetic identity clips and helpers to
train and sample on them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .encoders import HashTextEmbedder
from .flow_match import TrainBatch
from .model import Conditioning, Lynx
from .rope_pack import pack
from .tokens import patchify

DESK_CAPTION = "a person talking to the camera"


@dataclass
class DeskClip:
    latent: Tensor
    face: Tensor
    caption: str = DESK_CAPTION
    ref_latent: Optional[Tensor] = None

    @property
    def reference(self) -> Tensor:
        """The condition image latent; the clip's first frame when none was given."""
        return self.latent[:1] if self.ref_latent is None else self.ref_latent


def smooth_clip(rng: np.random.Generator, shape=(4, 8, 8, 4), waves: int = 3,
                wave_amp: float = 0.5) -> np.ndarray:
    """Identity-specific offset plus a few drifting low-frequency waves."""
    t, h, w, c = shape
    tt, yy, xx = np.meshgrid(np.arange(t), np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.tile(rng.normal(0.0, 1.0, c), (t, h, w, 1))
    for _ in range(waves):
        ky, kx = rng.integers(0, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(-0.4, 0.4)
        amp = rng.normal(0.0, wave_amp, c)
        wave = np.cos(2 * np.pi * (ky * yy + kx * xx) + phase + speed * tt)
        out += wave[..., None] * amp
    return out


def make_desk_clips(n: int = 4, shape=(4, 8, 8, 4), face_dim: int = 64, seed: int = 0,
                    dtype=torch.float64, wave_amp: float = 0.5) -> list[DeskClip]:
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(n):
        latent = torch.tensor(smooth_clip(rng, shape, wave_amp=wave_amp), dtype=dtype)
        face = torch.tensor(rng.standard_normal(face_dim), dtype=dtype)
        clips.append(DeskClip(latent, face / torch.linalg.vector_norm(face)))
    return clips


def desk_batch(model: Lynx, clips: Sequence[DeskClip], frames: Optional[int] = None,
               budget: Optional[int] = None, text: Optional[HashTextEmbedder] = None) -> TrainBatch:
    """Pack clips (truncated to ``frames``; 1 for the image stage) into one training batch."""
    cfg = model.cfg
    text = text or HashTextEmbedder(cfg.text_dim)
    dtype = model.backbone.patch_embed.weight.dtype
    toks = [patchify(c.latent[:frames].to(dtype), cfg.patch) for c in clips]
    budget = budget or sum(len(t) for t in toks)
    packs = pack(toks, budget)
    if len(packs) != 1:
        raise ValueError(f"clips need {len(packs)} packs at budget {budget}; expected one")
    conds = [Conditioning(face=c.face.to(dtype), ref=model.encode_reference(c.reference.to(dtype)))
             for c in clips]
    return TrainBatch(packs[0].pad(), [text(c.caption, dtype) for c in clips], conds)
