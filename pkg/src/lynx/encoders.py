"""Deterministic stand-ins for the pretrained video VAE and text encoder."""

from __future__ import annotations

import hashlib
import re

import numpy as np
import torch
from torch import Tensor

from .tokens import ShapeError

REFERENCE_PROMPT = "image of a face"


def stable_seed(*parts: str) -> int:
    h = hashlib.blake2b("\x1f".join(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class ToyLatentCodec:
    """8x average-pool followed by a fixed random RGB -> latent map.

    The decoder applies the pseudo-inverse of that map and upsamples by
    pixel repetition, so ``decode(encode(x))`` is the block-averaged image.
    """

    def __init__(self, channels: int = 4, factor: int = 8, seed: int = 0):
        self.channels = channels
        self.factor = factor
        rng = np.random.default_rng(seed)
        self.weight = rng.standard_normal((3, channels)) / np.sqrt(3)
        self.pinv = np.linalg.pinv(self.weight)

    def encode(self, frames: np.ndarray) -> Tensor:
        """(T, H, W, 3) floats in [0, 1] -> (T, H/f, W/f, channels) latent."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 3:
            frames = frames[None]
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ShapeError(f"frames must be (T, H, W, 3), got {frames.shape}")
        t, h, w, _ = frames.shape
        f = self.factor
        if h % f or w % f:
            raise ShapeError(f"frame size {(h, w)} not divisible by pool factor {f}")
        pooled = frames.reshape(t, h // f, f, w // f, f, 3).mean(axis=(2, 4))
        return torch.from_numpy((pooled * 2.0 - 1.0) @ self.weight)

    def decode(self, latent: Tensor) -> np.ndarray:
        z = latent.detach().to(torch.float64).cpu().numpy()
        rgb = (z @ self.pinv + 1.0) / 2.0
        rgb = rgb.repeat(self.factor, axis=1).repeat(self.factor, axis=2)
        return np.clip(rgb, 0.0, 1.0)


class HashTextEmbedder:
    """Word-level lookup table where each word's vector is seeded by its hash."""

    def __init__(self, dim: int = 32, max_tokens: int = 32):
        self.dim = dim
        self.max_tokens = max_tokens
        self._cache: dict[str, np.ndarray] = {}

    @staticmethod
    def tokenize(text: str) -> list[str]:
        return re.findall(r"\w+", text.lower())

    def _vector(self, word: str) -> np.ndarray:
        v = self._cache.get(word)
        if v is None:
            rng = np.random.default_rng(stable_seed("text", word, str(self.dim)))
            v = rng.standard_normal(self.dim)
            self._cache[word] = v
        return v

    def __call__(self, text: str, dtype=torch.float64) -> Tensor:
        words = self.tokenize(text)[: self.max_tokens]
        if not words:
            return torch.zeros((0, self.dim), dtype=dtype)
        return torch.tensor(np.stack([self._vector(w) for w in words]), dtype=dtype)
