"""Latent videos and their patch-token view."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import Tensor

from .config import PatchSpec

Grid = tuple[int, int, int]


class ShapeError(ValueError):
    """Tensor extents do not line up with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a module boundary."""


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        bad = int((~torch.isfinite(x)).sum())
        raise NonFiniteError(f"{what} has {bad} non-finite value(s)")
    return x


@dataclass
class TokenSeq:
    """A (len, dim) token array laid out row-major over a (t', h', w') grid."""

    data: Tensor
    grid: Grid

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.data.ndim != 2:
            raise ShapeError(f"token data must be 2-D, got shape {tuple(self.data.shape)}")
        n = self.grid[0] * self.grid[1] * self.grid[2]
        if n != self.data.shape[0]:
            raise ShapeError(f"grid {self.grid} has {n} cells but data has {self.data.shape[0]} rows")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def patchify(x: Tensor, patch: PatchSpec, proj: Optional[Callable[[Tensor], Tensor]] = None) -> TokenSeq:
    """Cut a (t, h, w, c) latent into flattened patches, optionally projected.

    Each patch is flattened in (pt, ph, pw, c) order.
    """
    if x.ndim != 4:
        raise ShapeError(f"latent must be (t, h, w, c), got shape {tuple(x.shape)}")
    t, h, w, c = x.shape
    pt, ph, pw = patch.as_tuple()
    if t % pt or h % ph or w % pw:
        raise ShapeError(f"patch {(pt, ph, pw)} does not divide latent extents {(t, h, w)}")
    gt, gh, gw = t // pt, h // ph, w // pw
    tok = (x.reshape(gt, pt, gh, ph, gw, pw, c)
           .permute(0, 2, 4, 1, 3, 5, 6)
           .reshape(gt * gh * gw, pt * ph * pw * c))
    if proj is not None:
        tok = proj(tok)
    return TokenSeq(tok, (gt, gh, gw))


def unpatchify(tokens: TokenSeq, patch: PatchSpec, channels: int,
               proj_out: Optional[Callable[[Tensor], Tensor]] = None) -> Tensor:
    data = tokens.data if proj_out is None else proj_out(tokens.data)
    gt, gh, gw = tokens.grid
    pt, ph, pw = patch.as_tuple()
    if data.shape[1] != pt * ph * pw * channels:
        raise ShapeError(
            f"token dim {data.shape[1]} != patch volume {pt * ph * pw} x channels {channels}")
    return (data.reshape(gt, gh, gw, pt, ph, pw, channels)
            .permute(0, 3, 1, 4, 2, 5, 6)
            .reshape(gt * pt, gh * ph, gw * pw, channels))


def token_grid(shape: tuple[int, int, int], patch: PatchSpec) -> Grid:
    t, h, w = shape
    pt, ph, pw = patch.as_tuple()
    if t % pt or h % ph or w % pw:
        raise ShapeError(f"patch {(pt, ph, pw)} does not divide latent extents {(t, h, w)}")
    return (t // pt, h // ph, w // pw)
