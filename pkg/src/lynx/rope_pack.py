"""Frame packing: many token sequences in one, with block-diagonal attention
and 3D rotary embeddings that restart at every segment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import Tensor

from .config import ConfigError, rope_bands
from .tokens import Grid, ShapeError, TokenSeq

PAD_SEGMENT = -1


class PackingError(ValueError):
    pass


def _check_boundaries(boundaries: Sequence[int]) -> list[int]:
    b = [int(x) for x in boundaries]
    if not b or b[0] != 0:
        raise PackingError(f"boundaries must start at 0, got {b}")
    if any(b1 <= b0 for b0, b1 in zip(b, b[1:])):
        raise PackingError(f"boundaries must be strictly increasing, got {b}")
    return b


@dataclass
class PackedBatch:
    """Concatenated tokens of several samples.

    Rows past ``boundaries[-1]`` (if any) are padding and belong to the
    null segment.
    """

    tokens: Tensor
    boundaries: list[int]
    grids: list[Grid]
    budget: int

    def __post_init__(self):
        self.boundaries = _check_boundaries(self.boundaries)
        self.grids = [tuple(int(g) for g in grid) for grid in self.grids]
        if len(self.grids) != len(self.boundaries) - 1:
            raise PackingError(
                f"{len(self.grids)} grids for {len(self.boundaries) - 1} segments")
        for i, (g, a, b) in enumerate(zip(self.grids, self.boundaries, self.boundaries[1:])):
            if g[0] * g[1] * g[2] != b - a:
                raise PackingError(f"segment {i}: grid {g} does not match length {b - a}")
        if self.total_len > self.budget:
            raise PackingError(f"total length {self.total_len} exceeds budget {self.budget}")
        if not (self.total_len <= self.tokens.shape[0] <= max(self.budget, self.total_len)):
            raise PackingError(
                f"token rows {self.tokens.shape[0]} outside [{self.total_len}, {self.budget}]")

    @property
    def total_len(self) -> int:
        return self.boundaries[-1]

    @property
    def num_segments(self) -> int:
        return len(self.boundaries) - 1

    @property
    def lengths(self) -> list[int]:
        return [b - a for a, b in zip(self.boundaries, self.boundaries[1:])]

    @property
    def padded(self) -> bool:
        return self.tokens.shape[0] > self.total_len

    def segment_ids(self) -> Tensor:
        return segment_ids(self.boundaries, self.tokens.shape[0])

    def valid_mask(self) -> Tensor:
        return self.segment_ids() != PAD_SEGMENT

    def pad(self) -> "PackedBatch":
        """Zero-pad to the budget; padding rows form the null segment."""
        n = self.budget - self.tokens.shape[0]
        if n <= 0:
            return self
        tail = self.tokens.new_zeros((n, self.tokens.shape[1]))
        return PackedBatch(torch.cat([self.tokens, tail]), list(self.boundaries),
                           list(self.grids), self.budget)

    def with_tokens(self, tokens: Tensor) -> "PackedBatch":
        return PackedBatch(tokens, list(self.boundaries), list(self.grids), self.budget)


def segment_ids(boundaries: Sequence[int], length: Optional[int] = None) -> Tensor:
    b = _check_boundaries(boundaries)
    length = b[-1] if length is None else int(length)
    if length < b[-1]:
        raise PackingError(f"length {length} shorter than boundaries end {b[-1]}")
    seg = torch.full((length,), PAD_SEGMENT, dtype=torch.long)
    for i, (s, e) in enumerate(zip(b, b[1:])):
        seg[s:e] = i
    return seg


def pack(samples: Sequence[TokenSeq], budget: int) -> list[PackedBatch]:
    """Greedy first-fit in arrival order; a sample is never split."""
    packs: list[PackedBatch] = []
    current: list[TokenSeq] = []
    used = 0

    def flush():
        bounds = [0]
        for s in current:
            bounds.append(bounds[-1] + len(s))
        packs.append(PackedBatch(torch.cat([s.data for s in current]), bounds,
                                 [s.grid for s in current], budget))

    for i, s in enumerate(samples):
        if len(s) == 0:
            raise PackingError(f"sample {i} is empty")
        if len(s) > budget:
            raise PackingError(f"sample {i} has {len(s)} tokens, budget is {budget}")
        if current and used + len(s) > budget:
            flush()
            current, used = [], 0
        current.append(s)
        used += len(s)
    if current:
        flush()
    return packs


def unpack(packed: PackedBatch) -> list[TokenSeq]:
    b = packed.boundaries
    if b[-1] > packed.tokens.shape[0]:
        raise PackingError("boundaries run past the token array")
    return [TokenSeq(packed.tokens[s:e], g) for s, e, g in zip(b, b[1:], packed.grids)]


def padding_waste(packs: Sequence[PackedBatch]) -> float:
    """Fraction of budgeted slots left empty when every pack is padded."""
    if not packs:
        return 0.0
    slots = sum(p.budget for p in packs)
    return sum(p.budget - p.total_len for p in packs) / slots


@dataclass
class AttentionMask:
    """Segment-id view of a block-diagonal mask.

    Query ``i`` may attend key ``j`` iff their segment ids agree. For
    self-attention the key ids default to the query ids.
    """

    q_seg: Tensor
    kv_seg: Optional[Tensor] = None

    @property
    def keys(self) -> Tensor:
        return self.q_seg if self.kv_seg is None else self.kv_seg

    def dense(self) -> Tensor:
        return self.q_seg[:, None] == self.keys[None, :]

    def allowed(self, i: int, j: int) -> bool:
        return bool(self.q_seg[i] == self.keys[j])


def build_mask(boundaries: Sequence[int], length: Optional[int] = None) -> AttentionMask:
    return AttentionMask(segment_ids(boundaries, length))


@dataclass
class RopeTable:
    """Per-token rotation factors, one (cos, sin) per channel pair."""

    cos: Tensor
    sin: Tensor
    bands: tuple[int, int, int]
    positions: Tensor = field(repr=False)

    @property
    def head_dim(self) -> int:
        return 2 * self.cos.shape[-1]


def _band_freqs(width: int, base: float, dtype) -> Tensor:
    return base ** (-torch.arange(0, width, 2, dtype=dtype) / width)


def rope_from_positions(positions: Tensor, head_dim: int,
                        bands: Optional[tuple[int, int, int]] = None,
                        base: float = 10000.0, dtype=torch.float64) -> RopeTable:
    """Rotation table for explicit integer-or-real (t, h, w) coordinates."""
    bands = rope_bands(head_dim) if bands is None else tuple(bands)
    if sum(bands) != head_dim or any(b <= 0 or b % 2 for b in bands):
        raise ConfigError(f"rope bands {bands} must be positive, even and sum to {head_dim}")
    positions = positions.to(dtype)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ShapeError(f"positions must be (n, 3), got {tuple(positions.shape)}")
    angles = torch.cat([positions[:, a:a + 1] * _band_freqs(w, base, dtype)[None, :]
                        for a, w in enumerate(bands)], dim=1)
    return RopeTable(torch.cos(angles), torch.sin(angles), bands, positions)


def grid_positions(grids: Sequence[Grid], boundaries: Sequence[int],
                   length: Optional[int] = None) -> Tensor:
    """Row-major (t, h, w) coordinates, restarting at zero in each segment."""
    b = _check_boundaries(boundaries)
    length = b[-1] if length is None else int(length)
    pos = torch.zeros((length, 3), dtype=torch.long)
    for (s, e), (gt, gh, gw) in zip(zip(b, b[1:]), grids):
        if gt * gh * gw != e - s:
            raise PackingError(f"grid {(gt, gh, gw)} does not match segment length {e - s}")
        k = torch.arange(e - s)
        pos[s:e, 0] = k // (gh * gw)
        pos[s:e, 1] = (k // gw) % gh
        pos[s:e, 2] = k % gw
    return pos


def rope_3d(grids: Sequence[Grid], boundaries: Sequence[int], head_dim: int,
            bands: Optional[tuple[int, int, int]] = None, base_freq: float = 10000.0,
            length: Optional[int] = None, dtype=torch.float64) -> RopeTable:
    return rope_from_positions(grid_positions(grids, boundaries, length), head_dim,
                               bands, base_freq, dtype)


def apply_rope(x: Tensor, table: RopeTable) -> Tensor:
    """Rotate adjacent channel pairs of ``x`` (..., len, head_dim)."""
    if x.shape[-1] != table.head_dim or x.shape[-2] != table.cos.shape[0]:
        raise ShapeError(
            f"rope table is ({table.cos.shape[0]}, {table.head_dim}), input is "
            f"{tuple(x.shape[-2:])}")
    cos = table.cos.to(x.dtype)
    sin = table.sin.to(x.dtype)
    pairs = x.unflatten(-1, (-1, 2))
    a, b = pairs[..., 0], pairs[..., 1]
    return torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1).flatten(-2)
