"""Toy DiT video backbone.

Each block runs adaLN-modulated self-attention with 3D-RoPE, text
cross-attention, an optional adapter hook, and an adaLN-modulated MLP.
All blocks operate on a packed sequence; segment ids keep samples apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ModelConfig
from .rope_pack import PAD_SEGMENT, PackedBatch, RopeTable, apply_rope, rope_3d
from .tokens import NonFiniteError, ShapeError

Hook = Callable[[Tensor], Tensor]


def timestep_embed(t, dim: int, max_period: float = 10000.0, scale: float = 1000.0) -> Tensor:
    """Sinusoidal embedding ``[sin(s*t*f_i), cos(s*t*f_i)]`` with f_i = max_period^(-i/half).

    ``t`` may be a float or a 1-D tensor of times in [0, 1].
    """
    t = torch.as_tensor(t, dtype=torch.float64)
    scalar = t.ndim == 0
    t = t.reshape(-1)
    if (t < 0).any() or (t > 1).any() or not torch.isfinite(t).all():
        raise ValueError(f"timestep must lie in [0, 1], got {t.tolist()}")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = scale * t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb[0] if scalar else emb


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[Tensor]) -> Tensor:
    """Softmax attention over (heads, len, head_dim) with a boolean (lq, lk) mask.

    Rows whose mask is entirely false produce zeros.
    """
    if k.shape[-2] == 0:
        return q.new_zeros(q.shape[:-1] + v.shape[-1:])
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    m = scores.amax(dim=-1, keepdim=True).detach()
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    e = torch.exp(scores - m)
    denom = e.sum(dim=-1, keepdim=True)
    p = e / torch.where(denom > 0, denom, torch.ones_like(denom))
    return p @ v


@dataclass(frozen=True)
class Spans:
    """Block-diagonal layout: query rows ``q[i]`` attend only key rows ``k[i]``.

    Equivalent to a dense boolean mask that is true exactly on those blocks,
    but attention never scores the masked-out pairs.
    """

    q: tuple
    k: tuple

    @classmethod
    def from_ids(cls, q_ids: Tensor, k_ids: Tensor) -> "Spans":
        """Spans of a mask ``q_ids[:, None] == k_ids[None, :]`` with contiguous ids."""
        def runs(ids):
            out, prev = {}, None
            for j, v in enumerate(ids.tolist()):
                if v != prev and v in out:
                    raise ValueError(f"segment id {v} is not contiguous")
                out[v] = (out[v][0] if v in out else j, j + 1)
                prev = v
            return out

        qr, kr = runs(q_ids), runs(k_ids)
        keys = [v for v in qr if v in kr]
        return cls(tuple(qr[v] for v in keys), tuple(kr[v] for v in keys))

    def dense(self, lq: int, lk: int) -> Tensor:
        m = torch.zeros(lq, lk, dtype=torch.bool)
        for (a, b), (c, d) in zip(self.q, self.k):
            m[a:b, c:d] = True
        return m

    def covered(self, lq: int) -> Tensor:
        """Query rows with at least one key."""
        m = torch.zeros(lq, dtype=torch.bool)
        for (a, b), (c, d) in zip(self.q, self.k):
            m[a:b] = d > c
        return m


def span_attention(q: Tensor, k: Tensor, v: Tensor, spans: Spans) -> Tensor:
    """:func:`masked_attention` under ``spans.dense(...)``, one batched call per block shape."""
    groups: dict[tuple[int, int], list[int]] = {}
    for i, ((a, b), (c, d)) in enumerate(zip(spans.q, spans.k)):
        if b > a and d > c:
            groups.setdefault((b - a, d - c), []).append(i)
    out = q.new_zeros(q.shape[:-1] + v.shape[-1:])
    for (nq, nk), members in groups.items():
        qi = torch.cat([torch.arange(*spans.q[i]) for i in members])
        ki = torch.cat([torch.arange(*spans.k[i]) for i in members])
        h, n = q.shape[0], len(members)
        qs = q[:, qi].reshape(h, n, nq, -1)
        ks, vs = k[:, ki].reshape(h, n, nk, -1), v[:, ki].reshape(h, n, nk, -1)
        res = masked_attention(qs, ks, vs, None).reshape(h, n * nq, -1)
        out = out.index_copy(1, qi, res)
    return out


def attend(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    if isinstance(mask, Spans):
        return span_attention(q, k, v, mask)
    return masked_attention(q, k, v, mask)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.o = nn.Linear(dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        return x.unflatten(-1, (self.heads, -1)).transpose(0, 1)

    def forward(self, x: Tensor, ctx: Optional[Tensor] = None, mask: Optional[Tensor] = None,
                rope: Optional[RopeTable] = None) -> Tensor:
        """``mask`` is a dense (lq, lk) boolean tensor or a :class:`Spans` layout."""
        ctx = x if ctx is None else ctx
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        if rope is not None:
            q, k = apply_rope(q, rope), apply_rope(k, rope)
        out = attend(q, k, v, mask)
        return self.o(out.transpose(0, 1).flatten(-2))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale) + shift


@dataclass
class BlockContext:
    """Per-forward inputs shared by every block of a packed pass."""

    seg: Tensor
    cond: Tensor
    rope: RopeTable
    self_mask: "Tensor | Spans"
    text: Tensor
    text_mask: "Tensor | Spans"


class DiTBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.self_attn = Attention(d, cfg.num_heads)
        self.norm2 = nn.LayerNorm(d, eps=1e-6)
        self.text_attn = Attention(d, cfg.num_heads, kv_dim=cfg.text_dim)
        self.norm3 = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(d, d * cfg.mlp_ratio), nn.GELU(approximate="tanh"),
                                 nn.Linear(d * cfg.mlp_ratio, d))
        # shift/scale/gate for self-attention, then for the MLP
        self.ada = nn.Linear(d, 6 * d)

    def forward(self, x: Tensor, ctx: BlockContext, inject: Optional[Hook] = None,
                tap: Optional[list] = None) -> Tensor:
        mod = self.ada(F.silu(ctx.cond))
        shift1, scale1, gate1, shift2, scale2, gate2 = mod.chunk(6, dim=-1)
        h = modulate(self.norm1(x), shift1, scale1)
        x = x + gate1 * self.self_attn(h, mask=ctx.self_mask, rope=ctx.rope)
        if tap is not None:
            tap.append(x)
        x = x + self.text_attn(self.norm2(x), ctx.text, mask=ctx.text_mask)
        if inject is not None:
            x = inject(x)
        x = x + gate2 * self.mlp(modulate(self.norm3(x), shift2, scale2))
        return x


def pack_context(seqs: Sequence[Tensor], dim: int, dtype=None) -> tuple[Tensor, Tensor]:
    """Concatenate per-sample context sequences and tag rows with their sample index."""
    if not seqs:
        return torch.zeros((0, dim), dtype=dtype), torch.zeros((0,), dtype=torch.long)
    for s in seqs:
        if s.ndim != 2 or s.shape[1] != dim:
            raise ShapeError(f"context entries must be (n, {dim}), got {tuple(s.shape)}")
    data = torch.cat(list(seqs))
    seg = torch.cat([torch.full((s.shape[0],), i, dtype=torch.long) for i, s in enumerate(seqs)])
    return data, seg


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.patch_embed = nn.Linear(cfg.patch_dim, d)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.freq_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.num_blocks))
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.ada_out = nn.Linear(d, 2 * d)
        self.proj_out = nn.Linear(d, cfg.patch_dim)
        self.reset_parameters()

    def reset_parameters(self, zero_gates: bool = True, zero_out: bool = False):
        """Xavier linears with zero bias; adaLN maps and optionally the output head zeroed."""
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.time_mlp[0].weight, std=0.02)
        nn.init.normal_(self.time_mlp[2].weight, std=0.02)
        if zero_gates:
            for blk in self.blocks:
                nn.init.zeros_(blk.ada.weight)
                nn.init.zeros_(blk.ada.bias)
            nn.init.zeros_(self.ada_out.weight)
            nn.init.zeros_(self.ada_out.bias)
        if zero_out:
            nn.init.zeros_(self.proj_out.weight)
            nn.init.zeros_(self.proj_out.bias)

    def time_condition(self, t: Tensor) -> Tensor:
        dtype = self.patch_embed.weight.dtype
        return self.time_mlp(timestep_embed(t, self.cfg.freq_dim).to(dtype))

    def context(self, packed: PackedBatch, texts: Sequence[Tensor], t) -> BlockContext:
        n = packed.num_segments
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        if t.numel() == 1 and n > 1:
            t = t.expand(n)
        if t.numel() != n:
            raise ShapeError(f"{t.numel()} timesteps for {n} segments")
        if len(texts) != n:
            raise ShapeError(f"{len(texts)} text sequences for {n} segments")
        dtype = self.patch_embed.weight.dtype
        seg = packed.segment_ids()
        cond = self.time_condition(t)[seg.clamp(min=0)]
        rope = rope_3d(packed.grids, packed.boundaries, self.cfg.head_dim, self.cfg.bands,
                       self.cfg.rope_base, length=packed.tokens.shape[0])
        text, text_seg = pack_context(texts, self.cfg.text_dim, dtype)
        return BlockContext(seg=seg, cond=cond, rope=rope,
                            self_mask=Spans.from_ids(seg, seg), text=text.to(dtype),
                            text_mask=Spans.from_ids(seg, text_seg))

    def forward(self, packed: PackedBatch, texts: Sequence[Tensor], t,
                hooks: Optional[Sequence[Optional[Hook]]] = None,
                tap: Optional[list] = None) -> Tensor:
        """Predict velocity tokens (rows, patch_dim) for a packed batch.

        ``hooks[l]`` runs inside block ``l`` after text cross-attention;
        ``tap`` collects each block's post-self-attention hidden state.
        """
        if hooks is not None and len(hooks) != len(self.blocks):
            raise ShapeError(f"{len(hooks)} hooks for {len(self.blocks)} blocks")
        ctx = self.context(packed, texts, t)
        x = self.patch_embed(packed.tokens.to(self.patch_embed.weight.dtype))
        for l, blk in enumerate(self.blocks):
            x = blk(x, ctx, None if hooks is None else hooks[l], tap)
        shift, scale = self.ada_out(F.silu(ctx.cond)).chunk(2, dim=-1)
        out = self.proj_out(modulate(self.norm_out(x), shift, scale))
        if not torch.isfinite(out).all():
            raise NonFiniteError("backbone produced non-finite activations")
        return out


def mark_frozen(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


__all__ = ["Attention", "Backbone", "BlockContext", "DiTBlock", "masked_attention",
           "mark_frozen", "modulate", "pack_context", "span_attention", "Spans", "attend",
           "timestep_embed", "PAD_SEGMENT"]
