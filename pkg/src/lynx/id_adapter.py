"""Identity adapter: face embedding -> resampled identity tokens -> per-block
gated cross-attention into the visual stream."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn

from .backbone import Attention, Spans, masked_attention
from .config import ModelConfig
from .tokens import ShapeError


def check_face_embedding(v: Tensor, dim: Optional[int] = None, atol: float = 1e-6) -> Tensor:
    """Validate an L2-normalized face vector (1-D, or a batch of them)."""
    if v.ndim not in (1, 2):
        raise ShapeError(f"face embedding must be 1-D or 2-D, got shape {tuple(v.shape)}")
    if dim is not None and v.shape[-1] != dim:
        raise ShapeError(f"face embedding has dim {v.shape[-1]}, expected {dim}")
    if not torch.isfinite(v).all():
        raise ValueError("face embedding is not finite")
    norms = torch.linalg.vector_norm(v.to(torch.float64), dim=-1)
    if ((norms - 1).abs() > atol).any():
        raise ValueError(f"face embedding is not L2-normalized (norm {norms.tolist()})")
    return v


class PerceiverAttention(nn.Module):
    """Latent queries attend to the projected face context and to themselves."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm_ctx = nn.LayerNorm(dim)
        self.norm_latents = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim, bias=False)
        self.kv = nn.Linear(dim, 2 * dim, bias=False)
        self.o = nn.Linear(dim, dim, bias=False)

    def forward(self, ctx: Tensor, latents: Tensor) -> Tensor:
        ctx, latents = self.norm_ctx(ctx), self.norm_latents(latents)
        split = lambda x: x.unflatten(-1, (self.heads, -1)).transpose(-3, -2)
        q = split(self.q(latents))
        k, v = self.kv(torch.cat([ctx, latents], dim=-2)).chunk(2, dim=-1)
        out = masked_attention(q, split(k), split(v), None)
        return self.o(out.transpose(-3, -2).flatten(-2))


class Resampler(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.n_ctx = cfg.face_ctx_tokens
        self.face_dim = cfg.face_dim
        self.latents = nn.Parameter(torch.randn(cfg.n_id, d) * d ** -0.5)
        self.proj_in = nn.Linear(cfg.face_dim, self.n_ctx * d)
        self.layers = nn.ModuleList(
            nn.ModuleList([
                PerceiverAttention(d, cfg.resampler_heads),
                nn.Sequential(nn.LayerNorm(d), nn.Linear(d, 4 * d, bias=False), nn.GELU(),
                              nn.Linear(4 * d, d, bias=False)),
            ])
            for _ in range(cfg.resampler_depth)
        )
        self.proj_out = nn.Linear(d, d)
        self.norm_out = nn.LayerNorm(d)

    def forward(self, face: Tensor) -> Tensor:
        """(face_dim,) -> (n_id, dim); a leading batch axis is carried through."""
        check_face_embedding(face, self.face_dim)
        face = face.to(self.latents.dtype)
        ctx = self.proj_in(face).unflatten(-1, (self.n_ctx, -1))
        latents = self.latents.expand(*face.shape[:-1], *self.latents.shape)
        for attn, ff in self.layers:
            latents = latents + attn(ctx, latents)
            latents = latents + ff(latents)
        return self.norm_out(self.proj_out(latents))


@dataclass
class IdentityTokens:
    id_tokens: Tensor
    registers: Tensor

    def __post_init__(self):
        if self.id_tokens.ndim != 2 or self.registers.ndim != 2:
            raise ShapeError("identity and register tokens must be 2-D")
        if self.registers.shape[1] != self.id_tokens.shape[1]:
            raise ShapeError(f"register dim {self.registers.shape[1]} != "
                             f"identity token dim {self.id_tokens.shape[1]}")

    @property
    def combined(self) -> Tensor:
        if self.registers.shape[0] == 0:
            return self.id_tokens
        return torch.cat([self.id_tokens, self.registers])

    def __len__(self) -> int:
        return self.id_tokens.shape[0] + self.registers.shape[0]


def with_registers(id_part: Tensor, registers: Tensor) -> IdentityTokens:
    return IdentityTokens(id_part, registers)


class GatedCrossAttention(nn.Module):
    """``x + gate * CrossAttn(q=x, kv=tokens)`` with a zero-initialized gate.

    No positional terms touch the key/value tokens, so the result does not
    depend on their order.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.norm_kv = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.gate = nn.Parameter(torch.zeros(dim))

    def forward(self, x: Tensor, kv: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        if kv.shape[-1] != x.shape[-1]:
            raise ShapeError(f"kv dim {kv.shape[-1]} != visual dim {x.shape[-1]}")
        delta = self.gate * self.attn(self.norm_q(x), self.norm_kv(kv), mask=mask)
        if mask is not None:
            # rows with nothing to attend to receive no update at all
            rows = mask.covered(x.shape[0]) if isinstance(mask, Spans) else mask.any(dim=-1)
            delta = delta * rows[:, None]
        return x + delta


class IDAdapter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.cfg = cfg
        self.resampler = Resampler(cfg)
        self.registers = nn.Parameter(torch.randn(cfg.n_reg, d) * d ** -0.5)
        # stands in for the identity tokens when identity conditioning is dropped
        self.null_tokens = nn.Parameter(torch.randn(cfg.n_id + cfg.n_reg, d) * d ** -0.5)
        self.inject = nn.ModuleList(GatedCrossAttention(d, cfg.num_heads)
                                    for _ in range(cfg.num_blocks))

    def identity_tokens(self, face: Tensor) -> IdentityTokens:
        return with_registers(self.resampler(face), self.registers)

    def null_identity(self) -> IdentityTokens:
        n = self.cfg.n_id
        return IdentityTokens(self.null_tokens[:n], self.null_tokens[n:])


def id_inject(visual: Tensor, idt: IdentityTokens, block: GatedCrossAttention,
              mask: Optional[Tensor] = None) -> Tensor:
    return block(visual, idt.combined, mask)
