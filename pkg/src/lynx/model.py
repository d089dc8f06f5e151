"""The adapted model: backbone plus identity and reference adapters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import torch
from torch import Tensor, nn

from .backbone import Backbone, Spans, mark_frozen
from .config import ModelConfig
from .id_adapter import IDAdapter, IdentityTokens
from .ref_adapter import ActivationCache, FrozenCopyHandle, RefActivationSet, RefAdapter
from .rope_pack import PackedBatch
from .tokens import ShapeError


@dataclass
class Conditioning:
    """Per-sample identity conditioning.

    ``dropped`` swaps the identity tokens for the learned null set and skips
    the reference injection; this is the unconditional branch.
    """

    face: Optional[Tensor] = None
    ref: Optional[RefActivationSet] = None
    dropped: bool = False

    def as_dropped(self) -> "Conditioning":
        return Conditioning(self.face, self.ref, True)


class Lynx(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.id_adapter = IDAdapter(cfg)
        self.ref_adapter = RefAdapter(cfg)
        self.frozen: Optional[FrozenCopyHandle] = None
        self.ref_cache = ActivationCache()

    def adapter_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.id_adapter.parameters()
        yield from self.ref_adapter.parameters()

    def freeze_backbone(self) -> "Lynx":
        mark_frozen(self.backbone)
        return self

    def attach_reference_copy(self) -> FrozenCopyHandle:
        """Create the frozen reference copy; shares storage when the backbone is frozen."""
        share = not any(p.requires_grad for p in self.backbone.parameters())
        self.frozen = FrozenCopyHandle(self.backbone, share=share)
        self.ref_cache = ActivationCache()
        return self.frozen

    def encode_reference(self, ref_latent: Tensor) -> RefActivationSet:
        if self.frozen is None:
            self.attach_reference_copy()
        return self.ref_cache.get(ref_latent, self.frozen)

    def _identity(self, c: Conditioning) -> Optional[IdentityTokens]:
        if c.dropped:
            return self.id_adapter.null_identity()
        if c.face is None:
            return None
        return self.id_adapter.identity_tokens(c.face)

    def forward(self, packed: PackedBatch, texts: Sequence[Tensor], t,
                conds: Optional[Sequence[Optional[Conditioning]]] = None,
                tap: Optional[list] = None) -> Tensor:
        if conds is None:
            return self.backbone(packed, texts, t, tap=tap)
        n = packed.num_segments
        if len(conds) != n:
            raise ShapeError(f"{len(conds)} conditionings for {n} segments")
        nb = self.cfg.num_blocks
        dtype = self.backbone.patch_embed.weight.dtype
        seg = packed.segment_ids()

        id_rows, id_seg = [], []
        ref_rows: list[list[Tensor]] = [[] for _ in range(nb)]
        ref_seg = []
        for i, c in enumerate(conds):
            c = c or Conditioning()
            idt = self._identity(c)
            if idt is not None:
                tok = idt.combined
                id_rows.append(tok)
                id_seg.append(torch.full((tok.shape[0],), i, dtype=torch.long))
            if c.ref is not None and not c.dropped:
                if len(c.ref) != nb:
                    raise ShapeError(f"reference set has {len(c.ref)} layers, model has {nb} blocks")
                for l in range(nb):
                    ref_rows[l].append(c.ref.per_block[l].to(dtype))
                ref_seg.append(torch.full((c.ref.per_block[0].shape[0],), i, dtype=torch.long))

        hooks = []
        id_kv = torch.cat(id_rows).to(dtype) if id_rows else None
        id_mask = Spans.from_ids(seg, torch.cat(id_seg)) if id_rows else None
        ref_mask = Spans.from_ids(seg, torch.cat(ref_seg)) if ref_seg else None
        for l in range(nb):
            ref_kv = torch.cat(ref_rows[l]) if ref_seg else None

            def hook(x, l=l, ref_kv=ref_kv):
                if id_kv is not None:
                    x = self.id_adapter.inject[l](x, id_kv, id_mask)
                if ref_kv is not None:
                    x = self.ref_adapter.inject[l](x, ref_kv, ref_mask)
                return x

            hooks.append(hook)
        return self.backbone(packed, texts, t, hooks=hooks, tap=tap)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float64,
                zero_gates: bool = True, zero_out: bool = False) -> Lynx:
    """Construct a model whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Lynx(cfg)
        model.backbone.reset_parameters(zero_gates=zero_gates, zero_out=zero_out)
    return model.to(dtype)
