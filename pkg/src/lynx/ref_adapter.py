"""Reference adapter: a frozen backbone copy encodes the reference frame and
each generation block cross-attends to the matching layer's activations."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import torch
from torch import Tensor, nn

from .backbone import Backbone, mark_frozen
from .config import ModelConfig
from .encoders import REFERENCE_PROMPT, HashTextEmbedder
from .id_adapter import GatedCrossAttention
from .rope_pack import PackedBatch
from .tokens import Grid, ShapeError, check_finite, patchify


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        t = t.detach().contiguous().cpu()
        h.update(f"{name}|{t.dtype}|{tuple(t.shape)}|".encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class FrozenCopyHandle:
    """Read-only backbone used for the reference pass.

    With ``share=True`` the handle wraps the given backbone itself (which
    must then stay frozen); otherwise it owns a one-time deep copy.
    """

    def __init__(self, backbone: Backbone, share: bool = False):
        if share and any(p.requires_grad for p in backbone.parameters()):
            raise ValueError("a shared frozen handle needs a backbone with no trainable parameters")
        self.backbone = backbone if share else copy.deepcopy(backbone)
        mark_frozen(self.backbone)
        self.backbone.eval()
        self.shared = share
        self.hash = parameter_hash(self.backbone)

    def current_hash(self) -> str:
        return parameter_hash(self.backbone)

    def verify(self):
        now = self.current_hash()
        if now != self.hash:
            raise RuntimeError(f"frozen copy changed: {self.hash[:12]} -> {now[:12]}")

    def parameters(self):
        return self.backbone.parameters()


@dataclass(frozen=True)
class RefActivationSet:
    per_block: tuple[Tensor, ...]
    ref_grid: Grid

    def __post_init__(self):
        object.__setattr__(self, "per_block", tuple(self.per_block))
        lens = {a.shape[0] for a in self.per_block}
        if len(lens) > 1:
            raise ShapeError(f"reference length varies across blocks: {sorted(lens)}")
        for l, a in enumerate(self.per_block):
            check_finite(a, f"reference activations of block {l}")

    def __len__(self) -> int:
        return len(self.per_block)


_text = HashTextEmbedder()


def encode_reference(ref_latent: Tensor, frozen: FrozenCopyHandle,
                     text_embedder: Optional[HashTextEmbedder] = None) -> RefActivationSet:
    """Run the reference frame through the frozen copy at t=0 with the fixed prompt."""
    if ref_latent.ndim != 4 or ref_latent.shape[0] != 1:
        raise ShapeError(f"reference must be a single-frame latent (1, h, w, c), "
                         f"got {tuple(ref_latent.shape)}")
    bb = frozen.backbone
    cfg = bb.cfg
    text_embedder = text_embedder or (_text if _text.dim == cfg.text_dim else
                                      HashTextEmbedder(cfg.text_dim))
    dtype = bb.patch_embed.weight.dtype
    tok = patchify(ref_latent.to(dtype), cfg.patch)
    packed = PackedBatch(tok.data, [0, len(tok)], [tok.grid], len(tok))
    taps: list[Tensor] = []
    with torch.no_grad():
        bb(packed, [text_embedder(REFERENCE_PROMPT, dtype)], 0.0, tap=taps)
    return RefActivationSet(tuple(a.detach().clone() for a in taps), tok.grid)


class RefAdapter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.inject = nn.ModuleList(GatedCrossAttention(cfg.hidden_dim, cfg.num_heads)
                                    for _ in range(cfg.num_blocks))


def ref_inject(visual: Tensor, ref_l: Tensor, block: GatedCrossAttention,
               mask: Optional[Tensor] = None) -> Tensor:
    return block(visual, ref_l, mask)


class ActivationCache:
    """Content-addressed store of reference activations, in memory and optionally on disk."""

    def __init__(self, root: Optional[Union[str, Path]] = None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, RefActivationSet] = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(ref_latent: Tensor, frozen: FrozenCopyHandle) -> str:
        h = hashlib.sha256(frozen.hash.encode())
        t = ref_latent.detach().contiguous().cpu()
        h.update(f"{t.dtype}|{tuple(t.shape)}|".encode())
        h.update(t.numpy().tobytes())
        return h.hexdigest()

    def get(self, ref_latent: Tensor, frozen: FrozenCopyHandle) -> RefActivationSet:
        from .checkpoint import load_checkpoint, save_checkpoint

        k = self.key(ref_latent, frozen)
        if k in self._mem:
            self.hits += 1
            return self._mem[k]
        path = self.root / f"{k}.lynx" if self.root is not None else None
        if path is not None and path.exists():
            ck = load_checkpoint(path)
            n = len(ck.tensors)
            acts = RefActivationSet(tuple(ck.tensors[f"block.{l}"] for l in range(n)),
                                    tuple(ck.config["ref_grid"]))
            self.hits += 1
        else:
            acts = encode_reference(ref_latent, frozen)
            self.misses += 1
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(path, {f"block.{l}": a for l, a in enumerate(acts.per_block)},
                                {"ref_grid": list(acts.ref_grid)})
        self._mem[k] = acts
        return acts
