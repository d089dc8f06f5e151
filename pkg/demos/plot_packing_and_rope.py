"""
Packing variable-length clips and rotating by 3D position
==========================================================

Clips of different lengths share one token sequence. Each clip is a segment,
attention is block-diagonal over segments, and rotary positions restart at
every segment boundary.
"""

# %%
# Three clips of different sizes, as latent grids (t, h, w, channels).
import torch

from lynx.config import PatchSpec, rope_bands
from lynx.rope_pack import apply_rope, build_mask, pack, padding_waste, rope_3d
from lynx.tokens import patchify

patch = PatchSpec()
clips = [torch.randn(4, 8, 8, 4), torch.randn(1, 8, 8, 4), torch.randn(2, 4, 8, 4)]
tokens = [patchify(c, patch) for c in clips]
print("tokens per clip:", [len(t) for t in tokens])

# %%
# Greedy first-fit into packs of 72 tokens. A clip is never split.
packs = pack(tokens, budget=72)
for p in packs:
    print("pack lengths", p.lengths, "boundaries", p.boundaries)
print("padding waste", padding_waste(packs))

# %%
# The attention mask of the second pack: tokens only see their own clip,
# padding rows see nothing.
second = packs[1].pad()
mask = build_mask(second.boundaries, second.tokens.shape[0]).dense()
print("allowed pairs:", int(mask.sum()), "of", mask.numel())

# %%
# A head dimension of 16 is split into (t, h, w) bands of (8, 4, 4) channels.
print("bands for head_dim 16:", rope_bands(16))
table = rope_3d(second.grids, second.boundaries, head_dim=16, bands=rope_bands(16),
                length=second.tokens.shape[0])
print("positions of the first tokens of each clip:")
for b in second.boundaries[:-1]:
    print("  ", table.positions[b].tolist())

# %%
# The rotated dot product depends only on the offset between positions.
q, k = torch.randn(16), torch.randn(16)
rq = apply_rope(q.expand(second.tokens.shape[0], 16), table)
rk = apply_rope(k.expand(second.tokens.shape[0], 16), table)
print("q.k at offset 1 along w, two places:", float(rq[1] @ rk[0]), float(rq[2] @ rk[1]))
