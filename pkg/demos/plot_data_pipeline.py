"""
A pair manifest: filtering, weighting and augmentation
=======================================================

Training pairs are JSON lines pointing at a condition image and a target
clip. This walk-through builds a tiny manifest, scores identity agreement,
draws a weighted stream, and adds augmented copies.
"""

# %%
import json
import tempfile
from collections import Counter
from itertools import islice
from pathlib import Path

import numpy as np

from lynx.data_pipeline import (
    ExpressionWarp, augment_records, identity_filter, load_manifest, manifest_stats,
    weighted_sampler,
)
from lynx.faces import StubFaceEmbedder, synthetic_face
from lynx.media import save_frames, save_image

root = Path(tempfile.mkdtemp())

# %%
# Four subjects. Subject 3's clip shows somebody else, so its pair is noise.
lines = []
for i in range(4):
    save_image(root / f"cond{i}.png", synthetic_face(i))
    who = 100 + i if i == 3 else i
    save_frames(root / f"clip{i}", [synthetic_face(who)] * 2)
    kind = "single_scene" if i < 2 else "multi_scene"
    lines.append({"pair_type": kind, "condition_image": f"cond{i}.png",
                  "target": f"clip{i}", "caption": f"subject {i} talking"})
(root / "pairs.jsonl").write_text("".join(json.dumps(l) + "\n" for l in lines))
records = load_manifest(root / "pairs.jsonl")

# %%
# Cross-scene pairs below the resemblance threshold are dropped.
embedder = StubFaceEmbedder()
result = identity_filter(records, embedder, threshold=0.5)
for r in result.kept:
    print("kept   ", r.condition_image, round(r.resemblance, 3))
for d in result.dropped:
    print("dropped", d.record.condition_image, d.reason)

# %%
# Single-scene pairs get augmented condition images.
augmented, rejects = augment_records(result.kept, ExpressionWarp(2.0), seed=0,
                                     out_dir=root / "aug")
print(len(augmented), "augmented,", len(rejects), "not eligible")
pool = result.kept + augmented
print(manifest_stats(identity_filter(pool, embedder).kept)["counts"])

# %%
# A weighted stream over pair types.
stream = weighted_sampler(pool, {"single_scene": 0.4, "multi_scene": 0.2,
                                 "augmented_single_scene": 0.4}, seed=0)
counts = Counter(r.pair_type for r in islice(stream, 10_000))
print({k: v / 10_000 for k, v in counts.items()})
