"""Stand-in face detector and recognition embedder."""

from __future__ import annotations

import numpy as np
from PIL import Image


class NoFaceError(ValueError):
    """The stub detector found nothing usable in the image."""


class StubFaceEmbedder:
    """Center crop -> box downsample -> fixed random projection -> L2 normalize.

    Features are mean-centered before projection, so a flat image carries no
    "face" and unrelated images land near-orthogonal. Distinct seeds give
    distinct embedding spaces.
    """

    def __init__(self, dim: int = 64, seed: int = 0, size: int = 16, crop: float = 0.8,
                 min_std: float = 1e-3, name: str = "stub"):
        self.dim = dim
        self.size = size
        self.crop = crop
        self.min_std = min_std
        self.name = name
        rng = np.random.default_rng(seed)
        self.proj = rng.standard_normal((size * size * 3, dim)) / np.sqrt(size * size * 3)

    def detect(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
        h, w, _ = image.shape
        ch, cw = max(1, int(round(h * self.crop))), max(1, int(round(w * self.crop)))
        top, left = (h - ch) // 2, (w - cw) // 2
        face = image[top:top + ch, left:left + cw]
        if face.std() < self.min_std:
            raise NoFaceError("no face detected (flat crop)")
        return face

    def features(self, image: np.ndarray) -> np.ndarray:
        face = self.detect(image)
        chans = [np.asarray(Image.fromarray(face[..., c].astype(np.float32), "F")
                            .resize((self.size, self.size), Image.BOX), dtype=np.float64)
                 for c in range(3)]
        f = np.stack(chans, axis=-1).reshape(-1)
        return f - f.mean()

    def __call__(self, image: np.ndarray) -> np.ndarray:
        v = self.features(image) @ self.proj
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n < 1e-12:
            raise NoFaceError("face features vanished")
        return v / n


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def synthetic_face(seed: int, size: int = 64) -> np.ndarray:
    """A cartoon portrait whose layout and colors depend only on ``seed``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    bg0, bg1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    img[:] = bg0 + (bg1 - bg0) * yy[..., None]
    cy, cx = 0.5 + rng.uniform(-0.05, 0.05, 2)
    ry, rx = rng.uniform(0.28, 0.38), rng.uniform(0.2, 0.3)
    face = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    img[face] = rng.uniform(0.3, 0.9, 3)
    for side in (-1, 1):
        ey, ex = cy - ry * rng.uniform(0.15, 0.35), cx + side * rx * rng.uniform(0.3, 0.5)
        eye = ((yy - ey) ** 2 + (xx - ex) ** 2) <= (rng.uniform(0.025, 0.05)) ** 2
        img[eye] = rng.uniform(0, 0.3, 3)
    my, mw = cy + ry * rng.uniform(0.35, 0.55), rx * rng.uniform(0.3, 0.6)
    mouth = (np.abs(yy - my) <= 0.02) & (np.abs(xx - cx) <= mw)
    img[mouth] = rng.uniform(0.4, 0.8, 3) * np.array([1.0, 0.3, 0.3])
    return np.clip(img, 0, 1)
