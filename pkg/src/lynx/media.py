"""PNG image and frame-directory I/O.

Videos are directories of numbered PNG frames; images are single PNGs.
Arrays are float64 RGB in [0, 1].
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image

PathLike = Union[str, Path]


class MediaError(OSError):
    pass


def load_image(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise MediaError(f"cannot read image {path}: {e}") from None
    return arr


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(path: PathLike, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), "RGB").save(path)
    return path


def _frame_key(p: Path):
    nums = re.findall(r"\d+", p.stem)
    return (int(nums[-1]) if nums else -1, p.name)


def frame_paths(path: PathLike) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        frames = sorted((p for p in path.iterdir() if p.suffix.lower() == ".png"), key=_frame_key)
        if not frames:
            raise MediaError(f"no PNG frames in {path}")
        return frames
    if path.is_file():
        return [path]
    raise MediaError(f"no such media: {path}")


def load_frames(path: PathLike, max_frames: int | None = None) -> np.ndarray:
    """(T, H, W, 3) for a frame directory; T == 1 for a single image."""
    paths = frame_paths(path)[:max_frames]
    frames = [load_image(p) for p in paths]
    if len({f.shape for f in frames}) > 1:
        raise MediaError(f"frames in {path} have differing sizes")
    return np.stack(frames)


def first_frame(path: PathLike) -> np.ndarray:
    return load_image(frame_paths(path)[0])


def save_frames(directory: PathLike, frames: Sequence[np.ndarray]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [save_image(directory / f"frame_{i:04d}.png", f) for i, f in enumerate(frames)]
