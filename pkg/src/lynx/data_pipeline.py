"""Person-text-target pair construction: manifests, augmentation hooks,
identity-resemblance filtering and weighted sampling over pair types."""

from __future__ import annotations

import hashlib
import json
import shutil
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Optional, Protocol, Sequence, Union

import numpy as np
from scipy import ndimage

from .faces import NoFaceError, cosine
from .media import MediaError, first_frame, load_image, save_image, to_uint8

PathLike = Union[str, Path]


class PairType(str, Enum):
    SINGLE_SCENE = "single_scene"
    MULTI_SCENE = "multi_scene"
    AUGMENTED_SINGLE_SCENE = "augmented_single_scene"


PAIR_TYPES = tuple(p.value for p in PairType)
REQUIRED_KEYS = ("pair_type", "condition_image", "target", "caption")
OPTIONAL_KEYS = ("id_embedding", "resemblance")
# corpus proportions 21.5M / 7.7M / 21.0M, rounded
DEFAULT_WEIGHTS = {"single_scene": 0.4, "multi_scene": 0.2, "augmented_single_scene": 0.4}
DEFAULT_THRESHOLD = 0.5


class ManifestError(ValueError):
    pass


class AugmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class PairRecord:
    pair_type: str
    condition_image: str
    target: str
    caption: str
    id_embedding: Optional[str] = None
    resemblance: Optional[float] = None
    extra: Mapping[str, Any] = field(default_factory=dict)
    root: Path = field(default=Path("."), compare=False, repr=False)

    def path(self, key: str) -> Path:
        p = Path(getattr(self, key))
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict[str, Any]:
        d = {k: getattr(self, k) for k in REQUIRED_KEYS}
        for k in OPTIONAL_KEYS:
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        d.update(self.extra)
        return d


def parse_record(obj: Any, root: Path = Path("."), where: str = "record") -> PairRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: expected a JSON object, got {type(obj).__name__}")
    for k in REQUIRED_KEYS:
        if k not in obj:
            raise ManifestError(f"{where}: missing required field '{k}'")
    if obj["pair_type"] not in PAIR_TYPES:
        raise ManifestError(f"{where}: field 'pair_type' has invalid value {obj['pair_type']!r}; "
                            f"expected one of {', '.join(PAIR_TYPES)}")
    for k in ("condition_image", "target", "caption"):
        if not isinstance(obj[k], str):
            raise ManifestError(f"{where}: field '{k}' must be a string")
    emb = obj.get("id_embedding")
    if emb is not None and not isinstance(emb, str):
        raise ManifestError(f"{where}: field 'id_embedding' must be a string path")
    res = obj.get("resemblance")
    if res is not None:
        if isinstance(res, bool) or not isinstance(res, (int, float)) or not -1 <= res <= 1:
            raise ManifestError(f"{where}: field 'resemblance' must be a number in [-1, 1]")
        res = float(res)
    extra = {k: v for k, v in obj.items() if k not in REQUIRED_KEYS + OPTIONAL_KEYS}
    return PairRecord(obj["pair_type"], obj["condition_image"], obj["target"], obj["caption"],
                      emb, res, extra, root)


def load_manifest(path: PathLike, check_files: bool = True) -> list[PairRecord]:
    """Read a JSON-lines manifest; relative media paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{where}: malformed JSON ({e.msg})") from None
            rec = parse_record(obj, root, where)
            if check_files:
                for k in ("condition_image", "target", "id_embedding"):
                    if getattr(rec, k) is not None and not rec.path(k).exists():
                        raise ManifestError(f"{where}: field '{k}' points to missing file "
                                            f"{rec.path(k)}")
            records.append(rec)
    return records


def write_manifest(path: PathLike, records: Sequence[PairRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            d = r.to_json()
            for k in ("condition_image", "target", "id_embedding"):
                if d.get(k) is not None:
                    d[k] = str(r.path(k))
            f.write(json.dumps(d) + "\n")
    return path


# --- embedding sidecars --------------------------------------------------------

def write_embedding(path: PathLike, vec) -> Path:
    """u64 little-endian element count, then float32 little-endian values."""
    v = np.asarray(vec, dtype="<f4").reshape(-1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(struct.pack("<Q", v.size) + v.tobytes())
    return path


def read_embedding(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ManifestError(f"{path}: embedding sidecar shorter than its length prefix")
    (n,) = struct.unpack("<Q", raw[:8])
    if len(raw) != 8 + 4 * n:
        raise ManifestError(f"{path}: expected {n} float32 values, file has {len(raw) - 8} bytes")
    return np.frombuffer(raw[8:], dtype="<f4").astype(np.float64)


# --- identity filter -------------------------------------------------------------

@dataclass(frozen=True)
class DroppedRecord:
    record: PairRecord
    reason: str
    resemblance: Optional[float] = None


@dataclass
class FilterResult:
    kept: list[PairRecord]
    dropped: list[DroppedRecord]


Embedder = Callable[[np.ndarray], np.ndarray]
FILTERED_TYPES = ("augmented_single_scene", "multi_scene")


def identity_filter(records: Sequence[PairRecord], embedder: Embedder,
                    threshold: float = DEFAULT_THRESHOLD,
                    types: Optional[Sequence[str]] = FILTERED_TYPES) -> FilterResult:
    """Score condition vs target first frame; drop pairs of ``types`` below threshold.

    Every kept record carries its resemblance. Records of other types are
    scored but never dropped for low resemblance; unreadable media always
    drops.
    """
    kept, dropped = [], []
    for r in records:
        try:
            a = embedder(load_image(r.path("condition_image")))
            b = embedder(first_frame(r.path("target")))
        except (MediaError, NoFaceError) as e:
            dropped.append(DroppedRecord(r, f"unreadable: {e}"))
            continue
        score = cosine(a, b)
        if (types is None or r.pair_type in types) and score < threshold:
            dropped.append(DroppedRecord(r, f"resemblance {score:.4f} < {threshold}", score))
        else:
            kept.append(replace(r, resemblance=score))
    return FilterResult(kept, dropped)


# --- weighted sampling -----------------------------------------------------------

def normalize_weights(weights: Mapping[str, float]) -> dict[str, float]:
    unknown = set(weights) - set(PAIR_TYPES)
    if unknown:
        raise ValueError(f"unknown pair type(s) in weights: {sorted(unknown)}")
    w = {k: float(weights.get(k, 0.0)) for k in PAIR_TYPES}
    if any(v < 0 or not np.isfinite(v) for v in w.values()):
        raise ValueError(f"weights must be finite and nonnegative, got {w}")
    total = sum(w.values())
    if total <= 0:
        raise ValueError("at least one weight must be positive")
    return {k: v / total for k, v in w.items()}


def weighted_sampler(records: Sequence[PairRecord], weights: Mapping[str, float],
                     seed: int, chunk: int = 4096) -> Iterator[PairRecord]:
    """Endless stream: pick a type by weight, then a record of that type uniformly."""
    p = normalize_weights(weights)
    groups = {k: [r for r in records if r.pair_type == k] for k in PAIR_TYPES}
    for k, v in p.items():
        if v > 0 and not groups[k]:
            raise ValueError(f"pair type '{k}' has weight {v:.3f} but no records")
    active = [k for k in PAIR_TYPES if p[k] > 0]
    probs = np.array([p[k] for k in active])
    rng = np.random.default_rng(seed)

    def stream():
        while True:
            kinds = rng.choice(len(active), size=chunk, p=probs)
            u = rng.random(chunk)
            for k, x in zip(kinds, u):
                group = groups[active[k]]
                yield group[min(int(x * len(group)), len(group) - 1)]

    return stream()


# --- augmentation ----------------------------------------------------------------

class Augmenter(Protocol):
    kind: str

    def __call__(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class GammaRelight:
    """Relighting stand-in: per-pixel power curve."""

    gamma: float = 1.0
    kind: str = "relight"

    def __call__(self, image, rng):
        return np.power(image, self.gamma)


@dataclass
class ExpressionWarp:
    """Expression stand-in: smooth displacement concentrated around the face center."""

    strength: float = 2.0
    kind: str = "expression"

    def __call__(self, image, rng):
        h, w, _ = image.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        cy, cx = (h - 1) / 2, (w - 1) / 2
        sigma = 0.25 * min(h, w)
        window = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        phase = rng.uniform(0, 2 * np.pi, size=2)
        dy = self.strength * window * np.sin(2 * np.pi * xx / w + phase[0])
        dx = self.strength * window * np.sin(2 * np.pi * yy / h + phase[1])
        return np.stack([ndimage.map_coordinates(image[..., c], [yy + dy, xx + dx], order=1,
                                                 mode="nearest") for c in range(3)], axis=-1)


@dataclass
class BackgroundFill:
    """Background replacement stand-in: flat color outside a centered ellipse."""

    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    radius: float = 0.45
    kind: str = "background"

    def __call__(self, image, rng):
        h, w, _ = image.shape
        yy, xx = np.mgrid[0:h, 0:w]
        inside = (((yy - (h - 1) / 2) / (self.radius * h)) ** 2
                  + ((xx - (w - 1) / 2) / (self.radius * w)) ** 2) <= 1
        return np.where(inside[..., None], image, np.asarray(self.color, dtype=np.float64))


AUGMENTERS = {"relight": GammaRelight, "expression": ExpressionWarp, "background": BackgroundFill}


def apply_augmenter(record: PairRecord, aug: Augmenter, rng: np.random.Generator,
                    out_dir: PathLike) -> PairRecord:
    """Write a transformed condition image under ``out_dir`` and return the new pair."""
    if record.pair_type != PairType.SINGLE_SCENE.value:
        raise AugmentError(f"pair type {record.pair_type!r} cannot be augmented")
    src = record.path("condition_image")
    try:
        image = load_image(src)
        out = np.asarray(aug(image, rng), dtype=np.float64)
    except Exception as e:  # augmenters are pluggable; any failure is a reject
        raise AugmentError(f"{aug.kind} augmenter failed on {src}: {e}") from e
    if out.shape != image.shape:
        raise AugmentError(f"{aug.kind} augmenter changed dims {image.shape} -> {out.shape}")
    if not np.isfinite(out).all():
        raise AugmentError(f"{aug.kind} augmenter produced non-finite pixels")
    noop = bool(np.array_equal(to_uint8(out), to_uint8(image)))
    tag = hashlib.sha1(f"{src}|{record.target}|{aug.kind}".encode()).hexdigest()[:10]
    if noop:  # keep the original bytes so a no-op is verifiable by file hash
        dest = Path(out_dir) / f"{src.stem}_{aug.kind}_{tag}{src.suffix}"
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, dest)
    else:
        dest = save_image(Path(out_dir) / f"{src.stem}_{aug.kind}_{tag}.png", out)
    extra = {**record.extra, "augmented_from": str(src), "augmenter": aug.kind, "noop": noop}
    return replace(record, pair_type=PairType.AUGMENTED_SINGLE_SCENE.value,
                   condition_image=str(dest.resolve()), target=str(record.path("target")),
                   resemblance=None, extra=extra, root=Path("."))


def augment_records(records: Sequence[PairRecord], aug: Augmenter, seed: int,
                    out_dir: PathLike) -> tuple[list[PairRecord], list[DroppedRecord]]:
    """Augment every eligible record; failures are collected, not raised."""
    augmented, rejects = [], []
    for i, r in enumerate(records):
        try:
            augmented.append(apply_augmenter(r, aug, np.random.default_rng([seed, i]), out_dir))
        except AugmentError as e:
            rejects.append(DroppedRecord(r, str(e)))
    return augmented, rejects


def manifest_stats(records: Sequence[PairRecord], bins: int = 10) -> dict[str, Any]:
    counts = {k: 0 for k in PAIR_TYPES}
    for r in records:
        counts[r.pair_type] += 1
    scores = [r.resemblance for r in records if r.resemblance is not None]
    hist, edges = np.histogram(scores, bins=bins, range=(-1.0, 1.0))
    return {"total": len(records), "counts": counts,
            "resemblance_histogram": {"edges": edges.tolist(), "counts": hist.tolist()},
            "scored": len(scores)}
