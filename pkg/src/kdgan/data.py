"""Procedural paired label-map -> photo dataset.

Every sample is a pure function of ``(seed, sample_id)``. Geometry, colors
and noise are produced with integer arithmetic only, so the stored bytes do
not depend on the platform's floating point.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Union

import numpy as np
import torch

from .errors import ConfigError, DataError, MissingArtifactError

TEXTURES = ("flat", "noisy", "textured")
SPLITS = ("train", "val", "test")

# uint8 RGB inside [40, 215]: "noisy" deviations never clip, "textured" ones may
_BASE_PALETTE = [
    (128, 64, 128),   # road
    (70, 70, 160),    # building
    (200, 190, 60),   # sign
    (60, 150, 50),    # vegetation
    (70, 130, 200),   # sky
    (210, 60, 60),    # person
    (60, 60, 60),
    (200, 120, 190),
    (150, 100, 50),
    (50, 190, 180),
    (190, 190, 190),
    (110, 180, 110),
]

# integer amplitudes in 8-bit units
SPECKLE_AMP = 12
LIGHT_JITTER = 10
STRIPE_AMP = 20
SHADE_AMP = 14
_AMPLITUDES = {
    "flat": 0,
    "noisy": SPECKLE_AMP + LIGHT_JITTER,
    "textured": SPECKLE_AMP + LIGHT_JITTER + STRIPE_AMP + SHADE_AMP,
}


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    n_classes: int = 6
    image_size: int = 48
    n_train: int = 512
    n_val: int = 64
    n_test: int = 128
    texture: str = "textured"

    def validate(self) -> "DatasetSpec":
        if not 1 <= self.n_classes <= 256:
            raise ConfigError(f"DatasetSpec.n_classes must be in [1, 256], got {self.n_classes}")
        if self.image_size < 8:
            raise ConfigError(f"DatasetSpec.image_size must be >= 8, got {self.image_size}")
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"DatasetSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"DatasetSpec.texture must be one of {TEXTURES}, got {self.texture!r}")
        return self

    def split_ids(self, split: str) -> np.ndarray:
        offsets = {"train": (0, self.n_train),
                   "val": (self.n_train, self.n_val),
                   "test": (self.n_train + self.n_val, self.n_test)}
        start, n = offsets[split]
        return np.arange(start, start + n, dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


class PairedSample(NamedTuple):
    label_map: np.ndarray  # (H, W) uint8
    photo: np.ndarray      # (3, H, W) float32 in [-1, 1]
    sample_id: int


@dataclass
class Split:
    ids: np.ndarray     # (N,) int64
    labels: np.ndarray  # (N, H, W) uint8
    photos: np.ndarray  # (N, 3, H, W) uint8

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class PairedDataset:
    spec: DatasetSpec
    splits: dict[str, Split] = field(default_factory=dict)

    def sample(self, split: str, index: int) -> PairedSample:
        s = self.splits[split]
        return PairedSample(s.labels[index], dequantize(s.photos[index]), int(s.ids[index]))

    def content_hash(self) -> str:
        h = hashlib.sha256(self.spec.to_json().encode())
        for name in SPLITS:
            if name in self.splits:
                s = self.splits[name]
                h.update(s.labels.tobytes())
                h.update(s.photos.tobytes())
        return h.hexdigest()[:16]


def palette(n_classes: int) -> np.ndarray:
    """(K, 3) uint8 class colors."""
    cols = list(_BASE_PALETTE)
    k = len(cols)
    while len(cols) < n_classes:
        # integer hash for extra classes
        v = (k * 2654435761) & 0xFFFFFF
        cols.append((40 + v % 176, 40 + (v >> 8) % 176, 40 + (v >> 16) % 176))
        k += 1
    return np.array(cols[:n_classes], dtype=np.int32).astype(np.uint8)


def texture_bound(texture: str) -> float:
    """Max per-pixel deviation from the palette color, in [-1, 1] units."""
    return _AMPLITUDES[texture] / 127.5


def dequantize(photo_u8: np.ndarray) -> np.ndarray:
    return (photo_u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def _rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(sample_id)])))


def _triangle_mask(h: int, w: int, pts: np.ndarray):
    """Integer half-plane rasterization; ``None`` for a degenerate triangle."""
    (ay, ax), (by, bx), (cy, cx) = (tuple(int(v) for v in p) for p in pts)
    area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if area2 == 0:
        return None
    orient = 1 if area2 > 0 else -1
    yy, xx = np.mgrid[0:h, 0:w].astype(np.int64)
    mask = np.ones((h, w), dtype=bool)
    for (py, px), (qy, qx) in (((ay, ax), (by, bx)), ((by, bx), (cy, cx)), ((cy, cx), (ay, ax))):
        mask &= orient * ((qx - px) * (yy - py) - (qy - py) * (xx - px)) >= 0
    return mask


def render_sample(spec: DatasetSpec, sample_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(label_map (H, W) uint8, photo (3, H, W) uint8)``."""
    rng = _rng(spec.seed, sample_id)
    n, k = spec.image_size, spec.n_classes
    labels = np.zeros((n, n), dtype=np.uint8)
    shade = np.zeros((n, n), dtype=np.int64)
    yy = np.arange(n, dtype=np.int64)[:, None]

    for _ in range(int(rng.integers(3, 9))):
        cls = int(rng.integers(1, k)) if k > 1 else 0
        side_lo, side_hi = max(n // 6, 2), max(3 * n // 4, 3)
        hh, ww = int(rng.integers(side_lo, side_hi + 1)), int(rng.integers(side_lo, side_hi + 1))
        y0, x0 = int(rng.integers(0, n - hh + 1)), int(rng.integers(0, n - ww + 1))
        mask = None
        if rng.integers(0, 2) == 1:
            corners = rng.integers(0, [hh, ww], size=(3, 2)) + np.array([y0, x0])
            mask = _triangle_mask(n, n, corners)
        if mask is None:
            mask = np.zeros((n, n), dtype=bool)
            mask[y0:y0 + hh, x0:x0 + ww] = True
        labels[mask] = cls
        ramp = SHADE_AMP - (2 * SHADE_AMP * (yy - y0)) // max(hh - 1, 1)
        shade = np.where(mask, np.broadcast_to(ramp, (n, n)), shade)

    pal = palette(k).astype(np.int64)
    photo = pal[labels].transpose(2, 0, 1).copy()  # (3, H, W) int64
    if spec.texture != "flat":
        photo += int(rng.integers(-LIGHT_JITTER, LIGHT_JITTER + 1))
        photo += rng.integers(-SPECKLE_AMP, SPECKLE_AMP + 1, size=(1, n, n))
    if spec.texture == "textured":
        xx = np.arange(n, dtype=np.int64)[None, :]
        orient = labels.astype(np.int64) % 4
        coord = np.select([orient == 0, orient == 1, orient == 2], [yy + 0 * xx, xx + 0 * yy, xx + yy], xx - yy + n)
        period = 3 + labels.astype(np.int64) % 3
        stripes = ((coord // period) % 2) * STRIPE_AMP - STRIPE_AMP // 2
        photo += stripes[None] + shade[None]
    return labels, np.clip(photo, 0, 255).astype(np.uint8)


def generate_dataset(spec: DatasetSpec) -> PairedDataset:
    spec.validate()
    ds = PairedDataset(spec)
    for split in SPLITS:
        ids = spec.split_ids(split)
        rendered = [render_sample(spec, int(i)) for i in ids]
        ds.splits[split] = Split(ids=ids,
                                 labels=np.stack([r[0] for r in rendered]),
                                 photos=np.stack([r[1] for r in rendered]))
    return ds


def paint_palette(label_map: np.ndarray, n_classes: int) -> np.ndarray:
    """Render a label map as flat palette colors, (3, H, W) float32 in [-1, 1]."""
    return dequantize(palette(n_classes)[np.asarray(label_map)].transpose(2, 0, 1))


def paint_region_means(label_map: np.ndarray, photo: np.ndarray) -> np.ndarray:
    """Replace every labeled region of ``photo`` by its mean color."""
    out = np.empty_like(photo)
    for c in np.unique(label_map):
        m = label_map == c
        out[:, m] = photo[:, m].astype(np.float64).mean(axis=1, keepdims=True)
    return out


def one_hot_encode(label_map, n_classes: int, scale: bool = True):
    """One channel per class. With ``scale`` the {0, 1} code maps to {-1, +1}.

    Accepts ``(H, W)`` or ``(N, H, W)`` arrays (numpy or torch); the class axis
    is inserted just before the spatial axes.
    """
    is_torch = isinstance(label_map, torch.Tensor)
    lab = label_map.long() if is_torch else torch.from_numpy(np.asarray(label_map).astype(np.int64))
    if lab.numel() and (int(lab.min()) < 0 or int(lab.max()) >= n_classes):
        raise DataError(f"label values must lie in [0, {n_classes}), got range "
                        f"[{int(lab.min())}, {int(lab.max())}]")
    oh = torch.nn.functional.one_hot(lab, n_classes).movedim(-1, -3).float()
    if scale:
        oh = oh * 2.0 - 1.0
    return oh if is_torch else oh.numpy()


class Batch(NamedTuple):
    x: torch.Tensor       # (B, K, H, W) one-hot source
    y: torch.Tensor       # (B, 3, H, W) target photo
    labels: torch.Tensor  # (B, H, W) int64
    ids: torch.Tensor     # (B,) sample ids


def make_batch(split: Split, index: np.ndarray, n_classes: int) -> Batch:
    labels = torch.from_numpy(split.labels[index].astype(np.int64))
    return Batch(x=one_hot_encode(labels, n_classes),
                 y=torch.from_numpy(dequantize(split.photos[index])),
                 labels=labels,
                 ids=torch.from_numpy(split.ids[index]))


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(epoch)]).generate_state(1)[0])


def batch_iterator(dataset: PairedDataset, batch_size: int, epoch_seed: int,
                   split: str = "train") -> Iterator[Batch]:
    """Seed-determined permutation of ``split``; a trailing partial batch is dropped."""
    s = dataset.splits.get(split)
    if s is None or len(s) == 0:
        raise DataError(f"split {split!r} is empty")
    if not 1 <= batch_size <= len(s):
        raise DataError(f"batch_size {batch_size} not in [1, {len(s)}] for split {split!r}")
    order = np.random.default_rng(epoch_seed).permutation(len(s))
    for start in range(0, len(s) - batch_size + 1, batch_size):
        yield make_batch(s, order[start:start + batch_size], dataset.spec.n_classes)


def iterate_in_order(dataset: PairedDataset, split: str, batch_size: int) -> Iterator[Batch]:
    """Every sample of ``split`` in storage order, including a short final batch."""
    s = dataset.splits[split]
    for start in range(0, len(s), batch_size):
        yield make_batch(s, np.arange(start, min(start + batch_size, len(s))), dataset.spec.n_classes)


# -- on-disk format ------------------------------------------------------
# magic, u32 header length, JSON header, then per sample: H*W label bytes + 3*H*W photo bytes

_MAGIC = b"KDGSPLT1"


def save_dataset(dataset: PairedDataset, directory: Union[str, Path]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, s in dataset.splits.items():
        header = json.dumps({"spec": dataclasses.asdict(dataset.spec), "split": name,
                             "first_id": int(s.ids[0]) if len(s) else 0, "count": len(s)},
                            sort_keys=True).encode()
        n = dataset.spec.image_size
        body = np.concatenate([s.labels.reshape(len(s), n * n), s.photos.reshape(len(s), 3 * n * n)], axis=1)
        path = directory / f"{name}.kds"
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<I", len(header)) + header + body.tobytes())
        paths.append(path)
    return paths


def load_dataset(directory: Union[str, Path]) -> PairedDataset:
    directory = Path(directory)
    ds = None
    for name in SPLITS:
        path = directory / f"{name}.kds"
        if not path.exists():
            raise MissingArtifactError(f"dataset split file not found: {path}")
        raw = path.read_bytes()
        if raw[:8] != _MAGIC:
            raise MissingArtifactError(f"{path} is not a dataset split file")
        (hlen,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12:12 + hlen])
        spec = DatasetSpec(**header["spec"])
        if ds is None:
            ds = PairedDataset(spec)
        n, count = spec.image_size, header["count"]
        body = np.frombuffer(raw, dtype=np.uint8, offset=12 + hlen)
        if body.size != count * 4 * n * n:
            raise MissingArtifactError(f"{path} is truncated")
        body = body.reshape(count, 4 * n * n)
        ds.splits[name] = Split(ids=np.arange(header["first_id"], header["first_id"] + count, dtype=np.int64),
                                labels=body[:, : n * n].reshape(count, n, n).copy(),
                                photos=body[:, n * n:].reshape(count, 3, n, n).copy())
    return ds


def colorize_labels(label_map: np.ndarray, n_classes: int) -> np.ndarray:
    """(H, W, 3) uint8 palette rendering, for previews."""
    return palette(n_classes)[label_map]


def dump_preview(dataset: PairedDataset, path: Union[str, Path], n_pairs: int = 8, split: str = "train") -> Path:
    """PNG contact sheet: one row per sample, colorized labels beside the photo."""
    from PIL import Image

    s = dataset.splits[split]
    n_pairs = min(n_pairs, len(s))
    k, size, pad = dataset.spec.n_classes, dataset.spec.image_size, 2
    sheet = np.full((n_pairs * (size + pad) + pad, 2 * (size + pad) + pad, 3), 255, dtype=np.uint8)
    for r in range(n_pairs):
        top = pad + r * (size + pad)
        sheet[top:top + size, pad:pad + size] = colorize_labels(s.labels[r], k)
        sheet[top:top + size, 2 * pad + size:2 * pad + 2 * size] = s.photos[r].transpose(1, 2, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet).save(path, format="PNG")
    return path
