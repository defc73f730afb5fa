"""Pseudo-FCN scoring of generated photos and run comparison tables.

A small fully convolutional segmenter is trained on real (photo, label)
pairs and frozen. Generated photos are then segmented and compared with the
label maps they were generated from. Scores are derived from a KxK
confusion matrix (rows = ground truth, columns = prediction), so they can be
accumulated over batches or shards and merged by addition.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PairedDataset, batch_iterator, epoch_seed, iterate_in_order
from .errors import ComparabilityError, DataError, MissingArtifactError, SegmenterGateError

log = logging.getLogger(__name__)

SEGMENTER_GATE = 0.90


# -- confusion-matrix metrics -------------------------------------------

def confusion_matrix(pred, labels, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if pred.shape != labels.shape:
        raise DataError(f"prediction/label size mismatch: {pred.size} vs {labels.size}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes or pred.min() < 0 or pred.max() >= n_classes):
        raise DataError(f"class ids must lie in [0, {n_classes})")
    return np.bincount(labels * n_classes + pred, minlength=n_classes**2).reshape(n_classes, n_classes)


def scores_from_confusion(cm: np.ndarray) -> tuple[float, float, float]:
    """(per-pixel accuracy, per-class accuracy, mean IoU).

    Classes with no ground-truth pixels are left out of both class means.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise DataError("no evaluated pixels")
    diag = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    present = rows > 0
    per_pixel = diag.sum() / total
    per_class = float(np.mean(diag[present] / rows[present]))
    iou = float(np.mean(diag[present] / (rows + cols - diag)[present]))
    return float(per_pixel), per_class, iou


@dataclass
class MetricsRecord:
    per_pixel_acc: float
    per_class_acc: float
    mean_iou: float
    n_images: int
    confusion: list = field(default_factory=list)
    dataset_hash: str = ""
    config_hash: str = ""
    epoch: int = -1
    label: str = ""

    @classmethod
    def from_confusion(cls, cm: np.ndarray, n_images: int, **meta) -> "MetricsRecord":
        pp, pc, iou = scores_from_confusion(cm)
        return cls(pp, pc, iou, int(n_images), np.asarray(cm).astype(int).tolist(), **meta)

    def recompute(self) -> tuple[float, float, float]:
        return scores_from_confusion(np.array(self.confusion))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


def append_metrics(record: MetricsRecord, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(record.to_json() + "\n")


def read_metrics(path: Union[str, Path]) -> list[MetricsRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"metrics log not found: {path}")
    return [MetricsRecord.from_json(l) for l in path.read_text().splitlines() if l.strip()]


# -- reference segmenter -------------------------------------------------

class Segmenter(nn.Module):
    """Four-layer fully convolutional per-pixel classifier."""

    def __init__(self, n_classes: int, width: int = 32):
        super().__init__()
        self.n_classes = n_classes
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, padding=2, dilation=2), nn.ReLU(),
            nn.Conv2d(width, n_classes, 1),
        )
        self.val_accuracy: float = float("nan")
        self.dataset_hash: str = ""

    def forward(self, photo: torch.Tensor) -> torch.Tensor:
        return self.net(photo)

    @torch.no_grad()
    def predict(self, photo: torch.Tensor) -> torch.Tensor:
        return self.net(photo).argmax(dim=1)

    @property
    def gate_passed(self) -> bool:
        return bool(self.val_accuracy >= SEGMENTER_GATE)


def _real_photo_confusion(seg: Segmenter, dataset: PairedDataset, split: str) -> np.ndarray:
    k = dataset.spec.n_classes
    cm = np.zeros((k, k), dtype=np.int64)
    for b in iterate_in_order(dataset, split, 64):
        cm += confusion_matrix(seg.predict(b.y).numpy(), b.labels.numpy(), k)
    return cm


def train_reference_segmenter(dataset: PairedDataset, seed: int = 0, epochs: int = 8, batch_size: int = 16,
                              lr: float = 1e-3, cache_dir: Optional[Union[str, Path]] = None) -> Segmenter:
    """Train (or load from ``cache_dir``) the frozen scorer for ``dataset``.

    The cache key is the dataset content hash, so every method scored on the
    same data uses the identical segmenter. Held-out accuracy on the real
    validation photos is stored as ``val_accuracy``.
    """
    key = dataset.content_hash()
    cache = Path(cache_dir) / f"segmenter_{key}_s{seed}.pt" if cache_dir is not None else None
    if cache is not None and cache.exists():
        state = torch.load(cache, weights_only=True)
        seg = Segmenter(dataset.spec.n_classes)
        seg.load_state_dict(state["params"])
        seg.val_accuracy = float(state["val_accuracy"])
        seg.dataset_hash = key
        return seg.eval().requires_grad_(False)

    torch.manual_seed(seed)
    seg = Segmenter(dataset.spec.n_classes)
    opt = torch.optim.Adam(seg.parameters(), lr=lr)
    for epoch in range(epochs):
        for b in batch_iterator(dataset, batch_size, epoch_seed(seed, epoch)):
            loss = F.cross_entropy(seg(b.y), b.labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
    seg.eval().requires_grad_(False)
    seg.val_accuracy = scores_from_confusion(_real_photo_confusion(seg, dataset, "val"))[0]
    seg.dataset_hash = key
    log.info("reference segmenter val per-pixel accuracy %.4f", seg.val_accuracy)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"params": seg.state_dict(), "val_accuracy": seg.val_accuracy}, cache)
    return seg


def fcn_scores(segmenter: Segmenter, generated: torch.Tensor, label_maps, **meta) -> MetricsRecord:
    """Score generated photos by how well the frozen segmenter recovers their label maps."""
    if not segmenter.gate_passed:
        raise SegmenterGateError(f"segmenter accuracy {segmenter.val_accuracy:.4f} below gate {SEGMENTER_GATE}")
    labels = torch.as_tensor(np.asarray(label_maps))
    if labels.numel() == 0:
        raise DataError("no evaluated pixels")
    pred = segmenter.predict(generated)
    cm = confusion_matrix(pred.numpy(), labels.numpy(), segmenter.n_classes)
    return MetricsRecord.from_confusion(cm, generated.shape[0], dataset_hash=segmenter.dataset_hash, **meta)


@torch.no_grad()
def evaluate_generator(generator: nn.Module, segmenter: Segmenter, dataset: PairedDataset,
                       split: str = "val", batch_size: int = 64, **meta) -> MetricsRecord:
    """Streamed pseudo-FCN scores of ``generator`` on ``split`` (eval mode, no dropout)."""
    if not segmenter.gate_passed:
        raise SegmenterGateError(f"segmenter accuracy {segmenter.val_accuracy:.4f} below gate {SEGMENTER_GATE}")
    was_training = generator.training
    generator.eval()
    k = dataset.spec.n_classes
    cm = np.zeros((k, k), dtype=np.int64)
    n = 0
    for b in iterate_in_order(dataset, split, batch_size):
        cm += confusion_matrix(segmenter.predict(generator(b.x)).numpy(), b.labels.numpy(), k)
        n += len(b.ids)
    generator.train(was_training)
    return MetricsRecord.from_confusion(cm, n, dataset_hash=segmenter.dataset_hash, **meta)


def score_real_photos(segmenter: Segmenter, dataset: PairedDataset, split: str = "test") -> MetricsRecord:
    cm = _real_photo_confusion(segmenter, dataset, split)
    return MetricsRecord.from_confusion(cm, len(dataset.splits[split]), dataset_hash=segmenter.dataset_hash,
                                        label="Ground truth")


# -- sample bound ----------------------------------------------------------

def sample_bound(p_T: float, p_S: float) -> float:
    """Training-set size ``(p_T / p_S) ** 4`` above which distillation's risk bound beats training from scratch."""
    if p_S <= 0:
        raise ValueError(f"student parameter count must be positive, got {p_S}")
    return (p_T / p_S) ** 4


# -- run comparison ------------------------------------------------------

ABLATION_ROWS = (
    ("baseline", frozenset()),
    ("L_perc", frozenset({"perc"})),
    ("L1+perc", frozenset({"L1", "perc"})),
    ("L_GT", frozenset({"GT"})),
    ("L_GT+tri", frozenset({"GT", "tri"})),
    ("all", frozenset({"L1", "perc", "GT", "tri"})),
)

_COLUMNS = ("per_pixel_acc", "per_class_acc", "mean_iou")


@dataclass
class OrderingReport:
    labels: list
    rows: list          # list of (per_pixel, per_class, iou)
    best: dict          # column -> list of row indices holding the maximum

    def to_text(self) -> str:
        head = f"{'method':<22}{'per-pixel':>12}{'per-class':>12}{'IoU':>10}"
        lines = [head, "-" * len(head)]
        for i, (label, row) in enumerate(zip(self.labels, self.rows)):
            cells = []
            for c, v in zip(_COLUMNS, row):
                mark = "*" if i in self.best[c] else " "
                cells.append(f"{100 * v:.2f}{mark}")
            lines.append(f"{label:<22}{cells[0]:>12}{cells[1]:>12}{cells[2]:>10}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"columns": list(_COLUMNS), "labels": self.labels, "rows": self.rows,
                "best": {k: list(v) for k, v in self.best.items()}}


def compare_runs(records: Sequence[MetricsRecord], labels: Optional[Sequence[str]] = None) -> OrderingReport:
    """Tabulate records side by side, marking the best value of every column (ties all marked)."""
    if len(records) < 2:
        raise ComparabilityError("need at least two records to compare")
    hashes = {r.dataset_hash for r in records}
    if len(hashes) != 1:
        raise ComparabilityError(f"records come from different datasets: {sorted(hashes)}")
    labels = list(labels) if labels is not None else [r.label or f"run{i}" for i, r in enumerate(records)]
    rows = [tuple(float(getattr(r, c)) for c in _COLUMNS) for r in records]
    best = {}
    for j, c in enumerate(_COLUMNS):
        top = max(row[j] for row in rows)
        best[c] = [i for i, row in enumerate(rows) if row[j] == top]
    return OrderingReport(labels, rows, best)


def mean_record(records: Iterable[MetricsRecord], label: str = "") -> MetricsRecord:
    """Average the three scores over seeds (confusion matrices are summed)."""
    records = list(records)
    if len({r.dataset_hash for r in records}) != 1:
        raise ComparabilityError("cannot average records from different datasets")
    cm = np.sum([np.array(r.confusion) for r in records], axis=0)
    return MetricsRecord(
        per_pixel_acc=float(np.mean([r.per_pixel_acc for r in records])),
        per_class_acc=float(np.mean([r.per_class_acc for r in records])),
        mean_iou=float(np.mean([r.mean_iou for r in records])),
        n_images=sum(r.n_images for r in records),
        confusion=cm.tolist(), dataset_hash=records[0].dataset_hash, label=label)


def ablation_report(records_by_mask: dict) -> OrderingReport:
    """Table of the six loss ablations in their canonical row order.

    ``records_by_mask`` maps a frozenset of enabled terms (subset of
    {"L1", "perc", "GT", "tri"}) to a record or a list of per-seed records.
    """
    rows, labels = [], []
    for label, mask in ABLATION_ROWS:
        if mask not in records_by_mask:
            raise ComparabilityError(f"ablation row {label!r} (terms {sorted(mask)}) missing")
        recs = records_by_mask[mask]
        rows.append(mean_record(recs, label) if isinstance(recs, (list, tuple)) else recs)
        labels.append(label)
    return compare_runs(rows, labels)
