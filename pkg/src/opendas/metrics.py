"""Segment-classification and pixel-map metrics, plus embedding export."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .data import QuerySet
from .errors import ShapeError, ValidationError


@dataclass
class ClassStats:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    weighted_f1: float
    base_f1: Optional[float]
    novel_f1: Optional[float]
    per_class: dict[str, ClassStats]
    num_samples: int
    base_accuracy: Optional[float] = None
    novel_accuracy: Optional[float] = None
    averaging: str = "weighted"
    base_f1_macro: Optional[float] = None
    novel_f1_macro: Optional[float] = None
    pixel: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass
class PixelEval:
    miou: float
    macc: float
    per_class_iou: dict = field(default_factory=dict)
    per_class_acc: dict = field(default_factory=dict)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def per_class_stats(predictions: Sequence[str], truths: Sequence[str],
                    classes: Sequence[str]) -> dict[str, ClassStats]:
    """One-vs-rest precision, recall and F1 for each class in ``classes``."""
    pred = np.asarray(predictions, dtype=object)
    true = np.asarray(truths, dtype=object)
    out = {}
    for c in classes:
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        out[c] = ClassStats(p, r, _ratio(2 * tp, 2 * tp + fp + fn), tp + fn)
    return out


def _weighted(stats: Mapping[str, ClassStats], classes) -> Optional[float]:
    total = sum(stats[c].support for c in classes)
    if total == 0:
        return None
    return sum(stats[c].f1 * stats[c].support for c in classes) / total


def _macro(stats: Mapping[str, ClassStats], classes) -> Optional[float]:
    present = [c for c in classes if stats[c].support > 0]
    if not present:
        return None
    return sum(stats[c].f1 for c in present) / len(present)


def _subset_accuracy(predictions, truths, subset: set) -> Optional[float]:
    hits = [p == t for p, t in zip(predictions, truths) if t in subset]
    return sum(hits) / len(hits) if hits else None


def classification_metrics(predictions: Sequence[str], truths: Sequence[str],
                           queries: QuerySet, averaging: str = "weighted") -> MetricsReport:
    """Acc, W-F1 and base/novel F1 over the test queries.

    ``averaging`` picks which base/novel aggregate is reported in
    ``base_f1``/``novel_f1``; both variants are always stored. Subsets with
    no support report ``None``.
    """
    if averaging not in ("weighted", "macro"):
        raise ValidationError(f"averaging must be 'weighted' or 'macro', got {averaging!r}")
    if len(predictions) != len(truths):
        raise ShapeError(f"{len(predictions)} predictions vs {len(truths)} truths")
    if not truths:
        raise ValidationError("no samples to evaluate")
    known = set(queries.test_queries)
    unknown = sorted({t for t in truths if t not in known})
    if unknown:
        raise ValidationError(f"ground-truth labels not among test queries: {unknown}")
    classes = list(queries.test_queries)
    stats = per_class_stats(predictions, truths, classes)
    acc = sum(p == t for p, t in zip(predictions, truths)) / len(truths)
    base_acc, novel_acc = (_subset_accuracy(predictions, truths, set(sub))
                           for sub in (queries.base_test, queries.novel_test))
    wb, wn = _weighted(stats, queries.base_test), _weighted(stats, queries.novel_test)
    mb, mn = _macro(stats, queries.base_test), _macro(stats, queries.novel_test)
    return MetricsReport(
        accuracy=acc, weighted_f1=_weighted(stats, classes),
        base_f1=wb if averaging == "weighted" else mb,
        novel_f1=wn if averaging == "weighted" else mn,
        per_class=stats, num_samples=len(truths), base_accuracy=base_acc,
        novel_accuracy=novel_acc, averaging=averaging,
        base_f1_macro=mb, novel_f1_macro=mn)


def pixel_metrics(gt_map, pred_map, labels: Optional[Sequence] = None,
                  ignore_index: Optional[int] = None) -> PixelEval:
    """Per-class IoU and pixel recall over classes present in either map.

    ``labels`` optionally maps integer ids to names for the per-class dicts.
    Pixels whose ground truth equals ``ignore_index`` are dropped.
    """
    gt = np.asarray(gt_map)
    pred = np.asarray(pred_map)
    if gt.shape != pred.shape:
        raise ShapeError(f"map shapes differ: {gt.shape} vs {pred.shape}")
    gt, pred = gt.ravel(), pred.ravel()
    if ignore_index is not None:
        keep = gt != ignore_index
        gt, pred = gt[keep], pred[keep]
    present = np.union1d(np.unique(gt), np.unique(pred))
    ious, accs = {}, {}
    for c in present:
        g, p = gt == c, pred == c
        inter, union = int(np.sum(g & p)), int(np.sum(g | p))
        name = labels[int(c)] if labels is not None else int(c)
        ious[name] = inter / union
        if g.any():
            accs[name] = inter / int(g.sum())
    miou = float(np.mean(list(ious.values()))) if ious else 0.0
    macc = float(np.mean(list(accs.values()))) if accs else 0.0
    return PixelEval(miou, macc, ious, accs)


def assemble_label_map(masks: Sequence[np.ndarray], class_ids: Sequence[int],
                       shape: tuple[int, int], background: int = -1) -> np.ndarray:
    """Paint per-segment predicted class ids into an ``H x W`` map, later masks on top."""
    if len(masks) != len(class_ids):
        raise ShapeError("one class id is needed per mask")
    out = np.full(shape, background, dtype=np.int64)
    for mask, cid in zip(masks, class_ids):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != tuple(shape):
            raise ShapeError(f"mask shape {mask.shape} differs from map shape {shape}")
        out[mask] = cid
    return out


def export_embeddings(embeddings, row_labels: Sequence[str], path) -> tuple[Path, Path]:
    """Write a little-endian float32 matrix and a ``rows cols`` + labels sidecar."""
    emb = embeddings.detach().cpu().numpy() if isinstance(embeddings, torch.Tensor) \
        else np.asarray(embeddings)
    if emb.ndim != 2 or emb.shape[0] != len(row_labels):
        raise ShapeError(f"need one row per label; got {emb.shape} for {len(row_labels)} labels")
    for lab in row_labels:
        if "\n" in lab:
            raise ValidationError(f"row label {lab!r} contains a newline")
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(emb, dtype="<f4").tobytes())
    sidecar = path.with_name(path.name + ".txt")
    lines = [f"{emb.shape[0]} {emb.shape[1]}", *row_labels]
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path, sidecar


def load_embeddings(path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    lines = path.with_name(path.name + ".txt").read_text(encoding="utf-8").splitlines()
    rows, cols = (int(x) for x in lines[0].split())
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != rows * cols:
        raise ShapeError(f"{path}: {data.size} values, sidecar says {rows}x{cols}")
    return data.reshape(rows, cols), lines[1:1 + rows]
