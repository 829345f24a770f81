"""Segmentation metrics and prompt/layer diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class ConfusionAccumulator:
    n_classes: int
    intersection: np.ndarray = field(default=None)
    union: np.ndarray = field(default=None)
    gt_count: np.ndarray = field(default=None)
    correct: int = 0
    total: int = 0

    def __post_init__(self):
        k = self.n_classes
        if self.intersection is None:
            self.intersection = np.zeros(k, dtype=np.int64)
        if self.union is None:
            self.union = np.zeros(k, dtype=np.int64)
        if self.gt_count is None:
            self.gt_count = np.zeros(k, dtype=np.int64)

    def merge(self, other: ConfusionAccumulator) -> ConfusionAccumulator:
        if other.n_classes != self.n_classes:
            raise MetricError("cannot merge accumulators over different class counts")
        return ConfusionAccumulator(
            self.n_classes,
            self.intersection + other.intersection,
            self.union + other.union,
            self.gt_count + other.gt_count,
            self.correct + other.correct,
            self.total + other.total,
        )


def accumulate(acc: ConfusionAccumulator, pred, gt) -> ConfusionAccumulator:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise MetricError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    k = acc.n_classes
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise MetricError(f"{name} contains class ids outside 0..{k - 1}")
    hit = pred == gt
    inter = np.bincount(gt[hit], minlength=k)
    p_cnt = np.bincount(pred, minlength=k)
    g_cnt = np.bincount(gt, minlength=k)
    acc.intersection += inter
    acc.union += p_cnt + g_cnt - inter
    acc.gt_count += g_cnt
    acc.correct += int(hit.sum())
    acc.total += int(gt.size)
    return acc


def class_iou(acc: ConfusionAccumulator) -> np.ndarray:
    """Per-class IoU; NaN where a class never occurred in prediction or ground truth."""
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(acc.union > 0, acc.intersection / np.maximum(acc.union, 1), np.nan)


def miou(acc: ConfusionAccumulator, classes: Iterable[int] | None = None) -> float:
    """Mean IoU over ``classes``, skipping classes whose union is empty."""
    classes = list(range(acc.n_classes)) if classes is None else list(classes)
    if not classes:
        raise MetricError("class subset is empty")
    ious = class_iou(acc)[classes]
    ious = ious[~np.isnan(ious)]
    if ious.size == 0:
        raise MetricError("every class in the subset has an empty union")
    return float(ious.mean())


def hiou(miou_seen: float, miou_unseen: float) -> float:
    """Harmonic mean of seen and unseen mIoU."""
    s, u = float(miou_seen), float(miou_unseen)
    if s + u == 0:
        raise MetricError("hIoU undefined when both mIoUs are zero")
    return 2.0 * s * u / (s + u)


def pacc(acc: ConfusionAccumulator) -> float:
    if acc.total == 0:
        raise MetricError("no pixels accumulated")
    return acc.correct / acc.total


def prompt_dispersion(g, n_prompts: int) -> float:
    """Mean pairwise cosine distance between a class's prompt embeddings, averaged over classes."""
    g = np.asarray(getattr(g, "data", g), dtype=np.float64)
    if n_prompts < 2:
        raise MetricError("dispersion needs at least two prompts")
    if g.shape[0] % n_prompts:
        raise MetricError("rows are not a whole number of prompt groups")
    g = g / np.linalg.norm(g, axis=1, keepdims=True)
    blocks = g.reshape(-1, n_prompts, g.shape[1])
    gram = np.einsum("kid,kjd->kij", blocks, blocks)
    iu = np.triu_indices(n_prompts, k=1)
    return float((1.0 - gram[:, iu[0], iu[1]]).mean())


def layer_alignment_strength(layer_scores, class_id: int, n_prompts: int) -> list[float]:
    """Per layer, the mean raw score over all pixels and the class's prompt columns."""
    s = np.asarray(getattr(layer_scores, "data", layer_scores), dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    k = s.shape[-1] // n_prompts
    if not 0 <= class_id < k:
        raise MetricError(f"class id {class_id} outside 0..{k - 1}")
    cols = slice(class_id * n_prompts, (class_id + 1) * n_prompts)
    return [float(layer[:, cols].mean()) for layer in s]
