"""Per-image class prototypes and their cosine-similarity matrices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import iou_matrix

BG = -1
IGNORE = -2


class PrototypeError(ValueError):
    pass


@dataclass
class PrototypeSet:
    image_id: int
    classes: dict[int, Tensor]
    background: Tensor
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def present(self) -> list[int]:
        return sorted(self.classes)

    def ordered(self, classes: list[int] | None = None) -> list[Tensor]:
        keys = self.present if classes is None else classes
        return [self.classes[c] for c in keys] + [self.background]


@dataclass
class SimilarityMatrix:
    labels: list  # ascending class ids, then "bg"
    matrix: Tensor

    def values(self) -> np.ndarray:
        return self.matrix.data


def assign_proposal_labels(boxes, gt_boxes, gt_labels, fg_iou: float = 0.5,
                           bg_iou: float = 0.3) -> np.ndarray:
    """Class of the max-IoU GT when IoU >= fg_iou, BG below bg_iou, IGNORE in between."""
    if not 0 <= bg_iou <= fg_iou <= 1:
        raise ValueError(f"need 0 <= bg_iou <= fg_iou <= 1, got {bg_iou}, {fg_iou}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    labels = np.full(len(boxes), BG, dtype=np.int64)
    if len(gt_labels) == 0 or len(boxes) == 0:
        return labels
    ious = iou_matrix(boxes, gt_boxes)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(boxes)), best]
    labels[best_iou >= fg_iou] = gt_labels[best[best_iou >= fg_iou]]
    labels[(best_iou >= bg_iou) & (best_iou < fg_iou)] = IGNORE
    return labels


def _row_mean(features: Tensor, rows: np.ndarray) -> Tensor:
    return ad.mean(ad.take(features, rows, axis=0), axis=0)


def build_source_prototypes(features: Tensor, labels, image_id: int = 0) -> PrototypeSet:
    labels = np.asarray(labels, dtype=np.int64)
    if features.data.ndim != 2 or features.shape[0] != len(labels) or len(labels) == 0:
        raise PrototypeError(
            f"need n >= 1 feature rows matching {len(labels)} labels, got {features.shape}")
    bg_rows = np.flatnonzero(labels == BG)
    if bg_rows.size == 0:
        raise PrototypeError("no background proposals")
    classes = {}
    counts = {}
    for c in np.unique(labels[labels >= 0]):
        rows = np.flatnonzero(labels == c)
        classes[int(c)] = _row_mean(features, rows)
        counts[int(c)] = int(rows.size)
    counts[BG] = int(bg_rows.size)
    return PrototypeSet(image_id, classes, _row_mean(features, bg_rows), counts)


def build_target_bg_prototype(features: Tensor) -> Tensor:
    if features.data.ndim != 2 or features.shape[0] == 0:
        raise PrototypeError("cannot build a target background prototype from zero proposals")
    return ad.mean(features, axis=0)


def cosine_matrix(ps: PrototypeSet, classes: list[int] | None = None) -> SimilarityMatrix:
    """Pairwise cosine similarities over (ascending classes, then bg).

    ``classes`` restricts the class list to a subset of ``ps.present``.
    """
    keys = ps.present if classes is None else sorted(classes)
    units = ad.stack([ad.l2_normalize(p) for p in ps.ordered(keys)])
    gram = ad.matmul(units, ad.transpose(units))
    # averaging with the transpose makes the result exactly symmetric
    mat = ad.scale(ad.add(gram, ad.transpose(gram)), 0.5)
    return SimilarityMatrix(keys + ["bg"], mat)
