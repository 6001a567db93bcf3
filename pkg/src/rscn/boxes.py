"""Axis-aligned box geometry. Boxes are (x1, y1, x2, y2) in continuous pixel units."""

from __future__ import annotations

import numpy as np


def _check(box) -> None:
    if not (box[0] < box[2] and box[1] < box[3]):
        raise ValueError(f"degenerate box {tuple(float(v) for v in box)}")


def iou(box_a, box_b) -> float:
    _check(box_a)
    _check(box_b)
    iw = min(box_a[2], box_b[2]) - max(box_a[0], box_b[0])
    ih = min(box_a[3], box_b[3]) - max(box_a[1], box_b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = float(iw) * float(ih)
    area_a = float(box_a[2] - box_a[0]) * float(box_a[3] - box_a[1])
    area_b = float(box_b[2] - box_b[0]) * float(box_b[3] - box_b[1])
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between [n, 4] and [m, 4] box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)
