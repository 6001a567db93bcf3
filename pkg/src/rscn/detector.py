"""Toy proposal-classification detector.

A proposal box is cropped from the scene, bilinearly resized to a P x P patch,
flattened and mapped to a d-dimensional feature by a three-layer MLP. A linear
head scores K foreground classes plus background (last index).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import LinearLayer, Tensor
from .boxes import iou_matrix


@dataclass
class DetectorParams:
    extractor: list[LinearLayer]
    head: LinearLayer
    n_classes: int
    patch: int = 8
    channels: int = 3
    hidden: int = 128
    feat_dim: int = 64
    frozen: bool = False

    @classmethod
    def init(cls, n_classes: int, rng: np.random.Generator, patch: int = 8, channels: int = 3,
             hidden: int = 128, feat_dim: int = 64) -> "DetectorParams":
        sizes = [patch * patch * channels, hidden, hidden, feat_dim]
        extractor = ad.init_mlp(sizes, rng, "extractor")
        head = LinearLayer.init(feat_dim, n_classes + 1, rng, name="head")
        return cls(extractor, head, n_classes, patch, channels, hidden, feat_dim)

    @property
    def background(self) -> int:
        return self.n_classes

    def parameters(self) -> list[Tensor]:
        out = [t for layer in self.extractor for t in layer.parameters()]
        return out + self.head.parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(t.name, t) for t in self.parameters()]

    def freeze(self) -> "DetectorParams":
        self.frozen = True
        for t in self.parameters():
            t.requires_grad = False
            t.grad = None
        return self

    def copy(self) -> "DetectorParams":
        def clone(layer: LinearLayer) -> LinearLayer:
            w = Tensor(layer.weight.data.copy(), layer.weight.requires_grad, layer.weight.name)
            b = Tensor(layer.bias.data.copy(), layer.bias.requires_grad, layer.bias.name)
            return LinearLayer(w, b)
        return DetectorParams([clone(l) for l in self.extractor], clone(self.head),
                              self.n_classes, self.patch, self.channels, self.hidden,
                              self.feat_dim, self.frozen)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    label: int
    score: float


def crop_patches(pixels: np.ndarray, boxes: np.ndarray, patch: int) -> np.ndarray:
    """Bilinear crop-and-resize of each box to ``patch x patch``; returns [n, patch*patch*C].

    Output cell (r, c) of box (x1, y1, x2, y2) samples the continuous point
    u = x1 + (c + 0.5) * (x2 - x1) / P, v = y1 + (r + 0.5) * (y2 - y1) / P.
    Pixel (i, j) has its centre at (j + 0.5, i + 0.5), so with fx = u - 0.5,
    x0 = floor(fx), ax = fx - x0 (same for y), the sample is
        (1-ay)(1-ax) I[y0, x0] + (1-ay) ax I[y0, x0+1]
      + ay (1-ax) I[y0+1, x0] + ay ax I[y0+1, x0+1]
    with indices clamped to the grid.
    """
    img = np.asarray(pixels, dtype=np.float64)
    H, W, C = img.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    if n == 0:
        return np.zeros((0, patch * patch * C))
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    bad = np.flatnonzero((widths <= 0) | (heights <= 0))
    if bad.size:
        raise ValueError(f"degenerate proposal box {boxes[bad[0]].tolist()} (zero area)")
    steps = (np.arange(patch) + 0.5) / patch
    fx = boxes[:, 0:1] + steps[None, :] * widths[:, None] - 0.5  # [n, P]
    fy = boxes[:, 1:2] + steps[None, :] * heights[:, None] - 0.5
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    ax = fx - x0
    ay = fy - y0
    x0i = np.clip(x0.astype(int), 0, W - 1)
    x1i = np.clip(x0.astype(int) + 1, 0, W - 1)
    y0i = np.clip(y0.astype(int), 0, H - 1)
    y1i = np.clip(y0.astype(int) + 1, 0, H - 1)
    # gather [n, P(rows), P(cols), C]
    top = (img[y0i[:, :, None], x0i[:, None, :]] * (1 - ax)[:, None, :, None]
           + img[y0i[:, :, None], x1i[:, None, :]] * ax[:, None, :, None])
    bottom = (img[y1i[:, :, None], x0i[:, None, :]] * (1 - ax)[:, None, :, None]
              + img[y1i[:, :, None], x1i[:, None, :]] * ax[:, None, :, None])
    out = top * (1 - ay)[:, :, None, None] + bottom * ay[:, :, None, None]
    return out.reshape(n, -1)


def extract_proposal_features(params: DetectorParams, scene, boxes: np.ndarray) -> Tensor:
    patches = crop_patches(scene.pixels, boxes, params.patch)
    return ad.mlp_forward(params.extractor, Tensor(patches))


def classify_proposals(params: DetectorParams, features: Tensor) -> Tensor:
    if features.data.ndim != 2 or features.shape[1] != params.feat_dim:
        raise ad.ShapeError(
            f"classify_proposals: features {features.shape} do not match feature dim "
            f"{params.feat_dim}")
    if features.shape[0] == 0:
        return Tensor(np.zeros((0, params.n_classes + 1)))
    return params.head(features)


def nms(dets: Sequence[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy class-wise suppression; survivors keep descending-score order."""
    if not 0 < iou_thresh <= 1:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    if not order:
        return []
    boxes = np.array([dets[i].box for i in order])
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep: list[Detection] = []
    for a in range(len(order)):
        if suppressed[a]:
            continue
        da = dets[order[a]]
        keep.append(da)
        for b in range(a + 1, len(order)):
            if not suppressed[b] and dets[order[b]].label == da.label \
                    and overlaps[a, b] >= iou_thresh:
                suppressed[b] = True
    return keep


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def detect(params: DetectorParams, scene, proposals: np.ndarray, score_thresh: float = 0.05,
           iou_thresh: float = 0.5) -> list[Detection]:
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0:
        return []
    logits = classify_proposals(params, extract_proposal_features(params, scene, proposals))
    probs = softmax_rows(logits.data)
    top = probs.argmax(axis=1)
    dets = [Detection(tuple(float(v) for v in proposals[i]), int(top[i]), float(probs[i, top[i]]))
            for i in range(len(proposals))
            if top[i] != params.background and probs[i, top[i]] >= score_thresh]
    return nms(dets, iou_thresh)
