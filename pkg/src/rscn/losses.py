"""Training objectives: detection, background prototype alignment, relative-space
harmonization and source-structure preservation, plus their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import LinearLayer, Tensor
from .prototypes import BG, IGNORE, PrototypeSet, SimilarityMatrix

RSH_MIN_NORM = 1e-9


@dataclass
class LossWeights:
    w_det: float = 1.0
    w_bpa: float = 1.0
    w_rsh: float = 1.0
    w_ssp: float = 1.0
    grl_lambda: float = 1.0

    def __post_init__(self):
        for name in ("w_det", "w_bpa", "w_rsh", "w_ssp", "grl_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_string(cls, text: str, grl_lambda: float = 1.0) -> "LossWeights":
        parts = [float(v) for v in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected four comma-separated weights, got {text!r}")
        return cls(*parts, grl_lambda=grl_lambda)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w_det, self.w_bpa, self.w_rsh, self.w_ssp)


@dataclass
class Discriminator:
    """Background-prototype domain classifier: three linear layers, ReLU between, one logit."""

    layers: list[LinearLayer]

    @classmethod
    def init(cls, feat_dim: int, hidden: int, rng: np.random.Generator) -> "Discriminator":
        return cls(ad.init_mlp([feat_dim, hidden, hidden, 1], rng, "disc"))

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(t.name, t) for t in self.parameters()]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ad.ShapeError(
                f"discriminator: input dim {x.shape[-1]} != expected {self.in_features}")
        return ad.reshape(ad.mlp_forward(self.layers, x), ())


def loss_detection(logits: Tensor, labels, n_classes: int | None = None) -> Tensor:
    """Mean softmax cross-entropy over non-ignored proposals (BG maps to the last column)."""
    labels = np.asarray(labels, dtype=np.int64)
    k1 = logits.shape[1]
    n_classes = k1 - 1 if n_classes is None else n_classes
    keep = np.flatnonzero(labels != IGNORE)
    if keep.size == 0:
        raise ValueError("loss_detection: every proposal is ignored")
    targets = np.where(labels[keep] == BG, n_classes, labels[keep])
    if targets.min() < 0 or targets.max() >= k1:
        raise ValueError(f"loss_detection: label outside [0, {k1 - 1}]")
    rows = ad.take(logits, keep, axis=0)
    return ad.scale(ad.sum_(ad.pick(ad.log_softmax(rows), targets)), -1.0 / keep.size)


def _as_list(x) -> list[Tensor]:
    return [x] if isinstance(x, Tensor) else list(x)


def loss_bpa(p_bg_s, p_bg_t, disc: Discriminator, lam: float = 1.0) -> Tensor:
    """-E_s[log D(p_bg_s)] - E_t[log(1 - D(p_bg_t))], both inputs routed through the GRL.

    Accepts single prototypes or sequences; expectations are batch means.
    """
    src, tgt = _as_list(p_bg_s), _as_list(p_bg_t)
    if not src or not tgt:
        raise ValueError("loss_bpa needs at least one source and one target prototype")
    src_terms = [ad.bce_with_logits(disc(ad.grad_reverse(p, lam)), 1) for p in src]
    tgt_terms = [ad.bce_with_logits(disc(ad.grad_reverse(p, lam)), 0) for p in tgt]
    return ad.add(_mean(src_terms), _mean(tgt_terms))


def _mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def loss_rsh(ps_source: PrototypeSet, p_bg_t: Tensor) -> Tensor:
    """Sum over present classes of ||N(p_c - p_bg_s) - N(p_c - p_bg_t)||_1.

    Classes whose relative vector is (numerically) zero are skipped.
    """
    terms = []
    for c in ps_source.present:
        p_c = ps_source.classes[c]
        rel_s = ad.sub(p_c, ps_source.background)
        rel_t = ad.sub(p_c, p_bg_t)
        if min(np.linalg.norm(rel_s.data), np.linalg.norm(rel_t.data)) < RSH_MIN_NORM:
            continue
        diff = ad.sub(ad.l2_normalize(rel_s), ad.l2_normalize(rel_t))
        terms.append(ad.sum_(ad.abs_(diff)))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def loss_ssp(m_s: SimilarityMatrix, m_r: SimilarityMatrix) -> Tensor:
    """Sum over ordered off-diagonal pairs of |M_S - M_R|; M_R is treated as a constant."""
    if list(m_s.labels) != list(m_r.labels):
        raise ValueError(f"loss_ssp: class lists differ: {m_s.labels} vs {m_r.labels}")
    m = len(m_s.labels)
    target = Tensor(np.asarray(m_r.matrix.data, dtype=np.float64))
    off_diag = Tensor(1.0 - np.eye(m))
    return ad.sum_(ad.mul(ad.abs_(ad.sub(m_s.matrix, target)), off_diag))


def total_loss_G(det: Tensor, bpa: Tensor, rsh: Tensor, ssp: Tensor,
                 w: LossWeights | None = None) -> Tensor:
    w = w or LossWeights()
    total = ad.scale(det, w.w_det)
    for term, weight in ((bpa, w.w_bpa), (rsh, w.w_rsh), (ssp, w.w_ssp)):
        total = ad.add(total, ad.scale(term, weight))
    return total


def total_loss_GR(det: Tensor) -> Tensor:
    return det


def batch_mean(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    return _mean(list(terms))
