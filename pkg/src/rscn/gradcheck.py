"""Finite-difference verification of every primitive and every training loss.

Each check compares reverse-mode gradients against central differences
(h = 1e-5) over seeded random trials. Relative error of a trial is
||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2, 1e-8).
Gradients routed through the gradient-reversal layer are compared with
-lambda times the finite difference of the forward function, which is the
quantity the reversal is defined to produce.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .detector import DetectorParams, classify_proposals, crop_patches, extract_proposal_features
from .losses import (Discriminator, LossWeights, loss_bpa, loss_detection, loss_rsh, loss_ssp,
                     total_loss_G)
from .prototypes import BG, build_source_prototypes, build_target_bg_prototype, cosine_matrix
from .synthbench import Scene

H = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOL


@dataclass
class GradcheckReport:
    seed: int
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = [f"{'check':<24} {'trials':>6} {'max rel-err':>12}  status"]
        for r in self.results:
            out.append(f"{r.name:<24} {r.trials:>6} {r.max_rel_err:>12.3e}  "
                       f"{'PASS' if r.passed else 'FAIL'}")
        out.append(f"{'overall':<24} {'':>6} {'':>12}  {'PASS' if self.passed else 'FAIL'}"
                   f"  ({self.seconds:.1f}s)")
        return out


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. the array ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + H
        up = f()
        flat[i] = old - H
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * H)
    return grad


def _check_fn(build: Callable[[list[Tensor]], Tensor], inputs: list[Tensor],
              factors: list[float] | None = None) -> float:
    """Max rel-err over all inputs of ``build``; ``factors`` scales the numeric side."""
    for t in inputs:
        t.grad = None
    ad.backward(build(inputs))
    worst = 0.0
    for k, t in enumerate(inputs):
        num = numeric_grad(lambda: build(inputs).item(), t.data)
        if factors is not None:
            num = factors[k] * num
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_err(ana, num))
    return worst


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.uniform(margin, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _leaf(x) -> Tensor:
    return Tensor(x, requires_grad=True)


# --------------------------------------------------------------------------- primitive checks


def _primitive_cases(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    def randn(*shape):
        return rng.standard_normal(shape)

    def weights(shape):
        # fixed random projection so every output element contributes to the scalar
        return Tensor(rng.standard_normal(shape))

    def proj(build, shape):
        w = weights(shape)
        return lambda ts: ad.sum_(ad.mul(build(ts), w))

    cases = {
        "add": lambda: _check_fn(proj(lambda t: ad.add(t[0], t[1]), (3, 4)),
                                 [_leaf(randn(3, 4)), _leaf(randn(4))]),
        "sub": lambda: _check_fn(proj(lambda t: ad.sub(t[0], t[1]), (3, 4)),
                                 [_leaf(randn(3, 4)), _leaf(randn(3, 4))]),
        "mul": lambda: _check_fn(proj(lambda t: ad.mul(t[0], t[1]), (3, 4)),
                                 [_leaf(randn(3, 4)), _leaf(randn(3, 4))]),
        "scale": lambda: _check_fn(proj(lambda t: ad.scale(t[0], -1.7), (5,)), [_leaf(randn(5))]),
        "matmul": lambda: _check_fn(proj(lambda t: ad.matmul(t[0], t[1]), (3, 2)),
                                    [_leaf(randn(3, 4)), _leaf(randn(4, 2))]),
        "matmul_vec": lambda: _check_fn(proj(lambda t: ad.matmul(t[0], t[1]), (2,)),
                                        [_leaf(randn(4)), _leaf(randn(4, 2))]),
        "relu": lambda: _check_fn(proj(lambda t: ad.relu(t[0]), (6,)),
                                  [_leaf(_away_from_zero(rng, (6,)))]),
        "sigmoid": lambda: _check_fn(proj(lambda t: ad.sigmoid(t[0]), (6,)), [_leaf(3 * randn(6))]),
        "softplus": lambda: _check_fn(proj(lambda t: ad.softplus(t[0]), (6,)),
                                      [_leaf(3 * randn(6))]),
        "abs": lambda: _check_fn(proj(lambda t: ad.abs_(t[0]), (6,)),
                                 [_leaf(_away_from_zero(rng, (6,)))]),
        "sum": lambda: _check_fn(proj(lambda t: ad.sum_(t[0], axis=0), (4,)), [_leaf(randn(3, 4))]),
        "mean": lambda: _check_fn(proj(lambda t: ad.mean(t[0], axis=1), (3,)),
                                  [_leaf(randn(3, 4))]),
        "concat": lambda: _check_fn(proj(lambda t: ad.concat([t[0], t[1]], axis=0), (5, 3)),
                                    [_leaf(randn(2, 3)), _leaf(randn(3, 3))]),
        "slice": lambda: _check_fn(proj(lambda t: ad.take(t[0], np.array([2, 0, 2]), axis=0),
                                        (3, 3)), [_leaf(randn(4, 3))]),
        "pick": lambda: _check_fn(proj(lambda t: ad.pick(t[0], np.array([1, 0, 3])), (3,)),
                                  [_leaf(randn(3, 4))]),
        "transpose": lambda: _check_fn(proj(lambda t: ad.transpose(t[0]), (4, 3)),
                                       [_leaf(randn(3, 4))]),
        "log_softmax": lambda: _check_fn(proj(lambda t: ad.log_softmax(t[0]), (3, 4)),
                                         [_leaf(2 * randn(3, 4))]),
        "l2_normalize": lambda: _check_fn(proj(lambda t: ad.l2_normalize(t[0]), (5,)),
                                          [_leaf(randn(5))]),
        "dot": lambda: _check_fn(lambda t: ad.dot(t[0], t[1]), [_leaf(randn(5)), _leaf(randn(5))]),
        "cosine_similarity": lambda: _check_fn(lambda t: ad.cosine_similarity(t[0], t[1]),
                                               [_leaf(randn(5)), _leaf(randn(5))]),
        "bce_with_logits": lambda: _check_fn(
            lambda t: ad.add(ad.bce_with_logits(t[0], 1), ad.bce_with_logits(t[1], 0)),
            [_leaf(3 * randn()), _leaf(3 * randn())]),
        "softmax_cross_entropy": lambda: _check_ce(rng),
        "mlp_forward": lambda: _check_mlp(rng),
    }
    lam = float(rng.uniform(0.1, 2.0))
    cases["grad_reverse"] = lambda: _check_fn(
        proj(lambda t: ad.grad_reverse(t[0], lam), (5,)), [_leaf(randn(5))], factors=[-lam])
    return cases


def _check_ce(rng: np.random.Generator) -> float:
    label = int(rng.integers(0, 4))
    return _check_fn(lambda t: ad.softmax_cross_entropy(t[0], label), [_leaf(2 * rng.standard_normal(4))])


def _check_mlp(rng: np.random.Generator) -> float:
    layers = ad.init_mlp([4, 5, 5, 3], rng, "m")
    x = _leaf(rng.standard_normal((2, 4)))
    w = Tensor(rng.standard_normal((2, 3)))
    inputs = [x] + [t for l in layers for t in l.parameters()]
    return _check_fn(lambda _: ad.sum_(ad.mul(ad.mlp_forward(layers, x), w)), inputs)


# --------------------------------------------------------------------------- loss checks


@dataclass
class _LossFixture:
    params: DetectorParams
    disc: Discriminator
    scenes: list[Scene]
    boxes: list[np.ndarray]
    labels: list[np.ndarray]
    targets: list[Scene]
    target_boxes: list[np.ndarray]
    reference: np.ndarray
    lam: float


def _fixture(rng: np.random.Generator) -> _LossFixture:
    n_classes, patch, size = 2, 2, 10
    params = DetectorParams.init(n_classes, rng, patch=patch, channels=3, hidden=10, feat_dim=5)
    disc = Discriminator.init(5, 4, rng)

    def scene(i, with_objects):
        pixels = rng.uniform(0, 1, size=(size, size, 3)).astype(np.float32)
        boxes = np.array([[1, 1, 5, 5], [5, 4, 9, 9]]) if with_objects else np.zeros((0, 4), int)
        labels = np.array([0, 1]) if with_objects else np.zeros(0, int)
        return Scene(i, "source" if with_objects else "target", pixels, boxes, labels)

    def jitter(box):
        return np.clip(box + rng.uniform(-0.4, 0.4, 4), 0, size)

    scenes = [scene(0, True), scene(1, True)]
    boxes, labels = [], []
    for s in scenes:
        props = [jitter(b.astype(float)) for b in s.boxes for _ in range(2)]
        props += [np.array([0.2, 5.5, 3.8, 9.7]), np.array([6.1, 0.3, 9.6, 3.4])]
        boxes.append(np.array(props))
        labels.append(np.array([0, 0, 1, 1, BG, BG]))
    targets = [scene(2, False), scene(3, False)]
    target_boxes = [rng.uniform(0, 4, size=(3, 2)) for _ in targets]
    target_boxes = [np.hstack([b, b + rng.uniform(2, 5, size=(3, 2))]) for b in target_boxes]
    reference = rng.uniform(-1, 1, size=(3, 3))
    reference = (reference + reference.T) / 2
    np.fill_diagonal(reference, 1.0)
    return _LossFixture(params, disc, scenes, boxes, labels, targets, target_boxes, reference,
                        float(rng.uniform(0.2, 1.5)))


def _prototypes(fx: _LossFixture):
    feats = [extract_proposal_features(fx.params, s, b) for s, b in zip(fx.scenes, fx.boxes)]
    protos = [build_source_prototypes(f, l, s.id) for f, l, s in zip(feats, fx.labels, fx.scenes)]
    tgt = [build_target_bg_prototype(extract_proposal_features(fx.params, s, b))
           for s, b in zip(fx.targets, fx.target_boxes)]
    return feats, protos, tgt


def _relu_inputs(layers, x: np.ndarray) -> list[np.ndarray]:
    out = []
    for layer in layers[:-1]:
        z = x @ layer.weight.data + layer.bias.data
        out.append(z)
        x = np.maximum(z, 0.0)
    return out


def _kink_margin(fx: _LossFixture) -> float:
    """Distance of the fixture from the non-differentiable points of the losses.

    Covers ReLU inputs in the extractor and discriminator, components of
    d_s - d_t under the L1 norm, and the norms of the relative vectors.
    Central differences are only meaningful when this exceeds the step size.
    """
    values = []
    for scene, boxes in zip(fx.scenes + fx.targets, fx.boxes + fx.target_boxes):
        x = crop_patches(scene.pixels, boxes, fx.params.patch)
        values += [np.abs(z).min() for z in _relu_inputs(fx.params.extractor, x)]
    _, protos, tgt = _prototypes(fx)
    p_t = np.mean([t.data for t in tgt], axis=0)
    for v in [ps.background.data for ps in protos] + [t.data for t in tgt]:
        values += [np.abs(z).min() for z in _relu_inputs(fx.disc.layers, v[None, :])]
    for ps in protos:
        for c in ps.classes.values():
            rel_s, rel_t = c.data - ps.background.data, c.data - p_t
            n_s, n_t = np.linalg.norm(rel_s), np.linalg.norm(rel_t)
            values += [n_s, n_t]
            if min(n_s, n_t) > 0:
                values.append(np.abs(rel_s / n_s - rel_t / n_t).min())
    margin = float(np.min(values))
    return margin if np.isfinite(margin) else 0.0


def _loss_terms(fx: _LossFixture, only: tuple[str, ...] = ("det", "bpa", "rsh", "ssp")
                ) -> dict[str, Tensor]:
    from .prototypes import SimilarityMatrix

    feats, protos, tgt = _prototypes(fx)
    out = {}
    if "det" in only:
        logits = classify_proposals(fx.params, ad.concat(feats, axis=0))
        out["det"] = loss_detection(logits, np.concatenate(fx.labels), fx.params.n_classes)
    if "bpa" in only:
        out["bpa"] = loss_bpa([p.background for p in protos], tgt, fx.disc, fx.lam)
    if "rsh" in only:
        p_bg_t = ad.mean(ad.stack(tgt), axis=0)
        out["rsh"] = ad.add(loss_rsh(protos[0], p_bg_t), loss_rsh(protos[1], p_bg_t))
    if "ssp" in only:
        ref = SimilarityMatrix([0, 1, "bg"], Tensor(fx.reference))
        out["ssp"] = ad.add(loss_ssp(cosine_matrix(protos[0]), ref),
                            loss_ssp(cosine_matrix(protos[1]), ref))
    return out


def _sample_coords(rng, params: list[Tensor], k: int) -> list[tuple[Tensor, list[int]]]:
    sizes = np.array([p.data.size for p in params])
    picks = rng.choice(int(sizes.sum()), size=min(k, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for j, p in enumerate(params):
        local = [int(i - offsets[j]) for i in picks if offsets[j] <= i < offsets[j + 1]]
        if local:
            out.append((p, local))
    return out


KINK_MARGIN = 1e-3


def _check_loss(rng: np.random.Generator, name: str, n_coords: int = 12) -> float:
    fx = _fixture(rng)
    for _ in range(50):
        if _kink_margin(fx) >= KINK_MARGIN:
            break
        fx = _fixture(rng)
    det_params = fx.params.parameters()
    disc_params = fx.disc.parameters()
    extractor = [t for n, t in fx.params.named_parameters() if n.startswith("extractor.")]
    # sample only parameters the term reaches; elsewhere both sides are ~0 and rel-err is noise
    reached = {"det": det_params, "bpa": extractor + disc_params, "rsh": extractor,
               "ssp": extractor, "total": det_params + disc_params}[name]
    weights = LossWeights(*rng.uniform(0.5, 1.5, size=4), grl_lambda=fx.lam)

    def value(which: str) -> float:
        if which not in ("total", "total_no_bpa"):
            return _loss_terms(fx, (which,))[which].item()
        t = _loss_terms(fx)
        if which == "total":
            return total_loss_G(t["det"], t["bpa"], t["rsh"], t["ssp"], weights).item()
        return (weights.w_det * t["det"].item() + weights.w_rsh * t["rsh"].item()
                + weights.w_ssp * t["ssp"].item())

    for p in det_params + disc_params:
        p.grad = None
    terms = _loss_terms(fx)
    if name == "total":
        root = total_loss_G(terms["det"], terms["bpa"], terms["rsh"], terms["ssp"], weights)
    else:
        root = terms[name]
    ad.backward(root)

    worst = 0.0
    ana_all, num_all = [], []
    for p, coords in _sample_coords(rng, reached, n_coords):
        on_detector = any(p is q for q in det_params)
        if name == "bpa" and on_detector:
            num = -fx.lam * numeric_grad(lambda: value("bpa"), p.data, coords)
        elif name == "total" and on_detector:
            num = (numeric_grad(lambda: value("total_no_bpa"), p.data, coords)
                   - fx.lam * weights.w_bpa * numeric_grad(lambda: value("bpa"), p.data, coords))
        else:
            num = numeric_grad(lambda: value(name), p.data, coords)
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        ana_all.append(ana.reshape(-1)[coords])
        num_all.append(num.reshape(-1)[coords])
    worst = max(worst, rel_err(np.concatenate(ana_all), np.concatenate(num_all)))
    return worst


LOSS_CHECKS = {
    "L_det": "det",
    "L_BPA": "bpa",
    "L_RSH": "rsh",
    "L_SSP": "ssp",
    "L_G": "total",
}


def run_gradcheck(seed: int = 0, trials: int = 100) -> GradcheckReport:
    start = time.perf_counter()
    report = GradcheckReport(seed=seed)
    rng = np.random.default_rng(seed)
    for name, case in _primitive_cases(rng).items():
        worst = max(case() for _ in range(trials))
        report.results.append(CheckResult(name, trials, worst))
    for label, name in LOSS_CHECKS.items():
        worst = max(_check_loss(rng, name) for _ in range(trials))
        report.results.append(CheckResult(label, trials, worst))
    report.seconds = time.perf_counter() - start
    return report
