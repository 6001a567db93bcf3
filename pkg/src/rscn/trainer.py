"""Training loops: the source-only reference detector, offline reference
prototype caching, and adaptation with the three prototype constraints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CachedPrototypes, PrototypeCache
from .detector import DetectorParams, classify_proposals, extract_proposal_features
from .evaluation import ProposalSettings, scene_proposals
from .losses import (Discriminator, LossWeights, batch_mean, loss_bpa, loss_detection,
                     loss_rsh, loss_ssp, total_loss_G, total_loss_GR)
from .prototypes import (BG, PrototypeError, SimilarityMatrix, assign_proposal_labels,
                         build_source_prototypes, build_target_bg_prototype, cosine_matrix)
from .seeding import child_rng
from .synthbench import Dataset, Scene

logger = logging.getLogger(__name__)


class InstanceFreeViolation(AssertionError):
    """A target-train scene exposed foreground annotations to the learner."""


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.0
    batch_source: int = 2
    batch_target: int = 2
    iterations: int = 2500
    decay_fraction: float = 0.2
    decay_factor: float = 0.1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    n_bg: int = 8
    jitter: float = 1.5
    fg_iou: float = 0.5
    bg_iou: float = 0.3
    patch: int = 8
    hidden: int = 128
    feat_dim: int = 64
    disc_hidden: int = 64
    clip_norm: float = 0.0
    eval_interval: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr < 0 or self.momentum < 0:
            raise ValueError("lr and momentum must be >= 0")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ValueError("batch sizes must be >= 1")
        if not 0 < self.decay_fraction <= 1:
            raise ValueError("decay_fraction must be in (0, 1]")

    @property
    def decay_boundary(self) -> int:
        """First step run at the decayed rate; always < iterations."""
        return self.iterations - max(1, int(round(self.iterations * self.decay_fraction)))

    def lr_at(self, step: int) -> float:
        return self.lr if step < self.decay_boundary else self.lr * self.decay_factor

    def proposals(self, size_range: tuple[int, int]) -> ProposalSettings:
        return ProposalSettings(self.n_bg, self.jitter, size_range)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- optimizer


class SGD:
    """Plain SGD with optional heavy-ball momentum over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.0, clip_norm: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        if self.clip_norm:
            clip_grad_norm(self.params, self.clip_norm)
        sgd_step(self.params, lr, self.momentum, self._velocity)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if math.isfinite(total) and total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0,
             velocity: dict[int, np.ndarray] | None = None) -> None:
    """p <- p - lr * g for every trainable tensor that holds a gradient."""
    live = [p for p in params if p.requires_grad and p.grad is not None]
    for p in live:
        if p.grad.shape != p.data.shape:
            raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in {p.name or 'unnamed tensor'}")
    for p in live:
        g = p.grad
        if momentum and velocity is not None:
            v = velocity.get(id(p))
            v = g.copy() if v is None else momentum * v + g
            velocity[id(p)] = v
            g = v
        p.data = p.data - lr * g


# --------------------------------------------------------------------------- metrics log


class MetricsLog:
    """Append-only newline-delimited JSON log, flushed per record."""

    FIELDS = ("step", "lr", "loss_det", "loss_bpa", "loss_rsh", "loss_ssp", "loss_total")

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._fh = None
        if self.path is not None:
            try:
                self._fh = open(self.path, "w", encoding="utf-8")
            except OSError as exc:
                raise OSError(f"metrics log {self.path} is not writable: {exc}") from exc

    def log_metrics(self, step: int, losses: dict, eval_results: dict | None = None) -> dict:
        if self.records and step < self.records[-1]["step"]:
            raise ValueError("metrics log steps must be non-decreasing")
        record = {"step": int(step)}
        for key in self.FIELDS[1:]:
            value = losses.get(key)
            record[key] = None if value is None else float(value)
        if eval_results is not None:
            record["eval"] = eval_results
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()
        return record

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------- shared helpers


def init_models(config: TrainConfig, n_classes: int, channels: int,
                ) -> tuple[DetectorParams, Discriminator]:
    params = DetectorParams.init(n_classes, child_rng(config.seed, "init", 0), config.patch,
                                 channels, config.hidden, config.feat_dim)
    disc = Discriminator.init(config.feat_dim, config.disc_hidden,
                              child_rng(config.seed, "init", 1))
    return params, disc


def _sample(ids: Sequence[int], k: int, seed: int, step: int, which: int) -> list[int]:
    rng = child_rng(seed, "batches", step, which)
    k = min(k, len(ids))
    return [ids[i] for i in sorted(rng.choice(len(ids), size=k, replace=False))]


@dataclass
class SourceBatch:
    features: list[Tensor]
    labels: list[np.ndarray]
    scenes: list[Scene]


def _source_forward(params: DetectorParams, scenes: Sequence[Scene], config: TrainConfig,
                    settings: ProposalSettings, step: int) -> tuple[Tensor, SourceBatch]:
    feats, labels = [], []
    for scene in scenes:
        boxes = scene_proposals(scene, settings, config.seed, "proposals", step)
        labels.append(assign_proposal_labels(boxes, scene.boxes, scene.labels,
                                             config.fg_iou, config.bg_iou))
        feats.append(extract_proposal_features(params, scene, boxes))
    logits = classify_proposals(params, ad.concat(feats, axis=0))
    det = loss_detection(logits, np.concatenate(labels), params.n_classes)
    return det, SourceBatch(feats, labels, list(scenes))


def _check_instance_free(scene: Scene) -> None:
    if scene.n_objects or len(scene.boxes):
        raise InstanceFreeViolation(
            f"target_train scene {scene.id} carries {scene.n_objects} foreground annotations")


def _size_range(dataset: Dataset) -> tuple[int, int]:
    return (dataset.spec.size_min, dataset.spec.size_max)


# --------------------------------------------------------------------------- source-only


@dataclass
class TrainResult:
    params: DetectorParams
    disc: Discriminator | None
    log: list[dict]
    skipped_steps: list[int] = field(default_factory=list)


EvalHook = Callable[[int, DetectorParams], dict | None]


def train_source_only(config: TrainConfig, dataset: Dataset, log_path=None,
                      eval_hook: EvalHook | None = None) -> TrainResult:
    """Train a detector on the source detection loss alone."""
    source_ids = dataset.manifest.splits["source_train"]
    params, _ = init_models(config, dataset.spec.n_classes, dataset.spec.channels)
    opt = SGD(params.parameters(), config.momentum, config.clip_norm)
    settings = config.proposals(_size_range(dataset))
    with MetricsLog(log_path) as log:
        for step in range(config.iterations):
            lr = config.lr_at(step)
            batch = [dataset.scenes[i] for i in
                     _sample(source_ids, config.batch_source, config.seed, step, 0)]
            opt.zero_grad()
            det, _ = _source_forward(params, batch, config, settings, step)
            total = total_loss_GR(det)
            ad.backward(total)
            opt.step(lr)
            evals = _maybe_eval(eval_hook, config, step, params)
            log.log_metrics(step, {"lr": lr, "loss_det": det.item(), "loss_total": total.item()},
                            evals)
        records = log.records
    return TrainResult(params, None, records)


def _maybe_eval(hook: EvalHook | None, config: TrainConfig, step: int,
                params: DetectorParams) -> dict | None:
    if hook is None:
        return None
    last = step == config.iterations - 1
    if last or (config.eval_interval and (step + 1) % config.eval_interval == 0):
        return hook(step, params)
    return None


# --------------------------------------------------------------------------- reference cache


def cache_reference_prototypes(ref: DetectorParams, dataset: Dataset, ref_hash: str,
                               config: TrainConfig) -> PrototypeCache:
    """Prototype vectors of the frozen reference detector for every source image.

    Proposals come from the "cache" stream, fixed per image.
    """
    settings = config.proposals(_size_range(dataset))
    cache = PrototypeCache(feat_dim=ref.feat_dim, ref_hash=ref_hash)
    for scene in dataset.split("source_train"):
        boxes = scene_proposals(scene, settings, config.seed, "cache")
        labels = assign_proposal_labels(boxes, scene.boxes, scene.labels,
                                        config.fg_iou, config.bg_iou)
        feats = extract_proposal_features(ref, scene, boxes)
        try:
            ps = build_source_prototypes(feats, labels, scene.id)
        except PrototypeError:
            # no background proposal: cache the image with an empty class list
            ps = None
        if ps is None:
            bg = feats.data.mean(axis=0)
            cache.entries[scene.id] = CachedPrototypes([], np.zeros((0, ref.feat_dim)), bg)
            continue
        classes = ps.present
        vectors = np.array([ps.classes[c].data for c in classes]).reshape(-1, ref.feat_dim)
        cache.entries[scene.id] = CachedPrototypes(classes, vectors, ps.background.data.copy())
    return cache


def reference_matrix(entry: CachedPrototypes, classes: list[int]) -> SimilarityMatrix:
    """M_R over ``classes`` (ascending) plus background, from cached vectors."""
    rows = entry.subset(classes)
    units = rows / np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), ad.EPS)
    gram = units @ units.T
    return SimilarityMatrix(list(classes) + ["bg"], Tensor(0.5 * (gram + gram.T)))


# --------------------------------------------------------------------------- adaptation


def train_rscn(config: TrainConfig, dataset: Dataset, ref_cache: PrototypeCache, log_path=None,
               eval_hook: EvalHook | None = None) -> TrainResult:
    """Adapt a detector with detection + BPA + RSH + SSP (weighted by ``config.weights``)."""
    source_ids = dataset.manifest.splits["source_train"]
    target_ids = dataset.manifest.splits["target_train"]
    missing = [i for i in source_ids if i not in ref_cache]
    if missing:
        raise KeyError(f"prototype cache has no entry for image {missing[0]}")
    if ref_cache.feat_dim != config.feat_dim:
        raise ValueError(f"cache feature dim {ref_cache.feat_dim} != config {config.feat_dim}")
    w = config.weights
    params, disc = init_models(config, dataset.spec.n_classes, dataset.spec.channels)
    opt = SGD(params.parameters() + disc.parameters(), config.momentum, config.clip_norm)
    settings = config.proposals(_size_range(dataset))
    skipped: list[int] = []
    with MetricsLog(log_path) as log:
        for step in range(config.iterations):
            lr = config.lr_at(step)
            src = [dataset.scenes[i] for i in
                   _sample(source_ids, config.batch_source, config.seed, step, 0)]
            tgt = [dataset.scenes[i] for i in
                   _sample(target_ids, config.batch_target, config.seed, step, 1)]
            opt.zero_grad()
            det, batch = _source_forward(params, src, config, settings, step)

            protos = []
            for scene, feats, labels in zip(batch.scenes, batch.features, batch.labels):
                if np.any(labels == BG):
                    protos.append(build_source_prototypes(feats, labels, scene.id))

            tgt_protos = []
            for scene in tgt:
                _check_instance_free(scene)
                boxes = scene_proposals(scene, settings, config.seed, "proposals", step)
                if len(boxes) == 0:
                    continue
                tgt_protos.append(build_target_bg_prototype(
                    extract_proposal_features(params, scene, boxes)))

            zero = Tensor(0.0)
            bpa = rsh = zero
            if tgt_protos and protos:
                bpa = loss_bpa([ps.background for ps in protos], tgt_protos, disc, w.grl_lambda)
                p_bg_t = ad.mean(ad.stack(tgt_protos), axis=0)
                rsh = batch_mean([loss_rsh(ps, p_bg_t) for ps in protos])
            else:
                skipped.append(step)
                logger.info("step %d: no target proposals, BPA/RSH skipped", step)
            ssp_terms = []
            for ps in protos:
                entry = ref_cache[ps.image_id]
                common = [c for c in ps.present if c in entry.classes]
                ssp_terms.append(loss_ssp(cosine_matrix(ps, common),
                                          reference_matrix(entry, common)))
            ssp = batch_mean(ssp_terms)

            total = total_loss_G(det, bpa, rsh, ssp, w)
            ad.backward(total)
            opt.step(lr)
            evals = _maybe_eval(eval_hook, config, step, params)
            log.log_metrics(step, {
                "lr": lr, "loss_det": det.item(), "loss_bpa": bpa.item(),
                "loss_rsh": rsh.item(), "loss_ssp": ssp.item(), "loss_total": total.item(),
            }, evals)
            for value in (bpa.item(), rsh.item(), ssp.item(), total.item()):
                if not math.isfinite(value):
                    raise FloatingPointError(f"non-finite loss at step {step}")
        records = log.records
    return TrainResult(params, disc, records, skipped)
