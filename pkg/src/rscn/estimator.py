"""scikit-learn style wrappers around the training and evaluation pipeline.

``fit`` takes a :class:`~rscn.synthbench.Dataset`; ``predict`` and ``score``
take a sequence of scenes.
"""

from __future__ import annotations

from typing import Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import checkpoint_hash, encode_checkpoint
from .detector import Detection, detect
from .evaluation import ProposalSettings, evaluate, scene_proposals
from .losses import LossWeights
from .synthbench import Dataset, Scene
from .trainer import TrainConfig, cache_reference_prototypes, train_rscn, train_source_only

_DEFAULTS = TrainConfig()


def _check_dataset(X) -> Dataset:
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a Dataset, got {type(X).__name__}")
    return X


def _check_scenes(X) -> list[Scene]:
    if isinstance(X, Scene):
        X = [X]
    scenes = list(X)
    for s in scenes:
        if not isinstance(s, Scene):
            raise TypeError(f"expected Scene objects, got {type(s).__name__}")
    return scenes


class SourceOnlyDetector(BaseEstimator):
    """Detector trained on the source detection loss alone (the reference G_R)."""

    def __init__(self, seed: int = 0, iterations: int = _DEFAULTS.iterations,
                 lr: float = _DEFAULTS.lr, momentum: float = _DEFAULTS.momentum,
                 batch_size: int = _DEFAULTS.batch_source, clip_norm: float = _DEFAULTS.clip_norm,
                 feat_dim: int = _DEFAULTS.feat_dim, hidden: int = _DEFAULTS.hidden,
                 patch: int = _DEFAULTS.patch, score_thresh: float = 0.05):
        self.seed = seed
        self.iterations = iterations
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.feat_dim = feat_dim
        self.hidden = hidden
        self.patch = patch
        self.score_thresh = score_thresh

    def _train_config(self, weights: LossWeights | None = None, **extra) -> TrainConfig:
        return TrainConfig(lr=self.lr, momentum=self.momentum, batch_source=self.batch_size,
                           batch_target=self.batch_size, iterations=self.iterations,
                           seed=self.seed, weights=weights or LossWeights(),
                           patch=self.patch, hidden=self.hidden, feat_dim=self.feat_dim,
                           clip_norm=self.clip_norm, **extra)

    def fit(self, X: Dataset, y=None) -> "SourceOnlyDetector":
        ds = _check_dataset(X)
        result = train_source_only(self._train_config(), ds)
        self.params_ = result.params
        self.log_ = result.log
        self.size_range_ = (ds.spec.size_min, ds.spec.size_max)
        return self

    @property
    def checkpoint_hash_(self) -> str:
        check_is_fitted(self, "params_")
        return checkpoint_hash(encode_checkpoint(self.params_))

    def _settings(self) -> ProposalSettings:
        return self._train_config().proposals(self.size_range_)

    def predict(self, X: Sequence[Scene]) -> list[list[Detection]]:
        check_is_fitted(self, "params_")
        settings = self._settings()
        return [detect(self.params_, s, scene_proposals(s, settings, self.seed, "eval"),
                       self.score_thresh)
                for s in _check_scenes(X)]

    def score(self, X: Sequence[Scene], y=None) -> float:
        """AP@50 averaged over classes with ground truth."""
        check_is_fitted(self, "params_")
        report = evaluate(self.params_, _check_scenes(X), "score", seed=self.seed,
                          settings=self._settings(), score_thresh=self.score_thresh)
        return report.map50


class RSCNDetector(SourceOnlyDetector):
    """Adapted detector: a source-only reference is fit first unless one is passed."""

    def __init__(self, seed: int = 0, iterations: int = _DEFAULTS.iterations,
                 lr: float = _DEFAULTS.lr, momentum: float = _DEFAULTS.momentum,
                 batch_size: int = _DEFAULTS.batch_source, clip_norm: float = _DEFAULTS.clip_norm,
                 feat_dim: int = _DEFAULTS.feat_dim, hidden: int = _DEFAULTS.hidden,
                 patch: int = _DEFAULTS.patch, score_thresh: float = 0.05,
                 weights: tuple = (1.0, 1.0, 1.0, 1.0), grl_lambda: float = 1.0,
                 reference: SourceOnlyDetector | None = None):
        super().__init__(seed, iterations, lr, momentum, batch_size, clip_norm, feat_dim,
                         hidden, patch, score_thresh)
        self.weights = weights
        self.grl_lambda = grl_lambda
        self.reference = reference

    def fit(self, X: Dataset, y=None) -> "RSCNDetector":
        ds = _check_dataset(X)
        if len(self.weights) != 4:
            raise ValueError(f"weights must have four entries, got {self.weights!r}")
        ref = self.reference
        if ref is None:
            ref = SourceOnlyDetector(**{k: v for k, v in self.get_params(deep=False).items()
                                        if k in SourceOnlyDetector._get_param_names()}).fit(ds)
        check_is_fitted(ref, "params_")
        config = self._train_config(LossWeights(*self.weights, grl_lambda=self.grl_lambda))
        cache = cache_reference_prototypes(ref.params_, ds, ref.checkpoint_hash_, config)
        result = train_rscn(config, ds, cache)
        self.reference_ = ref
        self.params_ = result.params
        self.disc_ = result.disc
        self.log_ = result.log
        self.size_range_ = (ds.spec.size_min, ds.spec.size_max)
        return self


__all__ = ["SourceOnlyDetector", "RSCNDetector"]
