"""Estimator-style wrapper: ``fit`` trains both generators, ``transform`` ages faces."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig, apply_overrides
from .datapipe import (N_GROUPS, DataError, FaceSample, SampleInfo, SemanticLayout, check_group, check_image,
                       group_of_age, make_condition)


def check_faces(X, layouts) -> tuple[np.ndarray, np.ndarray]:
    """Validate an image stack [N,3,H,W] in [-1,1] and matching class maps [N,H,W]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise DataError(f"expected images of shape [N, 3, H, W], got {X.shape}")
    for img in X:
        check_image(img)
    if layouts is None:
        raise DataError("a semantic layout is required for every image")
    layouts = np.asarray(layouts)
    if layouts.shape != (X.shape[0],) + X.shape[2:]:
        raise DataError(f"layouts shape {layouts.shape} does not match images {X.shape}")
    return X, layouts


def _groups(y, n: int) -> np.ndarray:
    """Accept group ids (integers 0..3) or ages in years (anything above 3)."""
    y = np.asarray(y)
    if y.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {y.shape}")
    if np.issubdtype(y.dtype, np.integer) and y.min(initial=0) >= 0 and y.max(initial=0) < N_GROUPS:
        return y.astype(np.int64)
    return np.array([group_of_age(float(a)) for a in y], dtype=np.int64)


def to_samples(X, layouts, groups, identities=None) -> list[FaceSample]:
    X, layouts = check_faces(X, layouts)
    groups = _groups(groups, len(X))
    identities = np.arange(len(X)) if identities is None else np.asarray(identities)
    h, w = X.shape[2:]
    return [FaceSample(X[i], SemanticLayout(layouts[i]), make_condition(int(groups[i]), h, w),
                       SampleInfo(int(identities[i]), int(groups[i])))
            for i in range(len(X))]


class AgeTranslator(TransformerMixin, BaseEstimator):
    """Biphasic age translator with scikit-learn conventions.

    Parameters
    ----------
    target_group : int
        Age group that :meth:`transform` translates to.
    max_steps : int
        Training step cap (0 trains the full ``epochs``).
    epochs, batch_size, learning_rate, seed, strategy :
        Forwarded to :class:`~nsggan.config.TrainConfig`.
    overrides : dict or None
        Any further TrainConfig fields.
    noise_seed : int
        Seed of the noise maps drawn at transform time.
    """

    def __init__(self, target_group: int = N_GROUPS - 1, max_steps: int = 0, epochs: int = 40,
                 batch_size: int = 4, learning_rate: float = 1e-4, seed: int = 0, strategy: str = "joint",
                 overrides: dict | None = None, noise_seed: int = 0):
        self.target_group = target_group
        self.max_steps = max_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.strategy = strategy
        self.overrides = overrides
        self.noise_seed = noise_seed

    def _config(self, image_size: int) -> TrainConfig:
        base = dict(max_steps=self.max_steps, epochs=self.epochs, batch_size=self.batch_size,
                    learning_rate=float(self.learning_rate), seed=self.seed, strategy=self.strategy,
                    image_size=image_size)
        return apply_overrides(TrainConfig(), {**base, **(self.overrides or {})})

    def fit(self, X, y, layouts=None, identities=None):
        """Train on images ``X`` labelled with groups or ages ``y``."""
        from .trainer import train

        samples = to_samples(X, layouts, y, identities)
        self.config_ = self._config(samples[0].image.shape[1])
        self.state_ = train(samples, self.config_)
        self.models_ = self.state_.models
        self.n_features_in_ = int(np.prod(samples[0].image.shape))
        return self

    def transform(self, X, layouts=None, source_groups=None):
        """Translate ``X`` to ``target_group``. Without source groups every face counts as group 0."""
        from .evaluator import translate

        check_is_fitted(self, "models_")
        check_group(self.target_group)
        n = len(np.asarray(X))
        groups = np.zeros(n, np.int64) if source_groups is None else source_groups
        samples = to_samples(X, layouts, groups)
        return np.stack(translate(self.models_, samples, self.target_group, self.noise_seed))

    def fit_transform(self, X, y=None, layouts=None, identities=None):
        return self.fit(X, y, layouts, identities).transform(X, layouts, y)
