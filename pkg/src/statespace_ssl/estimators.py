"""scikit-learn compatible wrappers: a self-supervised feature extractor and a linear probe."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .errors import ShapeError
from .evaluation import extract_features, fit_softmax_classifier
from .training import TrainConfig, fit_images, init_state, pixel_stats


def check_images(X, patch_size: int | None = None) -> np.ndarray:
    """Validate an ``[n, H, W, 3]`` stack of finite values in [0, 1]; returns float64."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"expected images shaped [n, H, W, 3], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image stack")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    if patch_size is not None and (X.shape[1] % patch_size or X.shape[2] % patch_size):
        raise ShapeError(f"image size {X.shape[1:3]} not divisible by patch size {patch_size}")
    return X


def check_features(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D feature matrix, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain NaN or infinity")
    return X


class StateSpaceSSL(TransformerMixin, BaseEstimator):
    """Pretrain a gated state-space encoder without labels; ``transform`` gives pooled embeddings.

    ``epochs=0`` keeps the random initialisation (input statistics are still
    fitted), which makes a convenient baseline.
    """

    def __init__(self, epochs=20, batch_size=16, lr=3e-3, patch_size=8, model_dim=32, state_dim=32,
                 depth=2, prototypes=32, global_size=48, local_size=24, n_local=6, teacher_views=1,
                 bidirectional=True, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patch_size = patch_size
        self.model_dim = model_dim
        self.state_dim = state_dim
        self.depth = depth
        self.prototypes = prototypes
        self.global_size = global_size
        self.local_size = local_size
        self.n_local = n_local
        self.teacher_views = teacher_views
        self.bidirectional = bidirectional
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params(), deterministic=True)

    def fit(self, X, y=None):
        X = check_images(X, self.patch_size)
        cfg = self._config()
        state, head = init_state(cfg)
        state.buffers = pixel_stats(X)
        if cfg.epochs > 0:
            state, head, history = fit_images(X, cfg, state=state, head=head)
        else:
            history = []
        self.state_, self.head_, self.history_ = state, head, history
        self.n_features_out_ = cfg.model_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = check_images(X, self.patch_size)
        return extract_features((self.state_, self.head_), X)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Affine softmax classifier on standardised features, trained by full-batch gradient descent."""

    def __init__(self, epochs=1000, lr=0.5, l2=1e-4):
        self.epochs = epochs
        self.lr = lr
        self.l2 = l2

    def fit(self, X, y):
        X = check_features(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ShapeError(f"labels {y.shape} do not match {X.shape[0]} samples")
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = np.searchsorted(self.classes_, y)
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale_ = np.where(sd < 1e-12, 1.0, sd)
        self.coef_, self.intercept_ = fit_softmax_classifier(
            (X - self.mean_) / self.scale_, codes, len(self.classes_), self.epochs, self.lr, self.l2)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_features(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
