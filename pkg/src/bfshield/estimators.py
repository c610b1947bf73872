"""Scikit-learn style wrappers so the filters, classifiers, and the adaptive
defense compose with pipelines and model-selection tooling.

All estimators consume image batches shaped (N, H, W, C) with values in
[-1, 1]; `check_images` is the shared validation helper. The functional API
underneath (`bilateral_filter`, `train_natural`, ...) stays the primary
surface; these classes only adapt it to fit/transform/predict conventions.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .adaptive import ParamGrid, adaptive_features, default_grid, defend, train_adaptive
from .attacks import AttackConfig
from .bilateral import FilterParams, bilateral_filter
from .data import Dataset
from .errors import ConfigError, ShapeError
from .networks import Network, build_adaptive_net, build_cifar_cnn, build_mnist_cnn, wrap_bfnet
from .permutohedral import bilateral_lattice_filter
from .training import TrainConfig, train_adversarial, train_natural

__all__ = ["check_images", "BilateralImageFilter", "CNNClassifier", "AdaptiveFilterDefense"]


def check_images(X, *, channels=(1, 3), clip_tol=1e-6) -> np.ndarray:
    """Validate and return a float32 (N,H,W,C) batch with values in [-1, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"expected (N,H,W,C) images, got shape {X.shape}")
    if X.shape[-1] not in channels:
        raise ShapeError(f"expected {channels} channels, got {X.shape[-1]}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ConfigError("images contain non-finite values")
    lo, hi = float(X.min()), float(X.max())
    if lo < -1.0 - clip_tol or hi > 1.0 + clip_tol:
        raise ConfigError(f"image values outside [-1, 1]: range [{lo:.4g}, {hi:.4g}]")
    return np.clip(X, -1.0, 1.0)


class BilateralImageFilter(TransformerMixin, BaseEstimator):
    """Stateless edge-preserving smoothing transformer.

    Parameters
    ----------
    k : odd window width in pixels
    sigma_s : spatial standard deviation in pixels
    sigma_r : range standard deviation in [-1, 1] intensity units
    engine : "exact" for the windowed filter, "lattice" for the O(n)
        permutohedral approximation
    """

    def __init__(self, k=3, sigma_s=0.5, sigma_r=0.5, engine="exact"):
        self.k = k
        self.sigma_s = sigma_s
        self.sigma_r = sigma_r
        self.engine = engine

    def fit(self, X=None, y=None):
        FilterParams(self.k, self.sigma_s, self.sigma_r)  # validate
        if self.engine not in ("exact", "lattice"):
            raise ConfigError(f"engine must be 'exact' or 'lattice', got {self.engine!r}")
        return self

    def transform(self, X) -> np.ndarray:
        self.fit()
        X = check_images(X)
        params = FilterParams(self.k, self.sigma_s, self.sigma_r)
        if self.engine == "lattice":
            return bilateral_lattice_filter(X, params).astype(np.float32)
        return bilateral_filter(X, params).astype(np.float32)


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """CNN classifier with an optional differentiable bilateral front end.

    arch is "mnist" (28x28x1) or "cifar" (32x32x3). With bilateral=(k, s_s,
    s_r) the network becomes a BFNet; adversary in {None,"fgsm","pgd"}
    switches fit() to adversarial training at the given budget.
    """

    def __init__(
        self,
        arch="mnist",
        epochs=2,
        batch_size=64,
        optimizer="adam",
        lr=1e-3,
        bilateral=None,
        trainable_sigmas=False,
        adversary=None,
        epsilon=0.3,
        attack_steps=7,
        seed=0,
    ):
        self.arch = arch
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.bilateral = bilateral
        self.trainable_sigmas = trainable_sigmas
        self.adversary = adversary
        self.epsilon = epsilon
        self.attack_steps = attack_steps
        self.seed = seed

    def _build(self) -> Network:
        if self.arch == "mnist":
            net = build_mnist_cnn(seed=self.seed)
        elif self.arch == "cifar":
            net = build_cifar_cnn(seed=self.seed)
        else:
            raise ConfigError(f"arch must be 'mnist' or 'cifar', got {self.arch!r}")
        if self.bilateral is not None:
            net = wrap_bfnet(net, FilterParams(*self.bilateral), trainable=self.trainable_sigmas)
        return net

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y, dtype=np.int64)
        self.network_ = self._build()
        self.classes_ = np.arange(self.network_.n_classes)
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            lr=self.lr,
            adversary=self.adversary,
            attack=AttackConfig(epsilon=self.epsilon, steps=self.attack_steps),
            seed=self.seed,
        )
        data = Dataset(X, y)
        if self.adversary is None:
            self.history_ = train_natural(self.network_, data, cfg)
        else:
            self.history_ = train_adversarial(self.network_, data, cfg)
        return self

    def predict(self, X) -> np.ndarray:
        return self.network_.predict(check_images(X))

    def predict_proba(self, X) -> np.ndarray:
        z = self.network_.logits(check_images(X))
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def decision_function(self, X) -> np.ndarray:
        return self.network_.logits(check_images(X))


class AdaptiveFilterDefense(TransformerMixin, BaseEstimator):
    """Predicts per-image filter parameters and applies them.

    fit(X, y) takes adversarial (or clean) images X and multi-label recovery
    flags y over the grid's candidates; transform(X) returns the filtered
    images; predict(X) returns chosen candidate indices.
    """

    def __init__(self, grid=None, epochs=25, batch_size=32, lr=0.01, seed=0):
        self.grid = grid
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _grid(self) -> ParamGrid:
        if self.grid is None:
            return default_grid()
        return self.grid if isinstance(self.grid, ParamGrid) else ParamGrid(tuple(self.grid))

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        grid = self._grid()
        if y.ndim != 2 or y.shape[1] != len(grid):
            raise ShapeError(f"recovery labels must be (N,{len(grid)}), got {y.shape}")
        self.grid_ = grid
        h, w, c = X.shape[1:]
        self.predictor_ = build_adaptive_net(len(grid), image_shape=(h, w, c), seed=self.seed)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, optimizer="nesterov", lr=self.lr, seed=self.seed)
        self.history_ = train_adaptive(self.predictor_, X, y, cfg)
        return self

    def predict(self, X) -> np.ndarray:
        X = check_images(X)
        return self.predictor_.logits(adaptive_features(X)).argmax(axis=1)

    def transform(self, X) -> np.ndarray:
        X = check_images(X)
        out, _ = defend(self.predictor_, None, X, self.grid_)
        return out
