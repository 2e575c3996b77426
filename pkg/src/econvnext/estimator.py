"""scikit-learn style classifier around the builder and trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .builder import build
from .config import narrow, preset
from .train import DatasetHandle, TrainConfig, log_softmax, train

DEFAULT_LR = 1e-2


class EConvNeXtClassifier(ClassifierMixin, BaseEstimator):
    """Desk-scale E-ConvNeXt image classifier.

    ``X`` is (n, 3, H, W); H and W must be divisible by the network's total
    stride (32). Widths come from ``preset`` scaled by ``width``.
    """

    def __init__(self, preset="e_convnext_tiny", width=0.125, blocks=(1, 1, 1, 1), epochs=20, batch_size=32,
                 base_lr=DEFAULT_LR, weight_decay=0.05, label_smoothing=0.1, val_fraction=0.0, random_state=0):
        self.preset = preset
        self.width = width
        self.blocks = blocks
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.label_smoothing = label_smoothing
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _images(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 4 or X.shape[1] != 3:
            raise ValueError(f"expected images shaped (n, 3, H, W), got {X.shape}")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = self._images(X)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg = narrow(preset(self.preset), self.width, tuple(self.blocks), len(self.classes_), X.shape[2:])
        self.graph_ = build(cfg.validate(), seed=self.random_state)
        tc = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr,
                         weight_decay=self.weight_decay, label_smoothing=self.label_smoothing,
                         val_fraction=self.val_fraction, seed=self.random_state)
        self.history_ = train(self.graph_, DatasetHandle(X, codes, len(self.classes_)), tc)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "graph_")
        X = self._images(X)
        return np.concatenate([self.graph_(X[i:i + 64]) for i in range(0, len(X), 64)])

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
