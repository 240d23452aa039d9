"""scikit-learn style wrappers around the RNNPool operator."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ShapeError
from .pool import RnnPoolLayerCfg, RnnPoolParams, rnnpool_layer_forward
from .probe.datasets import SynthDataset
from .probe.train import ProbeModel, predict, train_probe


def _images(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ShapeError(f"expected images shaped (N, H, W[, C]), got {X.shape}")
    return X


class RNNPoolTransformer(TransformerMixin, BaseEstimator):
    """Strided RNNPool layer with random weights, mapping (N, H, W, C) to flat features."""

    def __init__(self, patch=8, stride=4, h1=8, h2=8, flatten=True, random_state=None):
        self.patch = patch
        self.stride = stride
        self.h1 = h1
        self.h2 = h2
        self.flatten = flatten
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _images(X)
        self.n_channels_in_ = X.shape[3]
        self.input_shape_ = X.shape[1:]
        self.params_ = RnnPoolParams.random(X.shape[3], self.h1, self.h2, self.patch,
                                            rng=self.random_state, dtype=np.float64)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = _images(X).astype(np.float64)
        if X.shape[3] != self.n_channels_in_:
            raise ShapeError(f"fitted on {self.n_channels_in_} channels, got {X.shape[3]}")
        cfg = RnnPoolLayerCfg(self.params_, self.stride)
        out = np.stack([rnnpool_layer_forward(cfg, x) for x in X])
        return out.reshape(len(X), -1) if self.flatten else out


class RNNPoolClassifier(ClassifierMixin, BaseEstimator):
    """One RNNPool over the whole image followed by a linear softmax head."""

    def __init__(self, h1=16, h2=16, epochs=10, lr=0.2, batch_size=64, random_state=0):
        self.h1 = h1
        self.h2 = h2
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def _scaled(self, X):
        return (_images(X).astype(np.float64) - self.offset_) / self.range_

    def fit(self, X, y):
        X = _images(X)
        if X.shape[1] != X.shape[2]:
            raise ShapeError("images must be square")
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        self.offset_ = float(X.min())
        self.range_ = float(X.max() - X.min()) or 1.0
        data = SynthDataset(self._scaled(X), y_idx, "custom", tuple(map(str, self.classes_)))
        model = ProbeModel.create(X.shape[1], len(self.classes_), self.h1, self.h2,
                                  channels=X.shape[3], seed=self.random_state)
        result = train_probe(model, data, data, lr=self.lr, epochs=self.epochs,
                             seed=self.random_state, batch_size=self.batch_size)
        self.model_ = model
        self.train_curve_ = result.curve
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        x = self._scaled(X).astype(self.model_.head_w.dtype)
        return self.classes_[predict(self.model_, x, multilabel=False)]
