"""scikit-learn style wrappers around source training, DIRA adaptation and corruptions."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import adapt as A
from . import models as M
from .corruptions import CorruptionSpec, corrupt
from .data import LabeledSet
from .fisher import FisherDiag, estimate_fisher
from .training import train


def _as_images(X, input_shape=None) -> np.ndarray:
    if np.asarray(X).ndim > 2:
        X = np.asarray(X, dtype=np.float32)
        check_array(X.reshape(len(X), -1), dtype=np.float32)
        return X
    X = check_array(X, dtype=np.float32)
    if input_shape is not None and len(input_shape) > 1:
        return X.reshape((len(X),) + tuple(input_shape))
    return X


def _check_Xy(X, y):
    flat = np.asarray(X)
    check_X_y(flat.reshape(len(flat), -1), y)
    return _as_images(X), np.asarray(y)


class _ModelClassifier(ClassifierMixin, BaseEstimator):
    """Shared predict / score for estimators holding a fitted ``model_``."""

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        idx = self.model_.predict(_as_images(X, self.model_.spec.input_shape))
        return self.classes_[idx]

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        from . import autodiff as ad

        with ad.no_grad():
            return self.model_(_as_images(X, self.model_.spec.input_shape)).numpy()

    def _encode(self, y) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes_.tolist())}
        try:
            return np.array([lookup[v] for v in np.asarray(y).tolist()], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]!r} was not seen during source fit") from None


class SourceClassifier(_ModelClassifier):
    """Train a desk-scale model on source data; exposes ``model_`` and ``fisher_``."""

    def __init__(self, architecture="cnn-small", hidden=(8, 16), eta=0.05, batch_size=32,
                 momentum=0.9, lr_drops=2, max_epochs=200, fisher_samples=1000, random_state=0):
        self.architecture = architecture
        self.hidden = hidden
        self.eta = eta
        self.batch_size = batch_size
        self.momentum = momentum
        self.lr_drops = lr_drops
        self.max_epochs = max_epochs
        self.fisher_samples = fisher_samples
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_Xy(X, y)
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        data = LabeledSet(X, self._encode(y), len(self.classes_))
        spec = M.ModelSpec(self.architecture, data.input_shape, data.num_classes,
                           tuple(self.hidden), self.random_state)
        spec.validate()
        self.model_ = M.build(spec)
        self.report_ = train(self.model_, data, eta=self.eta, batch_size=self.batch_size,
                             max_epochs=self.max_epochs, momentum=self.momentum,
                             lr_drops=self.lr_drops, seed=self.random_state)
        self.fisher_ = estimate_fisher(self.model_, data, min(self.fisher_samples, len(data)), self.random_state)
        self.n_features_in_ = int(np.prod(data.input_shape))
        return self


class DIRAClassifier(_ModelClassifier):
    """Adapt a fitted :class:`SourceClassifier` to a few labelled target samples.

    Every ``fit`` restarts from the source model, so refitting on a new
    domain never sees an earlier adaptation.
    """

    def __init__(self, source=None, eta=1e-5, lam=1.0, epochs=10, batch_size=None, random_state=0):
        self.source = source
        self.eta = eta
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        if self.source is None:
            raise ValueError("DIRAClassifier needs a fitted SourceClassifier as `source`")
        check_is_fitted(self.source, "model_")
        X, y = _check_Xy(X, y)
        self.classes_ = self.source.classes_
        model0: M.Model = self.source.model_
        fisher: FisherDiag = self.source.fisher_
        target = LabeledSet(X.reshape((len(X),) + model0.spec.input_shape), self._encode(y), len(self.classes_))
        cfg = A.AdaptConfig(self.eta, self.lam, self.epochs, self.batch_size, self.random_state)
        self.result_ = A.dira_adapt(model0, fisher, target, cfg)
        self.model_ = A.apply(model0, self.result_)
        self.n_features_in_ = self.source.n_features_in_
        return self


class CorruptionTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer applying one seeded corruption to ``n x c x h x w`` images."""

    def __init__(self, kind="gaussian_noise", severity=5, seed=0):
        self.kind = kind
        self.severity = severity
        self.seed = seed

    def fit(self, X, y=None):
        CorruptionSpec(self.kind, self.severity, self.seed)
        X = _as_images(X)
        if X.ndim != 4:
            raise ValueError(f"expected n x c x h x w images, got shape {X.shape}")
        self.input_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "input_shape_")
        X = _as_images(X)
        if X.shape[1:] != self.input_shape_:
            raise ValueError(f"fitted on images of shape {self.input_shape_}, got {X.shape[1:]}")
        return corrupt(X, CorruptionSpec(self.kind, self.severity, self.seed))
