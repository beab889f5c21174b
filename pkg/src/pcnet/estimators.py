"""Scikit-learn classifier wrapper around a training run."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from pcnet.data import Dataset
from pcnet.exceptions import DimensionError
from pcnet.nn import count_params
from pcnet.pipeline import RunConfig, run
from pcnet.transform import TransformPlan


def check_images(X, input_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Validate a batch of samples: 2-D ``(N, features)`` or image-shaped ``(N, h, w, c)``."""
    X = check_array(X, allow_nd=True, dtype=np.float32)
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise DimensionError(f"expected samples of shape {tuple(input_shape)}, got {tuple(X.shape[1:])}")
    return X


class PCNClassifier(ClassifierMixin, BaseEstimator):
    """Train a reference architecture, optionally transforming it part-way.

    Parameters mirror :class:`pcnet.pipeline.RunConfig`; ``plan`` may be a
    :class:`TransformPlan` or its dict form. After ``fit``, ``network_`` is
    the trained (possibly transformed) network and ``record_`` the run record.
    """

    def __init__(self, arch: str = "mlp", epochs: int | None = 5, plan=None, optimizer: str = "adam",
                 lr: float = 1e-3, batch_size: int = 128, l2: float = 0.0, seed: int = 0,
                 arch_kwargs: dict | None = None, pca_samples: int = 5000):
        self.arch = arch
        self.epochs = epochs
        self.plan = plan
        self.optimizer = optimizer
        self.lr = lr
        self.batch_size = batch_size
        self.l2 = l2
        self.seed = seed
        self.arch_kwargs = arch_kwargs
        self.pca_samples = pca_samples

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        plan = self.plan
        if plan is not None and not isinstance(plan, TransformPlan):
            plan = TransformPlan.from_dict(plan)
        empty = X[:0]
        ds = Dataset("array", X, codes.astype(np.int64), empty, codes[:0].astype(np.int64),
                     classes=len(self.classes_))
        config = RunConfig(arch=self.arch, dataset="array", optimizer=self.optimizer, lr=self.lr,
                           batch_size=self.batch_size, epochs=self.epochs, seed=self.seed, plan=plan, l2=self.l2,
                           arch_kwargs=dict(self.arch_kwargs or {}), pca_samples=self.pca_samples)
        self.record_ = run(config, ds)
        self.network_ = self.record_.network
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = X.shape[1:]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X, self.input_shape_)
        return self.network_.predict_proba(X.astype(self.network_.dtype))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def param_count(self):
        check_is_fitted(self, "network_")
        return count_params(self.network_)
