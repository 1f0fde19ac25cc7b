"""scikit-learn estimators over frozen features.

These wrap the metric kernels so evaluation composes with sklearn tooling
(pipelines, ``cross_val_score``, ``clone``)::

    >>> from sklearn.pipeline import make_pipeline
    >>> probe = make_pipeline(encoder, WeightedKNNClassifier(k=20))
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .metrics import EmbeddingMatrix, compute_prototypes, knn_predict, l2_normalize, nmc_predict, spectrum


class WeightedKNNClassifier(ClassifierMixin, BaseEstimator):
    """Cosine k-NN with ``exp(sim / temperature)`` vote weights."""

    def __init__(self, k=20, temperature=0.07):
        self.k = k
        self.temperature = temperature

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.reference_ = l2_normalize(X)
        self.reference_labels_ = np.asarray(y, dtype=np.int64)
        self.classes_ = np.unique(self.reference_labels_)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "reference_")
        X = check_array(X, dtype=np.float64)
        return knn_predict(self.reference_, self.reference_labels_, X, self.k, self.temperature)


class NearestMeanClassifier(ClassifierMixin, BaseEstimator):
    """Cosine nearest-prototype classifier over l2-normalized class means."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.prototypes_ = compute_prototypes(EmbeddingMatrix(X, y))
        self.classes_ = self.prototypes_.classes
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "prototypes_")
        return nmc_predict(check_array(X, dtype=np.float64), self.prototypes_)


class CovarianceSpectrum(TransformerMixin, BaseEstimator):
    """Eigen-decomposition of the feature covariance.

    After ``fit``: ``eigenvalues_`` (descending), ``cumulative_ratio_`` and
    ``var95_index_``. ``transform`` projects centered features onto the
    leading ``n_components`` eigenvectors (all when None).
    """

    def __init__(self, threshold=0.95, n_components=None):
        self.threshold = threshold
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        record = spectrum(X, self.threshold)
        self.record_ = record
        self.eigenvalues_ = record.eigenvalues
        self.cumulative_ratio_ = record.cumulative
        self.var95_index_ = record.var95_index
        self.mean_ = X.mean(axis=0)
        xc = X - self.mean_
        _, vecs = np.linalg.eigh(xc.T @ xc / (X.shape[0] - 1))
        self.components_ = vecs[:, ::-1].T
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        comps = self.components_ if self.n_components is None else self.components_[: self.n_components]
        return (X - self.mean_) @ comps.T
