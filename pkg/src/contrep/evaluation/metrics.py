"""Representation metrics over embedding matrices.

Everything here is a pure function of numpy arrays. Accuracies are fractions
in [0, 1]; the harness converts to percentage points for reporting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..exceptions import DegenerateInput, DegenerateMean, EmptyReference, MissingClass

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbeddingMatrix:
    features: np.ndarray
    labels: np.ndarray
    source: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        feats = np.asarray(self.features)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {feats.shape}")
        if feats.shape[0] != labels.shape[0]:
            raise ValueError(f"{feats.shape[0]} feature rows but {labels.shape[0]} labels")
        if not np.isfinite(feats).all():
            raise ValueError("features contain non-finite entries")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, mask_or_idx) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.features[mask_or_idx], self.labels[mask_or_idx], dict(self.source))

    def restrict_to(self, classes) -> "EmbeddingMatrix":
        return self.subset(np.isin(self.labels, np.asarray(list(classes))))


def _as_features(x) -> np.ndarray:
    return x.features if isinstance(x, EmbeddingMatrix) else np.asarray(x)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise DegenerateInput("cannot l2-normalize a zero feature vector")
    return x / norms


# -- k-NN ---------------------------------------------------------------------

def knn_predict(train_features, train_labels, test_features, k: int = 20, temperature: float = 0.07,
                chunk_size: int = 1024) -> np.ndarray:
    """Similarity-weighted k-NN vote under cosine similarity.

    Neighbors are ranked by decreasing similarity, ties broken by lower
    reference index; each neighbor votes ``exp(sim / temperature)`` and the
    heaviest class wins, ties going to the lowest class id.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    n_train = len(train_labels)
    if n_train == 0:
        raise EmptyReference("k-NN reference set is empty")
    if not 1 <= k <= n_train:
        raise ValueError(f"k must lie in [1, {n_train}], got {k}")
    ref = l2_normalize(train_features)
    queries = l2_normalize(test_features)
    classes, ref_class = np.unique(train_labels, return_inverse=True)
    preds = np.empty(len(queries), dtype=np.int64)
    for start in range(0, len(queries), chunk_size):
        sims = queries[start:start + chunk_size] @ ref.T
        if k < n_train:
            kth = -np.partition(-sims, k - 1, axis=1)[:, k - 1]
        else:
            kth = sims.min(axis=1)
        for row, (s, t) in enumerate(zip(sims, kth)):
            cand = np.flatnonzero(s >= t)
            if len(cand) > k:
                cand = cand[np.argsort(-s[cand], kind="stable")[:k]]
            # rescale by the top similarity to keep exp() finite; argmax is unaffected
            w = np.exp((s[cand] - s[cand].max()) / temperature)
            votes = np.bincount(ref_class[cand], weights=w, minlength=len(classes))
            preds[start + row] = classes[np.argmax(votes)]
    return preds


def knn_accuracy(train: EmbeddingMatrix, test: EmbeddingMatrix, k: int = 20, temperature: float = 0.07) -> float:
    preds = knn_predict(train.features, train.labels, test.features, k, temperature)
    return float(np.mean(preds == test.labels))


# -- nearest mean classifier ---------------------------------------------------

@dataclass(frozen=True)
class PrototypeSet:
    classes: np.ndarray  # sorted class ids
    vectors: np.ndarray  # unit-norm, one row per class
    built_at: int | None = None

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(c): v for c, v in zip(self.classes, self.vectors)}


def compute_prototypes(train: EmbeddingMatrix, classes=None, built_at: int | None = None) -> PrototypeSet:
    """Per-class mean of l2-normalized features, re-normalized."""
    feats = l2_normalize(train.features)
    present = np.unique(train.labels)
    classes = present if classes is None else np.unique(np.asarray(list(classes), dtype=np.int64))
    missing = np.setdiff1d(classes, present)
    if len(missing):
        raise MissingClass(f"no samples for classes {missing.tolist()}")
    vectors = np.empty((len(classes), feats.shape[1]))
    for i, c in enumerate(classes):
        mean = feats[train.labels == c].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise DegenerateMean(f"class {int(c)} has a zero-norm mean feature")
        vectors[i] = mean / norm
    return PrototypeSet(classes=classes, vectors=vectors, built_at=built_at)


def nmc_predict(test_features, protos: PrototypeSet) -> np.ndarray:
    """Nearest prototype by cosine similarity; ties go to the lowest class id."""
    sims = l2_normalize(test_features) @ protos.vectors.T
    return protos.classes[np.argmax(sims, axis=1)]


def nmc_accuracy(test: EmbeddingMatrix, protos: PrototypeSet) -> float:
    missing = np.setdiff1d(np.unique(test.labels), protos.classes)
    if len(missing):
        raise MissingClass(f"no prototype for classes {missing.tolist()}")
    return float(np.mean(nmc_predict(test.features, protos) == test.labels))


class NMCStability(NamedTuple):
    acc_after_t1: float
    acc_stale: float
    acc_upper: float
    ordering_violated: bool


def nmc_stability_protocol(t1_train: EmbeddingMatrix, t1_test: EmbeddingMatrix,
                           t2_train: EmbeddingMatrix, t2_test: EmbeddingMatrix,
                           eps: float = 1e-9) -> NMCStability:
    """Prototype drift check on first-task data.

    ``t1_*`` are first-task samples embedded by the first-boundary backbone,
    ``t2_*`` the same samples embedded by the later backbone. Returns accuracy
    with first-boundary prototypes and features, with stale prototypes against
    new features, and with prototypes recomputed under the new backbone (an
    upper bound that needs old data).
    """
    protos_t1 = compute_prototypes(t1_train)
    protos_t2 = compute_prototypes(t2_train, classes=protos_t1.classes)
    after = nmc_accuracy(t1_test, protos_t1)
    stale = nmc_accuracy(t2_test, protos_t1)
    upper = nmc_accuracy(t2_test, protos_t2)
    violated = upper < stale - eps
    if violated:
        logger.warning("recomputed-prototype accuracy %.4f below stale-prototype accuracy %.4f", upper, stale)
    return NMCStability(after, stale, upper, violated)


# -- CKA ----------------------------------------------------------------------

def linear_cka(x, y) -> float:
    """Linear centered kernel alignment between two representations of the same N inputs."""
    x = np.asarray(_as_features(x), dtype=np.float64)
    y = np.asarray(_as_features(y), dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DegenerateInput("CKA needs at least 2 samples")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0 or yy == 0:
        raise DegenerateInput("a centered representation is identically zero")
    value = np.linalg.norm(y.T @ x) ** 2 / (xx * yy)
    return float(np.clip(value, 0.0, 1.0))


# -- continual-learning scalars -------------------------------------------------

def forgetting(acc_after_own_task: float, acc_after_final: float) -> float:
    """Accuracy drop on a task between its own boundary and the end of the sequence."""
    return acc_after_own_task - acc_after_final


def forward_transfer(acc_with_pretraining: float, acc_from_scratch: float) -> float:
    return acc_with_pretraining - acc_from_scratch


def exclusion_difference(acc_with_task: float, acc_without_task: float) -> float:
    """Accuracy on a task when it was part of the sequence minus when it was left out."""
    return acc_with_task - acc_without_task


# -- covariance spectrum ---------------------------------------------------------

@dataclass(frozen=True)
class SpectrumRecord:
    eigenvalues: np.ndarray  # descending, clamped at 0
    cumulative: np.ndarray  # explained-variance ratios, last == 1
    var95_index: int
    threshold: float = 0.95

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "cumulative": [float(v) for v in self.cumulative],
            "var95_index": int(self.var95_index),
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpectrumRecord":
        return cls(np.asarray(d["eigenvalues"]), np.asarray(d["cumulative"]), int(d["var95_index"]),
                   d.get("threshold", 0.95))


def covariance(features) -> np.ndarray:
    x = np.asarray(_as_features(features), dtype=np.float64)
    if x.shape[0] < 2:
        raise DegenerateInput("covariance needs at least 2 samples")
    xc = x - x.mean(axis=0)
    return xc.T @ xc / (x.shape[0] - 1)


def spectrum(embeddings, threshold: float = 0.95) -> SpectrumRecord:
    """Singular values of the feature covariance with cumulative explained variance.

    ``var95_index`` is the smallest number of leading components whose
    cumulative ratio reaches ``threshold``.
    """
    cov = covariance(embeddings)
    # symmetric PSD: singular values coincide with eigenvalues
    eig = np.linalg.eigvalsh(cov)[::-1]
    eig = np.where(eig < 0, 0.0, eig)
    total = eig.sum()
    if total <= 0:
        raise DegenerateInput("features are constant; total variance is zero")
    cum = np.cumsum(eig) / total
    cum[-1] = 1.0
    cum = np.maximum.accumulate(cum)
    index = int(np.argmax(cum >= threshold - 1e-12)) + 1
    return SpectrumRecord(eig, cum, index, threshold)
