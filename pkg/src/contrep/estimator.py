"""scikit-learn facade over continual training.

``ContinualEncoder`` learns tasks one after another (``partial_fit`` adds one
task, ``fit`` splits the label set into ``n_tasks`` class-disjoint tasks) and
``transform`` returns backbone features, so it drops into a pipeline::

    >>> from sklearn.pipeline import make_pipeline
    >>> from contrep.evaluation import WeightedKNNClassifier
    >>> pipe = make_pipeline(ContinualEncoder(objective="sl_mlp", n_tasks=5), WeightedKNNClassifier())
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data.augment import eval_tensor, light_policy, ssl_policy
from .data.streams import TaskData, TaskSpec
from .models.encoder import EncoderConfig, FrozenSnapshot, ProjectorConfig, snapshot
from .objectives import ObjectiveConfig
from .strategies import StrategyConfig, check_compatible
from .training import TrainLoopConfig, build_model, train_task


def _check_images(X) -> np.ndarray:
    X = np.asarray(X)
    if X.dtype != np.uint8 or X.ndim != 4 or X.shape[-1] != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected uint8 images of shape N x S x S x 3, got {X.dtype} {X.shape}")
    return X


class ContinualEncoder(TransformerMixin, BaseEstimator):
    """Image encoder trained on a sequence of tasks.

    Parameters mirror the experiment config; ``projector_*`` only matter for
    objectives that use a projector. ``transform`` never touches the
    projector or the heads.
    """

    def __init__(self, objective="sl_mlp", strategy="finetune", n_tasks=1, epochs_first=30, epochs_rest=20,
                 batch_size=256, lr=None, weight_decay=5e-4, width=64, projector_depth=3, projector_hidden=2048,
                 projector_output=2048, penalty_weight=1.0, predictor_hidden=2048, temperature=None,
                 random_state=0):
        self.objective = objective
        self.strategy = strategy
        self.n_tasks = n_tasks
        self.epochs_first = epochs_first
        self.epochs_rest = epochs_rest
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.width = width
        self.projector_depth = projector_depth
        self.projector_hidden = projector_hidden
        self.projector_output = projector_output
        self.penalty_weight = penalty_weight
        self.predictor_hidden = predictor_hidden
        self.temperature = temperature
        self.random_state = random_state

    def _configs(self):
        problem = check_compatible(self.objective, self.strategy)
        if problem:
            raise ValueError(problem)
        objective = ObjectiveConfig(self.objective, temperature=self.temperature)
        strategy = StrategyConfig(self.strategy, penalty_weight=self.penalty_weight,
                                  predictor_hidden=self.predictor_hidden)
        loop = TrainLoopConfig(self.epochs_first, self.epochs_rest, lr=self.lr, weight_decay=self.weight_decay,
                               batch_size=self.batch_size, seed=self.random_state)
        return objective, strategy, loop

    def _init(self, X):
        objective, _, loop = self._configs()
        size = X.shape[1]
        x = X.reshape(-1, 3).astype(np.float64) / 255.0
        self.channel_mean_ = tuple(float(v) for v in x.mean(axis=0))
        self.channel_std_ = tuple(float(max(v, 1e-3)) for v in x.std(axis=0))
        encoder = EncoderConfig(width=self.width, input_size=size)
        projector = ProjectorConfig(depth=self.projector_depth, hidden_dim=self.projector_hidden,
                                    output_dim=self.projector_output)
        self.model_ = build_model(objective, encoder, projector, seed=loop.seed)
        self.snapshot_: FrozenSnapshot | None = None
        self.tasks_: list[TaskSpec] = []
        self.log_: list[dict] = []
        self.n_features_in_ = size * size * 3

    def _policy(self, objective):
        if objective.requires_two_views:
            return ssl_policy(self.channel_mean_, self.channel_std_)
        pad = max(1, self.model_.encoder_config.input_size // 8)
        return light_policy(self.channel_mean_, self.channel_std_, pad=pad)

    def partial_fit(self, X, y):
        """Learn one more task made of the samples ``(X, y)``."""
        X = _check_images(X)
        y = np.asarray(y, dtype=np.int64)
        if len(X) != len(y):
            raise ValueError("X and y have different lengths")
        if not hasattr(self, "model_"):
            self._init(X)
        objective, strategy, loop = self._configs()
        spec = TaskSpec(task_id=len(self.tasks_), dataset_name="array", class_ids=tuple(np.unique(y).tolist()))
        result = train_task(self.model_, TaskData(spec, X, y), objective, strategy, loop,
                            previous=self.snapshot_, policy=self._policy(objective))
        self.snapshot_ = result.snapshot
        self.tasks_.append(spec)
        self.log_.extend(result.log)
        return self

    def fit(self, X, y):
        """Split the classes of ``y`` into ``n_tasks`` disjoint groups and learn them in order."""
        X = _check_images(X)
        y = np.asarray(y, dtype=np.int64)
        classes = np.unique(y)
        if len(classes) % self.n_tasks:
            raise ValueError(f"{len(classes)} classes cannot be split into {self.n_tasks} equal tasks")
        for attr in ("model_", "snapshot_", "tasks_", "log_"):
            if hasattr(self, attr):
                delattr(self, attr)
        order = classes[np.random.default_rng(self.random_state).permutation(len(classes))]
        for group in np.split(order, self.n_tasks):
            mask = np.isin(y, group)
            self.partial_fit(X[mask], y[mask])
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X)
        model = self.model_
        model.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(X), 512):
                out.append(model.forward_features(eval_tensor(X[start:start + 512], self.channel_mean_,
                                                              self.channel_std_)).numpy())
        return np.concatenate(out).astype(np.float64)

    def snapshot(self) -> FrozenSnapshot:
        check_is_fitted(self, "model_")
        return snapshot(self.model_)
