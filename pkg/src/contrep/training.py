"""Sequential training over a task stream."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

from .data.augment import AugmentationPolicy, iterate_epoch, light_policy, ssl_policy
from .data.registry import get_dataset_info
from .data.streams import TaskData, TaskSequence, load_task
from .evaluation.report import MetricReport
from .exceptions import MissingSnapshot, NonFiniteLoss
from .models.encoder import (ContinualModel, EncoderConfig, FrozenSnapshot, ProjectorConfig, load_checkpoint,
                             save_checkpoint, snapshot)
from .objectives import ObjectiveConfig, ce_loss, cosine_softmax_loss, two_view_loss
from .strategies import StrategyConfig, build_predictor, cassle_penalty, lwf_penalty, pfr_penalty

logger = logging.getLogger(__name__)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class TrainLoopConfig:
    epochs_first: int = 30
    epochs_rest: int = 20
    optimizer: str = "sgd"
    lr: float | None = None  # None: 0.1 for CE-family, 0.3 * batch/256 for two-view objectives
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs_first < 0 or self.epochs_rest < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer != "sgd":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unsupported lr schedule {self.schedule!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr is not None and self.lr < 0:
            raise ValueError("lr must be >= 0")

    def epochs_for(self, task_id: int) -> int:
        return self.epochs_first if task_id == 0 else self.epochs_rest

    def resolve_lr(self, objective: ObjectiveConfig) -> float:
        if self.lr is not None:
            return self.lr
        return 0.3 * self.batch_size / 256 if objective.requires_two_views else 0.1


def build_model(objective: ObjectiveConfig, encoder: EncoderConfig = EncoderConfig(),
                projector: ProjectorConfig = ProjectorConfig(), seed: int = 0) -> ContinualModel:
    """Wire backbone, projector and head type for a training objective."""
    method = objective.method
    projector = replace(projector, enabled=method.projector, output_l2_normalize=method.l2_normalize)
    return ContinualModel(
        encoder, projector,
        head_type=method.head_type or "linear",
        head_input=method.head_input if method.projector else "backbone",
        cosine_temperature=objective.temperature or 0.1,
        seed=derive_seed(seed, 0),
    )


def default_policy(objective: ObjectiveConfig, dataset_name: str) -> AugmentationPolicy:
    info = get_dataset_info(dataset_name)
    if objective.requires_two_views:
        return ssl_policy(info.mean, info.std)
    return light_policy(info.mean, info.std, pad=max(1, info.image_size // 8))


@dataclass
class StepLosses:
    base: torch.Tensor
    penalty: torch.Tensor
    correct: int | None = None


def compute_losses(model: ContinualModel, views: list[torch.Tensor], labels: torch.Tensor, task_id: int,
                   objective: ObjectiveConfig, strategy: StrategyConfig,
                   previous: FrozenSnapshot | None = None, predictor: nn.Module | None = None) -> StepLosses:
    """Base objective and strategy penalty for one batch (penalty is 0 without a snapshot)."""
    x = torch.cat(views) if len(views) > 1 else views[0]
    feats = model.forward_features(x)
    z = model.project(feats) if model.projector is not None else None
    correct = None
    if objective.has_head:
        head_in = model.head_features(feats, z)
        local = model.local_labels(task_id, labels)
        head = model.head(task_id)
        logits = head(head_in)
        if objective.name == "trex":
            base = cosine_softmax_loss(head_in, head.weight, local, objective.temperature)
        else:
            base = ce_loss(logits, local)
        correct = int((logits.argmax(dim=1) == local).sum())
    else:
        z1, z2 = z.chunk(2)
        base = two_view_loss(objective, z1, z2, labels)

    penalty = torch.zeros((), dtype=base.dtype)
    if previous is not None and strategy.uses_snapshot:
        if strategy.name == "lwf":
            head_in = model.head_features(feats, z)
            with torch.no_grad():
                prev_feats = previous.model.forward_features(x)
                prev_in = previous.model.head_features(prev_feats)
            for t in sorted(previous.head_classes):
                if t == task_id:
                    continue
                with torch.no_grad():
                    old = previous.model.logits_from(prev_in, t)
                penalty = penalty + lwf_penalty(model.logits_from(head_in, t), old, strategy.distill_temperature)
        elif strategy.name == "pfr":
            penalty = pfr_penalty(feats, previous.forward_features(x), predictor)
        elif strategy.name == "cassle":
            prev_z = previous.forward_projected(x)
            if len(views) > 1:
                (c1, c2), (p1, p2) = z.chunk(2), prev_z.chunk(2)
                penalty = 0.5 * (cassle_penalty(c1, p1, predictor, objective, labels)
                                 + cassle_penalty(c2, p2, predictor, objective, labels))
            else:
                penalty = cassle_penalty(z, prev_z, predictor, objective, labels)
    return StepLosses(base, penalty, correct)


@dataclass
class TaskResult:
    model: ContinualModel
    snapshot: FrozenSnapshot
    log: list[dict] = field(default_factory=list)


def train_task(
    model: ContinualModel,
    data: TaskData,
    objective: ObjectiveConfig,
    strategy: StrategyConfig,
    loop: TrainLoopConfig,
    previous: FrozenSnapshot | None = None,
    policy: AugmentationPolicy | None = None,
    on_epoch_end: Callable[[int, list[dict]], None] | None = None,
) -> TaskResult:
    """Train ``model`` in place on one task and snapshot it at the boundary.

    Each step minimizes ``base + penalty_weight * penalty``; the penalty
    compares against ``previous``. Randomness (batch order, augmentation,
    new head, predictor) is seeded from ``(loop.seed, task_id)``.
    """
    task_id = data.spec.task_id
    if task_id > 0 and strategy.uses_snapshot and previous is None:
        raise MissingSnapshot(f"strategy {strategy.name!r} needs the snapshot from task {task_id - 1}")
    if objective.requires_two_views and policy is not None and policy.view_count != 2:
        raise ValueError(f"objective {objective.name!r} requires a two-view augmentation policy")
    policy = policy or default_policy(objective, data.spec.dataset_name)

    if objective.has_head and task_id not in model.head_classes:
        model.add_head(task_id, data.spec.class_ids, seed=derive_seed(loop.seed, task_id, 1))

    predictor = None
    if strategy.uses_predictor and previous is not None:
        if strategy.name == "pfr":
            dim_in = dim_out = model.feature_dim
        else:
            dim_in = dim_out = model.projector_config.output_dim
        predictor = build_predictor(dim_in, dim_out, strategy, seed=derive_seed(loop.seed, task_id, 2))

    epochs = loop.epochs_for(task_id)
    log: list[dict] = []
    if epochs == 0:
        return TaskResult(model, snapshot(model), log)

    params = [p for p in model.parameters() if p.requires_grad]
    if predictor is not None:
        params += list(predictor.parameters())
    base_lr = loop.resolve_lr(objective)
    optimizer = torch.optim.SGD(params, lr=base_lr, momentum=loop.momentum, weight_decay=loop.weight_decay)
    generator = torch.Generator().manual_seed(derive_seed(loop.seed, task_id, 3))
    n = len(data)
    steps_per_epoch = max(1, n // loop.batch_size) if n >= loop.batch_size else 1
    total_steps = steps_per_epoch * epochs

    model.train()
    if predictor is not None:
        predictor.train()
    step = 0
    for epoch in range(epochs):
        epoch_log = []
        for batch in iterate_epoch(data, policy, loop.batch_size, generator):
            lr = base_lr
            if loop.schedule == "cosine":
                lr = base_lr * 0.5 * (1 + math.cos(math.pi * step / total_steps))
            for group in optimizer.param_groups:
                group["lr"] = lr
            losses = compute_losses(model, batch.views, batch.labels, task_id, objective, strategy,
                                    previous, predictor)
            # a zero-weighted penalty stays out of the graph so weight decay does not touch
            # parameters (old heads, predictor) that only the penalty reaches
            total = losses.base + strategy.penalty_weight * losses.penalty if strategy.penalty_weight else losses.base
            record = {
                "step": step, "epoch": epoch, "task": task_id,
                "base_loss": losses.base.item(), "penalty": losses.penalty.item(), "total": total.item(),
                "lr": lr,
            }
            if losses.correct is not None:
                record["train_acc"] = losses.correct / len(batch.labels)
            if not torch.isfinite(total):
                raise NonFiniteLoss(f"non-finite loss at task {task_id}, epoch {epoch}, step {step}", record)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            epoch_log.append(record)
            step += 1
        log.extend(epoch_log)
        if on_epoch_end is not None:
            on_epoch_end(epoch, epoch_log)
    model.eval()
    return TaskResult(model, snapshot(model), log)


# A boundary hook receives the report, the boundary index, the snapshot taken
# there and the first-boundary snapshot, and appends records to the report.
BoundaryHook = Callable[[MetricReport, int, FrozenSnapshot, FrozenSnapshot], None]


@dataclass
class SequenceResult:
    checkpoints: list[Path]
    report: MetricReport
    log: list[dict]
    final: FrozenSnapshot


class StopRun(Exception):
    """Raised internally to stop a sequence early after a boundary (for resume tests)."""


def run_sequence(
    sequence: TaskSequence,
    objective: ObjectiveConfig,
    strategy: StrategyConfig,
    loop: TrainLoopConfig,
    encoder: EncoderConfig | None = None,
    projector: ProjectorConfig = ProjectorConfig(),
    hooks: Iterable[BoundaryHook] = (),
    data_root=None,
    per_class: int | None = None,
    checkpoint_dir=None,
    resume: bool = False,
    log_path=None,
    run_id: str = "",
    config_echo: dict | None = None,
    stop_after: int | None = None,
) -> SequenceResult:
    """Train every task in order, evaluating and checkpointing at each boundary.

    With ``resume=True``, boundaries whose checkpoint already exists are
    loaded instead of retrained; since every task's randomness is seeded from
    (seed, task), the resumed result matches an uninterrupted run.
    """
    if encoder is None:
        sizes = {get_dataset_info(d).image_size for d in sequence.datasets}
        if len(sizes) != 1:
            raise ValueError(f"datasets in {sequence.spec!r} have different resolutions {sorted(sizes)}")
        encoder = EncoderConfig(input_size=sizes.pop())
    hooks = list(hooks)
    report = MetricReport(run_id=run_id)
    model = build_model(objective, encoder, projector, seed=loop.seed)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    log_file = Path(log_path) if log_path is not None else None
    all_log: list[dict] = []
    checkpoints: list[Path] = []
    first: FrozenSnapshot | None = None
    previous: FrozenSnapshot | None = None

    start = 0
    if resume and ckpt_dir is not None:
        while (ckpt_dir / f"task{start}.ckpt").exists() and start < len(sequence):
            start += 1
        if log_file is not None and log_file.exists():
            kept = [json.loads(line) for line in log_file.read_text().splitlines() if line.strip()]
            all_log = [r for r in kept if r["task"] < start]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        _write_log(log_file, all_log, mode="w")

    for spec in sequence:
        t = spec.task_id
        ckpt_path = ckpt_dir / f"task{t}.ckpt" if ckpt_dir is not None else None
        if t < start:
            model, _ = load_checkpoint(ckpt_path)
            snap = snapshot(model)
            logger.info("task %d: resumed from %s", t, ckpt_path)
        else:
            data = load_task(spec, root=data_root, per_class=per_class, seed=0)
            on_epoch = (lambda _e, recs: _write_log(log_file, recs, mode="a")) if log_file else None
            result = train_task(model, data, objective, strategy, loop, previous=previous, on_epoch_end=on_epoch)
            model, snap = result.model, result.snapshot
            all_log.extend(result.log)
            if ckpt_path is not None:
                save_checkpoint(ckpt_path, snap, {"task": t, "run_id": run_id, "config": config_echo or {}})
        if ckpt_path is not None:
            checkpoints.append(ckpt_path)
        if first is None:
            first = snap
        for hook in hooks:
            hook(report, t, snap, first)
        previous = snap
        if stop_after is not None and t >= stop_after and t < len(sequence) - 1:
            raise StopRun(f"stopped after task {t}")
    return SequenceResult(checkpoints, report, all_log, previous)


def _write_log(path: Path, records: list[dict], mode: str = "a") -> None:
    with open(path, mode, encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()
