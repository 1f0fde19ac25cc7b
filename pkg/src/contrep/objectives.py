"""Training losses: cross-entropy, cosine softmax, SupCon, Barlow Twins, NT-Xent.

All losses are pure functions of their tensor inputs and differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import DegenerateBatch, LabelOutOfRange, NoPositive, ShapeMismatch, ZeroVector


@dataclass(frozen=True)
class MethodSpec:
    """How a training objective wires the model."""

    projector: bool
    l2_normalize: bool
    head_type: str | None  # None: no classification head
    head_input: str
    two_views: bool
    labels: bool
    default_temperature: float | None


METHODS: dict[str, MethodSpec] = {
    "sl": MethodSpec(False, False, "linear", "backbone", False, True, None),
    "sl_mlp": MethodSpec(True, False, "linear", "projector", False, True, None),
    "trex": MethodSpec(True, True, "cosine", "projector", False, True, 0.1),
    "supcon": MethodSpec(True, True, None, "projector", True, True, 0.07),
    "barlow": MethodSpec(True, False, None, "projector", True, False, None),
    "simclr": MethodSpec(True, False, None, "projector", True, False, 0.1),
}

CE_FAMILY = ("sl", "sl_mlp", "trex")


@dataclass(frozen=True)
class ObjectiveConfig:
    name: str = "sl"
    temperature: float | None = None
    barlow_lambda: float = 0.005

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown objective {self.name!r}; expected one of {sorted(METHODS)}")
        if self.temperature is None:
            object.__setattr__(self, "temperature", METHODS[self.name].default_temperature)
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.barlow_lambda <= 0:
            raise ValueError("barlow_lambda must be > 0")

    @property
    def method(self) -> MethodSpec:
        return METHODS[self.name]

    @property
    def requires_two_views(self) -> bool:
        return self.method.two_views

    @property
    def requires_labels(self) -> bool:
        return self.method.labels

    @property
    def has_head(self) -> bool:
        return self.method.head_type is not None


def _check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes}), got range "
                              f"[{int(labels.min())}, {int(labels.max())}]")


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy."""
    _check_labels(labels, logits.shape[1])
    return F.cross_entropy(logits, labels)


def cosine_softmax_loss(features: torch.Tensor, class_weights: torch.Tensor, labels: torch.Tensor,
                        temperature: float = 0.1) -> torch.Tensor:
    """Cross-entropy over ``cos(feature, weight_c) / temperature``."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    _check_labels(labels, class_weights.shape[0])
    if (features.norm(dim=1) == 0).any() or (class_weights.norm(dim=1) == 0).any():
        raise ZeroVector("cosine softmax needs non-zero features and class weights")
    logits = F.normalize(features, dim=1) @ F.normalize(class_weights, dim=1).T / temperature
    return F.cross_entropy(logits, labels)


def supcon_loss(embeddings: torch.Tensor, labels: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Supervised contrastive loss, positives averaged outside the log.

    ``embeddings`` are expected to be l2-normalized, with all views stacked
    along the batch dimension and ``labels`` repeated accordingly.
    """
    n = embeddings.shape[0]
    if labels.shape[0] != n:
        raise ShapeMismatch("labels and embeddings disagree on batch size")
    self_mask = torch.eye(n, dtype=torch.bool, device=embeddings.device)
    pos = (labels[:, None] == labels[None, :]) & ~self_mask
    n_pos = pos.sum(dim=1)
    if (n_pos == 0).any():
        raise NoPositive(f"anchors {torch.nonzero(n_pos == 0).flatten().tolist()} have no positive")
    sim = embeddings @ embeddings.T / temperature
    sim = sim.masked_fill(self_mask, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    per_anchor = -log_prob.masked_fill(~pos, 0.0).sum(dim=1) / n_pos
    return per_anchor.mean()


def barlow_twins_loss(z1: torch.Tensor, z2: torch.Tensor, lambd: float = 0.005) -> torch.Tensor:
    """Redundancy-reduction loss on the batch cross-correlation matrix.

    Each dimension is standardized over the batch (population std) before the
    cross-correlation ``C = z1n^T z2n / B`` is formed.
    """
    if z1.shape != z2.shape:
        raise ShapeMismatch(f"z1 {tuple(z1.shape)} and z2 {tuple(z2.shape)} differ")
    b = z1.shape[0]
    if b < 2:
        raise DegenerateBatch("batch size must be >= 2")
    s1 = z1.std(dim=0, unbiased=False)
    s2 = z2.std(dim=0, unbiased=False)
    if (s1 == 0).any() or (s2 == 0).any():
        raise DegenerateBatch("a dimension has zero variance over the batch")
    z1n = (z1 - z1.mean(dim=0)) / s1
    z2n = (z2 - z2.mean(dim=0)) / s2
    c = z1n.T @ z2n / b
    diag = torch.diagonal(c)
    on_diag = (1 - diag).pow(2).sum()
    off_diag = c.pow(2).sum() - diag.pow(2).sum()
    return on_diag + lambd * off_diag


def simclr_loss(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """NT-Xent over 2B anchors; row ``i`` of ``z1`` is the positive of row ``i`` of ``z2``."""
    if z1.shape != z2.shape:
        raise ShapeMismatch(f"z1 {tuple(z1.shape)} and z2 {tuple(z2.shape)} differ")
    b = z1.shape[0]
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    sim = z @ z.T / temperature
    sim = sim.masked_fill(torch.eye(2 * b, dtype=torch.bool, device=z.device), float("-inf"))
    pos_idx = torch.cat([torch.arange(b, 2 * b), torch.arange(0, b)]).to(z.device)
    log_prob = sim[torch.arange(2 * b, device=z.device), pos_idx] - torch.logsumexp(sim, dim=1)
    return -log_prob.mean()


def two_view_loss(objective: ObjectiveConfig, z1: torch.Tensor, z2: torch.Tensor,
                  labels: torch.Tensor | None = None) -> torch.Tensor:
    """Apply an embedding objective to a pair of aligned embedding batches."""
    if objective.name == "barlow":
        return barlow_twins_loss(z1, z2, objective.barlow_lambda)
    if objective.name == "simclr":
        return simclr_loss(z1, z2, objective.temperature)
    if objective.name == "supcon":
        z = F.normalize(torch.cat([z1, z2]), dim=1)
        return supcon_loss(z, torch.cat([labels, labels]), objective.temperature)
    raise ValueError(f"{objective.name!r} is not a two-view embedding objective")
