"""Regularization against a frozen previous-task model: LwF, CaSSLe, PFR."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ProjectorDisabled, ShapeMismatch, ZeroVector
from .objectives import CE_FAMILY, ObjectiveConfig, two_view_loss

STRATEGIES = ("finetune", "lwf", "cassle", "pfr")

# which objectives each strategy may be paired with
COMPATIBLE = {
    "finetune": ("sl", "sl_mlp", "trex", "supcon", "barlow", "simclr"),
    "lwf": CE_FAMILY,
    "pfr": ("sl", "sl_mlp", "trex", "supcon", "barlow", "simclr"),
    "cassle": ("supcon", "barlow", "simclr"),
}

INCOMPATIBLE_REASON = {
    "lwf": "LwF distills old-head logits, so it needs a cross-entropy-family objective (sl, sl_mlp, trex)",
    "cassle": "CaSSLe distills through the method's own embedding loss; only supcon, barlow and simclr define one",
}


@dataclass(frozen=True)
class StrategyConfig:
    name: str = "finetune"
    penalty_weight: float = 1.0
    distill_temperature: float = 2.0
    predictor_depth: int = 2
    predictor_hidden: int = 2048

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; expected one of {STRATEGIES}")
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be >= 0")
        if self.distill_temperature <= 0:
            raise ValueError("distill_temperature must be > 0")
        if self.predictor_depth < 1:
            raise ValueError("predictor_depth must be >= 1")

    @property
    def uses_snapshot(self) -> bool:
        return self.name != "finetune"

    @property
    def uses_predictor(self) -> bool:
        return self.name in ("cassle", "pfr")


def check_compatible(objective: str, strategy: str) -> str | None:
    """Return an error message when the pair is not allowed, else None."""
    if objective not in COMPATIBLE.get(strategy, ()):
        return INCOMPATIBLE_REASON.get(strategy, f"{strategy} cannot be combined with {objective}")
    return None


def lwf_penalty(new_logits: torch.Tensor, old_logits: torch.Tensor, temperature: float = 2.0) -> torch.Tensor:
    """Mean KL(old || new) between temperature-softened class distributions."""
    if new_logits.shape != old_logits.shape:
        raise ShapeMismatch(f"logit shapes differ: {tuple(new_logits.shape)} vs {tuple(old_logits.shape)}")
    log_new = F.log_softmax(new_logits / temperature, dim=1)
    log_old = F.log_softmax(old_logits.detach() / temperature, dim=1)
    return F.kl_div(log_new, log_old, reduction="batchmean", log_target=True)


def _cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if (a.norm(dim=1) == 0).any() or (b.norm(dim=1) == 0).any():
        raise ZeroVector("cosine distance of a zero vector")
    return (1 - F.cosine_similarity(a, b, dim=1)).mean()


def pfr_penalty(current_feats: torch.Tensor, snapshot_feats: torch.Tensor,
                predictor: nn.Module | None = None) -> torch.Tensor:
    """Mean ``1 - cos(predictor(f_t), f_{t-1})`` with the past branch detached."""
    projected = current_feats if predictor is None else predictor(current_feats)
    return _cosine_distance(projected, snapshot_feats.detach())


def cassle_penalty(current_projected: torch.Tensor | None, snapshot_projected: torch.Tensor | None,
                   predictor: nn.Module | None, objective: ObjectiveConfig | str,
                   labels: torch.Tensor | None = None) -> torch.Tensor:
    """The method's own loss between ``predictor(z_t)`` and the frozen ``z_{t-1}``.

    ``objective`` may also be ``"cosine"`` for a plain cosine-distance base.
    """
    if current_projected is None or snapshot_projected is None:
        raise ProjectorDisabled("CaSSLe distills projector outputs; the model has no projector")
    predicted = current_projected if predictor is None else predictor(current_projected)
    target = snapshot_projected.detach()
    if objective == "cosine":
        return _cosine_distance(predicted, target)
    return two_view_loss(objective, predicted, target, labels)


def build_predictor(in_dim: int, out_dim: int, config: StrategyConfig, seed: int = 0) -> nn.Module:
    """Fresh temporal predictor (re-created at every task boundary)."""
    from .models.encoder import build_mlp

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build_mlp(in_dim, config.predictor_depth, config.predictor_hidden, out_dim, batch_norm=True)
