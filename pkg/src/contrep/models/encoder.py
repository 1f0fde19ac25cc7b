"""Backbone + optional MLP projector + per-task heads, with frozen snapshots."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from ..exceptions import ProjectorDisabled, ShapeMismatch, UnknownHead
from .resnet import BACKBONES

HEAD_INPUTS = ("backbone", "projector")
HEAD_TYPES = ("linear", "cosine")


@dataclass(frozen=True)
class EncoderConfig:
    backbone_name: str = "resnet18"
    width: int = 64
    small_input_stem: bool = True
    input_size: int = 32
    feature_dim: int | None = None

    def __post_init__(self):
        if self.backbone_name not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone_name!r}; known: {sorted(BACKBONES)}")
        expected = 8 * self.width
        if self.feature_dim is None:
            object.__setattr__(self, "feature_dim", expected)
        elif self.feature_dim != expected:
            raise ValueError(f"feature_dim {self.feature_dim} does not match backbone output {expected}")


@dataclass(frozen=True)
class ProjectorConfig:
    enabled: bool = False
    depth: int = 3
    hidden_dim: int = 2048
    output_dim: int = 2048
    batch_norm: bool = True
    output_l2_normalize: bool = False

    def __post_init__(self):
        if self.enabled and self.depth < 1:
            raise ValueError("projector depth must be >= 1 when enabled")


def build_mlp(in_dim: int, depth: int, hidden_dim: int, out_dim: int, batch_norm: bool = True) -> nn.Sequential:
    """``depth`` linear layers with (BN +) ReLU between them."""
    layers: list[nn.Module] = []
    dim = in_dim
    for _ in range(depth - 1):
        layers.append(nn.Linear(dim, hidden_dim, bias=not batch_norm))
        if batch_norm:
            layers.append(nn.BatchNorm1d(hidden_dim))
        layers.append(nn.ReLU(inplace=True))
        dim = hidden_dim
    layers.append(nn.Linear(dim, out_dim))
    return nn.Sequential(*layers)


class CosineHead(nn.Module):
    """Cosine classifier: ``cos(x, w_c) / temperature``."""

    def __init__(self, in_dim: int, num_classes: int, temperature: float = 0.1):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, in_dim))
        nn.init.normal_(self.weight, std=0.01)
        self.temperature = temperature

    def forward(self, x):
        return F.normalize(x, dim=1) @ F.normalize(self.weight, dim=1).T / self.temperature


class ContinualModel(nn.Module):
    """Encoder state carried across a task sequence.

    Evaluation consumes :meth:`forward_features` only; the projector and the
    heads exist for training.
    """

    def __init__(
        self,
        encoder: EncoderConfig = EncoderConfig(),
        projector: ProjectorConfig = ProjectorConfig(),
        head_type: str = "linear",
        head_input: str = "backbone",
        cosine_temperature: float = 0.1,
        seed: int = 0,
    ):
        super().__init__()
        if head_type not in HEAD_TYPES:
            raise ValueError(f"head_type must be one of {HEAD_TYPES}")
        if head_input not in HEAD_INPUTS:
            raise ValueError(f"head_input must be one of {HEAD_INPUTS}")
        if head_input == "projector" and not projector.enabled:
            raise ProjectorDisabled("head_input='projector' requires an enabled projector")
        self.encoder_config = encoder
        self.projector_config = projector
        self.head_type = head_type
        self.head_input = head_input
        self.cosine_temperature = cosine_temperature
        self.head_classes: dict[int, tuple[int, ...]] = {}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = BACKBONES[encoder.backbone_name](encoder.width, encoder.small_input_stem)
            self.projector = None
            if projector.enabled:
                self.projector = build_mlp(encoder.feature_dim, projector.depth, projector.hidden_dim,
                                           projector.output_dim, projector.batch_norm)
        self.heads = nn.ModuleDict()

    # -- structure -------------------------------------------------------
    @property
    def feature_dim(self) -> int:
        return self.encoder_config.feature_dim

    @property
    def head_in_dim(self) -> int:
        return self.projector_config.output_dim if self.head_input == "projector" else self.feature_dim

    def add_head(self, task_id: int, class_ids, seed: int = 0) -> nn.Module:
        class_ids = tuple(int(c) for c in class_ids)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            if self.head_type == "cosine":
                head = CosineHead(self.head_in_dim, len(class_ids), self.cosine_temperature)
            else:
                head = nn.Linear(self.head_in_dim, len(class_ids))
        self.heads[str(task_id)] = head
        self.head_classes[task_id] = class_ids
        return head

    def head(self, task_id: int) -> nn.Module:
        key = str(task_id)
        if key not in self.heads:
            raise UnknownHead(f"no head for task {task_id}; have {sorted(self.head_classes)}")
        return self.heads[key]

    def local_labels(self, task_id: int, labels: torch.Tensor) -> torch.Tensor:
        """Map global labels to column indices of the task's head."""
        classes = torch.tensor(self.head_classes[task_id], dtype=torch.long)
        idx = torch.searchsorted(classes, labels)
        if (idx >= len(classes)).any() or (classes[idx.clamp(max=len(classes) - 1)] != labels).any():
            raise ValueError(f"labels outside the classes of head {task_id}")
        return idx

    # -- forward paths ---------------------------------------------------
    def _check_input(self, images: torch.Tensor) -> None:
        size = self.encoder_config.input_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != size or images.shape[3] != size:
            raise ShapeMismatch(f"expected B x 3 x {size} x {size} images, got {tuple(images.shape)}")

    def forward_features(self, images: torch.Tensor) -> torch.Tensor:
        """Backbone features; no projector, no head."""
        self._check_input(images)
        return self.backbone(images)

    def project(self, features: torch.Tensor) -> torch.Tensor:
        if self.projector is None:
            raise ProjectorDisabled("model has no projector")
        z = self.projector(features)
        if self.projector_config.output_l2_normalize:
            z = F.normalize(z, dim=1)
        return z

    def forward_projected(self, images: torch.Tensor) -> torch.Tensor:
        return self.project(self.forward_features(images))

    def head_features(self, features: torch.Tensor, projected: torch.Tensor | None = None) -> torch.Tensor:
        if self.head_input == "backbone":
            return features
        return projected if projected is not None else self.project(features)

    def logits_from(self, head_in: torch.Tensor, task_id: int | None = None) -> torch.Tensor:
        if task_id is not None:
            return self.head(task_id)(head_in)
        if not self.head_classes:
            raise UnknownHead("model has no heads")
        return torch.cat([self.head(t)(head_in) for t in sorted(self.head_classes)], dim=1)

    def forward_logits(self, images: torch.Tensor, task_id: int | None = None) -> torch.Tensor:
        """Logits of one head, or of all heads concatenated in task order when ``task_id`` is None."""
        if task_id is not None:
            self.head(task_id)
        return self.logits_from(self.head_features(self.forward_features(images)), task_id)

    def forward(self, images):
        return self.forward_features(images)

    # -- persistence -----------------------------------------------------
    def describe(self) -> dict:
        return {
            "encoder": asdict(self.encoder_config),
            "projector": asdict(self.projector_config),
            "head_type": self.head_type,
            "head_input": self.head_input,
            "cosine_temperature": self.cosine_temperature,
            "heads": {int(t): list(c) for t, c in self.head_classes.items()},
        }

    @classmethod
    def from_description(cls, desc: dict) -> "ContinualModel":
        model = cls(EncoderConfig(**desc["encoder"]), ProjectorConfig(**desc["projector"]),
                    desc["head_type"], desc["head_input"], desc["cosine_temperature"])
        for t, classes in sorted((int(k), v) for k, v in desc["heads"].items()):
            model.add_head(t, classes)
        return model


class FrozenSnapshot:
    """Immutable deep copy of a model at a task boundary.

    Always runs in eval mode without autograd, so calls never mutate it.
    """

    def __init__(self, model: ContinualModel):
        self._model = copy.deepcopy(model)
        self._model.eval()
        self._model.requires_grad_(False)

    @property
    def model(self) -> ContinualModel:
        return self._model

    @property
    def head_classes(self):
        return dict(self._model.head_classes)

    def forward_features(self, images):
        with torch.no_grad():
            return self._model.forward_features(images)

    def forward_projected(self, images):
        with torch.no_grad():
            return self._model.forward_projected(images)

    def forward_logits(self, images, task_id=None):
        with torch.no_grad():
            return self._model.forward_logits(images, task_id)

    def thaw(self) -> ContinualModel:
        """Trainable copy of the snapshotted model."""
        model = copy.deepcopy(self._model)
        model.requires_grad_(True)
        return model

    def state_dict(self):
        return self._model.state_dict()


def snapshot(state: ContinualModel | FrozenSnapshot) -> FrozenSnapshot:
    model = state.model if isinstance(state, FrozenSnapshot) else state
    return FrozenSnapshot(model)


def save_checkpoint(path, state: ContinualModel | FrozenSnapshot, meta: dict | None = None) -> Path:
    model = state.model if isinstance(state, FrozenSnapshot) else state
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": 1,
        "model": model.describe(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "meta": dict(meta or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[ContinualModel, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    model = ContinualModel.from_description(payload["model"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["meta"]
