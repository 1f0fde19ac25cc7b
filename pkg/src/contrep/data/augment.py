"""Batched, generator-driven image augmentation.

All random parameters are drawn from an explicit ``torch.Generator`` in a fixed
order, so a batch is a pure function of (images, policy, generator state).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.transforms.v2 import functional as TF

from ..exceptions import EmptyTask
from .streams import TaskData


@dataclass(frozen=True)
class AugmentationPolicy:
    view_count: int = 1
    crop: str = "pad"  # "pad" (translate with zero padding) | "resized" | "none"
    pad: int = 4
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    jitter_p: float = 0.0
    grayscale_p: float = 0.0
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.view_count not in (1, 2):
            raise ValueError(f"view_count must be 1 or 2, got {self.view_count}")
        if self.crop not in ("pad", "resized", "none"):
            raise ValueError(f"unknown crop mode {self.crop!r}")


def ssl_policy(mean, std, view_count: int = 2) -> AugmentationPolicy:
    """Two-view pipeline used by the contrastive and redundancy-reduction objectives."""
    return AugmentationPolicy(
        view_count=view_count, crop="resized", crop_scale=(0.2, 1.0), flip_p=0.5,
        jitter=(0.4, 0.4, 0.4, 0.1), jitter_p=0.8, grayscale_p=0.2,
        mean=tuple(mean), std=tuple(std),
    )


def light_policy(mean, std, pad: int = 4) -> AugmentationPolicy:
    """Pad-and-crop plus horizontal flip, for the cross-entropy family."""
    return AugmentationPolicy(view_count=1, crop="pad", pad=pad, flip_p=0.5, mean=tuple(mean), std=tuple(std))


def to_float(images: np.ndarray | torch.Tensor) -> torch.Tensor:
    """uint8 ``N x H x W x 3`` -> float ``N x 3 x H x W`` in [0, 1]."""
    x = torch.as_tensor(np.array(images, copy=True)) if isinstance(images, np.ndarray) else torch.as_tensor(images)
    if x.dtype != torch.uint8:
        raise TypeError(f"expected uint8 images, got {x.dtype}")
    return x.permute(0, 3, 1, 2).float().div_(255.0)


def normalize(x: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.tensor(mean, dtype=x.dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(1, -1, 1, 1)
    return (x - m) / s


def eval_tensor(images: np.ndarray, mean, std) -> torch.Tensor:
    return normalize(to_float(images), mean, std)


def _uniform(n, lo, hi, g):
    return lo + (hi - lo) * torch.rand(n, generator=g)


def _geometric(x: torch.Tensor, policy: AugmentationPolicy, g: torch.Generator) -> torch.Tensor:
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=g) < policy.flip_p
    sx = torch.ones(n)
    sy = torch.ones(n)
    tx = torch.zeros(n)
    ty = torch.zeros(n)
    if policy.crop == "resized":
        area = _uniform(n, *policy.crop_scale, g)
        log_r = _uniform(n, math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1]), g)
        ratio = torch.exp(log_r)
        sx = torch.sqrt(area * ratio).clamp(max=1.0)
        sy = torch.sqrt(area / ratio).clamp(max=1.0)
        tx = (2 * torch.rand(n, generator=g) - 1) * (1 - sx)
        ty = (2 * torch.rand(n, generator=g) - 1) * (1 - sy)
    elif policy.crop == "pad" and policy.pad > 0:
        dx = torch.randint(-policy.pad, policy.pad + 1, (n,), generator=g)
        dy = torch.randint(-policy.pad, policy.pad + 1, (n,), generator=g)
        tx = 2 * dx.float() / w
        ty = 2 * dy.float() / h
    if policy.crop == "none" and not flip.any():
        return x
    theta = torch.zeros(n, 2, 3)
    theta[:, 0, 0] = torch.where(flip, -sx, sx)
    theta[:, 0, 2] = tx
    theta[:, 1, 1] = sy
    theta[:, 1, 2] = ty
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _gray(x: torch.Tensor) -> torch.Tensor:
    r, gch, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    return 0.299 * r + 0.587 * gch + 0.114 * b


def _color(x: torch.Tensor, policy: AugmentationPolicy, g: torch.Generator) -> torch.Tensor:
    n = x.shape[0]
    bri, con, sat, hue = policy.jitter
    apply = torch.rand(n, generator=g) < policy.jitter_p
    fb = _uniform(n, max(0.0, 1 - bri), 1 + bri, g).view(-1, 1, 1, 1)
    fc = _uniform(n, max(0.0, 1 - con), 1 + con, g).view(-1, 1, 1, 1)
    fs = _uniform(n, max(0.0, 1 - sat), 1 + sat, g).view(-1, 1, 1, 1)
    fh = _uniform(n, -hue, hue, g)
    to_gray = torch.rand(n, generator=g) < policy.grayscale_p
    if policy.jitter_p > 0 and apply.any():
        a = apply.view(-1, 1, 1, 1)
        y = (x * fb).clamp(0, 1)
        m = _gray(y).mean(dim=(1, 2, 3), keepdim=True)
        y = ((y - m) * fc + m).clamp(0, 1)
        gy = _gray(y)
        y = ((y - gy) * fs + gy).clamp(0, 1)
        if hue > 0:
            y = torch.stack([TF.adjust_hue(img, float(h)) for img, h in zip(y, fh)])
        x = torch.where(a, y, x)
    if policy.grayscale_p > 0 and to_gray.any():
        x = torch.where(to_gray.view(-1, 1, 1, 1), _gray(x).expand_as(x), x)
    return x


def augment(images: np.ndarray, policy: AugmentationPolicy, generator: torch.Generator) -> torch.Tensor:
    """Apply one random view of ``policy`` to a uint8 batch; returns normalized floats."""
    x = to_float(images)
    x = _geometric(x, policy, generator)
    x = _color(x, policy, generator)
    return normalize(x, policy.mean, policy.std)


@dataclass
class LabeledBatch:
    views: list[torch.Tensor]
    labels: torch.Tensor
    indices: torch.Tensor = field(default=None, repr=False)


def batch_from_indices(data: TaskData, indices, policy: AugmentationPolicy,
                       generator: torch.Generator) -> LabeledBatch:
    idx = np.asarray(indices, dtype=np.int64)
    images = data.images[idx]
    views = [augment(images, policy, generator) for _ in range(policy.view_count)]
    return LabeledBatch(views=views, labels=torch.as_tensor(data.labels[idx]), indices=torch.as_tensor(idx))


def make_batch(data: TaskData, policy: AugmentationPolicy, batch_size: int,
               generator: torch.Generator) -> LabeledBatch:
    """Sample ``batch_size`` task samples (without replacement when possible) and augment them."""
    n = len(data)
    if n == 0:
        raise EmptyTask(f"task {data.spec.task_id} has no samples")
    if batch_size <= n:
        idx = torch.randperm(n, generator=generator)[:batch_size]
    else:
        idx = torch.randint(0, n, (batch_size,), generator=generator)
    return batch_from_indices(data, idx.numpy(), policy, generator)


def iterate_epoch(data: TaskData, policy: AugmentationPolicy, batch_size: int,
                  generator: torch.Generator, drop_last: bool = True):
    """Yield augmented batches covering one shuffled pass over ``data``."""
    n = len(data)
    if n == 0:
        raise EmptyTask(f"task {data.spec.task_id} has no samples")
    perm = torch.randperm(n, generator=generator).numpy()
    stop = n - n % batch_size if (drop_last and n >= batch_size) else n
    for start in range(0, stop, batch_size):
        yield batch_from_indices(data, perm[start:start + batch_size], policy, generator)
