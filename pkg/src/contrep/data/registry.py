"""Dataset registry and on-disk loaders.

Every dataset is materialized as a uint8 array of shape ``N x H x W x 3`` plus
an int64 label vector in the dataset's *local* label space ``[0, num_classes)``.
Global labels are assigned later by the task sequence.

The data root is taken from the ``root`` argument, then from the
``CONTREP_DATA_ROOT`` environment variable, then ``./data``. Expected layouts::

    <root>/cifar-10-batches-py/{data_batch_1..5,test_batch}
    <root>/cifar-100-python/{train,test}
    <root>/svhn/{train_32x32.mat,test_32x32.mat}
    <root>/imagenet100/{train,val}/<wnid>/*.JPEG
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from ..exceptions import UnknownDataset

DATA_ROOT_ENV = "CONTREP_DATA_ROOT"


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    num_classes: int
    image_size: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    loader: Callable[[Path, str], tuple[np.ndarray, np.ndarray]]
    description: str = ""


@dataclass(frozen=True)
class ArrayDataset:
    """One split of one dataset held in memory."""

    name: str
    split: str
    images: np.ndarray  # uint8, N x H x W x 3
    labels: np.ndarray  # int64, local label space

    def __len__(self) -> int:
        return len(self.labels)


def resolve_root(root: str | os.PathLike | None = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def _unpickle(path: Path) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="bytes")


def _cifar_images(raw: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(raw.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1), dtype=np.uint8)


def _load_cifar10(root: Path, split: str):
    base = root / "cifar-10-batches-py"
    files = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    images, labels = [], []
    for fname in files:
        if not (base / fname).exists():
            raise FileNotFoundError(f"CIFAR10 file not found: {base / fname}")
        entry = _unpickle(base / fname)
        images.append(_cifar_images(np.asarray(entry[b"data"])))
        labels.append(np.asarray(entry[b"labels"], dtype=np.int64))
    return np.concatenate(images), np.concatenate(labels)


def _load_cifar100(root: Path, split: str):
    path = root / "cifar-100-python" / ("train" if split == "train" else "test")
    if not path.exists():
        raise FileNotFoundError(f"CIFAR100 file not found: {path}")
    entry = _unpickle(path)
    return _cifar_images(np.asarray(entry[b"data"])), np.asarray(entry[b"fine_labels"], dtype=np.int64)


def _load_svhn(root: Path, split: str):
    from scipy.io import loadmat

    path = root / "svhn" / f"{split}_32x32.mat"
    if not path.exists():
        raise FileNotFoundError(f"SVHN file not found: {path}")
    mat = loadmat(path)
    images = np.ascontiguousarray(mat["X"].transpose(3, 0, 1, 2), dtype=np.uint8)
    labels = mat["y"].astype(np.int64).reshape(-1)
    labels[labels == 10] = 0
    return images, labels


IN100_RESOLUTION = int(os.environ.get("CONTREP_IN100_RESOLUTION", "96"))


def _load_imagenet100(root: Path, split: str):
    from PIL import Image

    folder = root / "imagenet100" / ("train" if split == "train" else "val")
    cache = root / "imagenet100" / f"cache_{split}_{IN100_RESOLUTION}.npz"
    if cache.exists():
        with np.load(cache) as z:
            return z["images"], z["labels"]
    if not folder.exists():
        raise FileNotFoundError(f"ImageNet100 folder not found: {folder}")
    classes = sorted(p.name for p in folder.iterdir() if p.is_dir())
    images, labels = [], []
    for label, wnid in enumerate(classes):
        for img_path in sorted((folder / wnid).iterdir()):
            with Image.open(img_path) as img:
                img = img.convert("RGB").resize((IN100_RESOLUTION, IN100_RESOLUTION), Image.BILINEAR)
                images.append(np.asarray(img, dtype=np.uint8))
            labels.append(label)
    out = np.stack(images), np.asarray(labels, dtype=np.int64)
    np.savez(cache, images=out[0], labels=out[1])
    return out


def _load_digits(root: Path, split: str):
    # Bundled with scikit-learn; no files needed under root.
    import torch
    from sklearn.datasets import load_digits
    from sklearn.model_selection import train_test_split

    digits = load_digits()
    idx_train, idx_test = train_test_split(
        np.arange(len(digits.target)), test_size=0.25, stratify=digits.target, random_state=0
    )
    idx = np.sort(idx_train if split == "train" else idx_test)
    small = torch.tensor(digits.images[idx] / 16.0, dtype=torch.float32)[:, None]
    big = torch.nn.functional.interpolate(small, size=16, mode="bilinear", align_corners=False)
    gray = (big.clamp(0, 1) * 255).round().to(torch.uint8)[:, 0].numpy()
    images = np.repeat(gray[..., None], 3, axis=-1)
    return np.ascontiguousarray(images), digits.target[idx].astype(np.int64)


_REGISTRY: dict[str, DatasetInfo] = {}


def register_dataset(info: DatasetInfo, overwrite: bool = False) -> None:
    if info.name in _REGISTRY and not overwrite:
        raise ValueError(f"dataset {info.name!r} already registered")
    _REGISTRY[info.name] = info
    _load_full.cache_clear()
    load_split.cache_clear()


def get_dataset_info(name: str) -> DatasetInfo:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownDataset(f"unknown dataset {name!r}; registered: {sorted(_REGISTRY)}") from None


def registered_datasets() -> list[str]:
    return sorted(_REGISTRY)


@lru_cache(maxsize=16)
def _load_full(name: str, root: str, split: str) -> tuple[np.ndarray, np.ndarray]:
    info = get_dataset_info(name)
    images, labels = info.loader(Path(root), split)
    images.setflags(write=False)
    labels.setflags(write=False)
    return images, labels


@lru_cache(maxsize=32)
def load_split(
    name: str,
    split: str = "train",
    root: str | None = None,
    per_class: int | None = None,
    seed: int = 0,
) -> ArrayDataset:
    """Load a dataset split, optionally keeping ``per_class`` samples per class.

    Subsampling is a deterministic function of ``seed``; kept indices are sorted
    so the original ordering is preserved.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    get_dataset_info(name)
    images, labels = _load_full(name, str(resolve_root(root)), split)
    if per_class is not None:
        rng = np.random.default_rng(seed)
        keep = []
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            if len(idx) > per_class:
                idx = np.sort(rng.choice(idx, size=per_class, replace=False))
            keep.append(idx)
        keep = np.sort(np.concatenate(keep))
        images, labels = images[keep], labels[keep]
    return ArrayDataset(name=name, split=split, images=images, labels=labels)


register_dataset(DatasetInfo(
    "C10", 10, 32, (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616), _load_cifar10, "CIFAR-10"))
register_dataset(DatasetInfo(
    "C100", 100, 32, (0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762), _load_cifar100, "CIFAR-100"))
register_dataset(DatasetInfo(
    "SVHN", 10, 32, (0.4377, 0.4438, 0.4728), (0.1980, 0.2010, 0.1970), _load_svhn, "SVHN cropped digits"))
register_dataset(DatasetInfo(
    "IN100", 100, IN100_RESOLUTION, (0.485, 0.456, 0.406), (0.229, 0.224, 0.225), _load_imagenet100,
    "ImageNet-100 subset, downsampled"))
register_dataset(DatasetInfo(
    "DIGITS", 10, 16, (0.305, 0.305, 0.305), (0.324, 0.324, 0.324), _load_digits,
    "scikit-learn 8x8 digits upsampled to 16x16 RGB (bundled, used for desk-scale CI)"))
