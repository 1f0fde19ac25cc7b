"""Task sequences: class-incremental splits and dataset-shift streams."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from ..exceptions import EmptyTask, NotDivisible, SequenceSyntaxError
from .registry import ArrayDataset, get_dataset_info, load_split

CLASS_INCREMENTAL = "class-incremental"
DATASET_SHIFT = "dataset-shift"


@dataclass(frozen=True)
class TaskSpec:
    """One task: a dataset slice restricted to ``class_ids`` (global labels).

    ``label_offset`` maps the dataset's local labels into the global space.
    """

    task_id: int
    dataset_name: str
    class_ids: tuple[int, ...]
    split: str = "train"
    label_offset: int = 0

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        if not ids:
            raise ValueError("class_ids must be non-empty")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError(f"class_ids must be strictly increasing, got {ids}")
        object.__setattr__(self, "class_ids", ids)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def local_class_ids(self) -> np.ndarray:
        return np.asarray(self.class_ids, dtype=np.int64) - self.label_offset

    def with_split(self, split: str) -> "TaskSpec":
        return replace(self, split=split)


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple[TaskSpec, ...]
    kind: str
    spec: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.kind not in (CLASS_INCREMENTAL, DATASET_SHIFT):
            raise ValueError(f"unknown sequence kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i) -> TaskSpec:
        return self.tasks[i]

    @property
    def datasets(self) -> list[str]:
        """Datasets in first-appearance order."""
        return list(dict.fromkeys(t.dataset_name for t in self.tasks))

    def label_offset(self, dataset_name: str) -> int:
        for t in self.tasks:
            if t.dataset_name == dataset_name:
                return t.label_offset
        raise KeyError(dataset_name)

    @property
    def num_classes(self) -> int:
        return sum(get_dataset_info(d).num_classes for d in self.datasets)


def build_class_split_sequence(dataset_name: str, n_tasks: int, seed: int = 0) -> TaskSequence:
    """Permute the dataset's classes with ``seed`` and chunk them into ``n_tasks``."""
    info = get_dataset_info(dataset_name)
    if n_tasks < 1 or info.num_classes % n_tasks:
        raise NotDivisible(f"{dataset_name} has {info.num_classes} classes, not divisible into {n_tasks} tasks")
    order = np.random.default_rng(seed).permutation(info.num_classes)
    chunks = np.split(order, n_tasks)
    tasks = tuple(
        TaskSpec(task_id=i, dataset_name=dataset_name, class_ids=tuple(sorted(int(c) for c in chunk)))
        for i, chunk in enumerate(chunks)
    )
    return TaskSequence(tasks, CLASS_INCREMENTAL, spec=f"{dataset_name}/{n_tasks}")


def build_shift_sequence(dataset_names) -> TaskSequence:
    """One task per dataset, each holding that dataset's full class set.

    Each dataset owns a contiguous global label range, in sequence order.
    """
    names = list(dataset_names)
    if not names:
        raise ValueError("need at least one dataset")
    if len(set(names)) != len(names):
        raise ValueError(f"datasets may not repeat in a shift sequence: {names}")
    tasks, offset = [], 0
    for i, name in enumerate(names):
        n = get_dataset_info(name).num_classes
        tasks.append(TaskSpec(task_id=i, dataset_name=name, class_ids=tuple(range(offset, offset + n)),
                              label_offset=offset))
        offset += n
    return TaskSequence(tuple(tasks), DATASET_SHIFT, spec="->".join(names))


_SPLIT_RE = re.compile(r"^\s*([A-Za-z0-9_]+)\s*/\s*(\d+)\s*$")


def parse_sequence(text: str, seed: int = 0) -> TaskSequence:
    """Parse ``"C100/5"`` (class split) or ``"C10->SVHN"`` (dataset shift)."""
    text = text.strip().replace("→", "->")
    if not text:
        raise SequenceSyntaxError("empty sequence string")
    m = _SPLIT_RE.match(text)
    if m:
        return build_class_split_sequence(m.group(1), int(m.group(2)), seed)
    parts = [p.strip() for p in text.split("->")]
    if any(not re.fullmatch(r"[A-Za-z0-9_]+", p) for p in parts):
        raise SequenceSyntaxError(f"cannot parse sequence {text!r}; expected 'D/N' or 'A->B'")
    return build_shift_sequence(parts)


@dataclass(frozen=True)
class TaskData:
    """Materialized samples of a task, labels in the global space."""

    spec: TaskSpec
    images: np.ndarray
    labels: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.labels)


def select_classes(data: ArrayDataset, spec: TaskSpec) -> TaskData:
    mask = np.isin(data.labels, spec.local_class_ids())
    if not mask.any():
        raise EmptyTask(f"task {spec.task_id} ({spec.dataset_name}) has no samples in split {data.split!r}")
    return TaskData(spec=spec, images=data.images[mask], labels=data.labels[mask] + spec.label_offset)


def load_task(spec: TaskSpec, root=None, per_class: int | None = None, seed: int = 0) -> TaskData:
    data = load_split(spec.dataset_name, spec.split, root=root, per_class=per_class, seed=seed)
    return select_classes(data, spec)
