import itertools
import pickle

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from contrep.data import (
    AugmentationPolicy, TaskData, TaskSpec, build_class_split_sequence, build_shift_sequence,
    get_dataset_info, iterate_epoch, light_policy, load_split, load_task, make_batch, parse_sequence,
    register_dataset, ssl_policy,
)
from contrep.data.registry import DatasetInfo
from contrep.exceptions import EmptyTask, NotDivisible, SequenceSyntaxError, UnknownDataset

MEAN, STD = (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)


def _task_data(n=12, size=32, classes=(3, 7), seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, size, size, 3), dtype=np.uint8)
    labels = np.array([classes[i % len(classes)] for i in range(n)])
    return TaskData(TaskSpec(0, "C10", tuple(classes)), images, labels)


def test_class_split_c100_5():
    seq = build_class_split_sequence("C100", 5, 0)
    assert len(seq) == 5
    assert all(t.num_classes == 20 for t in seq)
    assert seq.kind == "class-incremental"


def test_class_split_c100_20():
    seq = build_class_split_sequence("C100", 20, 0)
    assert len(seq) == 20 and all(t.num_classes == 5 for t in seq)


def test_class_split_not_divisible():
    with pytest.raises(NotDivisible):
        build_class_split_sequence("C10", 3, 0)


def test_unknown_dataset():
    with pytest.raises(UnknownDataset):
        build_class_split_sequence("MNIST", 2, 0)
    with pytest.raises(UnknownDataset):
        build_shift_sequence(["C10", "NOPE"])


@settings(max_examples=40, deadline=None)
@given(n_tasks=st.sampled_from([1, 2, 4, 5, 10, 20, 25, 50, 100]), seed=st.integers(0, 2**31))
def test_class_split_disjoint_and_covering(n_tasks, seed):
    seq = build_class_split_sequence("C100", n_tasks, seed)
    for a, b in itertools.combinations(seq.tasks, 2):
        assert not set(a.class_ids) & set(b.class_ids)
    assert sorted(c for t in seq for c in t.class_ids) == list(range(100))
    assert len({t.num_classes for t in seq}) == 1
    assert all(list(t.class_ids) == sorted(t.class_ids) for t in seq)
    assert build_class_split_sequence("C100", n_tasks, seed) == seq


def test_class_split_seed_changes_assignment():
    assert build_class_split_sequence("C100", 5, 0) != build_class_split_sequence("C100", 5, 1)


def test_shift_sequence():
    seq = build_shift_sequence(["C10", "SVHN"])
    assert len(seq) == 2 and seq.kind == "dataset-shift"
    assert seq[0].class_ids == tuple(range(10)) and seq[0].dataset_name == "C10"
    assert seq[1].class_ids == tuple(range(10, 20)) and seq[1].label_offset == 10
    assert seq.num_classes == 20
    assert len(build_shift_sequence(["C10"])) == 1
    back = build_shift_sequence(["C100", "C10"])
    assert len(back) == 2 and back[1].class_ids == tuple(range(100, 110))


def test_shift_sequence_rejects_repeats():
    with pytest.raises(ValueError):
        build_shift_sequence(["C10", "C10"])


@pytest.mark.parametrize("text,kind,n", [
    ("C100/5", "class-incremental", 5),
    (" C10 / 2 ", "class-incremental", 2),
    ("C10->SVHN", "dataset-shift", 2),
    ("C10 → SVHN", "dataset-shift", 2),
    ("SVHN->C10->C100", "dataset-shift", 3),
])
def test_parse_sequence(text, kind, n):
    seq = parse_sequence(text)
    assert seq.kind == kind and len(seq) == n


@pytest.mark.parametrize("text", ["", "C100/", "C10->", "C10-SVHN", "C100/x"])
def test_parse_sequence_errors(text):
    with pytest.raises(SequenceSyntaxError):
        parse_sequence(text)


def test_taskspec_invariants():
    with pytest.raises(ValueError):
        TaskSpec(0, "C10", ())
    with pytest.raises(ValueError):
        TaskSpec(0, "C10", (3, 1))
    with pytest.raises(ValueError):
        TaskSpec(0, "C10", (1, 1))
    spec = TaskSpec(1, "SVHN", (10, 11), label_offset=10)
    assert spec.local_class_ids().tolist() == [0, 1]
    assert spec.with_split("test").split == "test"


def test_make_batch_two_views_shape():
    data = _task_data()
    batch = make_batch(data, ssl_policy(MEAN, STD), 4, torch.Generator().manual_seed(0))
    assert len(batch.views) == 2
    assert batch.views[0].shape == batch.views[1].shape == (4, 3, 32, 32)
    assert batch.labels.shape == (4,)
    # two views really are different augmentations of the same images
    assert not torch.equal(batch.views[0], batch.views[1])


def test_make_batch_single_view_labels_in_task():
    data = _task_data()
    batch = make_batch(data, light_policy(MEAN, STD), 8, torch.Generator().manual_seed(0))
    assert len(batch.views) == 1 and len(batch.labels) == 8
    assert set(batch.labels.tolist()) <= set(data.spec.class_ids)


def test_make_batch_deterministic():
    data = _task_data()
    a = make_batch(data, ssl_policy(MEAN, STD), 6, torch.Generator().manual_seed(3))
    b = make_batch(data, ssl_policy(MEAN, STD), 6, torch.Generator().manual_seed(3))
    for va, vb in zip(a.views, b.views):
        assert torch.equal(va, vb)
    assert torch.equal(a.labels, b.labels)


def test_make_batch_empty_task():
    data = TaskData(TaskSpec(0, "C10", (1,)), np.zeros((0, 32, 32, 3), np.uint8), np.zeros(0, np.int64))
    with pytest.raises(EmptyTask):
        make_batch(data, light_policy(MEAN, STD), 4, torch.Generator())


def test_identity_policy_is_normalization_only():
    data = _task_data(n=3)
    policy = AugmentationPolicy(view_count=1, crop="none", flip_p=0.0, mean=MEAN, std=STD)
    batch = make_batch(data, policy, 3, torch.Generator().manual_seed(0))
    idx = batch.indices.numpy()
    expected = (torch.as_tensor(data.images[idx]).permute(0, 3, 1, 2).float() / 255 - 0.5) / 0.25
    assert torch.allclose(batch.views[0], expected, atol=1e-6)


def test_iterate_epoch_covers_each_sample_once():
    data = _task_data(n=20)
    seen = []
    for batch in iterate_epoch(data, light_policy(MEAN, STD), 5, torch.Generator().manual_seed(0)):
        seen.extend(batch.indices.tolist())
    assert sorted(seen) == list(range(20))
    dropped = [b for b in iterate_epoch(data, light_policy(MEAN, STD), 6, torch.Generator().manual_seed(0))]
    assert [len(b.labels) for b in dropped] == [6, 6, 6]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), bs=st.integers(1, 16))
def test_views_share_labels(seed, bs):
    data = _task_data(n=10, size=8)
    batch = make_batch(data, ssl_policy(MEAN, STD), bs, torch.Generator().manual_seed(seed))
    assert len(batch.labels) == bs
    assert all(v.shape == batch.views[0].shape for v in batch.views)
    assert np.array_equal(data.labels[batch.indices.numpy()], batch.labels.numpy())


def test_digits_loads_and_subsamples():
    train = load_split("DIGITS", "train")
    test = load_split("DIGITS", "test")
    assert train.images.shape[1:] == (16, 16, 3) and train.images.dtype == np.uint8
    assert set(np.unique(train.labels)) == set(range(10))
    assert len(train) + len(test) == 1797
    small = load_split("DIGITS", "train", per_class=5, seed=1)
    assert np.bincount(small.labels).tolist() == [5] * 10
    again = load_split("DIGITS", "train", per_class=5, seed=1)
    assert np.array_equal(small.images, again.images)


def test_load_task_global_labels():
    seq = build_class_split_sequence("DIGITS", 2, 0)
    data = load_task(seq[1])
    assert set(np.unique(data.labels)) == set(seq[1].class_ids)


def _write_cifar10(root, per_batch=4):
    base = root / "cifar-10-batches-py"
    base.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        payload = {b"data": rng.integers(0, 256, (per_batch, 3072), dtype=np.uint8),
                   b"labels": list(range(per_batch))}
        with open(base / name, "wb") as fh:
            pickle.dump(payload, fh)


def test_cifar10_loader_reads_pickles(tmp_path, monkeypatch):
    _write_cifar10(tmp_path)
    monkeypatch.setenv("CONTREP_DATA_ROOT", str(tmp_path))
    train = load_split("C10", "train", root=str(tmp_path))
    assert train.images.shape == (20, 32, 32, 3)
    assert sorted(set(train.labels.tolist())) == [0, 1, 2, 3]


def test_missing_dataset_files_raise(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_split("SVHN", "train", root=str(tmp_path))


def test_register_dataset():
    def loader(root, split):
        images = np.full((4, 8, 8, 3), 7, np.uint8)
        return images, np.array([0, 1, 0, 1])

    register_dataset(DatasetInfo("TOY", 2, 8, (0.5,) * 3, (0.5,) * 3, loader), overwrite=True)
    assert get_dataset_info("TOY").num_classes == 2
    assert len(build_class_split_sequence("TOY", 2, 0)) == 2
    assert len(load_split("TOY", "train")) == 4
