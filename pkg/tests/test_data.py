import gzip
import struct
from dataclasses import replace
from itertools import combinations

import numpy as np
import pytest

from taskmerge.data import (DatasetSpec, IdxError, LabeledSplit, coarse_targets,
                            gen_synthetic_tasks, idx_tasks, linear_probe_accuracy, load_idx,
                            parse_idx, write_idx)
from taskmerge.errors import DomainError


@pytest.fixture(scope="module")
def suite():
    return gen_synthetic_tasks(DatasetSpec())


def test_generation_is_deterministic(suite):
    again = gen_synthetic_tasks(DatasetSpec())
    for a, b in zip(suite.tasks, again.tasks):
        np.testing.assert_array_equal(a.train.x, b.train.x)
        np.testing.assert_array_equal(a.test.y, b.test.y)
    np.testing.assert_array_equal(suite.pretrain_targets, again.pretrain_targets)
    other = gen_synthetic_tasks(DatasetSpec(seed=1))
    assert not np.array_equal(other.tasks[0].train.x, suite.tasks[0].train.x)


def test_shapes_and_windows(suite):
    s = DatasetSpec()
    assert suite.num_classes == 16 and len(suite.tasks) == 4
    for t, task in enumerate(suite.tasks):
        assert len(task.train) == 320 and len(task.val) == 80 and len(task.test) == 1000
        assert task.class_window == (4 * t, 4 * t + 4)
        assert set(np.unique(task.train.y)) == {0, 1, 2, 3}
        assert task.unlabeled.x.shape == (s.n_unlabeled, s.input_dim)
    np.testing.assert_allclose(suite.pretrain_targets.sum(1), 1.0)


def test_class_means_are_separated(suite):
    means = np.concatenate([t.class_means for t in suite.tasks])
    gaps = [np.linalg.norm(a - b) for a, b in combinations(means, 2)]
    assert min(gaps) >= 4.0


def test_splits_do_not_share_samples(suite):
    for task in suite.tasks:
        rows = [set(map(bytes, s.x)) for s in (task.train, task.val, task.test)]
        rows.append(set(map(bytes, task.unlabeled.x)))
        for a, b in combinations(rows, 2):
            assert not a & b


def test_tasks_are_learnable(suite):
    for task in suite.tasks:
        assert linear_probe_accuracy(task) >= 0.95


def test_impossible_separation_fails():
    with pytest.raises(DomainError):
        gen_synthetic_tasks(DatasetSpec(input_dim=2, min_separation=50.0, max_retries=20))
    with pytest.raises(DomainError):
        DatasetSpec(val_fraction=1.0)


def test_coarse_targets():
    t = coarse_targets(np.array([0, 3, 5]), 8, 2)
    np.testing.assert_array_equal(t[0], [0.5, 0.5, 0, 0, 0, 0, 0, 0])
    np.testing.assert_array_equal(t[1], [0, 0, 0.5, 0.5, 0, 0, 0, 0])
    np.testing.assert_array_equal(t[2], [0, 0, 0, 0, 0.5, 0.5, 0, 0])


def test_labeled_split_validation():
    with pytest.raises(DomainError):
        LabeledSplit(np.zeros((3, 2)), np.zeros(2, dtype=int))


# ---- IDX -------------------------------------------------------------------

def _images(n=6, h=3, w=2, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, h, w), dtype=np.uint8)


def test_idx_roundtrip(tmp_path):
    img, lab = _images(), np.array([0, 1, 2, 3, 4, 5], dtype=np.uint8)
    write_idx(tmp_path / "i", img)
    write_idx(tmp_path / "l", lab)
    split = load_idx(tmp_path / "i", tmp_path / "l")
    assert split.x.shape == (6, 6)
    np.testing.assert_allclose(split.x * 255, img.reshape(6, -1))
    np.testing.assert_array_equal(split.y, lab)
    (tmp_path / "i.gz").write_bytes(gzip.compress((tmp_path / "i").read_bytes()))
    np.testing.assert_array_equal(load_idx(tmp_path / "i.gz", tmp_path / "l").x, split.x)


def test_idx_header_fields():
    raw = struct.pack(">IIII", 0x803, 2, 3, 2) + bytes(range(12))
    arr = parse_idx(raw, 0x803)
    assert arr.shape == (2, 3, 2) and arr[1, 2, 1] == 11


@pytest.mark.parametrize("raw,code", [
    (struct.pack(">II", 0x801, 2) + b"\x00\x01", "bad_magic"),
    (struct.pack(">IIII", 0x803, 2, 3, 2) + bytes(11), "truncated_payload"),
    (struct.pack(">II", 0x803, 2), "bad_header"),
    (b"\x00\x00", "bad_header"),
])
def test_idx_errors(raw, code):
    with pytest.raises(IdxError) as info:
        parse_idx(raw, 0x803)
    assert info.value.code == code


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", _images(n=5))
    write_idx(tmp_path / "l", np.zeros(4, dtype=np.uint8))
    with pytest.raises(IdxError) as info:
        load_idx(tmp_path / "i", tmp_path / "l")
    assert info.value.code == "count_mismatch"


def test_idx_tasks_relabel_windows():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(8), 30)
    train = LabeledSplit(rng.normal(size=(240, 5)), y)
    test = LabeledSplit(rng.normal(size=(80, 5)), np.repeat(np.arange(8), 10))
    suite = idx_tasks(train, test, classes_per_task=4, num_tasks=2, n_unlabeled=16)
    assert suite.num_classes == 8
    t1 = suite.tasks[1]
    assert t1.class_window == (4, 8) and set(np.unique(t1.test.y)) == {0, 1, 2, 3}
    assert len(t1.val) == 24 and len(t1.unlabeled) == 16 and len(t1.train) == 80
