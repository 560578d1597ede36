"""Datasets: seeded Gaussian-cluster tasks and IDX (MNIST-style) ingestion."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, TaskMergeError


@dataclass(frozen=True, eq=False)
class LabeledSplit:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DomainError(f"inconsistent split shapes x={x.shape} y={y.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.size

    def subset(self, idx) -> LabeledSplit:
        return LabeledSplit(self.x[idx], self.y[idx])


@dataclass(frozen=True, eq=False)
class UnlabeledSet:
    """Inputs from one task's distribution.  There is deliberately no label field."""

    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DomainError("unlabeled set must be a non-empty 2-D array")
        object.__setattr__(self, "x", x)

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True, eq=False)
class TaskData:
    task_id: str
    train: LabeledSplit
    val: LabeledSplit
    test: LabeledSplit
    unlabeled: UnlabeledSet | None = None
    class_means: np.ndarray | None = None
    # head rows owned by this task in the shared label space; labels in the
    # splits are local (0-based within the window)
    class_window: tuple[int, int] | None = None


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic_gaussian"
    num_tasks: int = 4
    classes_per_task: int = 4
    input_dim: int = 16
    n_train: int = 400
    val_fraction: float = 0.2
    n_test: int = 1000
    n_unlabeled: int = 512
    n_pretrain_per_task: int = 400
    sigma: float = 1.0
    mean_scale: float = 1.0
    min_separation: float = 4.0
    coarse_group: int = 2
    seed: int = 0
    max_retries: int = 1000
    idx_images: str = ""
    idx_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""

    def __post_init__(self):
        if self.kind not in ("synthetic_gaussian", "idx_files"):
            raise DomainError(f"unknown dataset kind {self.kind!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise DomainError("val_fraction must lie in [0, 1)")
        if self.classes_per_task % self.coarse_group:
            raise DomainError("classes_per_task must be a multiple of coarse_group")


@dataclass(frozen=True, eq=False)
class TaskSuite:
    tasks: list[TaskData]
    pretrain_x: np.ndarray
    pretrain_targets: np.ndarray  # soft coarse-label targets
    spec: DatasetSpec = field(default_factory=DatasetSpec)

    @property
    def num_classes(self) -> int:
        return self.pretrain_targets.shape[1]


def coarse_targets(y: np.ndarray, num_classes: int, group: int) -> np.ndarray:
    """Uniform distribution over the coarse group containing each label."""
    out = np.zeros((y.size, num_classes))
    base = (y // group) * group
    for k in range(group):
        out[np.arange(y.size), base + k] = 1.0 / group
    return out


def sample_class_means(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """Means for every (task, class), pairwise at least ``min_separation * sigma`` apart."""
    n = spec.num_tasks * spec.classes_per_task
    need = spec.min_separation * spec.sigma
    means: list[np.ndarray] = []
    tries = 0
    while len(means) < n:
        cand = rng.normal(0.0, spec.mean_scale, size=spec.input_dim)
        if all(np.linalg.norm(cand - m) >= need for m in means):
            means.append(cand)
            continue
        tries += 1
        if tries > spec.max_retries:
            raise DomainError(
                f"could not place {n} class means {need} apart after {spec.max_retries} retries"
            )
    return np.stack(means).reshape(spec.num_tasks, spec.classes_per_task, spec.input_dim)


def _draw(means: np.ndarray, n: int, sigma: float, rng: np.random.Generator):
    c = means.shape[0]
    y = np.arange(n) % c
    rng.shuffle(y)
    x = means[y] + sigma * rng.normal(size=(n, means.shape[1]))
    return x, y


def gen_synthetic_tasks(spec: DatasetSpec) -> TaskSuite:
    rng = np.random.default_rng(spec.seed)
    means = sample_class_means(spec, rng)
    tasks = []
    pre_x, pre_y = [], []
    n_val = int(round(spec.n_train * spec.val_fraction))
    for t in range(spec.num_tasks):
        x, y = _draw(means[t], spec.n_train, spec.sigma, rng)
        train = LabeledSplit(x[n_val:], y[n_val:])
        val = LabeledSplit(x[:n_val], y[:n_val])
        test = LabeledSplit(*_draw(means[t], spec.n_test, spec.sigma, rng))
        ux, _ = _draw(means[t], spec.n_unlabeled, spec.sigma, rng)
        px, py = _draw(means[t], spec.n_pretrain_per_task, spec.sigma, rng)
        C = spec.classes_per_task
        pre_x.append(px)
        pre_y.append(py + t * C)
        tasks.append(TaskData(f"task{t}", train, val, test, UnlabeledSet(ux), means[t],
                              (t * C, (t + 1) * C)))
    pre_x = np.concatenate(pre_x)
    pre_y = np.concatenate(pre_y)
    order = rng.permutation(pre_y.size)
    targets = coarse_targets(pre_y[order], spec.num_tasks * spec.classes_per_task,
                             spec.coarse_group)
    return TaskSuite(tasks, pre_x[order], targets, spec)


def linear_probe_accuracy(task: TaskData, steps: int = 300, lr: float = 0.5) -> float:
    """Test accuracy of a softmax-regression probe trained by full-batch GD."""
    x, y = task.train.x, task.train.y
    mu, sd = x.mean(0), x.std(0) + 1e-12
    xs = (x - mu) / sd
    c = int(y.max()) + 1
    W = np.zeros((xs.shape[1], c))
    b = np.zeros(c)
    Y = np.eye(c)[y]
    for _ in range(steps):
        z = xs @ W + b
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        g = (p - Y) / len(y)
        W -= lr * xs.T @ g
        b -= lr * g.sum(0)
    xt = (task.test.x - mu) / sd
    return float(np.mean(np.argmax(xt @ W + b, 1) == task.test.y))


# ---- IDX ------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(TaskMergeError):
    """Malformed IDX input.  ``code`` is one of ``bad_magic``,
    ``truncated_payload``, ``bad_header``, ``count_mismatch``."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise IdxError("bad_header", "file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxError("bad_magic", f"found 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError("bad_header", f"header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    payload = raw[header:]
    if len(payload) < count:
        raise IdxError("truncated_payload", f"expected {count} data bytes, found {len(payload)}")
    if len(payload) > count:
        raise IdxError("bad_header", f"{len(payload) - count} trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledSplit:
    """Read an IDX image/label pair; pixels are flattened and scaled to [0, 1]."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxError(
            "count_mismatch", f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledSplit(x, labels.astype(np.int64))


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-D images or 1-D labels)."""
    a = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    Path(path).write_bytes(struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes())


def idx_tasks(train: LabeledSplit, test: LabeledSplit, classes_per_task: int,
              num_tasks: int, val_fraction: float = 0.2, n_unlabeled: int = 512,
              seed: int = 0) -> TaskSuite:
    """Slice a labelled corpus into tasks of consecutive class ids.

    Task ``t`` owns classes ``[t*k, (t+1)*k)`` relabelled to ``0..k-1``.
    Pretraining uses the same inputs with coarse targets (pairs of classes).
    """
    rng = np.random.default_rng(seed)
    tasks = []
    pre_x, pre_y = [], []
    for t in range(num_tasks):
        lo = t * classes_per_task
        sel = np.flatnonzero((train.y >= lo) & (train.y < lo + classes_per_task))
        sel = rng.permutation(sel)
        if sel.size < 4:
            raise DomainError(f"task {t} has too few samples")
        n_val = int(round(sel.size * val_fraction))
        n_unl = min(n_unlabeled, (sel.size - n_val) // 2)
        val_idx, unl_idx, tr_idx = sel[:n_val], sel[n_val:n_val + n_unl], sel[n_val + n_unl:]
        tsel = np.flatnonzero((test.y >= lo) & (test.y < lo + classes_per_task))
        mk = lambda s, idx: LabeledSplit(s.x[idx], s.y[idx] - lo)  # noqa: E731
        tasks.append(TaskData(
            f"task{t}", mk(train, tr_idx), mk(train, val_idx), mk(test, tsel),
            UnlabeledSet(train.x[unl_idx]) if n_unl > 0 else None,
            class_window=(lo, lo + classes_per_task),
        ))
        pre_x.append(train.x[tr_idx])
        pre_y.append(train.y[tr_idx])
    pre_y = np.concatenate(pre_y)
    order = rng.permutation(pre_y.size)
    group = 2 if classes_per_task % 2 == 0 else 1
    return TaskSuite(
        tasks, np.concatenate(pre_x)[order],
        coarse_targets(pre_y[order], num_tasks * classes_per_task, group),
        DatasetSpec(kind="idx_files", num_tasks=num_tasks, classes_per_task=classes_per_task,
                    input_dim=train.x.shape[1], seed=seed),
    )
