"""Synthetic class-incremental benchmarks, client partitioning and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
SCHEMES = ("iid", "label_skew", "quantity_skew")


@dataclass
class TaskDataset:
    """One task's samples, stored grouped by class in a fixed order.

    Splits are derived from that order alone (per class: first 70% train,
    next 10% validation, rest test), so any container that preserves row
    order reproduces them exactly.
    """

    task_id: int
    X: np.ndarray
    y: np.ndarray
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if not np.all(np.isfinite(self.X)):
            raise ValueError(f"task {self.task_id}: non-finite features")
        if not self.splits:
            self.splits = stratified_split(self.y)

    @property
    def class_ids(self) -> list:
        return sorted(set(self.y.tolist()))

    def subset(self, split: str):
        idx = self.splits[split]
        return self.X[idx], self.y[idx]

    @property
    def train_idx(self) -> np.ndarray:
        return self.splits["train"]


def stratified_split(y: np.ndarray) -> dict:
    parts = {"train": [], "val": [], "test": []}
    for c in sorted(set(y.tolist())):
        idx = np.flatnonzero(y == c)
        n = len(idx)
        n_train = int(round(SPLIT_FRACTIONS[0] * n))
        n_val = int(round(SPLIT_FRACTIONS[1] * n))
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    return {k: np.concatenate(v).astype(np.int64) for k, v in parts.items()}


def generate_synthetic_benchmark(n_tasks: int = 5, classes_per_task: int = 2, d_in: int = 32,
                                 samples_per_class: int = 100, separation: float = 6.0,
                                 seed=0) -> list:
    """Isotropic unit-variance Gaussian clusters, one per class.

    Class means point in random directions with norm ``separation``; task
    ``t`` owns global classes ``(t-1)*classes_per_task ...``.
    """
    for name, v in (("n_tasks", n_tasks), ("classes_per_task", classes_per_task),
                    ("d_in", d_in), ("samples_per_class", samples_per_class)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    if separation < 0:
        raise ValueError(f"separation must be >= 0, got {separation}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_classes = n_tasks * classes_per_task
    dirs = rng.normal(size=(n_classes, d_in))
    means = separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    tasks = []
    for t in range(n_tasks):
        X, y = [], []
        for c in range(t * classes_per_task, (t + 1) * classes_per_task):
            X.append(means[c] + rng.normal(size=(samples_per_class, d_in)))
            y.append(np.full(samples_per_class, c))
        tasks.append(TaskDataset(t + 1, np.concatenate(X), np.concatenate(y)))
    return tasks


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "iid"
    dirichlet_beta: float = 0.5
    n_clients: int = 10
    seed: int = 0
    max_retries: int = 1000

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.n_clients <= 0:
            raise ValueError(f"n_clients must be positive, got {self.n_clients}")
        if self.scheme != "iid" and not self.dirichlet_beta > 0:
            raise ValueError(f"dirichlet_beta must be > 0, got {self.dirichlet_beta}")


def _cut(idx: np.ndarray, props: np.ndarray) -> list:
    bounds = (np.cumsum(props) * len(idx)).astype(int)[:-1]
    return np.split(idx, bounds)


def partition(task: TaskDataset, spec: PartitionSpec, rng=None) -> list:
    """Split the task's train indices into ``n_clients`` disjoint, exhaustive lists."""
    train = task.train_idx
    K = spec.n_clients
    if len(train) < K:
        raise ValueError(f"task {task.task_id}: {len(train)} train samples for {K} clients")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if K == 1:
        return [train.copy()]
    if spec.scheme == "iid":
        return [np.sort(p) for p in np.array_split(rng.permutation(train), K)]

    labels = task.y[train]
    for _ in range(spec.max_retries):
        shards = [[] for _ in range(K)]
        if spec.scheme == "label_skew":
            for c in sorted(set(labels.tolist())):
                idx = rng.permutation(train[labels == c])
                for k, part in enumerate(_cut(idx, rng.dirichlet(np.full(K, spec.dirichlet_beta)))):
                    shards[k].append(part)
        else:
            idx = rng.permutation(train)
            for k, part in enumerate(_cut(idx, rng.dirichlet(np.full(K, spec.dirichlet_beta)))):
                shards[k].append(part)
        out = [np.sort(np.concatenate(s)) for s in shards]
        if min(len(p) for p in out) >= 1:
            return out
    raise RuntimeError(f"task {task.task_id}: could not give every client a sample in "
                       f"{spec.max_retries} draws (beta={spec.dirichlet_beta})")


def save_csv_dataset(tasks, path) -> None:
    d = tasks[0].X.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "class_id"] + [f"feature_{i}" for i in range(d)])
        for t in tasks:
            for x, c in zip(t.X, t.y):
                w.writerow([t.task_id, int(c)] + [repr(float(v)) for v in x])


class CSVFormatError(ValueError):
    pass


def load_csv_dataset(path, d_in: int | None = None) -> list:
    """Read ``task_id,class_id,feature_0..`` rows into TaskDatasets.

    Row order inside each task is preserved, so splits match the exporter.
    """
    path = Path(path)
    rows: dict[int, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CSVFormatError(f"{path}: empty file")
        if header[:2] != ["task_id", "class_id"] or len(header) < 3:
            raise CSVFormatError(f"{path}:1: header must start with task_id,class_id,feature_0")
        width = len(header)
        if d_in is not None and width != d_in + 2:
            raise CSVFormatError(f"{path}:1: expected {d_in} features, header has {width - 2}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise CSVFormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            try:
                t, c = int(row[0]), int(row[1])
                feats = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise CSVFormatError(f"{path}:{lineno}: {exc}") from None
            xs, ys = rows.setdefault(t, ([], []))
            xs.append(feats)
            ys.append(c)
    if not rows:
        raise CSVFormatError(f"{path}: no data rows")
    ids = sorted(rows)
    if ids != list(range(1, len(ids) + 1)):
        raise CSVFormatError(f"{path}: task ids must be 1..n, got {ids}")
    owner: dict[int, int] = {}
    for t in ids:
        for c in set(rows[t][1]):
            if c in owner:
                raise CSVFormatError(f"{path}: class {c} appears in tasks {owner[c]} and {t}")
            owner[c] = t
    return [TaskDataset(t, np.array(rows[t][0]), np.array(rows[t][1])) for t in ids]
