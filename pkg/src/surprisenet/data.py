"""Dataset loading and class-incremental scenario construction."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import STREAM_SCENARIO, STREAM_SYNTH, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Partition:
    x: np.ndarray  # [n, d] float32
    y: np.ndarray  # [n] int64 global class ids

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise DataFormatError(f"features {self.x.shape} do not match labels {self.y.shape}")

    def __len__(self) -> int:
        return self.y.shape[0]

    def select(self, classes) -> "Partition":
        keep = np.isin(self.y, np.asarray(list(classes)))
        return Partition(self.x[keep], self.y[keep])


@dataclass(frozen=True)
class Dataset:
    name: str
    train: Partition
    test: Partition
    class_count: int
    standardize: bool = False

    def __post_init__(self):
        if self.train.x.shape[1] != self.test.x.shape[1]:
            raise DataFormatError("train and test feature widths differ")
        for part in (self.train, self.test):
            if len(part) and (part.y.min() < 0 or part.y.max() >= self.class_count):
                raise DataFormatError(f"labels must lie in [0, {self.class_count})")

    @property
    def feature_dim(self) -> int:
        return self.train.x.shape[1]


# ---------------------------------------------------------------------------
# IDX


def _open_maybe_gz(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic: int) -> tuple[tuple[int, ...], bytes]:
    with _open_maybe_gz(path) as f:
        buf = f.read()
    if len(buf) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    payload = buf[header:]
    if len(payload) != math.prod(dims):
        raise DataFormatError(f"{path}: expected {math.prod(dims)} payload bytes, found {len(payload)}")
    return dims, payload


def load_idx(images_path, labels_path) -> Partition:
    """Read an IDX image/label pair; pixels flattened and scaled to [0, 1]."""
    img_dims, img = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (n_labels,), lab = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if img_dims[0] != n_labels:
        raise DataFormatError(f"{img_dims[0]} images but {n_labels} labels")
    x = np.frombuffer(img, dtype=np.uint8).reshape(img_dims[0], -1).astype(np.float32) / np.float32(255)
    y = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return Partition(x, y)


IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(directory / stem)


def load_idx_dataset(directory, name: str = "fmnist") -> Dataset:
    """Load the classic four-file MNIST-style layout (optionally gzipped)."""
    directory = Path(directory)
    parts = {k: load_idx(_find(directory, a), _find(directory, b)) for k, (a, b) in IDX_FILES.items()}
    n_classes = int(max(parts["train"].y.max(), parts["test"].y.max())) + 1
    return Dataset(name, parts["train"], parts["test"], n_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images [n, rows, cols] and labels [n] in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(f">{images.ndim}I", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, label_column: str = "label") -> Partition:
    """Read a numeric CSV with a header row; values are returned unstandardized."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if label_column not in header:
            raise DataFormatError(f"{path}: missing label column {label_column!r}")
        li = header.index(label_column)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                lab = float(row[li])
                feats = [float(v) for i, v in enumerate(row) if i != li]
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from None
            if lab != int(lab):
                raise DataFormatError(f"{path}:{lineno}: label {row[li]!r} is not an integer")
            if not all(math.isfinite(v) for v in feats):
                raise DataFormatError(f"{path}:{lineno}: non-finite feature")
            labels.append(int(lab))
            rows.append(feats)
    x = np.asarray(rows, dtype=np.float32).reshape(len(rows), len(header) - 1)
    return Partition(x, np.asarray(labels, dtype=np.int64))


def write_csv(path, part: Partition, label_column: str = "label") -> None:
    d = part.x.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow([f"f{i}" for i in range(d)] + [label_column])
        for xi, yi in zip(part.x, part.y):
            w.writerow([repr(float(v)) for v in xi] + [int(yi)])


def load_csv_dataset(train_path, test_path, label_column: str = "label", name: str = "csv") -> Dataset:
    train = load_csv(train_path, label_column)
    test = load_csv(test_path, label_column)
    n_classes = int(max(train.y.max(initial=0), test.y.max(initial=0))) + 1
    return Dataset(name, train, test, n_classes, standardize=True)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=0)
        std = x64.std(axis=0)
        std = np.where(std < STD_FLOOR, 1.0, std)
        return cls(mean, std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return ((x.astype(np.float64) - self.mean) / self.std).astype(np.float32)

    def apply_partition(self, part: Partition) -> Partition:
        return Partition(self.apply(part.x), part.y)


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    """Ordered, disjoint class sets over a dataset.

    When the source dataset asks for standardization, ``dataset`` holds the
    already-transformed copy and ``standardizer`` the statistics fitted on the
    first task's training rows.
    """

    dataset: Dataset
    task_classes: list[tuple[int, ...]]
    seed: int
    standardizer: Standardizer | None = None
    _task_of: dict = field(init=False, repr=False)

    def __post_init__(self):
        if not self.task_classes:
            raise ConfigError("scenario has no tasks")
        self._task_of = {}
        for t, classes in enumerate(self.task_classes):
            for c in classes:
                if c in self._task_of:
                    raise ConfigError(f"class {c} appears in more than one task")
                if not 0 <= c < self.dataset.class_count:
                    raise ConfigError(f"class {c} not in dataset")
                self._task_of[c] = t

    @property
    def n_tasks(self) -> int:
        return len(self.task_classes)

    @property
    def classes(self) -> list[int]:
        return [c for cs in self.task_classes for c in cs]

    def task_of(self, label: int) -> int:
        return self._task_of[int(label)]

    def tasks_of(self, labels: np.ndarray) -> np.ndarray:
        return np.array([self._task_of[int(c)] for c in labels], dtype=np.int64)

    def task_data(self, t: int, split: str = "train") -> Partition:
        part = self.dataset.train if split == "train" else self.dataset.test
        return part.select(self.task_classes[t])

    def seen_test(self, upto: int) -> Partition:
        """Union of test sets for tasks 0..upto."""
        classes = [c for cs in self.task_classes[: upto + 1] for c in cs]
        return self.dataset.test.select(classes)

    def describe(self) -> dict:
        return {
            "dataset": self.dataset.name,
            "task_classes": [list(c) for c in self.task_classes],
            "seed": self.seed,
            "standardized": self.standardizer is not None,
        }


def fisher_yates(items, rng: np.random.Generator) -> list:
    items = list(items)
    for i in range(len(items) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        items[i], items[j] = items[j], items[i]
    return items


def make_scenario(dataset: Dataset, n_tasks: int, classes_per_task: int, seed: int) -> Scenario:
    """Shuffle class ids with the seeded generator and chunk them into tasks.

    Classes beyond ``n_tasks * classes_per_task`` are dropped.
    """
    if n_tasks < 1 or classes_per_task < 1:
        raise ConfigError("n_tasks and classes_per_task must be >= 1")
    need = n_tasks * classes_per_task
    if need > dataset.class_count:
        raise ConfigError(f"{n_tasks} x {classes_per_task} classes requested, dataset has {dataset.class_count}")
    order = fisher_yates(range(dataset.class_count), make_rng(seed, STREAM_SCENARIO))[:need]
    tasks = [tuple(order[i * classes_per_task : (i + 1) * classes_per_task]) for i in range(n_tasks)]
    std = None
    if dataset.standardize:
        first = dataset.train.select(tasks[0])
        if len(first) == 0:
            raise DataFormatError("first task has no training rows to fit standardization")
        std = Standardizer.fit(first.x)
        dataset = replace(dataset, train=std.apply_partition(dataset.train), test=std.apply_partition(dataset.test))
    scen = Scenario(dataset, tasks, seed, std)
    for t in range(n_tasks):
        if len(scen.task_data(t, "train")) == 0 or len(scen.task_data(t, "test")) == 0:
            raise DataFormatError(f"task {t} (classes {tasks[t]}) is empty in train or test")
    return scen


# ---------------------------------------------------------------------------
# synthetic clusters


def _place_means(n: int, dim: int, rng: np.random.Generator, max_tries: int = 100) -> np.ndarray:
    """Cluster means with closest pair exactly 1 apart.

    When ``dim >= n`` the means form a randomly rotated regular simplex (every
    pair exactly 1 apart); otherwise random points are rescaled.
    """
    if n == 1:
        return np.zeros((1, dim))
    if dim >= n:
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        rot = q * np.sign(np.diag(r))
        corners = np.eye(n, dim) / math.sqrt(2.0)
        return (corners - corners.mean(axis=0)) @ rot.T
    for _ in range(max_tries):
        pts = rng.standard_normal((n, dim))
        gaps = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        closest = gaps[np.triu_indices(n, 1)].min()
        if closest > 1e-6:
            return pts / closest
    raise ConfigError(f"could not place {n} distinct cluster means in {dim} dimensions")


def synth_clusters(
    n_classes: int, dim: int, instances_per_class: int, separation: float, seed: int, train_fraction: float = 0.8
) -> Dataset:
    """One unit-variance Gaussian per class; the closest two means are ``separation`` sigma apart."""
    if n_classes < 1 or dim < 1 or instances_per_class < 2:
        raise ConfigError("n_classes, dim >= 1 and instances_per_class >= 2 required")
    if separation < 0:
        raise ConfigError("separation must be non-negative")
    rng = make_rng(seed, STREAM_SYNTH)
    means = _place_means(n_classes, dim, rng) * separation
    n_train = int(round(train_fraction * instances_per_class))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(n_classes):
        pts = means[c] + rng.standard_normal((instances_per_class, dim))
        tr_x.append(pts[:n_train])
        te_x.append(pts[n_train:])
        tr_y.append(np.full(n_train, c))
        te_y.append(np.full(instances_per_class - n_train, c))
    train = Partition(np.concatenate(tr_x).astype(np.float32), np.concatenate(tr_y).astype(np.int64))
    test = Partition(np.concatenate(te_x).astype(np.float32), np.concatenate(te_y).astype(np.int64))
    return Dataset(f"synth-{n_classes}x{dim}-sep{separation:g}", train, test, n_classes)
