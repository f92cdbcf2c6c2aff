"""Task streams: IDX file loading and the permuted / split / synthetic generators.

A stream is a list of Tasks sharing one input dimensionality; each task owns
disjoint train/valid/test splits plus a small fixed evaluation subset drawn
from the test split (used later to score retained accuracy cheaply).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

DEFAULT_EVAL_SUBSET = 500


@dataclass
class Dataset:
    """A labeled batch of rows: inputs (n x d) in [0, 1], integer labels (n)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be n x d, labels must be length n")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx])


@dataclass
class Task:
    """One stage of a stream: its own splits, head id, and eval subset."""

    task_id: int
    n_classes: int
    train: Dataset
    valid: Dataset
    test: Dataset
    eval_subset: Dataset
    permutation: np.ndarray | None = None
    class_map: dict[int, int] | None = None

    @property
    def head_id(self) -> int:
        return self.task_id

    @property
    def d(self) -> int:
        return self.train.d


@dataclass(frozen=True)
class StreamSpec:
    """Declarative description of a stream; build_stream turns it into Tasks.

    kind "permuted" needs source_images/source_labels (IDX, optionally
    gzipped); kind "split" additionally needs classes_per_task; kind
    "synthetic" is self-contained (input_dim, classes_per_task, noise_std).
    """

    kind: str
    n_tasks: int = 5
    train_per_task: int = 5000
    valid_per_task: int = 1000
    test_per_task: int = 1000
    seed: int = 0
    eval_subset_size: int = DEFAULT_EVAL_SUBSET
    source_images: str | None = None
    source_labels: str | None = None
    classes_per_task: int = 2
    input_dim: int = 16
    noise_std: float = 0.1

    def __post_init__(self):
        if self.kind not in ("permuted", "split", "synthetic"):
            raise ValueError(f"unknown stream kind {self.kind!r}")
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be at least 1")
        for name in ("train_per_task", "valid_per_task", "test_per_task"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.eval_subset_size < 1:
            raise ValueError("eval_subset_size must be positive")
        if self.kind in ("permuted", "split") and not (self.source_images and self.source_labels):
            raise ValueError(f"{self.kind} stream needs source_images and source_labels")
        if self.kind == "synthetic" and self.classes_per_task < 2:
            raise ValueError("synthetic stream needs at least 2 classes")
        if self.kind == "split" and self.classes_per_task < 2:
            raise ValueError("split stream needs at least 2 classes per task")


def _open_maybe_gzip(path: str):
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == GZIP_MAGIC else open(path, "rb")


def _read_exact(f, n: int, path: str, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"{path}: truncated while reading {what} "
                         f"(wanted {n} bytes at offset {f.tell() - len(buf)})")
    return buf


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label pair into a flat Dataset (pixels scaled to [0, 1]).

    Both files may be gzip-compressed (detected by magic bytes). Magic
    numbers, dimension counts, and record counts are all validated, and
    errors name the offending file and offset.
    """
    with _open_maybe_gzip(images_path) as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{images_path}: bad image magic 0x{magic:08x} at offset 0 "
                             f"(expected 0x{IDX_IMAGES_MAGIC:08x})")
        raw = _read_exact(f, n * rows * cols, images_path, f"{n} images of {rows}x{cols}")
        if f.read(1):
            raise ValueError(f"{images_path}: trailing bytes after {n} images")
    with _open_maybe_gzip(labels_path) as f:
        magic, n_lab = struct.unpack(">II", _read_exact(f, 8, labels_path, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{labels_path}: bad label magic 0x{magic:08x} at offset 0 "
                             f"(expected 0x{IDX_LABELS_MAGIC:08x})")
        lab_raw = _read_exact(f, n_lab, labels_path, f"{n_lab} labels")
        if f.read(1):
            raise ValueError(f"{labels_path}: trailing bytes after {n_lab} labels")
    if n != n_lab:
        raise ValueError(f"{images_path} has {n} images but {labels_path} has {n_lab} labels")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    labels = np.frombuffer(lab_raw, dtype=np.uint8)
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str,
              labels_path: str, side: int = 28) -> None:
    """Serialize uint8 images (n x side*side, values 0..255) and labels to IDX."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n = images.shape[0]
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, side, side))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.tobytes())


def synthesize_mnist_like(n: int, seed: int, side: int = 28, classes: int = 10,
                          modes: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic MNIST-shaped corpus for offline demos and tests.

    Each class owns a few smooth template modes; a sample picks one, shifts
    it, mixes in a distractor from another class, and adds pixel noise. The
    margins are kept small on purpose so that a small MLP learns the task
    well but keeps getting informative gradients, which is what makes a
    sequence of permuted versions actually interfere. Returns (uint8 images
    n x side*side, uint8 labels) ready for write_idx.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1879]))
    kernel = np.array([1.0, 2.0, 1.0])
    kernel /= kernel.sum()

    def smooth_field() -> np.ndarray:
        t = rng.standard_normal((side, side))
        for _ in range(2):
            t = np.apply_along_axis(np.convolve, 0, t, kernel, mode="same")
            t = np.apply_along_axis(np.convolve, 1, t, kernel, mode="same")
        return (t - t.min()) / (t.max() - t.min())

    temps = np.stack([np.stack([smooth_field() for _ in range(modes)])
                      for _ in range(classes)])

    labels = rng.integers(0, classes, size=n)
    mode_ix = rng.integers(0, modes, size=n)
    other = (labels + rng.integers(1, classes, size=n)) % classes
    other_mode = rng.integers(0, modes, size=n)
    shifts = rng.integers(-2, 3, size=(n, 2))
    dshifts = rng.integers(-3, 4, size=(n, 2))
    gain = 1.0 + 0.2 * rng.standard_normal(n)
    mix = 0.22 + 0.08 * rng.standard_normal(n)
    noise = 0.15 * rng.standard_normal((n, side, side))
    imgs = np.empty((n, side, side))
    for i in range(n):
        base = np.roll(temps[labels[i], mode_ix[i]], tuple(shifts[i]), axis=(0, 1))
        distract = np.roll(temps[other[i], other_mode[i]], tuple(dshifts[i]),
                           axis=(0, 1))
        imgs[i] = gain[i] * base + mix[i] * distract + noise[i]
    imgs = np.clip(imgs, 0.0, 1.0)
    return (np.rint(imgs.reshape(n, side * side) * 255.0).astype(np.uint8),
            labels.astype(np.uint8))


def pad_images(flat: np.ndarray, side: int = 28, pad_to: int = 32) -> np.ndarray:
    """Zero-pad square images (flattened) to pad_to x pad_to, centered."""
    n = flat.shape[0]
    if flat.shape[1] != side * side:
        raise ValueError(f"expected {side * side} pixels per image, got {flat.shape[1]}")
    lo = (pad_to - side) // 2
    out = np.zeros((n, pad_to, pad_to), dtype=np.float64)
    out[:, lo:lo + side, lo:lo + side] = flat.reshape(n, side, side)
    return out.reshape(n, pad_to * pad_to)


@dataclass
class SplitData:
    """The once-split base a permuted stream reuses for every task."""

    train: Dataset
    valid: Dataset
    test: Dataset


def split_base(base: Dataset, spec: StreamSpec, rng: np.random.Generator) -> SplitData:
    """Shuffle the base once and carve the three shared splits."""
    need = spec.train_per_task + spec.valid_per_task + spec.test_per_task
    if base.n < need:
        raise ValueError(f"base dataset has {base.n} samples but the stream needs {need}")
    order = rng.permutation(base.n)
    a = spec.train_per_task
    b = a + spec.valid_per_task
    c = b + spec.test_per_task
    return SplitData(base.take(order[:a]), base.take(order[a:b]), base.take(order[b:c]))


def make_permuted_task(splits: SplitData, task_index: int, rng: np.random.Generator,
                       eval_subset_size: int = DEFAULT_EVAL_SUBSET) -> Task:
    """One permuted-pixels task over the shared splits.

    Images are zero-padded from 28x28 to 32x32 first; task 0 applies the
    identity permutation, every later task draws a fresh random permutation
    of the 1024 pixel positions and applies it to all splits alike.
    """
    padded = [pad_images(s.inputs) for s in (splits.train, splits.valid, splits.test)]
    d = padded[0].shape[1]
    if task_index == 0:
        perm = np.arange(d)
    else:
        perm = rng.permutation(d)
    parts = [Dataset(p[:, perm], s.labels)
             for p, s in zip(padded, (splits.train, splits.valid, splits.test))]
    n_classes = int(max(s.labels.max() for s in parts) + 1)
    test = parts[2]
    evals = test.take(np.arange(min(eval_subset_size, test.n)))
    return Task(task_id=task_index, n_classes=n_classes, train=parts[0],
                valid=parts[1], test=test, eval_subset=evals, permutation=perm)


def make_split_task(base: Dataset, task_index: int, class_ids: list[int],
                    used: set[int], rng: np.random.Generator, spec: StreamSpec) -> Task:
    """One class-subset task: filter to class_ids, remap labels to 0..C-1.

    class_ids must be disjoint from every id already used in the stream.
    """
    overlap = used.intersection(class_ids)
    if overlap:
        raise ValueError(f"classes {sorted(overlap)} already used earlier in the stream")
    if len(set(class_ids)) != len(class_ids):
        raise ValueError(f"duplicate ids in {class_ids}")
    class_map = {int(c): i for i, c in enumerate(class_ids)}
    mask = np.isin(base.labels, class_ids)
    sub = base.take(np.flatnonzero(mask))
    local = np.array([class_map[int(c)] for c in sub.labels], dtype=np.int64)
    sub = Dataset(sub.inputs, local)

    need = spec.train_per_task + spec.valid_per_task + spec.test_per_task
    if sub.n < need:
        raise ValueError(f"classes {class_ids} supply {sub.n} samples, need {need}")
    order = rng.permutation(sub.n)
    a = spec.train_per_task
    b = a + spec.valid_per_task
    c = b + spec.test_per_task
    train, valid, test = sub.take(order[:a]), sub.take(order[a:b]), sub.take(order[b:c])
    evals = test.take(np.arange(min(spec.eval_subset_size, test.n)))
    used.update(class_map)
    return Task(task_id=task_index, n_classes=len(class_ids), train=train,
                valid=valid, test=test, eval_subset=evals, class_map=class_map)


def make_synthetic_stream(spec: StreamSpec) -> list[Task]:
    """Gaussian-blob stream: C blobs in R^d, per-task random rotation of a
    shared mean layout, difficulty controlled by noise_std.

    Means sit on a sphere of radius 0.22 around 0.5 so inputs stay in [0, 1]
    (samples are clipped); label counts are exact (n/C each when C divides n).
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 977]))
    c, d = spec.classes_per_task, spec.input_dim
    layout = rng.standard_normal((c, d))
    layout /= np.linalg.norm(layout, axis=1, keepdims=True)

    def blob_split(n: int, means: np.ndarray) -> Dataset:
        counts = np.full(c, n // c)
        counts[: n % c] += 1
        labels = np.repeat(np.arange(c), counts)
        x = means[labels] + spec.noise_std * rng.standard_normal((n, d))
        order = rng.permutation(n)
        return Dataset(np.clip(x, 0.0, 1.0)[order], labels[order])

    tasks = []
    for t in range(spec.n_tasks):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        means = 0.5 + 0.22 * layout @ q
        train = blob_split(spec.train_per_task, means)
        valid = blob_split(spec.valid_per_task, means)
        test = blob_split(spec.test_per_task, means)
        evals = test.take(np.arange(min(spec.eval_subset_size, test.n)))
        tasks.append(Task(task_id=t, n_classes=c, train=train, valid=valid,
                          test=test, eval_subset=evals))
    return tasks


def build_stream(spec: StreamSpec) -> list[Task]:
    """Materialize the stream a spec describes. Deterministic in spec.seed."""
    if spec.kind == "synthetic":
        return make_synthetic_stream(spec)
    base = load_idx(spec.source_images, spec.source_labels)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 491]))
    if spec.kind == "permuted":
        splits = split_base(base, spec, rng)
        return [make_permuted_task(splits, t, rng, spec.eval_subset_size)
                for t in range(spec.n_tasks)]
    used: set[int] = set()
    all_classes = np.unique(base.labels)
    need = spec.n_tasks * spec.classes_per_task
    if need > all_classes.size:
        raise ValueError(f"stream needs {need} distinct classes, base has {all_classes.size}")
    tasks = []
    for t in range(spec.n_tasks):
        ids = [int(x) for x in all_classes[t * spec.classes_per_task:(t + 1) * spec.classes_per_task]]
        tasks.append(make_split_task(base, t, ids, used, rng, spec))
    return tasks
