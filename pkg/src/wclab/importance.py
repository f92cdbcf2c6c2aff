"""Parameter-importance estimators and task snapshots.

Both estimators are per-sample quantities (batch size 1 semantics): the
empirical Fisher diagonal is the mean squared per-sample gradient of the
log-likelihood at the true label, and the sensitivity importance is the mean
absolute per-sample gradient of half the squared logit norm. Per-sample
weight gradients of a dense layer are rank-1 outer products, so both
reductions vectorize exactly as matrix products of squared (or absolute)
activations and deltas; the result is identical to a batch-size-1 loop.

Snapshot sidecar format (little-endian): magic b"WCSNAP01", uint32 task_id,
uint64 n, n float64 anchor parameters, uint64 n, n float64 importances.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .nn import MlpModel, param_views, softmax

SNAPSHOT_MAGIC = b"WCSNAP01"
DEFAULT_SAMPLE_CAP = 1000


@dataclass
class TaskSnapshot:
    """Frozen anchor for one finished task: parameters and their importances."""

    task_id: int
    theta_star: np.ndarray
    importance: np.ndarray

    def __post_init__(self):
        self.theta_star = np.asarray(self.theta_star, dtype=np.float64)
        self.importance = np.asarray(self.importance, dtype=np.float64)
        if self.theta_star.shape != self.importance.shape:
            raise ValueError("theta_star and importance must have equal length")


def _per_sample_reduction(model: MlpModel, data: Dataset, head_id: int,
                          out_delta, transform, sample_cap: int, chunk: int) -> np.ndarray:
    """Mean over samples of transform(per-sample gradient), as a flat vector.

    transform is np.square (Fisher) or np.abs (sensitivity). Uses the first
    min(sample_cap, n) samples in stored order so the estimate is
    deterministic for a given dataset.
    """
    n = min(sample_cap, data.n)
    acc = np.zeros_like(model.params)
    aw, ab = param_views(model, acc)
    k = model.head_layer_index(head_id)
    wk, bk = model.layer(k)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        x = data.inputs[lo:hi]
        y = data.labels[lo:hi]
        acts, pre = model.trunk_forward(x)
        logits = acts[-1] @ wk + bk
        delta = out_delta(logits, y)
        aw[k] += transform(acts[-1]).T @ transform(delta)
        ab[k] += transform(delta).sum(axis=0)
        da = delta @ wk.T
        for i in range(model.n_trunk - 1, -1, -1):
            dz = da * (pre[i] > 0.0)
            aw[i] += transform(acts[i]).T @ transform(dz)
            ab[i] += transform(dz).sum(axis=0)
            if i > 0:
                da = dz @ model.layer(i)[0].T
    acc /= n
    return acc


def fisher_diagonal(model: MlpModel, data: Dataset, head_id: int,
                    sample_cap: int = DEFAULT_SAMPLE_CAP, chunk: int = 256) -> np.ndarray:
    """Empirical Fisher diagonal: mean squared per-sample log-likelihood gradient.

    Uses the true labels. Entries are nonnegative; heads other than head_id
    get exactly zero.
    """

    def out_delta(logits, y):
        d = softmax(logits)
        d[np.arange(len(y)), y] -= 1.0
        return d

    return _per_sample_reduction(model, data, head_id, out_delta, np.square,
                                 sample_cap, chunk)


def mas_importance(model: MlpModel, data: Dataset, head_id: int,
                   sample_cap: int = DEFAULT_SAMPLE_CAP, chunk: int = 256) -> np.ndarray:
    """Sensitivity importance: mean absolute per-sample gradient of 0.5*||logits||^2.

    Label-free; the output delta is the logit vector itself.
    """

    def out_delta(logits, y):
        return logits

    return _per_sample_reduction(model, data, head_id, out_delta, np.abs,
                                 sample_cap, chunk)


def online_ewc_accumulate(prev: np.ndarray, new_fisher: np.ndarray,
                          gamma: float = 1.0) -> np.ndarray:
    """Single running importance vector: gamma * prev + new_fisher."""
    if prev.shape != new_fisher.shape:
        raise ValueError("accumulated and new importance lengths differ")
    return gamma * prev + new_fisher


def save_snapshot(snap: TaskSnapshot, path: str) -> None:
    """Write the documented little-endian sidecar (see module docstring)."""
    n = snap.theta_star.size
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<I", snap.task_id))
        f.write(struct.pack("<Q", n))
        f.write(snap.theta_star.astype("<f8").tobytes())
        f.write(struct.pack("<Q", n))
        f.write(snap.importance.astype("<f8").tobytes())


def load_snapshot(path: str) -> TaskSnapshot:
    """Read a sidecar written by save_snapshot, validating magic and lengths."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: bad snapshot magic {magic!r}")
        task_id = struct.unpack("<I", f.read(4))[0]
        n = struct.unpack("<Q", f.read(8))[0]
        theta = np.frombuffer(f.read(8 * n), dtype="<f8")
        if theta.size != n:
            raise ValueError(f"{path}: truncated anchor vector")
        n2 = struct.unpack("<Q", f.read(8))[0]
        if n2 != n:
            raise ValueError(f"{path}: importance length {n2} != anchor length {n}")
        imp = np.frombuffer(f.read(8 * n), dtype="<f8")
        if imp.size != n:
            raise ValueError(f"{path}: truncated importance vector")
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return TaskSnapshot(task_id=task_id, theta_star=theta.copy(), importance=imp.copy())
