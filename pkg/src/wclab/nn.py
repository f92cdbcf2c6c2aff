"""Micro MLP engine: float64 forward/backward, cross-entropy, SGD with momentum.

The model is a ReLU trunk shared across tasks plus one linear head per task
(multi-head protocol). All parameters live in a single flat float64 vector;
layer weights and biases are reshaped views into it, so flattening is a copy
and optimizer steps are plain vector arithmetic.

Flatten order: trunk layers in order, then heads in order; within each layer
the weight matrix in row-major order, then the bias vector.
"""

from __future__ import annotations

import numpy as np


def make_rng(*seed_words: int) -> np.random.Generator:
    """Seedable generator with a platform-independent stream (PCG64).

    Extra words derive independent substreams, e.g. make_rng(seed, run_index).
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed_words))))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction so large logits cannot overflow."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class MlpModel:
    """ReLU trunk + per-task linear heads over one contiguous parameter vector.

    Heads are preallocated for the whole stream at construction; the parameter
    count never changes afterwards, which keeps snapshots from different
    stages aligned coordinate by coordinate.
    """

    def __init__(self, input_dim: int, hidden: list[int], head_sizes: list[int],
                 rng: np.random.Generator) -> None:
        if input_dim < 1 or any(h < 1 for h in hidden) or any(c < 1 for c in head_sizes):
            raise ValueError("layer sizes must be positive")
        self.input_dim = int(input_dim)
        self.hidden = [int(h) for h in hidden]
        self.head_sizes = [int(c) for c in head_sizes]

        trunk_dims = [self.input_dim] + self.hidden
        shapes: list[tuple[int, int]] = []
        for i in range(len(self.hidden)):
            shapes.append((trunk_dims[i], trunk_dims[i + 1]))
        trunk_out = trunk_dims[-1]
        for c in self.head_sizes:
            shapes.append((trunk_out, c))

        n = sum(r * c + c for r, c in shapes)
        self.params = np.zeros(n, dtype=np.float64)

        # Carve (W, b) views out of the flat vector in flatten order.
        self._weights: list[np.ndarray] = []
        self._biases: list[np.ndarray] = []
        off = 0
        for r, c in shapes:
            self._weights.append(self.params[off:off + r * c].reshape(r, c))
            off += r * c
            self._biases.append(self.params[off:off + c])
            off += c
        assert off == n

        self.n_trunk = len(self.hidden)
        for i, (r, c) in enumerate(shapes):
            bound = np.sqrt(6.0 / (r + c))
            self._weights[i][...] = rng.uniform(-bound, bound, size=(r, c))
            # biases stay zero

    @property
    def n_params(self) -> int:
        return self.params.size

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(W, b) views for layer i in flatten order (trunk first, then heads)."""
        return self._weights[i], self._biases[i]

    def head_layer_index(self, head_id: int) -> int:
        if not 0 <= head_id < len(self.head_sizes):
            raise ValueError(f"head_id {head_id} out of range")
        return self.n_trunk + head_id

    def trunk_forward(self, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Activations [A0..AL] and pre-activations [Z1..ZL] of the trunk."""
        acts = [np.asarray(x, dtype=np.float64)]
        pre = []
        for i in range(self.n_trunk):
            z = acts[-1] @ self._weights[i] + self._biases[i]
            pre.append(z)
            acts.append(np.maximum(z, 0.0))
        return acts, pre

    def forward_logits(self, x: np.ndarray, head_id: int) -> np.ndarray:
        """Logits of the given head for a batch of rows. No activation on the head."""
        k = self.head_layer_index(head_id)
        acts, _ = self.trunk_forward(x)
        return acts[-1] @ self._weights[k] + self._biases[k]


def flatten(model: MlpModel) -> np.ndarray:
    """Copy of the full parameter vector in the documented order."""
    return model.params.copy()


def unflatten(model: MlpModel, vec: np.ndarray) -> None:
    """Load a flat vector back into the model (exact inverse of flatten)."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != model.params.shape:
        raise ValueError(f"expected {model.params.shape[0]} parameters, got {vec.shape}")
    np.copyto(model.params, vec)


def param_views(model: MlpModel, flat: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-layer (weights, biases) views into a flat vector laid out like model.params."""
    gw: list[np.ndarray] = []
    gb: list[np.ndarray] = []
    off = 0
    for w in model._weights:
        gw.append(flat[off:off + w.size].reshape(w.shape))
        off += w.size
        gb.append(flat[off:off + w.shape[1]])
        off += w.shape[1]
    return gw, gb


def ce_loss_and_grad(model: MlpModel, x: np.ndarray, y: np.ndarray, head_id: int,
                     grad_out: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient as a flat vector.

    The loss is computed through log-sum-exp (never through probabilities),
    so extreme logits stay finite. Heads other than head_id get zero gradient.
    """
    k = model.head_layer_index(head_id)
    acts, pre = model.trunk_forward(x)
    logits = acts[-1] @ model._weights[k] + model._biases[k]

    b = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1, keepdims=True)) + m
    loss = float(np.mean(lse[:, 0] - logits[np.arange(b), y]))

    if grad_out is None:
        grad_out = np.zeros_like(model.params)
    else:
        grad_out[...] = 0.0
    gw, gb = param_views(model, grad_out)

    delta = np.exp(logits - lse)            # softmax via the same lse
    delta[np.arange(b), y] -= 1.0
    delta /= b
    gw[k][...] = acts[-1].T @ delta
    gb[k][...] = delta.sum(axis=0)

    da = delta @ model._weights[k].T
    for i in range(model.n_trunk - 1, -1, -1):
        dz = da * (pre[i] > 0.0)
        gw[i][...] = acts[i].T @ dz
        gb[i][...] = dz.sum(axis=0)
        if i > 0:
            da = dz @ model._weights[i].T
    return loss, grad_out


def sgd_momentum_step(params: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
                      lr: float, momentum: float) -> None:
    """In-place heavy-ball update: v <- momentum*v + g; theta <- theta - lr*v."""
    if np.isnan(grad).any():
        raise FloatingPointError("NaN in gradient")
    velocity *= momentum
    velocity += grad
    params -= lr * velocity
