"""Continual training loop: quadratic consolidation penalties with per-task
priority weights, importance snapshots, and the stage-by-stage protocol.

Method tags
-----------
finetune     plain SGD per task, no memory
joint        retrains from current parameters on all tasks seen so far
ewc          quadratic anchors to every past task, Fisher importances,
             penalty (lam/2)*sum_t sum_i G_ti (theta_i - theta*_ti)^2
online_ewc   one running Fisher vector (decay online_gamma), latest anchor only
mas          quadratic anchors to every past task, sensitivity importances,
             penalty gamma*sum_t sum_i O_ti (theta_i - theta*_ti)^2 (unhalved)
sp_ewc       ewc with self-paced priority weights v_t inside the penalty
sp_mas       mas with self-paced priority weights v_t inside the penalty

Priority weights are computed once per stage, before the first gradient step,
from retained accuracies on the stored eval subsets; snapshots whose weight
is exactly zero are never touched during that stage (the operation counter
proves it). A zero penalty strength skips the penalty code path entirely, so
ewc with lam = 0 reproduces finetune bit for bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Task
from .importance import (DEFAULT_SAMPLE_CAP, TaskSnapshot, fisher_diagonal,
                         mas_importance, online_ewc_accumulate)
from .nn import MlpModel, ce_loss_and_grad, make_rng, sgd_momentum_step
from .selfpaced import MuPolicy, difficulty, weight_vector

METHOD_TAGS = ("finetune", "joint", "ewc", "online_ewc", "mas", "sp_ewc", "sp_mas")
EWC_FAMILY = ("ewc", "online_ewc", "sp_ewc")
MAS_FAMILY = ("mas", "sp_mas")


@dataclass(frozen=True)
class Method:
    """Algorithm selector plus its regularization strengths."""

    tag: str
    lam: float = 0.0
    gamma: float = 0.0
    online_gamma: float = 1.0
    regularizer: str = "proposed"
    mu_policy: MuPolicy = field(default_factory=MuPolicy)

    def __post_init__(self):
        if self.tag not in METHOD_TAGS:
            raise ValueError(f"unknown method tag {self.tag!r}")
        if self.lam < 0.0 or self.gamma < 0.0:
            raise ValueError("penalty strengths must be nonnegative")

    @property
    def self_paced(self) -> bool:
        return self.tag in ("sp_ewc", "sp_mas")

    @property
    def strength(self) -> float:
        """The active penalty strength for this method's family."""
        return self.lam if self.tag in EWC_FAMILY else self.gamma


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters shared by every method in a run."""

    lr: float
    epochs: int
    batch_size: int = 128
    momentum: float = 0.9
    hidden: tuple[int, ...] = (400, 400)
    sample_cap: int = DEFAULT_SAMPLE_CAP
    anneal: str = "cosine"

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr, epochs, and batch_size must be positive")
        if self.anneal not in ("cosine", "none"):
            raise ValueError("anneal must be 'cosine' or 'none'")

    def lr_at(self, epoch: int) -> float:
        """Step size for one epoch; lr is the peak of the schedule.

        The cosine schedule reaches exactly zero on the last epoch, so late
        epochs settle instead of ringing around the stage optimum.
        """
        if self.anneal == "none" or self.epochs == 1:
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / (self.epochs - 1)))


@dataclass
class OpCounter:
    """Instrumentation proving dropped snapshots are never touched."""

    penalty_calls: int = 0
    snapshot_touches: int = 0


@dataclass
class ContinualState:
    """Everything the learner carries between tasks."""

    model: MlpModel
    method: Method
    snapshots: list[TaskSnapshot] = field(default_factory=list)
    eval_subsets: list[Dataset] = field(default_factory=list)
    joint_buffer: list[Dataset] = field(default_factory=list)
    n_seen: int = 0
    counter: OpCounter = field(default_factory=OpCounter)


def evaluate_accuracy(model: MlpModel, data: Dataset, head_id: int,
                      chunk: int = 512) -> float:
    """Fraction of argmax-correct predictions on the given split."""
    correct = 0
    for lo in range(0, data.n, chunk):
        hi = min(lo + chunk, data.n)
        logits = model.forward_logits(data.inputs[lo:hi], head_id)
        correct += int(np.sum(np.argmax(logits, axis=1) == data.labels[lo:hi]))
    return correct / data.n


def anchored_penalty(theta: np.ndarray, snap: TaskSnapshot, lam: float) -> float:
    """Diagnostic anchored loss for one task: (lam/2) * sum_i G_i (theta_i - theta*_i)^2.

    Reported for analysis only; the self-paced weights are driven by retained
    accuracy, not by this quantity.
    """
    diff = theta - snap.theta_star
    return 0.5 * lam * float(np.dot(snap.importance * diff, diff))


def penalty_and_grad(theta: np.ndarray, snapshots: list[TaskSnapshot], v: np.ndarray,
                     method: Method, counter: OpCounter,
                     grad_out: np.ndarray) -> float:
    """Weighted consolidation penalty; adds its gradient into grad_out.

    EWC family: value (lam/2) * v_t * G (theta-theta*)^2 per task, gradient
    lam * v_t * G (theta-theta*) (the 1/2 cancels). MAS family: unhalved
    value gamma * v_t * O (theta-theta*)^2, gradient 2 * gamma * v_t * O
    (theta-theta*). Snapshots with v_t == 0 are skipped without reading them.
    """
    counter.penalty_calls += 1
    strength = method.strength
    halved = method.tag in EWC_FAMILY
    pen = 0.0
    tmp = np.empty_like(theta)
    for snap, vt in zip(snapshots, v):
        if vt == 0.0:
            continue
        counter.snapshot_touches += 1
        np.subtract(theta, snap.theta_star, out=tmp)
        quad = float(np.dot(snap.importance * tmp, tmp))
        coeff = strength * vt
        if halved:
            pen += 0.5 * coeff * quad
            grad_out += (coeff) * (snap.importance * tmp)
        else:
            pen += coeff * quad
            grad_out += (2.0 * coeff) * (snap.importance * tmp)
    return pen


@dataclass
class StageLog:
    """Everything recorded while learning one task."""

    stage: int
    mu: float = float("nan")
    weights: list[tuple[int, float, float]] = field(default_factory=list)  # (task, v, eta)
    objectives: list[float] = field(default_factory=list)  # one per epoch
    retained_k: int = 0
    stored_snapshots: int = 0
    penalty_calls: int = 0
    snapshot_touches: int = 0
    steps: int = 0
    seconds: float = 0.0


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[lo:lo + batch_size] for lo in range(0, n, batch_size)]


def _dataset_ce(model: MlpModel, ds: Dataset, head_id: int,
                chunk: int = 2048) -> float:
    """Mean cross-entropy over a whole split, no gradient work."""
    total = 0.0
    for lo in range(0, ds.n, chunk):
        hi = min(lo + chunk, ds.n)
        logits = model.forward_logits(ds.inputs[lo:hi], head_id)
        m = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
        total += float(np.sum(lse - logits[np.arange(hi - lo), ds.labels[lo:hi]]))
    return total / ds.n


def _stage_objective(model: MlpModel, train_sets: list[Dataset], head_ids: list[int],
                     snapshots: list[TaskSnapshot], v: np.ndarray, method: Method,
                     use_penalty: bool) -> float:
    """The full objective at an epoch boundary: mean ce over the stage's
    training data plus the consolidation penalty.

    This is what convergence plots track; the noisy running mean of minibatch
    losses is not logged. A throwaway counter keeps the skip-guarantee
    instrumentation scoped to optimization steps.
    """
    total, n = 0.0, 0
    for ds, head in zip(train_sets, head_ids):
        total += _dataset_ce(model, ds, head) * ds.n
        n += ds.n
    obj = total / n
    if use_penalty:
        obj += penalty_and_grad(model.params, snapshots, v, method, OpCounter(),
                                np.zeros_like(model.params))
    return obj


def learn_task(state: ContinualState, task: Task, cfg: TrainConfig,
               rng: np.random.Generator) -> StageLog:
    """Train one stage: resolve priority weights, minimize ce + penalty, snapshot.

    Stage numbering is 1-based; the first stage never evaluates a penalty.
    The priority weights are resolved from retained accuracies before the
    first gradient step and stay fixed for the whole stage.
    """
    method = state.method
    stage = state.n_seen + 1
    log = StageLog(stage=stage)
    t0 = time.perf_counter()

    n_past = len(state.snapshots)
    v = np.ones(n_past)
    if method.self_paced and n_past > 0:
        psis = np.array([evaluate_accuracy(state.model, ds, s.task_id)
                         for s, ds in zip(state.snapshots, state.eval_subsets)])
        etas = difficulty(psis)
        v, mu = weight_vector(psis, method.mu_policy, method.regularizer)
        log.mu = mu
        log.weights = [(s.task_id, float(vt), float(e))
                       for s, vt, e in zip(state.snapshots, v, etas)]
    elif n_past > 0:
        log.weights = [(s.task_id, 1.0, float("nan")) for s in state.snapshots]

    use_penalty = (method.strength > 0.0 and n_past > 0 and bool(np.any(v > 0.0))
                   and method.tag not in ("finetune", "joint"))
    log.retained_k = int(np.sum(v > 0.0)) if use_penalty else 0

    velocity = np.zeros_like(state.model.params)
    grad = np.empty_like(state.model.params)
    calls0, touches0 = state.counter.penalty_calls, state.counter.snapshot_touches

    if method.tag == "joint":
        train_sets = [t for t in state.joint_buffer] + [task.train]
        head_ids = list(range(len(state.joint_buffer))) + [task.head_id]
    else:
        train_sets = [task.train]
        head_ids = [task.head_id]

    for epoch in range(cfg.epochs):
        lr_now = cfg.lr_at(epoch)
        batches: list[tuple[int, np.ndarray]] = []
        for which, ds in enumerate(train_sets):
            batches.extend((which, idx) for idx in _epoch_batches(ds.n, cfg.batch_size, rng))
        if len(train_sets) > 1:
            batches = [batches[i] for i in rng.permutation(len(batches))]
        for which, idx in batches:
            ds = train_sets[which]
            ce_loss_and_grad(state.model, ds.inputs[idx], ds.labels[idx],
                             head_ids[which], grad_out=grad)
            if use_penalty:
                penalty_and_grad(state.model.params, state.snapshots, v,
                                 method, state.counter, grad)
            sgd_momentum_step(state.model.params, grad, velocity, lr_now, cfg.momentum)
            log.steps += 1
        log.objectives.append(_stage_objective(state.model, train_sets, head_ids,
                                               state.snapshots, v, method, use_penalty))

    if method.tag in ("ewc", "sp_ewc"):
        imp = fisher_diagonal(state.model, task.train, task.head_id, cfg.sample_cap)
        state.snapshots.append(TaskSnapshot(task.task_id, state.model.params.copy(), imp))
    elif method.tag == "online_ewc":
        imp = fisher_diagonal(state.model, task.train, task.head_id, cfg.sample_cap)
        if state.snapshots:
            imp = online_ewc_accumulate(state.snapshots[0].importance, imp,
                                        method.online_gamma)
        state.snapshots = [TaskSnapshot(task.task_id, state.model.params.copy(), imp)]
    elif method.tag in MAS_FAMILY:
        imp = mas_importance(state.model, task.train, task.head_id, cfg.sample_cap)
        state.snapshots.append(TaskSnapshot(task.task_id, state.model.params.copy(), imp))
    elif method.tag == "joint":
        state.joint_buffer.append(task.train)

    if method.tag not in ("finetune", "joint"):
        state.eval_subsets.append(task.eval_subset)
    state.n_seen += 1
    log.stored_snapshots = len(state.snapshots)
    log.penalty_calls = state.counter.penalty_calls - calls0
    log.snapshot_touches = state.counter.snapshot_touches - touches0
    log.seconds = time.perf_counter() - t0
    return log


@dataclass
class RunResult:
    """One (method, seed, hyper) pass over a whole stream."""

    method: Method
    acc_matrix: np.ndarray  # [m, m], entry [i, j] = accuracy on task j+1 after stage i+1
    stage_logs: list[StageLog]
    ledger_active: list[int]
    ledger_total: list[int]

    @property
    def n_stages(self) -> int:
        return self.acc_matrix.shape[0]


def run_stream(tasks: list[Task], method: Method, cfg: TrainConfig,
               seed: int) -> RunResult:
    """Run one method over the whole stream, scoring all seen tasks per stage.

    The seed fixes model init and batch order; methods that share a seed see
    identical draws, so zero-strength runs reproduce finetune exactly.
    The storage ledgers count exact retained parameters per stage: the live
    model plus optimizer buffer (2N), plus 2N per snapshot (anchor +
    importance), participating snapshots for the active ledger and stored
    snapshots for the total ledger.
    """
    d = tasks[0].d
    if any(t.d != d for t in tasks):
        raise ValueError("all tasks in a stream must share input dimensionality")
    rng = make_rng(seed)
    model = MlpModel(d, list(cfg.hidden), [t.n_classes for t in tasks], rng)
    state = ContinualState(model=model, method=method)

    m = len(tasks)
    acc = np.full((m, m), np.nan)
    logs: list[StageLog] = []
    ledger_active: list[int] = []
    ledger_total: list[int] = []
    n = model.n_params
    for i, task in enumerate(tasks):
        log = learn_task(state, task, cfg, rng)
        logs.append(log)
        for j in range(i + 1):
            acc[i, j] = evaluate_accuracy(model, tasks[j].test, tasks[j].head_id)
        stored = len(state.snapshots)
        ledger_active.append(2 * n + log.retained_k * 2 * n)
        ledger_total.append(2 * n + stored * 2 * n)
    return RunResult(method=method, acc_matrix=acc, stage_logs=logs,
                     ledger_active=ledger_active, ledger_total=ledger_total)
