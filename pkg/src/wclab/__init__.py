"""Continual-learning laboratory: self-paced weight consolidation on a
micro MLP engine, with task streams, metrics, and a reproducible harness."""

__version__ = "0.1.0"

from .data import Dataset, StreamSpec, Task, build_stream, load_idx  # noqa: E402,F401
from .importance import (TaskSnapshot, fisher_diagonal, load_snapshot,  # noqa: F401
                         mas_importance, online_ewc_accumulate, save_snapshot)
from .metrics import StorageLedger, acf, apa, ps, stream_averages  # noqa: F401
from .nn import MlpModel, ce_loss_and_grad, flatten, make_rng, unflatten  # noqa: F401
from .selfpaced import (MuPolicy, difficulty, proposed_weight,  # noqa: F401
                        regularizer_check, regularizer_value, variant_weight,
                        weight_objective, weight_vector)
from .trainer import (ContinualState, Method, TrainConfig, evaluate_accuracy,  # noqa: F401
                      learn_task, penalty_and_grad, run_stream)
