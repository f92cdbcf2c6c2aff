"""Continual metrics over the lower-triangular accuracy matrix and the
storage ledgers: average accuracy, forgetting, and parameter storage.

Stages are 1-based in this module's signatures, matching how results are
reported; acc[i, j] holds accuracy on task j+1 measured after stage i+1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _check_stage(acc: np.ndarray, m: int) -> None:
    if acc.ndim != 2 or acc.shape[0] != acc.shape[1]:
        raise ValueError("accuracy matrix must be square")
    if not 1 <= m <= acc.shape[0]:
        raise ValueError(f"stage {m} out of range for {acc.shape[0]} stages")
    row = acc[m - 1, :m]
    if np.isnan(row).any() or row.min() < 0.0 or row.max() > 1.0:
        raise ValueError(f"row for stage {m} must hold accuracies in [0, 1]")


def apa(acc: np.ndarray, m: int) -> float:
    """Average per-task accuracy after stage m: mean of a[m][1..m]."""
    _check_stage(acc, m)
    return float(acc[m - 1, :m].mean())


def acf(acc: np.ndarray, m: int) -> float:
    """Average catastrophic forgetting after stage m.

    Mean over past tasks of (accuracy right after learning the task minus
    accuracy now); 0 at the first stage by definition. Negative values mean
    backward transfer and are reported as-is.
    """
    _check_stage(acc, m)
    if m == 1:
        return 0.0
    drops = [acc[j, j] - acc[m - 1, j] for j in range(m - 1)]
    return float(np.mean(drops))


@dataclass
class StorageLedger:
    """Exact retained-parameter counts per stage (instrumented, not estimated)."""

    counts: list[int] = field(default_factory=list)

    def add(self, count: int) -> None:
        if count <= 0:
            raise ValueError("retained parameter count must be positive")
        self.counts.append(int(count))


def ps(ledger: StorageLedger, m: int) -> float:
    """Parameter storage efficiency after stage m.

    min(1, (sum_{t<=m} counts[1]/counts[t]) / m): 1 means no growth, the
    all-tasks ledger's unit growth gives the harmonic sum over m.
    """
    if not 1 <= m <= len(ledger.counts):
        raise ValueError(f"stage {m} out of range for {len(ledger.counts)} ledger entries")
    base = ledger.counts[0]
    ratios = [base / ledger.counts[t] for t in range(m)]
    return min(1.0, float(np.sum(ratios)) / m)


def stream_averages(acc: np.ndarray, ledger_active: StorageLedger,
                    ledger_total: StorageLedger) -> dict[str, float]:
    """Unweighted averages of the stage-wise metrics over the whole stream."""
    m = acc.shape[0]
    stages = range(1, m + 1)
    return {
        "apa": float(np.mean([apa(acc, s) for s in stages])),
        "acf": float(np.mean([acf(acc, s) for s in stages])),
        "ps_active": float(np.mean([ps(ledger_active, s) for s in stages])),
        "ps_total": float(np.mean([ps(ledger_total, s) for s in stages])),
    }
