"""Self-contained soundness checks behind the `check` CLI subcommand.

Each check returns (passed, detail string); they re-derive their expected
values from first principles (grid search, finite differences) rather than
trusting the implementation under test.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .importance import TaskSnapshot
from .nn import MlpModel, ce_loss_and_grad, flatten, make_rng, unflatten
from .selfpaced import proposed_weight, regularizer_check, weight_objective
from .trainer import Method, OpCounter, penalty_and_grad


def closed_form_vs_grid(draws: int = 100, step: float = 1e-4, tol: float = 1e-3,
                        seed: int = 2024) -> tuple[bool, str]:
    """Closed-form weight vs brute-force argmin of the scalar objective."""
    rng = np.random.default_rng(seed)
    vs = np.arange(0.0, 1.0 + step, step)
    worst = 0.0
    for _ in range(draws):
        eta = float(rng.uniform(1e-9, 5.0))
        mu = float(rng.uniform(1e-9, 5.0))
        grid_v = float(vs[np.argmin(weight_objective(vs, eta, mu))])
        worst = max(worst, abs(proposed_weight(eta, mu) - grid_v))
    return worst <= tol, f"max |closed-form - grid argmin| = {worst:.2e} over {draws} draws"


def soundness_suite(grid: int = 1000, trials: int = 1000) -> tuple[bool, str]:
    """Convexity, monotonicity, and limit conditions for the proposed kind."""
    report = regularizer_check("proposed", trials=trials, grid=grid)
    if report.passed:
        return True, f"all conditions hold on {grid}x{grid} grids"
    return False, "; ".join(report.failures)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float((np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)).max())


def _smooth_instance(rng, d, hidden, n_classes, batch):
    """A model/batch pair with no trunk pre-activation near the relu kink,
    so central differences are trustworthy at step 1e-5."""
    while True:
        model = MlpModel(d, hidden, [n_classes], rng)
        x = rng.standard_normal((batch, d))
        _, pre = model.trunk_forward(x)
        if all(np.abs(z).min() > 1e-3 for z in pre) or not pre:
            y = rng.integers(0, n_classes, size=batch)
            return model, x, y


def gradient_checks(instances: int = 20, ce_tol: float = 1e-4, pen_tol: float = 1e-6,
                    seed: int = 2025) -> tuple[bool, str]:
    """Analytic gradients vs central finite differences on random instances."""
    rng = make_rng(seed)
    worst_ce = worst_pen = 0.0
    for _ in range(instances):
        d = int(rng.integers(2, 10))
        hidden = [int(rng.integers(3, 10)) for _ in range(int(rng.integers(0, 3)))]
        model, x, y = _smooth_instance(rng, d, hidden, int(rng.integers(2, 5)),
                                       int(rng.integers(1, 6)))
        theta0 = flatten(model)
        _, g = ce_loss_and_grad(model, x, y, 0)
        num = np.zeros_like(theta0)
        h = 1e-5
        for i in range(theta0.size):
            for sgn in (1.0, -1.0):
                t = theta0.copy()
                t[i] += sgn * h
                unflatten(model, t)
                num[i] += sgn * ce_loss_and_grad(model, x, y, 0)[0]
        num /= 2 * h
        unflatten(model, theta0)
        worst_ce = max(worst_ce, _rel(g, num))

        n = theta0.size
        snaps = [TaskSnapshot(t, rng.standard_normal(n), rng.random(n)) for t in range(2)]
        v = np.array([1.0, float(rng.uniform(0.1, 1.0))])
        method = Method("sp_ewc", lam=float(rng.uniform(0.5, 3.0)))
        gp = np.zeros(n)
        penalty_and_grad(theta0, snaps, v, method, OpCounter(), gp)
        nump = np.zeros(n)
        hp = 1e-3  # the penalty is quadratic, so central differences are exact in h
        for i in range(n):
            tp, tm = theta0.copy(), theta0.copy()
            tp[i] += hp
            tm[i] -= hp
            zp, zm = np.zeros(n), np.zeros(n)
            nump[i] = (penalty_and_grad(tp, snaps, v, method, OpCounter(), zp)
                       - penalty_and_grad(tm, snaps, v, method, OpCounter(), zm)) / (2 * hp)
        worst_pen = max(worst_pen, _rel(gp, nump))
    ok = worst_ce < ce_tol and worst_pen < pen_tol
    return ok, (f"worst ce rel err {worst_ce:.2e} (tol {ce_tol:g}), "
                f"worst penalty rel err {worst_pen:.2e} (tol {pen_tol:g})")
