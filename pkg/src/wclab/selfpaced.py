"""Self-paced task weighting: difficulty scores, priority weights, regularizers.

Past tasks are scored by how well the current model still serves them and get
priority weights in [0, 1] that scale their consolidation penalties. The
difficulty score grows with retained accuracy (eta = -psi*log(1-psi)), so a
task the model still remembers well counts as "difficult" and receives a
small weight, while a forgotten task keeps a weight near 1. The age parameter
mu controls how many tasks stay active: weights are positive only below mu.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

PSI_CEIL = 1.0 - 1e-12

REGULARIZER_KINDS = ("proposed", "hard", "linear", "logarithmic")


def difficulty(psi):
    """Difficulty score eta = -psi * ln(1 - psi) for accuracies psi in [0, 1].

    psi is clamped to 1 - 1e-12 before the log so a perfectly remembered task
    stays finite. Accepts scalars or arrays; raises on values outside [0, 1].
    """
    p = np.asarray(psi, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError(f"psi must lie in [0, 1], got {psi}")
    p = np.minimum(p, PSI_CEIL)
    eta = -p * np.log1p(-p)
    return float(eta) if np.isscalar(psi) else eta


def proposed_weight(eta, mu):
    """Closed-form priority weight sqrt(1 - eta/mu) for eta < mu, else 0.

    This is the exact minimizer of weight_objective over v >= 0.
    """
    e = np.asarray(eta, dtype=np.float64)
    if np.any(e < 0.0):
        raise ValueError(f"eta must be nonnegative, got {eta}")
    if mu <= 0.0:
        raise ValueError(f"mu must be positive, got {mu}")
    v = np.where(e < mu, np.sqrt(np.maximum(1.0 - e / mu, 0.0)), 0.0)
    return float(v) if np.isscalar(eta) else v


def weight_objective(v, eta: float, mu: float):
    """Per-task scalar objective v*eta + mu*(v**3/3 - v), minimized by proposed_weight."""
    v = np.asarray(v, dtype=np.float64)
    out = v * eta + mu * (v ** 3 / 3.0 - v)
    return float(out) if out.ndim == 0 else out


def regularizer_value(v: np.ndarray, kind: str, mu: float | None = None) -> float:
    """Scalar f(v) for the chosen regularizer kind (lambda folded into the outer mu).

    The logarithmic kind needs mu (its shape parameter is zeta = 1 - mu).
    """
    v = np.asarray(v, dtype=np.float64)
    if kind == "proposed":
        return float(np.linalg.norm(v) ** 3 / 3.0 - v.sum())
    if kind == "hard":
        return float(-v.sum())
    if kind == "linear":
        return float(0.5 * np.sum(v ** 2 - 2.0 * v))
    if kind == "logarithmic":
        if mu is None or not 0.0 < mu < 1.0:
            raise ValueError("logarithmic kind needs 0 < mu < 1")
        zeta = 1.0 - mu
        return float(np.sum(zeta * v - zeta ** v / np.log(zeta)))
    raise ValueError(f"unknown regularizer kind {kind!r}")


def variant_weight(eta: float, mu: float, kind: str) -> float:
    """Closed-form weight for any regularizer kind, clipped to [0, 1].

    The logarithmic rule log(eta + zeta)/log(zeta) is only defined for
    0 < mu < 1; outside that range it falls back to the linear rule with a
    recorded warning.
    """
    if eta < 0.0:
        raise ValueError(f"eta must be nonnegative, got {eta}")
    if mu <= 0.0:
        raise ValueError(f"mu must be positive, got {mu}")
    if kind == "proposed":
        return proposed_weight(eta, mu)
    if kind == "hard":
        return 1.0 if eta < mu else 0.0
    if kind == "linear":
        return max(0.0, 1.0 - eta / mu)
    if kind == "logarithmic":
        if not mu < 1.0:
            warnings.warn(f"logarithmic weight rule needs mu in (0, 1), got {mu}; "
                          "falling back to the linear rule")
            return max(0.0, 1.0 - eta / mu)
        if eta >= mu:
            return 0.0
        zeta = 1.0 - mu
        return float(np.clip(np.log(eta + zeta) / np.log(zeta), 0.0, 1.0))
    raise ValueError(f"unknown regularizer kind {kind!r}")


@dataclass(frozen=True)
class MuPolicy:
    """How the age parameter mu is chosen each stage.

    kind "fixed": mu = value. kind "topk": mu sits just above the k-th
    smallest difficulty, so exactly min(k, m-1) tasks stay active (given
    distinct positive difficulties). kind "quantile": mu sits just above the
    rho-quantile of the difficulties.
    """

    kind: str = "topk"
    value: float = 1.0
    k: int = 0
    rho: float = 0.5

    def __post_init__(self):
        if self.kind not in ("fixed", "topk", "quantile"):
            raise ValueError(f"unknown mu policy kind {self.kind!r}")
        if self.kind == "fixed" and self.value <= 0.0:
            raise ValueError("fixed mu must be positive")
        if self.kind == "topk" and self.k < 0:
            raise ValueError("topk k must be nonnegative")
        if self.kind == "quantile" and not 0.0 <= self.rho <= 1.0:
            raise ValueError("quantile rho must lie in [0, 1]")


def default_topk(n_past: int) -> int:
    """Default k: keep the ceil((m-1)/2) most-forgotten past tasks active."""
    return -(-n_past // 2)


def resolve_mu(etas: np.ndarray, policy: MuPolicy) -> float:
    """Resolve mu > 0 against the current difficulty scores."""
    etas = np.asarray(etas, dtype=np.float64)
    if etas.size == 0:
        raise ValueError("no past tasks to resolve mu against")
    if policy.kind == "fixed":
        return policy.value
    if policy.kind == "topk":
        k = policy.k if policy.k > 0 else default_topk(etas.size)
        kth = float(np.sort(etas)[min(k, etas.size) - 1])
        mu = kth * (1.0 + 1e-9)
    else:
        mu = float(np.quantile(etas, policy.rho)) * (1.0 + 1e-9)
    if mu <= 0.0:
        # every selected difficulty is exactly 0 (fully forgotten tasks);
        # any mu below the smallest positive difficulty keeps exactly those active
        positive = etas[etas > 0.0]
        mu = float(positive.min()) / 2.0 if positive.size else 1.0
    return mu


def weight_vector(psis: np.ndarray, policy: MuPolicy,
                  kind: str = "proposed") -> tuple[np.ndarray, float]:
    """Priority weights for all past tasks plus the resolved mu.

    Weights are computed once per stage from the retained accuracies psis and
    then stay fixed while the new task trains.
    """
    psis = np.asarray(psis, dtype=np.float64)
    etas = difficulty(psis)
    mu = resolve_mu(etas, policy)
    v = np.array([variant_weight(float(e), mu, kind) for e in etas])
    return v, mu


def _weight_column(etas: np.ndarray, mu: float, kind: str) -> np.ndarray:
    """Vectorized weight rule over an eta grid (mu already valid for the kind)."""
    if kind == "proposed":
        return proposed_weight(etas, mu)
    if kind == "hard":
        return (etas < mu).astype(np.float64)
    if kind == "linear":
        return np.maximum(0.0, 1.0 - etas / mu)
    zeta = 1.0 - mu
    w = np.clip(np.log(etas + zeta) / np.log(zeta), 0.0, 1.0)
    return np.where(etas < mu, w, 0.0)


def _scalar_f(vs: np.ndarray, mu: float, kind: str) -> np.ndarray:
    """f along one coordinate (equals regularizer_value of the 1-vector [v])."""
    if kind == "proposed":
        return np.abs(vs) ** 3 / 3.0 - vs
    if kind == "hard":
        return -vs
    if kind == "linear":
        return 0.5 * (vs ** 2 - 2.0 * vs)
    zeta = 1.0 - mu
    return zeta * vs - zeta ** vs / np.log(zeta)


@dataclass
class CheckReport:
    """Outcome of the numerical soundness checks for a regularizer kind."""

    kind: str
    passed: bool
    failures: list[str] = field(default_factory=list)


def regularizer_check(kind: str = "proposed", trials: int = 100, grid: int = 1000,
                      hi: float = 5.0, conv_tol: float = 1e-9,
                      mono_tol: float = 1e-12) -> CheckReport:
    """Numerically audit a regularizer kind against the soundness conditions.

    Checks, on dense grids over (eta, mu) in (0, hi]^2 (mu capped below 1 for
    the logarithmic kind): (a) convexity of f on [0, 1] via second
    differences for `trials` random mu draws, (b) the weight rule
    nonincreasing in eta and nondecreasing in mu on a grid x grid mesh,
    (c) the limit conditions: weight 1 at eta = 0, weight 0 for huge eta,
    weight 0 as mu -> 0+, weight <= 1 as mu -> infinity (the mu limits apply
    to the proposed kind, whose mu domain is unbounded).

    Any violated condition is reported with a witness point rather than
    raised, so callers can print an audit. The proposed kind passes all
    conditions; variants may honestly fail some (the logarithmic weight is
    not monotone in mu), and the report says so.
    """
    if kind not in REGULARIZER_KINDS:
        raise ValueError(f"unknown regularizer kind {kind!r}")
    failures: list[str] = []
    rng = np.random.default_rng(12345)
    mu_hi = min(hi, 1.0 - 1e-9) if kind == "logarithmic" else hi

    vs = np.linspace(0.0, 1.0, grid)
    dv = vs[1] - vs[0]
    for _ in range(trials):
        mu = float(rng.uniform(1e-6, mu_hi))
        f = _scalar_f(vs, mu, kind)
        second = (f[2:] - 2.0 * f[1:-1] + f[:-2]) / dv ** 2
        j = int(np.argmin(second))
        if second[j] < -conv_tol:
            failures.append(f"convexity: d2f/dv2 = {second[j]:.3e} at v = {vs[j + 1]:.6f}, mu = {mu:.6f}")
            break

    etas = np.linspace(hi / grid, hi, grid)
    mus = np.linspace(mu_hi / grid, mu_hi, grid)
    w = np.empty((grid, grid))
    for j, mu in enumerate(mus):
        w[:, j] = _weight_column(etas, float(mu), kind)

    d_eta = np.diff(w, axis=0)
    if d_eta.max() > mono_tol:
        i, j = np.unravel_index(int(np.argmax(d_eta)), d_eta.shape)
        failures.append(f"eta-monotonicity: weight rises by {d_eta[i, j]:.3e} "
                        f"at eta = {etas[i]:.6f} -> {etas[i + 1]:.6f}, mu = {mus[j]:.6f}")
    d_mu = np.diff(w, axis=1)
    if d_mu.min() < -mono_tol:
        i, j = np.unravel_index(int(np.argmin(d_mu)), d_mu.shape)
        failures.append(f"mu-monotonicity: weight drops by {-d_mu[i, j]:.3e} "
                        f"at eta = {etas[i]:.6f}, mu = {mus[j]:.6f} -> {mus[j + 1]:.6f}")

    for mu in (float(mus[0]), float(mus[-1])):
        v0 = variant_weight(0.0, mu, kind)
        if abs(v0 - 1.0) > mono_tol:
            failures.append(f"limit eta -> 0: weight {v0} != 1 at mu = {mu}")
    if variant_weight(1e15, float(mus[-1]), kind) > mono_tol:
        failures.append("limit eta -> inf: weight not 0")
    if kind == "proposed":
        if proposed_weight(float(etas[0]), 1e-300) > mono_tol:
            failures.append("limit mu -> 0: weight not 0")
        if proposed_weight(float(etas[-1]), 1e300) > 1.0 + mono_tol:
            failures.append("limit mu -> inf: weight exceeds 1")

    return CheckReport(kind=kind, passed=not failures, failures=failures)
