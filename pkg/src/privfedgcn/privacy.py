"""Client-level DP: global clipping, Gaussian noise, and an RDP accountant.

The accountant tracks the Renyi-DP curve of the Poisson-subsampled Gaussian
mechanism on an integer order grid and converts to (epsilon, delta) with the
standard ``T * rdp(alpha) + log(1/delta) / (alpha - 1)`` bound.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import AccountingError, CalibrationError, ParameterError

DEFAULT_ORDERS = np.arange(2, 257, dtype=np.int64)
SIGMA_BRACKET = (0.3, 100.0)


@dataclass
class PrivacySpec:
    """Noise/clipping parameters of one private training run.

    ``epsilon = inf`` together with ``sigma = 0`` is the non-private setting.
    """

    epsilon: float = math.inf
    delta: float = 1e-3
    sigma: float = 0.0
    clip: float = 1.0
    q: float = 0.01
    steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ParameterError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.clip > 0:
            raise ParameterError(f"clip norm must be positive, got {self.clip}")
        if not 0.0 < self.q <= 1.0:
            raise ParameterError(f"sampling rate must lie in (0, 1], got {self.q}")
        if self.sigma < 0:
            raise ParameterError(f"sigma must be non-negative, got {self.sigma}")
        if (self.sigma == 0) != math.isinf(self.epsilon):
            raise ParameterError("sigma = 0 exactly when epsilon is infinite")

    @property
    def private(self) -> bool:
        return self.sigma > 0


def clip_global(grad: np.ndarray, clip: float) -> np.ndarray:
    """Scale ``grad`` by ``1 / max(1, ||grad|| / clip)``."""
    norm = float(np.linalg.norm(grad))
    return grad / max(1.0, norm / clip)


def add_gaussian(grad: np.ndarray, sigma: float, clip: float, rng: np.random.Generator):
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return grad
    return grad + rng.normal(0.0, sigma * clip, size=np.shape(grad))


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """Per-step RDP of order ``alpha`` for the Poisson-subsampled Gaussian.

    Uses the binomial expansion, exact for integer orders.
    """
    if sigma <= 0:
        raise AccountingError("sigma = 0 has unbounded privacy loss; use epsilon = inf")
    if not 0.0 < q <= 1.0:
        raise ParameterError(f"q must lie in (0, 1], got {q}")
    alpha = int(alpha)
    if alpha < 2:
        raise ParameterError(f"integer order >= 2 required, got {alpha}")
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    j = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        gammaln(alpha + 1)
        - gammaln(j + 1)
        - gammaln(alpha - j + 1)
        + (alpha - j) * math.log1p(-q)
        + j * math.log(q)
        + j * (j - 1) / (2.0 * sigma**2)
    )
    return max(float(logsumexp(log_terms)) / (alpha - 1), 0.0)


def rdp_curve(q: float, sigma: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    """Vectorized :func:`rdp_subsampled_gaussian` over an integer order grid."""
    if sigma <= 0:
        raise AccountingError("sigma = 0 has unbounded privacy loss; use epsilon = inf")
    if not 0.0 < q <= 1.0:
        raise ParameterError(f"q must lie in (0, 1], got {q}")
    a = np.asarray(orders, dtype=np.float64)
    if q == 1.0:
        return a / (2.0 * sigma**2)
    j = np.arange(int(a.max()) + 1, dtype=np.float64)[None, :]
    col = a[:, None]
    with np.errstate(invalid="ignore"):
        log_terms = (
            gammaln(col + 1)
            - gammaln(j + 1)
            - gammaln(np.maximum(col - j, 0) + 1)
            + (col - j) * math.log1p(-q)
            + j * math.log(q)
            + j * (j - 1) / (2.0 * sigma**2)
        )
    log_terms = np.where(j <= col, log_terms, -np.inf)
    return np.maximum(logsumexp(log_terms, axis=1) / (a - 1), 0.0)


def epsilon_from_rdp(rdp: np.ndarray, orders, delta: float) -> tuple[float, int]:
    """Return ``(epsilon, best_order)`` for an accumulated RDP curve."""
    orders = np.asarray(orders)
    if orders.size == 0:
        raise ParameterError("empty order grid")
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    eps = np.asarray(rdp) + math.log(1.0 / delta) / (orders - 1)
    i = int(np.argmin(eps))
    return float(eps[i]), int(orders[i])


@dataclass
class AccountantState:
    orders: np.ndarray = field(default_factory=lambda: DEFAULT_ORDERS.copy())
    rdp: np.ndarray | None = None
    steps: int = 0

    def __post_init__(self):
        self.orders = np.asarray(self.orders, dtype=np.int64)
        if self.rdp is None:
            self.rdp = np.zeros(self.orders.size)

    def compose(self, q: float, sigma: float, steps: int = 1) -> None:
        if steps < 0:
            raise ParameterError("steps must be non-negative")
        self.rdp = self.rdp + steps * rdp_curve(q, sigma, self.orders)
        self.steps += steps

    def epsilon(self, delta: float) -> tuple[float, int]:
        return epsilon_from_rdp(self.rdp, self.orders, delta)


def compose_and_convert(
    state: AccountantState, steps: int, delta: float, q: float | None = None, sigma: float | None = None
) -> float:
    """Epsilon after ``steps`` compositions.

    With ``q`` and ``sigma`` the per-step curve is recomputed; otherwise the
    state's accumulated curve is treated as the per-step cost.
    """
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    if state.orders.size == 0:
        raise ParameterError("empty order grid")
    per_step = state.rdp if q is None else rdp_curve(q, sigma, state.orders)
    return epsilon_from_rdp(steps * per_step, state.orders, delta)[0]


def epsilon_for(sigma: float, q: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> float:
    return epsilon_from_rdp(steps * rdp_curve(q, sigma, orders), orders, delta)[0]


def calibrate_sigma(
    epsilon: float,
    delta: float,
    q: float,
    steps: int,
    tol: float = 1e-4,
    bracket: tuple[float, float] = SIGMA_BRACKET,
    orders=DEFAULT_ORDERS,
) -> float:
    """Smallest noise multiplier (to ``tol``) whose epsilon does not exceed the target."""
    if not epsilon > 0:
        raise ParameterError(f"target epsilon must be positive, got {epsilon}")
    lo, hi = bracket
    if epsilon_for(hi, q, steps, delta, orders) > epsilon:
        raise CalibrationError(
            f"epsilon={epsilon} unattainable with sigma <= {hi} (delta={delta}, q={q}, T={steps})"
        )
    if epsilon_for(lo, q, steps, delta, orders) <= epsilon:
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if epsilon_for(mid, q, steps, delta, orders) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def write_audit_log(path: Path, rows: list[tuple[int, int, float, float]]) -> None:
    """CSV ``round,alpha_star,gamma_cum,epsilon_spent``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "alpha_star", "gamma_cum", "epsilon_spent"])
        for rnd, alpha, gamma, eps in rows:
            w.writerow([rnd, alpha, f"{gamma:.17g}", f"{eps:.17g}"])


def find_steps_for_sigma(
    target_sigma: float,
    epsilon: float,
    delta: float,
    q: float,
    max_steps: int = 100_000,
) -> int | None:
    """Smallest step count whose calibrated sigma for ``epsilon`` reaches ``target_sigma``.

    Calibrated sigma grows with the step count, so an integer bisection is
    enough. Returns the neighbour (of the crossing) closest to the target, or
    ``None`` when the target lies outside the sigma range over ``1..max_steps``.
    """

    def sigma_at(t: int) -> float:
        try:
            return calibrate_sigma(epsilon, delta, q, t)
        except CalibrationError:
            return math.inf

    lo, hi = 1, max_steps
    if sigma_at(lo) > target_sigma or sigma_at(hi) < target_sigma:
        return None
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if sigma_at(mid) < target_sigma:
            lo = mid
        else:
            hi = mid
    return min((lo, hi), key=lambda t: abs(sigma_at(t) - target_sigma))
