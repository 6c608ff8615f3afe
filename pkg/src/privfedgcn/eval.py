"""Evaluation: classification metrics plus the convergence testbed on a quadratic.

The testbed drives the same clipping, noise, client sampling and FedAvg code
as the real runs, but on client objectives ``F_c(w) = mu/2 * ||w - c_c||^2``
whose gradients are exact, so the error floor of the convergence bound can be
measured directly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .federated import GlobalModel, derive_rng, fedavg_aggregate, sample_clients
from .metrics import (
    F1_AVERAGES,
    accuracy,
    confusion,
    export_embeddings,
    fmt,
    macro_f1,
    micro_f1,
    per_class_f1,
    utility_loss,
    weighted_f1,
    write_confusion,
    write_utility_summary,
)
from .models import ModelParams
from .privacy import add_gaussian, clip_global

__all__ = [
    "F1_AVERAGES",
    "ConvergenceBoundParams",
    "Trajectory",
    "accuracy",
    "confusion",
    "export_embeddings",
    "fit_decay_ratio",
    "macro_f1",
    "micro_f1",
    "per_class_f1",
    "quadratic_testbed",
    "theoretical_floor",
    "utility_loss",
    "weighted_f1",
    "write_confusion",
    "write_utility_summary",
]


@dataclass(frozen=True)
class ConvergenceBoundParams:
    mu: float = 1.0
    L: float = 1.0
    G: float = 1.0
    zeta: float = 0.0
    sigma_g: float = 0.0
    d: int = 10
    m: int = 1
    B: int = 1
    C: float = 1.0
    sigma: float = 0.0
    eta: float = 0.1

    def __post_init__(self):
        if not 0 < self.mu <= self.L:
            raise ParameterError(f"need 0 < mu <= L, got mu={self.mu}, L={self.L}")
        if min(self.zeta, self.sigma_g, self.sigma, self.G) < 0:
            raise ParameterError("variances and bounds must be non-negative")
        if self.m < 1 or self.B < 1 or self.d < 1:
            raise ParameterError("d, m and B must be >= 1")
        if self.C <= 0 or self.eta <= 0:
            raise ParameterError("C and eta must be positive")


def theoretical_floor(p: ConvergenceBoundParams) -> float:
    """``(4 / mu^2) * (sigma_g^2 / (m B) + zeta^2 / m + d sigma^2 C^2 / m)``."""
    return (4.0 / p.mu**2) * (
        p.sigma_g**2 / (p.m * p.B) + p.zeta**2 / p.m + p.d * p.sigma**2 * p.C**2 / p.m
    )


@dataclass
class Trajectory:
    mean: np.ndarray  # index 0 is the initial point
    p10: np.ndarray
    p90: np.ndarray
    floor: float

    def plateau(self, tail: float = 0.5) -> float:
        """Mean of the last ``tail`` fraction of rounds."""
        start = int(len(self.mean) * (1.0 - tail))
        return float(self.mean[start:].mean())

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "mean_sq_dist", "floor_theoretical"])
            for i, v in enumerate(self.mean):
                w.writerow([i, fmt(v), fmt(self.floor)])


def _replicate(p: ConvergenceBoundParams, clients: int, rounds: int, seed: int, init_distance: float) -> np.ndarray:
    rng = derive_rng(seed, 0)
    centres = rng.normal(0.0, p.zeta / math.sqrt(p.d), size=(clients, p.d))
    w_star = centres.mean(axis=0)
    direction = rng.normal(size=p.d)
    w = w_star + init_distance * direction / np.linalg.norm(direction)
    model = GlobalModel(ModelParams(w=w[None, :]))
    out = np.empty(rounds + 1)
    out[0] = float(((w - w_star) ** 2).sum())
    ids = list(range(clients))
    for rnd in range(1, rounds + 1):
        sampled = sample_clients(ids, p.m / clients, derive_rng(seed, 1, rnd))
        current = model.params["w"][0]
        updates = []
        for c in sampled:
            crng = derive_rng(seed, 2, rnd, c)
            g = p.mu * (current - centres[c])
            if p.sigma_g > 0:
                g = g + crng.normal(0.0, p.sigma_g / math.sqrt(p.B * p.d), size=p.d)
            g = add_gaussian(clip_global(g, p.C), p.sigma, p.C, crng)
            updates.append(ModelParams(w=(-p.eta * g)[None, :]))
        model = fedavg_aggregate(model, updates)
        out[rnd] = float(((model.params["w"][0] - w_star) ** 2).sum())
    return out


def quadratic_testbed(
    p: ConvergenceBoundParams,
    clients: int = 10,
    rounds: int = 200,
    seed: int = 0,
    replicates: int = 20,
    init_distance: float | None = None,
) -> Trajectory:
    """Expected squared distance to the optimum per round over ``replicates`` seeds.

    Each sampled client takes one exact gradient step, clipped to ``C`` and
    noised at ``sigma``; the server averages. ``m`` clients are sampled per
    round out of ``clients``. The start point lies ``init_distance``
    (default ``sqrt(d)``) from the optimum.
    """
    if p.m > clients:
        raise ParameterError(f"m={p.m} exceeds client count {clients}")
    dist = math.sqrt(p.d) if init_distance is None else init_distance
    runs = np.stack([_replicate(p, clients, rounds, seed + i, dist) for i in range(replicates)])
    return Trajectory(
        runs.mean(axis=0),
        np.percentile(runs, 10, axis=0),
        np.percentile(runs, 90, axis=0),
        theoretical_floor(p),
    )


def fit_decay_ratio(traj: Trajectory, margin: float = 2.0) -> float:
    """Per-round geometric ratio fitted to the pre-plateau segment.

    Uses the leading rounds whose excess over the plateau is at least
    ``margin`` times the plateau (or above 1e-20 when the plateau is 0) and
    fits ``log(excess)`` by least squares.
    """
    plateau = traj.plateau()
    excess = traj.mean - plateau
    cut = margin * plateau if plateau > 0 else 1e-20
    keep = 0
    while keep < len(excess) and excess[keep] > cut:
        keep += 1
    if keep < 3:
        raise ParameterError("too few pre-plateau rounds to fit a decay ratio")
    slope = np.polyfit(np.arange(keep), np.log(excess[:keep]), 1)[0]
    return float(np.exp(slope))
