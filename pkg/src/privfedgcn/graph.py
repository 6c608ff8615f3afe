"""Per-modality window graphs: temporal chains plus distance-threshold edges."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class ModalityGraph:
    n_nodes: int
    edges: tuple[tuple[int, int], ...]
    adjacency: np.ndarray  # normalized, N x N
    modality: str = ""
    distances: np.ndarray | None = None  # pairwise euclidean, for debug dumps

    def dump_edges(self, path: Path) -> None:
        """Write ``i,j,distance`` rows for every edge."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j", "distance"])
            for i, j in self.edges:
                d = float("nan") if self.distances is None else self.distances[i, j]
                w.writerow([i, j, f"{d:.17g}"])


def pairwise_distances(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def normalize_adjacency(a_tilde: np.ndarray) -> np.ndarray:
    """Symmetric normalization ``D^-1/2 A D^-1/2`` of an adjacency that already has self-loops."""
    a = np.asarray(a_tilde, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError(f"adjacency must be square, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ParameterError("adjacency must be symmetric")
    if np.any(a < 0) or np.any(np.diag(a) < 1):
        raise ParameterError("adjacency must be non-negative with self-loops")
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    out = a * inv_sqrt[:, None] * inv_sqrt[None, :]
    # exact symmetry regardless of rounding order
    return np.triu(out) + np.triu(out, 1).T


def build_graph(
    features: np.ndarray,
    recordings=None,
    percentile: float = 10.0,
    threshold_mask: np.ndarray | None = None,
    modality: str = "",
) -> ModalityGraph:
    """Build a window graph.

    Args:
        features: N x d encoded window features.
        recordings: per-node recording id; consecutive nodes sharing an id are
            chained. ``None`` disables temporal edges.
        percentile: the distance threshold is this percentile of pairwise
            distances.
        threshold_mask: nodes whose mutual distances define the threshold
            (training nodes); defaults to all nodes.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ParameterError("build_graph needs at least one node")
    if not 0.0 < percentile < 100.0:
        raise ParameterError(f"percentile must lie in (0, 100), got {percentile}")
    n = x.shape[0]
    dist = pairwise_distances(x)
    adj = np.zeros((n, n), dtype=bool)

    ref = np.arange(n) if threshold_mask is None else np.flatnonzero(threshold_mask)
    if ref.size >= 2:
        sub = dist[np.ix_(ref, ref)]
        tau = np.percentile(sub[np.triu_indices(ref.size, 1)], percentile)
        adj |= dist <= tau

    if recordings is not None:
        rec = np.asarray(recordings)
        if rec.shape[0] != n:
            raise ShapeError(f"{rec.shape[0]} recording ids for {n} nodes")
        chain = np.flatnonzero(rec[1:] == rec[:-1])
        adj[chain, chain + 1] = True
        adj[chain + 1, chain] = True

    np.fill_diagonal(adj, False)
    iu, ju = np.nonzero(np.triu(adj, 1))
    a_tilde = adj.astype(np.float64) + np.eye(n)
    return ModalityGraph(
        n_nodes=n,
        edges=tuple(zip(iu.tolist(), ju.tolist())),
        adjacency=normalize_adjacency(a_tilde),
        modality=modality,
        distances=dist,
    )


def propagate(a_hat, h):
    return nx.matmul(a_hat, h)
