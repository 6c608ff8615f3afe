"""Classification metrics and result export."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .errors import LabelIndexError, MetricError, ParameterError

log = logging.getLogger(__name__)


def _pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.int64).reshape(-1)
    t = np.asarray(true, dtype=np.int64).reshape(-1)
    if p.shape != t.shape or p.size == 0:
        raise ParameterError(f"need equal non-empty label arrays, got {p.size} and {t.size}")
    return p, t


def accuracy(pred, true) -> float:
    p, t = _pair(pred, true)
    return float((p == t).mean())


def confusion(pred, true, k: int) -> np.ndarray:
    """K x K counts, rows = true class, columns = predicted class."""
    p, t = _pair(pred, true)
    if min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= k:
        raise LabelIndexError(f"labels must lie in 0..{k - 1}")
    out = np.zeros((k, k), dtype=np.int64)
    np.add.at(out, (t, p), 1)
    return out


def per_class_f1(pred, true, k: int) -> np.ndarray:
    cm = confusion(pred, true, k)
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    f1 = np.zeros(k)
    for c in range(k):
        if predicted[c] == 0 or support[c] == 0:
            continue
        precision, recall = tp[c] / predicted[c], tp[c] / support[c]
        if precision + recall > 0:
            f1[c] = 2 * precision * recall / (precision + recall)
    return f1


def macro_f1(pred, true, k: int) -> float:
    """Unweighted class mean; a class absent from both predictions and truth scores 0."""
    p, t = _pair(pred, true)
    absent = sorted(set(range(k)) - set(p.tolist()) - set(t.tolist()))
    if absent:
        log.warning("classes %s absent from predictions and labels; scored as F1 = 0", absent)
    return float(per_class_f1(p, t, k).mean())


def weighted_f1(pred, true, k: int) -> float:
    p, t = _pair(pred, true)
    support = np.bincount(t, minlength=k)
    return float((per_class_f1(p, t, k) * support).sum() / support.sum())


def micro_f1(pred, true, k: int) -> float:
    # single-label multiclass: micro F1 equals accuracy
    return accuracy(pred, true)


F1_AVERAGES = {"macro": macro_f1, "micro": micro_f1, "weighted": weighted_f1}


def utility_loss(acc_dp: float, acc_nodp: float) -> float:
    if acc_nodp == 0:
        raise MetricError("utility loss undefined when the non-private accuracy is 0")
    return 1.0 - acc_dp / acc_nodp


def fmt(x: float) -> str:
    return f"{x:.17g}"


def write_confusion(path: Path, cm: np.ndarray) -> None:
    k = cm.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true"] + [f"pred_{j}" for j in range(k)])
        for i in range(k):
            w.writerow([i] + cm[i].tolist())


def export_embeddings(embedding: np.ndarray, labels, path: Path, node_ids=None) -> None:
    """CSV ``node_id,label,h1..hH`` of fused node embeddings."""
    emb = np.asarray(embedding, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    ids = np.arange(emb.shape[0]) if node_ids is None else np.asarray(node_ids)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "label"] + [f"h{j + 1}" for j in range(emb.shape[1])])
        for i in range(emb.shape[0]):
            w.writerow([ids[i], int(labels[i])] + [fmt(v) for v in emb[i]])


def write_utility_summary(path: Path, rows) -> None:
    """CSV ``epsilon,setting,model,utility_loss``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "setting", "model", "utility_loss"])
        for eps, setting, model, loss in rows:
            w.writerow([eps, setting, model, fmt(loss)])
