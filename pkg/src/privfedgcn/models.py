"""MultiModalGCN and the MultiModalFFN baseline.

Per modality ``m`` and layer ``l`` a node block is

    Z = dropout(relu(layer_norm(A_hat @ (H @ W) + H @ B)))

where ``H @ B`` is the residual self term (the FFN drops the ``A_hat``
propagation). Node embeddings of the modalities are fused with per-node
softmax attention and classified by one linear layer.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import ParameterError, ShapeError

_MAGIC = b"PFGP"
_VERSION = 1


class ModelParams(dict):
    """Ordered mapping ``name -> float64 matrix`` with flat-vector views."""

    def copy(self) -> "ModelParams":
        return ModelParams((k, v.copy()) for k, v in self.items())

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.values()])

    def unflatten(self, vec: np.ndarray) -> "ModelParams":
        """New params shaped like ``self`` holding the entries of ``vec``."""
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != self.size:
            raise ShapeError(f"flat vector has {vec.size} entries, params need {self.size}")
        out, i = ModelParams(), 0
        for k, v in self.items():
            out[k] = vec[i : i + v.size].reshape(v.shape).copy()
            i += v.size
        return out

    def to_bytes(self) -> bytes:
        """Little-endian float64 records: name, rows, cols, row-major values."""
        parts = [_MAGIC, struct.pack("<II", _VERSION, len(self))]
        for name, v in self.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<II", *v.shape))
            parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        if data[:4] != _MAGIC:
            raise ParameterError("not a parameter checkpoint")
        version, count = struct.unpack_from("<II", data, 4)
        if version != _VERSION:
            raise ParameterError(f"unsupported checkpoint version {version}")
        pos, out = 12, cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            n = rows * cols
            out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(rows, cols).astype(np.float64)
            pos += 8 * n
        return out

    def save(self, path: Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path) -> "ModelParams":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class Prediction:
    logits: np.ndarray
    embedding: np.ndarray
    attention: np.ndarray


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(
    seed: int,
    dims: Mapping[str, int],
    hidden: int,
    classes: int,
    layers: int = 1,
    kind: str = "gcn",
) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains.

    ``kind`` is accepted for symmetry with the config; both model kinds share
    one parameter layout so a GCN checkpoint can run as an FFN and back.
    """
    if kind not in ("gcn", "ffn"):
        raise ParameterError(f"unknown model kind {kind!r}")
    if layers < 1 or hidden < 1 or classes < 2 or not dims:
        raise ParameterError("need layers >= 1, hidden >= 1, classes >= 2, >= 1 modality")
    rng = np.random.default_rng(seed)
    p = ModelParams()
    for m, d in dims.items():
        fan_in = d
        for layer in range(layers):
            p[f"{m}.gcn_w{layer}"] = _glorot(rng, fan_in, hidden)
            p[f"{m}.self_w{layer}"] = _glorot(rng, fan_in, hidden)
            p[f"{m}.ln_gain{layer}"] = np.ones((1, hidden))
            p[f"{m}.ln_bias{layer}"] = np.zeros((1, hidden))
            fan_in = hidden
        p[f"{m}.att_w"] = _glorot(rng, hidden, 1)
        p[f"{m}.att_b"] = np.zeros((1, 1))
    p["cls_w"] = _glorot(rng, hidden, classes)
    p["cls_b"] = np.zeros((1, classes))
    return p


def modalities_of(params: Mapping) -> list[str]:
    seen = []
    for k in params:
        if k.endswith(".att_w"):
            seen.append(k[: -len(".att_w")])
    return seen


def layer_count(params: Mapping, modality: str) -> int:
    pat = re.compile(re.escape(modality) + r"\.gcn_w(\d+)$")
    return sum(1 for k in params if pat.match(k))


def _forward(params, features, adjacency, training, rng, dropout_rate):
    mods = modalities_of(params)
    missing = [m for m in mods if m not in features]
    if missing:
        raise ShapeError(f"no features for modalities {missing}")
    n = {np.shape(nx._val(features[m]))[0] for m in mods}
    if len(n) != 1:
        raise ShapeError(f"modalities disagree on node count: {sorted(n)}")
    (n_nodes,) = n
    if adjacency is not None:
        for m in mods:
            if adjacency[m].shape != (n_nodes, n_nodes):
                raise ShapeError(
                    f"adjacency for {m} is {adjacency[m].shape}, expected ({n_nodes}, {n_nodes})"
                )

    zs, scores = [], []
    for m in mods:
        h = features[m]
        for layer in range(layer_count(params, m)):
            w = params[f"{m}.gcn_w{layer}"]
            if np.shape(nx._val(h))[1] != np.shape(nx._val(w))[0]:
                raise ShapeError(
                    f"{m}: feature width {np.shape(nx._val(h))[1]} != weight rows {np.shape(nx._val(w))[0]}"
                )
            neigh = nx.matmul(h, w)
            if adjacency is not None:
                neigh = nx.matmul(adjacency[m], neigh)
            pre = nx.add(neigh, nx.matmul(h, params[f"{m}.self_w{layer}"]))
            pre = nx.layer_norm_rows(pre, params[f"{m}.ln_gain{layer}"], params[f"{m}.ln_bias{layer}"])
            h = nx.dropout(nx.relu(pre), dropout_rate, training, rng)
        zs.append(h)
        scores.append(nx.add(nx.matmul(h, params[f"{m}.att_w"]), params[f"{m}.att_b"]))

    weights = nx.softmax_rows(nx.hstack(scores))
    fused = None
    for i, z in enumerate(zs):
        term = nx.mul(nx.column(weights, i), z)
        fused = term if fused is None else nx.add(fused, term)
    logits = nx.add(nx.matmul(fused, params["cls_w"]), params["cls_b"])
    return logits, fused, weights


def gcn_forward(
    params,
    graphs: Mapping,
    features: Mapping,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.5,
):
    """Returns ``(logits, fused, attention)``; each is a ``Var`` when params are taped.

    ``graphs`` maps modality to a ModalityGraph or a dense normalized adjacency.
    """
    adjacency = {m: getattr(g, "adjacency", g) for m, g in graphs.items()}
    return _forward(params, features, adjacency, training, rng, dropout)


def ffn_forward(
    params,
    features: Mapping,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.5,
):
    return _forward(params, features, None, training, rng, dropout)


def forward(kind, params, graphs, features, training=False, rng=None, dropout=0.5):
    if kind == "gcn":
        return gcn_forward(params, graphs, features, training, rng, dropout)
    if kind == "ffn":
        return ffn_forward(params, features, training, rng, dropout)
    raise ParameterError(f"unknown model kind {kind!r}")


def predict(kind, params, graphs, features) -> Prediction:
    logits, fused, att = forward(kind, params, graphs, features, training=False)
    return Prediction(logits=logits, embedding=fused, attention=att)


def predict_labels(pred) -> np.ndarray:
    """Row argmax of the logits; ties go to the lowest class index."""
    logits = pred.logits if isinstance(pred, Prediction) else np.asarray(pred)
    return np.argmax(logits, axis=1)


def loss_and_grads(kind, params, graphs, features, labels, nodes, training, rng, dropout):
    """Cross-entropy on ``nodes`` and its gradient for every parameter."""
    tape = nx.GradTape()
    watched = tape.watch(params)
    logits, _, _ = forward(kind, watched, graphs, features, training, rng, dropout)
    loss = nx.cross_entropy(nx.gather_rows(logits, nodes), np.asarray(labels)[nodes])
    value = float(loss.value[0, 0])
    return value, tape.backward(loss)
