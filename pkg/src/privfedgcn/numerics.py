"""Dense float64 matrix primitives with a recorded-tape reverse mode.

Every primitive accepts plain ``numpy`` arrays or :class:`Var` handles. With
only arrays the call is a pure function returning an array; as soon as one
input is a :class:`Var` the operation is appended to that variable's
:class:`GradTape` and a :class:`Var` comes back. Backward rules are written
by hand per primitive, there is no general autodiff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import fft as _fft

from .errors import LabelIndexError, ParameterError, ShapeError, StateError

LN_EPS = 1e-5


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array (scalars become 1x1, vectors 1xN)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {a.shape}")
    return a


class Var:
    """A tensor value living on a tape."""

    __slots__ = ("value", "tape", "name")

    def __init__(self, value: np.ndarray, tape: "GradTape", name: str | None = None):
        self.value = value
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}{self.value.shape}"


class GradTape:
    """Ordered record of the primitives applied during one forward pass."""

    def __init__(self):
        self._ops: list[tuple[Var, tuple, Callable]] = []
        self._params: dict[str, Var] = {}

    def __len__(self) -> int:
        return len(self._ops)

    def param(self, name: str, value) -> Var:
        if name in self._params:
            raise StateError(f"parameter {name!r} registered twice on one tape")
        v = Var(as_tensor(value), self, name)
        self._params[name] = v
        return v

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.param(k, v) for k, v in params.items()}

    def record(self, out: np.ndarray, inputs: tuple, backward: Callable) -> Var:
        v = Var(out, self)
        self._ops.append((v, inputs, backward))
        return v

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Reverse sweep from ``loss``; returns one gradient per registered parameter.

        The tape is cleared afterwards.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise StateError("loss was not produced on this tape")
        if not self._ops:
            raise StateError("backward called before any forward operation")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for out, inputs, rule in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, rule(g)):
                if isinstance(inp, Var) and gi is not None:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        result = {
            name: grads.get(id(v), np.zeros_like(v.value))
            for name, v in self._params.items()
        }
        self._ops.clear()
        self._params.clear()
        return result


def backward(tape: GradTape, loss: Var) -> dict[str, np.ndarray]:
    return tape.backward(loss)


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def _tape(*xs) -> GradTape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} are not aligned")
    out = av @ bv
    tape = _tape(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "add")
    out = av + bv
    tape = _tape(a, b)
    if tape is None:
        return out
    return tape.record(
        out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))
    )


def mul(a, b):
    """Elementwise product with row/column broadcasting."""
    av, bv = _val(a), _val(b)
    _check_broadcast(av, bv, "mul")
    out = av * bv
    tape = _tape(a, b)
    if tape is None:
        return out
    return tape.record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def relu(x):
    xv = _val(x)
    out = np.maximum(xv, 0.0)
    tape = _tape(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * (xv > 0),))


def softmax_rows(x):
    xv = _val(x)
    z = np.exp(xv - xv.max(axis=1, keepdims=True))
    s = z / z.sum(axis=1, keepdims=True)
    tape = _tape(x)
    if tape is None:
        return s

    def rule(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return tape.record(s, (x,), rule)


def _log_softmax(xv: np.ndarray) -> np.ndarray:
    shifted = xv - xv.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {lab.shape[0]} labels")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise LabelIndexError(f"label out of range for {k} classes: {lab.min()}..{lab.max()}")
    return lab


def cross_entropy(logits, labels):
    """Mean negative log-likelihood; softmax and CE share one backward rule."""
    lv = _val(logits)
    n, k = lv.shape
    if n == 0:
        raise ShapeError("cross_entropy: no rows")
    lab = _check_labels(labels, n, k)
    logp = _log_softmax(lv)
    loss = -logp[np.arange(n), lab].mean()
    tape = _tape(logits)
    if tape is None:
        return float(loss)

    def rule(g):
        d = np.exp(logp)
        d[np.arange(n), lab] -= 1.0
        return (d * (g[0, 0] / n),)

    return tape.record(np.array([[loss]]), (logits,), rule)


def mse(x, target):
    """Mean squared error over all entries against a constant target."""
    xv = _val(x)
    tv = _val(target)
    if xv.shape != tv.shape:
        raise ShapeError(f"mse: shapes {xv.shape} and {tv.shape} differ")
    diff = xv - tv
    loss = float((diff**2).mean())
    tape = _tape(x)
    if tape is None:
        return loss
    return tape.record(
        np.array([[loss]]), (x,), lambda g: (diff * (2.0 * g[0, 0] / diff.size),)
    )


def sum_all(x):
    xv = _val(x)
    tape = _tape(x)
    if tape is None:
        return float(xv.sum())
    return tape.record(
        np.array([[xv.sum()]]), (x,), lambda g: (np.full_like(xv, g[0, 0]),)
    )


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout; identity in evaluation mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs a generator")
    xv = _val(x)
    mask = (rng.random(xv.shape) >= rate) / (1.0 - rate)
    out = xv * mask
    tape = _tape(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * mask,))


def layer_norm_rows(x, gain, bias):
    xv, gv, bv = _val(x), _val(gain), _val(bias)
    cols = xv.shape[1]
    if gv.shape != (1, cols) or bv.shape != (1, cols):
        raise ShapeError(
            f"layer_norm_rows: gain {gv.shape} / bias {bv.shape} must be (1, {cols})"
        )
    mu = xv.mean(axis=1, keepdims=True)
    centered = xv - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = centered * inv_std
    out = xhat * gv + bv
    tape = _tape(x, gain, bias)
    if tape is None:
        return out

    def rule(g):
        dxhat = g * gv
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return tape.record(out, (x, gain, bias), rule)


def gather_rows(x, idx):
    xv = _val(x)
    ix = np.asarray(idx, dtype=np.int64).reshape(-1)
    out = xv[ix]
    tape = _tape(x)
    if tape is None:
        return out

    def rule(g):
        full = np.zeros_like(xv)
        np.add.at(full, ix, g)
        return (full,)

    return tape.record(out, (x,), rule)


def hstack(parts: Sequence):
    vals = [_val(p) for p in parts]
    out = np.hstack(vals)
    tape = _tape(*parts)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[1] for v in vals])

    def rule(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(vals)))

    return tape.record(out, tuple(parts), rule)


def column(x, j: int):
    xv = _val(x)
    out = xv[:, j : j + 1]
    tape = _tape(x)
    if tape is None:
        return out

    def rule(g):
        full = np.zeros_like(xv)
        full[:, j : j + 1] = g
        return (full,)

    return tape.record(out, (x,), rule)


# ---------------------------------------------------------------------------
# DCT
# ---------------------------------------------------------------------------


def dct_1d(signal, keep: int) -> np.ndarray:
    """Orthonormal DCT-II of a 1-D signal truncated to the first ``keep`` coefficients."""
    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ParameterError("dct_1d: empty signal")
    if not 0 < keep <= x.size:
        raise ParameterError(f"dct_1d: keep={keep} must lie in 1..{x.size}")
    return _fft.dct(x, type=2, norm="ortho")[:keep]


def idct_1d(coeffs, length: int | None = None) -> np.ndarray:
    """Inverse of :func:`dct_1d`; missing high coefficients are treated as zero."""
    c = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    n = c.size if length is None else length
    padded = np.zeros(n)
    padded[: c.size] = c
    return _fft.idct(padded, type=2, norm="ortho")


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Optimizer hyper-parameters plus Adam moments kept as flat buffers."""

    kind: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first: np.ndarray | None = None
    second: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Apply one update and return the new parameter dict; ``state`` is advanced in place."""
    for name, w in params.items():
        g = grads.get(name)
        if g is None or g.shape != w.shape:
            got = None if g is None else g.shape
            raise ShapeError(f"gradient for {name!r} has shape {got}, parameter {w.shape}")
    state.step_count += 1
    if state.kind == "sgd":
        return {k: w - state.lr * grads[k] for k, w in params.items()}

    # one pass over a concatenated vector instead of many small tensors
    g = np.concatenate([grads[k].ravel() for k in params])
    if state.first is None:
        state.first = np.zeros_like(g)
        state.second = np.zeros_like(g)
    elif state.first.shape != g.shape:
        raise ShapeError("parameter layout changed between optimizer steps")
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    m, v = state.first, state.second
    m *= b1
    m += (1.0 - b1) * g
    g *= g
    g *= 1.0 - b2
    v *= b2
    v += g
    denom = np.sqrt(v)
    denom *= 1.0 / math.sqrt(1.0 - b2**t)
    denom += state.eps
    step = m * (state.lr / (1.0 - b1**t))
    step /= denom
    out, offset = {}, 0
    for k, w in params.items():
        out[k] = w - step[offset : offset + w.size].reshape(w.shape)
        offset += w.size
    return out
