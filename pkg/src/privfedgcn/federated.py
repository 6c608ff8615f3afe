"""Federated orchestration with client-level DP, and the centralized special case.

One round: sample ``max(1, floor(q * N))`` clients, let each train locally
from the current global weights, average the returned deltas, evaluate the
new global model on every client's test nodes, and charge the accountant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from . import numerics as nx
from .dataio import WindowSet
from .errors import ParameterError, ShapeError
from .graph import ModalityGraph, build_graph
from .models import ModelParams, Prediction, init_params, loss_and_grads, predict, predict_labels
from .privacy import AccountantState, PrivacySpec, add_gaussian, clip_global

log = logging.getLogger(__name__)

# stream tags for seed derivation
_SAMPLE, _LOCAL, _INIT = 1, 2, 3


def derive_rng(master: int, *counters: int) -> np.random.Generator:
    """Independent generator for ``(master, counters...)``; ordering of calls is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence([int(master), *map(int, counters)]))


@dataclass
class ClientState:
    client_id: str
    windows: WindowSet  # train and test windows in window order
    train_mask: np.ndarray
    graphs: dict[str, ModalityGraph]

    @property
    def train_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.train_mask)

    @property
    def test_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.train_mask)

    @property
    def features(self) -> dict[str, np.ndarray]:
        return self.windows.features


def make_client(
    train: WindowSet,
    test: WindowSet,
    percentile: float = 10.0,
    shared_graph: bool = False,
) -> ClientState:
    """Transductive client: one graph over train and test windows, threshold from train pairs."""
    parts = [p for p in (train, test) if len(p)]
    windows = WindowSet.union(parts)
    train_set = set(train.window_index.tolist())
    mask = np.array([i in train_set for i in windows.window_index.tolist()], dtype=bool)
    if shared_graph:
        stacked = np.hstack([windows.features[m] for m in windows.features])
        g = build_graph(stacked, windows.recording, percentile, mask, "shared")
        graphs = {m: g for m in windows.features}
    else:
        graphs = {
            m: build_graph(x, windows.recording, percentile, mask, m)
            for m, x in windows.features.items()
        }
    return ClientState(train.client_id, windows, mask, graphs)


def pool_clients(
    pairs: Sequence[tuple[WindowSet, WindowSet]],
    percentile: float = 10.0,
    shared_graph: bool = False,
) -> ClientState:
    """Merge every client's windows into one node set for centralized training."""
    if len(pairs) == 1:
        return make_client(*pairs[0], percentile, shared_graph)
    trains, tests = [], []
    offset_idx, offset_rec = 0, 0
    for train, test in pairs:
        for part, bucket in ((train, trains), (test, tests)):
            bucket.append(
                WindowSet(
                    "pooled",
                    part.features,
                    part.labels,
                    part.window_index + offset_idx,
                    part.recording + offset_rec,
                )
            )
        both = np.concatenate([train.window_index, test.window_index])
        recs = np.concatenate([train.recording, test.recording])
        offset_idx += int(both.max()) + 1 if both.size else 0
        offset_rec += int(recs.max()) + 1 if recs.size else 0
    train = WindowSet.union([t for t in trains if len(t)])
    nonempty = [t for t in tests if len(t)]
    test = WindowSet.union(nonempty) if nonempty else trains[0].subset([])
    return make_client(train, test, percentile, shared_graph)


@dataclass
class TrainConfig:
    kind: str = "gcn"
    lr: float = 0.01
    optimizer: str = "adam"
    local_epochs: int = 20
    batch_size: int = 32
    dropout: float = 0.5
    noise_every_local_step: bool = False

    def __post_init__(self):
        if self.kind not in ("gcn", "ffn"):
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ParameterError("local_epochs >= 0 and batch_size >= 1 required")


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return -(-n_train // batch_size)


@dataclass
class LocalResult:
    delta: ModelParams
    mean_loss: float
    steps: int


def _clip_tensors(grads: dict[str, np.ndarray], clip: float) -> dict[str, np.ndarray]:
    """``clip_global`` applied to the concatenation of ``grads`` without flattening."""
    norm = float(np.sqrt(sum(np.vdot(g, g) for g in grads.values())))
    scale = max(1.0, norm / clip)
    if scale == 1.0:
        return grads
    return {k: g / scale for k, g in grads.items()}


def local_train(
    client: ClientState,
    w: ModelParams,
    spec: PrivacySpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
    epochs: int | None = None,
    on_epoch: Callable[[int, ModelParams, float], None] | None = None,
) -> LocalResult | None:
    """Local epochs of mini-batch training from ``w``; returns the (privatized) delta.

    Every optimizer step clips the flat gradient to ``spec.clip``. Noise is
    added either to each step's gradient (``noise_every_local_step``) or once
    to the whole round's update: the delta is read as a pseudo-gradient
    ``-delta / lr``, clipped and noised, and mapped back. Returns ``None``
    for a client without training nodes.
    """
    train_nodes = client.train_nodes
    if train_nodes.size == 0:
        log.warning("client %s has no training windows; skipped", client.client_id)
        return None
    epochs = cfg.local_epochs if epochs is None else epochs
    labels = client.windows.labels
    state = nx.OptimizerState(kind=cfg.optimizer, lr=cfg.lr)
    params = w.copy()
    losses, steps = [], 0
    for epoch in range(epochs):
        order = rng.permutation(train_nodes)
        epoch_losses = []
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(
                cfg.kind, params, client.graphs, client.features, labels, batch, True, rng, cfg.dropout
            )
            if spec.private and cfg.noise_every_local_step:
                flat = clip_global(ModelParams(grads).flatten(), spec.clip)
                grads = params.unflatten(add_gaussian(flat, spec.sigma, spec.clip, rng))
            else:
                grads = _clip_tensors(grads, spec.clip)
            params = ModelParams(nx.optimizer_step(state, params, grads))
            epoch_losses.append(loss)
            steps += 1
        losses.extend(epoch_losses)
        if on_epoch is not None:
            on_epoch(epoch + 1, params, float(np.mean(epoch_losses)))

    delta = ModelParams((k, params[k] - w[k]) for k in w)
    if spec.private and not cfg.noise_every_local_step:
        pseudo = clip_global(-delta.flatten() / cfg.lr, spec.clip)
        pseudo = add_gaussian(pseudo, spec.sigma, spec.clip, rng)
        delta = delta.unflatten(-cfg.lr * pseudo)
    return LocalResult(delta, float(np.mean(losses)) if losses else float("nan"), steps)


@dataclass
class GlobalModel:
    params: ModelParams
    round: int = 0


def fedavg_aggregate(
    model: GlobalModel, updates: Sequence[ModelParams], weights: Sequence[float] | None = None
) -> GlobalModel:
    """``w + mean(updates)``; ``weights`` switches to a data-size weighted mean."""
    if not updates:
        log.warning("no client updates this round; global model unchanged")
        return GlobalModel(model.params, model.round + 1)
    for u in updates:
        for k, v in model.params.items():
            if k not in u or u[k].shape != v.shape:
                raise ShapeError(f"update tensor {k!r} does not match the global model")
    if weights is None:
        coef = np.full(len(updates), 1.0 / len(updates))
    else:
        coef = np.asarray(weights, dtype=np.float64)
        coef = coef / coef.sum()
    new = ModelParams()
    for k, v in model.params.items():
        stacked = np.stack([u[k] for u in updates])
        new[k] = v + np.tensordot(coef, stacked, axes=1)
    return GlobalModel(new, model.round + 1)


def sample_clients(ids: Sequence, q: float, rng: np.random.Generator) -> list:
    """Uniform subset of size ``max(1, floor(q * N))`` without replacement, in input order."""
    if not 0.0 < q <= 1.0:
        raise ParameterError(f"client fraction must lie in (0, 1], got {q}")
    # small slack so q = m/N recovers m despite rounding
    m = max(1, int(np.floor(q * len(ids) + 1e-9)))
    chosen = np.sort(rng.choice(len(ids), size=m, replace=False))
    return [ids[i] for i in chosen]


@dataclass
class RoundReport:
    round: int
    sampled: list[str]
    train_loss: dict[str, float]
    test_accuracy: float
    test_f1: float
    epsilon: float

    @property
    def train_loss_mean(self) -> float:
        vals = list(self.train_loss.values())
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class RunConfig:
    rounds: int = 50
    client_fraction: float = 1.0
    hidden: int = 64
    layers: int = 2
    seed: int = 0
    weighted_fedavg: bool = False
    f1_average: str = "macro"
    train: TrainConfig = field(default_factory=TrainConfig)
    privacy: PrivacySpec = field(default_factory=PrivacySpec)


@dataclass
class Evaluation:
    accuracy: float
    f1: float
    pred: np.ndarray
    true: np.ndarray
    predictions: list[Prediction]


def evaluate(kind: str, params: ModelParams, clients: Sequence[ClientState], classes: int, f1_average="macro") -> Evaluation:
    """Pool test-node predictions over clients (example-weighted)."""
    preds, trues, outs = [], [], []
    for c in clients:
        out = predict(kind, params, c.graphs, c.features)
        outs.append(out)
        nodes = c.test_nodes
        if nodes.size:
            preds.append(predict_labels(out)[nodes])
            trues.append(c.windows.labels[nodes])
    if not preds:
        return Evaluation(float("nan"), float("nan"), np.array([]), np.array([]), outs)
    p, t = np.concatenate(preds), np.concatenate(trues)
    return Evaluation(
        metrics.accuracy(p, t), metrics.F1_AVERAGES[f1_average](p, t, classes), p, t, outs
    )


def _dims(clients: Sequence[ClientState]) -> dict[str, int]:
    return {m: x.shape[1] for m, x in clients[0].features.items()}


def accounted_steps_per_round(clients: Sequence[ClientState], cfg: TrainConfig) -> int:
    """DP releases per round charged to the accountant."""
    if not cfg.noise_every_local_step:
        return 1
    return cfg.local_epochs * max(steps_per_epoch(c.train_nodes.size, cfg.batch_size) for c in clients)


def run_federated(
    clients: Sequence[ClientState],
    cfg: RunConfig,
    classes: int,
    init: ModelParams | None = None,
    on_round: Callable[[GlobalModel, RoundReport], None] | None = None,
) -> tuple[GlobalModel, list[RoundReport], list[tuple[int, int, float, float]]]:
    """Returns the final model, per-round reports and the accountant audit rows."""
    if not clients:
        raise ParameterError("need at least one client")
    params = init if init is not None else init_params(
        cfg.seed, _dims(clients), cfg.hidden, classes, cfg.layers, cfg.train.kind
    )
    model = GlobalModel(params.copy(), 0)
    accountant = AccountantState()
    per_round = accounted_steps_per_round(clients, cfg.train)
    ids = list(range(len(clients)))
    reports, audit = [], []
    for rnd in range(1, cfg.rounds + 1):
        sampled = sample_clients(ids, cfg.client_fraction, derive_rng(cfg.seed, _SAMPLE, rnd))
        updates, weights, losses = [], [], {}
        for ci in sampled:
            res = local_train(
                clients[ci], model.params, cfg.privacy, cfg.train, derive_rng(cfg.seed, _LOCAL, rnd, ci)
            )
            if res is None:
                continue
            updates.append(res.delta)
            weights.append(clients[ci].train_nodes.size)
            losses[clients[ci].client_id] = res.mean_loss
        model = fedavg_aggregate(model, updates, weights if cfg.weighted_fedavg else None)
        ev = evaluate(cfg.train.kind, model.params, clients, classes, cfg.f1_average)
        eps = _charge(accountant, cfg.privacy, per_round, audit, rnd)
        reports.append(
            RoundReport(rnd, [clients[i].client_id for i in sampled], losses, ev.accuracy, ev.f1, eps)
        )
        if on_round is not None:
            on_round(model, reports[-1])
    return model, reports, audit


def _charge(accountant, spec: PrivacySpec, steps: int, audit: list, rnd: int) -> float:
    if not spec.private:
        return float("inf")
    accountant.compose(spec.q, spec.sigma, steps)
    eps, alpha = accountant.epsilon(spec.delta)
    audit.append((rnd, alpha, float(accountant.rdp[alpha - accountant.orders[0]]), eps))
    return eps


def run_centralized(
    pooled: ClientState, cfg: RunConfig, classes: int, epochs: int, init: ModelParams | None = None
) -> tuple[GlobalModel, list[RoundReport], list[tuple[int, int, float, float]]]:
    """Single trainer over the pooled graph; one report per epoch.

    Uses the same seed stream as client 0 in federated round 1, so on one
    client it reproduces a single federated round with ``epochs`` local epochs.
    """
    params = init if init is not None else init_params(
        cfg.seed, _dims([pooled]), cfg.hidden, classes, cfg.layers, cfg.train.kind
    )
    accountant = AccountantState()
    per_epoch = steps_per_epoch(pooled.train_nodes.size, cfg.train.batch_size)
    train_cfg = TrainConfig(**{**vars(cfg.train), "noise_every_local_step": True}) if cfg.privacy.private else cfg.train
    reports, audit = [], []

    def on_epoch(epoch: int, current: ModelParams, loss: float) -> None:
        ev = evaluate(cfg.train.kind, current, [pooled], classes, cfg.f1_average)
        eps = _charge(accountant, cfg.privacy, per_epoch, audit, epoch)
        reports.append(RoundReport(epoch, [pooled.client_id], {pooled.client_id: loss}, ev.accuracy, ev.f1, eps))

    res = local_train(
        pooled, params, cfg.privacy, train_cfg, derive_rng(cfg.seed, _LOCAL, 1, 0), epochs, on_epoch
    )
    if res is None:
        raise ParameterError("pooled data has no training windows")
    final = ModelParams((k, params[k] + res.delta[k]) for k in params)
    return GlobalModel(final, epochs), reports, audit
