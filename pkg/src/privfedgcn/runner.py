"""Config-driven experiment pipeline and artifact emission."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .config import ExperimentConfig
from .dataio import (
    FEATURE_DIM,
    SyntheticSpec,
    align_and_segment,
    encode_sessions,
    generate_raw_recordings,
    generate_synthetic,
    load_mex_layout,
    split_train_test,
    write_recording_csv,
)
from .eval import ConvergenceBoundParams, Trajectory, quadratic_testbed
from .federated import (
    ClientState,
    RunConfig,
    TrainConfig,
    evaluate,
    make_client,
    pool_clients,
    run_centralized,
    run_federated,
    steps_per_epoch,
)
from .privacy import PrivacySpec, calibrate_sigma, write_audit_log

log = logging.getLogger(__name__)

SUMMARY_HEADER = ["model", "setting", "epsilon", "accuracy", "f1", "utility_loss"]


def synthetic_spec(cfg: ExperimentConfig, seed: int) -> SyntheticSpec:
    return SyntheticSpec(
        clients=cfg["data.clients"],
        classes=cfg["data.classes"],
        windows_per_client=cfg["data.windows_per_client"],
        dims={m: FEATURE_DIM[m] for m in cfg["modalities"]},
        separation=cfg["data.separation"],
        noise=cfg["data.noise"],
        seed=seed,
        dirichlet_alpha=cfg["data.dirichlet_alpha"],
    )


def load_data(cfg: ExperimentConfig, seed: int):
    """Per-client ``(train, test)`` window sets and the class count."""
    mods = cfg["modalities"]
    frac = cfg["data.train_fraction"]
    if cfg["data.source"] == "mex":
        recs = load_mex_layout(Path(cfg["data.path"]))
        classes = max(r.label for r in recs) + 1
    elif cfg["data.raw"]:
        recs = generate_raw_recordings(synthetic_spec(cfg, seed), cfg["data.window_s"], cfg["data.stride_s"], mods)
        classes = cfg["data.classes"]
    else:
        sets = generate_synthetic(synthetic_spec(cfg, seed))
        return [split_train_test(ws, frac, seed + i) for i, ws in enumerate(sets)], cfg["data.classes"]
    sessions = align_and_segment(recs, mods, cfg["data.window_s"], cfg["data.stride_s"])
    return encode_sessions(sessions, mods, frac, seed, cfg["data.ae_epochs"]), classes


def _train_cfg(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        kind=cfg["model"],
        lr=cfg["training.lr"],
        optimizer=cfg["training.optimizer"],
        local_epochs=cfg["training.local_epochs"],
        batch_size=cfg["training.batch_size"],
        dropout=cfg["training.dropout"],
        noise_every_local_step=cfg["training.noise_every_local_step"],
    )


def accounting_steps(cfg: ExperimentConfig, clients: Sequence[ClientState], pooled: ClientState | None) -> int:
    """Composition length T used for calibration unless ``privacy.steps`` is set."""
    if cfg["privacy.steps"] is not None:
        return cfg["privacy.steps"]
    if cfg["mode"] == "centralized":
        return cfg["training.epochs"] * steps_per_epoch(pooled.train_nodes.size, cfg["training.batch_size"])
    if not cfg["training.noise_every_local_step"]:
        return cfg["training.rounds"]
    per_epoch = max(steps_per_epoch(c.train_nodes.size, cfg["training.batch_size"]) for c in clients)
    return cfg["training.rounds"] * cfg["training.local_epochs"] * per_epoch


def privacy_spec(cfg: ExperimentConfig, steps: int) -> PrivacySpec:
    if not cfg.private:
        return PrivacySpec(clip=cfg["privacy.clip"], delta=cfg["privacy.delta"], q=cfg["privacy.q"])
    eps, delta, q = cfg["privacy.epsilon"], cfg["privacy.delta"], cfg["privacy.q"]
    sigma = cfg["privacy.sigma"]
    if sigma is None:
        sigma = calibrate_sigma(eps, delta, q, steps)
    return PrivacySpec(epsilon=eps, delta=delta, sigma=sigma, clip=cfg["privacy.clip"], q=q, steps=steps)


@dataclass
class RunResult:
    accuracy: float
    f1: float
    sigma: float
    steps: int


class Artifacts:
    """Tracks written files so the MANIFEST can list them."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[Path] = []
        root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def write_manifest(self, error: str | None = None) -> None:
        lines = ["status: complete" if error is None else f"status: INCOMPLETE ({error})"]
        for p in self.files:
            if p.exists():
                lines.append(f"{p.relative_to(self.root).as_posix()},{p.stat().st_size}")
            else:
                lines.append(f"{p.relative_to(self.root).as_posix()},missing")
        (self.root / "MANIFEST").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _eps_text(e: float) -> str:
    return "none" if e == math.inf else metrics.fmt(e)


def run_single(cfg: ExperimentConfig, seed: int, art: Artifacts, prefix: str = "") -> RunResult:
    """One training run with all of its per-run artifacts."""
    pairs, classes = load_data(cfg, seed)
    clients = [make_client(tr, te, cfg["graph.percentile"], cfg["graph.shared"]) for tr, te in pairs]
    pooled = pool_clients(pairs, cfg["graph.percentile"], cfg["graph.shared"]) if cfg["mode"] == "centralized" else None
    steps = accounting_steps(cfg, clients, pooled)
    spec = privacy_spec(cfg, steps)
    run_cfg = RunConfig(
        rounds=cfg["training.rounds"],
        client_fraction=cfg["training.client_fraction"],
        hidden=cfg["training.hidden"],
        layers=cfg["training.layers"],
        seed=seed,
        weighted_fedavg=cfg["training.weighted_fedavg"],
        f1_average=cfg["training.f1_average"],
        train=_train_cfg(cfg),
        privacy=spec,
    )
    every = cfg["training.checkpoint_every"]

    def checkpoint(model, report):
        if every and report.round % every == 0:
            model.params.save(art.path(f"{prefix}checkpoints/round_{report.round:04d}.bin"))

    if cfg["mode"] == "federated":
        model, reports, audit = run_federated(clients, run_cfg, classes, on_round=checkpoint)
        eval_clients = clients
    else:
        model, reports, audit = run_centralized(pooled, run_cfg, classes, cfg["training.epochs"])
        eval_clients = [pooled]

    _write_rows(
        art.path(f"{prefix}metrics.csv"),
        ["round", "epsilon", "train_loss_mean", "test_accuracy", "test_f1"],
        [
            [r.round, _eps_text(r.epsilon), metrics.fmt(r.train_loss_mean), metrics.fmt(r.test_accuracy), metrics.fmt(r.test_f1)]
            for r in reports
        ],
    )
    if spec.private:
        write_audit_log(art.path(f"{prefix}accountant.csv"), audit)
    ev = evaluate(cfg["model"], model.params, eval_clients, classes, cfg["training.f1_average"])
    metrics.write_confusion(art.path(f"{prefix}confusion.csv"), metrics.confusion(ev.pred, ev.true, classes))
    emb, labels, ids = [], [], []
    for c, out in zip(eval_clients, ev.predictions):
        emb.append(out.embedding)
        labels.append(c.windows.labels)
        ids.extend(f"{c.client_id}:{i}" for i in c.windows.window_index)
    metrics.export_embeddings(np.vstack(emb), np.concatenate(labels), art.path(f"{prefix}embeddings.csv"), ids)
    model.params.save(art.path(f"{prefix}model.bin"))
    return RunResult(ev.accuracy, ev.f1, spec.sigma, steps)


def run_experiment(cfg: ExperimentConfig, out_dir: Path, baseline: dict | None = None) -> list[str]:
    """Run every replicate of one configuration; returns the summary row.

    Private runs also train the matching non-private configuration to report
    utility loss. ``baseline`` caches those non-private accuracies across grid
    cells keyed by the config echo.
    """
    art = Artifacts(out_dir)
    try:
        art.path("config.txt").write_text(cfg.echo(), encoding="utf-8")
        reps = cfg["seeds.replicates"]
        results = []
        for i in range(reps):
            prefix = f"rep{i}/" if reps > 1 else ""
            results.append(run_single(cfg, cfg["seeds.master"] + i, art, prefix))
        acc = float(np.median([r.accuracy for r in results]))
        f1 = float(np.median([r.f1 for r in results]))
        if cfg.private:
            plain = cfg.replace(privacy__epsilon=math.inf, privacy__sigma=None)
            key = plain.echo()
            cache = baseline if baseline is not None else {}
            if key not in cache:
                cache[key] = float(np.median([
                    run_single(plain, cfg["seeds.master"] + i, art, f"baseline/rep{i}/").accuracy
                    for i in range(reps)
                ]))
            loss = metrics.utility_loss(acc, cache[key])
        else:
            loss = 0.0
            if baseline is not None:
                baseline[cfg.echo()] = acc
        row = [cfg["model"], cfg["mode"], _eps_text(cfg["privacy.epsilon"]), metrics.fmt(acc), metrics.fmt(f1), metrics.fmt(loss)]
        _write_rows(art.path("summary.csv"), SUMMARY_HEADER, [row])
        if cfg.private:
            sig = results[0]
            _write_rows(art.path("privacy.csv"), ["sigma", "steps"], [[metrics.fmt(sig.sigma), sig.steps]])
    except Exception as exc:
        art.write_manifest(f"{type(exc).__name__}: {exc}")
        raise
    art.write_manifest()
    return row


def generate_dataset(cfg: ExperimentConfig, out_dir: Path) -> list[Path]:
    """Synthetic raw recordings written in the MEx directory layout."""
    recs = generate_raw_recordings(
        synthetic_spec(cfg, cfg["seeds.master"]), cfg["data.window_s"], cfg["data.stride_s"], cfg["modalities"]
    )
    return [write_recording_csv(r, out_dir) for r in recs]


def testbed_params(cfg: ExperimentConfig) -> ConvergenceBoundParams:
    return ConvergenceBoundParams(
        mu=cfg["testbed.mu"],
        L=cfg["testbed.L"],
        zeta=cfg["testbed.zeta"],
        sigma_g=cfg["testbed.sigma_g"],
        d=cfg["testbed.d"],
        m=cfg["testbed.m"],
        B=cfg["testbed.B"],
        C=cfg["privacy.clip"],
        sigma=cfg["testbed.sigma"],
        eta=cfg["testbed.eta"],
    )


def run_testbed(cfg: ExperimentConfig, out_dir: Path) -> Trajectory:
    art = Artifacts(out_dir)
    try:
        art.path("config.txt").write_text(cfg.echo(), encoding="utf-8")
        traj = quadratic_testbed(
            testbed_params(cfg), cfg["testbed.clients"], cfg["testbed.rounds"], cfg["seeds.master"], cfg["testbed.replicates"]
        )
        traj.write_csv(art.path("trajectory.csv"))
    except Exception as exc:
        art.write_manifest(f"{type(exc).__name__}: {exc}")
        raise
    art.write_manifest()
    return traj
