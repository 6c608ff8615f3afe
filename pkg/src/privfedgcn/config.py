"""Experiment configuration: a flat ``key = value`` text format with dotted keys.

Text after ``#`` is a comment. ``sweep.<key> = v1,v2,...`` lines
expand into the Cartesian product of configurations. Omitted keys take the
federated or centralized defaults of the hyper-parameter table, chosen by
``mode``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .dataio import MODALITIES
from .errors import ConfigError

NONE = "none"


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _eps(text: str) -> float:
    return math.inf if text.lower() in (NONE, "inf") else float(text)


def _opt_float(text: str) -> float | None:
    return None if text.lower() in (NONE, "auto", "") else float(text)


def _opt_int(text: str) -> int | None:
    return None if text.lower() in (NONE, "auto", "") else int(text)


def _mods(text: str) -> tuple[str, ...]:
    return tuple(m.strip() for m in text.split(",") if m.strip())


def _fmt_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return NONE
    if isinstance(v, float):
        return NONE if v == math.inf else repr(v)
    if isinstance(v, tuple):
        return ",".join(v)
    return str(v)


# key -> (parser, federated default, centralized default)
_SCHEMA: dict[str, tuple[Callable[[str], Any], Any, Any]] = {
    "mode": (str, "federated", "centralized"),
    "model": (str, "gcn", "gcn"),
    "modalities": (_mods, MODALITIES, MODALITIES),
    "output": (str, "runs/out", "runs/out"),
    "privacy.epsilon": (_eps, math.inf, math.inf),
    "privacy.delta": (float, 1e-3, 1e-3),
    "privacy.clip": (float, 1.0, 1.0),
    "privacy.q": (float, 0.01, 0.01),
    "privacy.sigma": (_opt_float, None, None),
    "privacy.steps": (_opt_int, None, None),
    "training.lr": (float, 0.01, 0.001),
    "training.optimizer": (str, "adam", "adam"),
    "training.layers": (int, 2, 2),
    "training.hidden": (int, 64, 128),
    "training.dropout": (float, 0.5, 0.5),
    "training.batch_size": (int, 32, 32),
    "training.local_epochs": (int, 20, 20),
    "training.rounds": (int, 50, 50),
    "training.epochs": (int, 500, 500),
    "training.client_fraction": (float, 1.0, 1.0),
    "training.noise_every_local_step": (_bool, False, False),
    "training.weighted_fedavg": (_bool, False, False),
    "training.f1_average": (str, "macro", "macro"),
    "training.checkpoint_every": (int, 0, 0),
    "data.source": (str, "synthetic", "synthetic"),
    "data.path": (str, "", ""),
    "data.raw": (_bool, False, False),
    "data.clients": (int, 5, 5),
    "data.classes": (int, 3, 3),
    "data.windows_per_client": (int, 40, 40),
    "data.separation": (float, 3.0, 3.0),
    "data.noise": (float, 1.0, 1.0),
    "data.dirichlet_alpha": (float, 0.5, 0.5),
    "data.train_fraction": (float, 0.7, 0.7),
    "data.window_s": (float, 5.0, 5.0),
    "data.stride_s": (float, 2.0, 2.0),
    "data.ae_epochs": (int, 200, 200),
    "graph.percentile": (float, 10.0, 10.0),
    "graph.shared": (_bool, False, False),
    "seeds.master": (int, 0, 0),
    "seeds.replicates": (int, 1, 1),
    "testbed.mu": (float, 1.0, 1.0),
    "testbed.L": (float, 1.0, 1.0),
    "testbed.eta": (float, 0.1, 0.1),
    "testbed.d": (int, 10, 10),
    "testbed.m": (int, 1, 1),
    "testbed.B": (int, 1, 1),
    "testbed.zeta": (float, 0.0, 0.0),
    "testbed.sigma_g": (float, 0.0, 0.0),
    "testbed.sigma": (float, 0.0, 0.0),
    "testbed.clients": (int, 10, 10),
    "testbed.rounds": (int, 200, 200),
    "testbed.replicates": (int, 20, 20),
}


@dataclass
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def replace(self, **updates) -> "ExperimentConfig":
        vals = dict(self.values)
        for k, v in updates.items():
            vals[k.replace("__", ".")] = v
        return validate(ExperimentConfig(vals))

    @property
    def private(self) -> bool:
        return self.values["privacy.epsilon"] != math.inf

    def echo(self) -> str:
        """Effective configuration in the input format; parsing it gives back this config."""
        return "".join(f"{k} = {_fmt_value(self.values[k])}\n" for k in _SCHEMA)


def _parse_value(key: str, text: str) -> Any:
    if key not in _SCHEMA:
        raise ConfigError(key, "unknown key")
    try:
        return _SCHEMA[key][0](text.strip())
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {text.strip()!r}: {exc}") from None


def _with_defaults(given: dict[str, Any]) -> ExperimentConfig:
    mode = given.get("mode", "federated")
    col = 2 if mode == "centralized" else 1
    vals = {k: given[k] if k in given else spec[col] for k, spec in _SCHEMA.items()}
    return validate(ExperimentConfig(vals))


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(key, message)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    v = cfg.values
    _check(v["mode"] in ("federated", "centralized"), "mode", "must be federated or centralized")
    _check(v["model"] in ("gcn", "ffn"), "model", "must be gcn or ffn")
    mods = v["modalities"]
    _check(len(mods) > 0 and set(mods) <= set(MODALITIES) and len(set(mods)) == len(mods),
           "modalities", f"must be distinct names from {','.join(MODALITIES)}")
    _check(v["privacy.epsilon"] > 0, "privacy.epsilon", "must be positive or none")
    _check(0 < v["privacy.delta"] < 1, "privacy.delta", "must lie in (0, 1)")
    _check(v["privacy.clip"] > 0, "privacy.clip", "must be positive")
    _check(0 < v["privacy.q"] <= 1, "privacy.q", "must lie in (0, 1]")
    sigma = v["privacy.sigma"]
    _check(sigma is None or sigma >= 0, "privacy.sigma", "must be non-negative")
    if sigma is not None:
        _check((sigma == 0) == (v["privacy.epsilon"] == math.inf), "privacy.sigma",
               "sigma = 0 exactly when epsilon = none")
    _check(v["privacy.steps"] is None or v["privacy.steps"] >= 1, "privacy.steps", "must be >= 1")
    _check(v["training.lr"] > 0, "training.lr", "must be positive")
    _check(v["training.optimizer"] in ("adam", "sgd"), "training.optimizer", "must be adam or sgd")
    _check(v["training.layers"] >= 1, "training.layers", "must be >= 1")
    _check(v["training.hidden"] >= 1, "training.hidden", "must be >= 1")
    _check(0 <= v["training.dropout"] < 1, "training.dropout", "must lie in [0, 1)")
    _check(v["training.batch_size"] >= 1, "training.batch_size", "must be >= 1")
    _check(v["training.local_epochs"] >= 0, "training.local_epochs", "must be >= 0")
    _check(v["training.rounds"] >= 1, "training.rounds", "must be >= 1")
    _check(v["training.epochs"] >= 1, "training.epochs", "must be >= 1")
    _check(0 < v["training.client_fraction"] <= 1, "training.client_fraction", "must lie in (0, 1]")
    _check(v["training.f1_average"] in ("macro", "micro", "weighted"), "training.f1_average",
           "must be macro, micro or weighted")
    _check(v["training.checkpoint_every"] >= 0, "training.checkpoint_every", "must be >= 0")
    _check(v["data.source"] in ("synthetic", "mex"), "data.source", "must be synthetic or mex")
    if v["data.source"] == "mex":
        _check(bool(v["data.path"]), "data.path", "required when data.source = mex")
    for key in ("data.clients", "data.windows_per_client"):
        _check(v[key] >= 1, key, "must be >= 1")
    _check(v["data.classes"] >= 2, "data.classes", "must be >= 2")
    _check(v["data.separation"] >= 0, "data.separation", "must be non-negative")
    _check(v["data.noise"] > 0, "data.noise", "must be positive")
    _check(v["data.dirichlet_alpha"] > 0, "data.dirichlet_alpha", "must be positive")
    _check(0 < v["data.train_fraction"] < 1, "data.train_fraction", "must lie in (0, 1)")
    _check(v["data.window_s"] > 0, "data.window_s", "must be positive")
    _check(v["data.stride_s"] > 0, "data.stride_s", "must be positive")
    _check(v["data.ae_epochs"] >= 0, "data.ae_epochs", "must be >= 0")
    _check(0 <= v["graph.percentile"] <= 100, "graph.percentile", "must lie in [0, 100]")
    _check(v["seeds.replicates"] >= 1, "seeds.replicates", "must be >= 1")
    _check(0 < v["testbed.mu"] <= v["testbed.L"], "testbed.mu", "need 0 < mu <= L")
    for key in ("testbed.eta",):
        _check(v[key] > 0, key, "must be positive")
    for key in ("testbed.zeta", "testbed.sigma_g", "testbed.sigma"):
        _check(v[key] >= 0, key, "must be non-negative")
    for key in ("testbed.d", "testbed.m", "testbed.B", "testbed.clients", "testbed.rounds", "testbed.replicates"):
        _check(v[key] >= 1, key, "must be >= 1")
    _check(v["testbed.m"] <= v["testbed.clients"], "testbed.m", "must not exceed testbed.clients")
    return cfg


def parse_lines(lines) -> tuple[dict[str, Any], dict[str, list[Any]]]:
    """Parsed ``key = value`` pairs and sweep axes (in file order)."""
    given: dict[str, Any] = {}
    sweeps: dict[str, list[Any]] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, text = (s.strip() for s in line.split("=", 1))
        if key.startswith("sweep."):
            target = key[len("sweep."):]
            if target == "modalities":
                # modality subsets are separated by ';' inside a sweep
                sweeps[target] = [_parse_value(target, t) for t in text.split(";")]
            else:
                sweeps[target] = [_parse_value(target, t) for t in text.split(",")]
            continue
        if key in given:
            raise ConfigError(key, "given twice")
        given[key] = _parse_value(key, text)
    return given, sweeps


def expand(given: dict[str, Any], sweeps: dict[str, list[Any]]) -> list[ExperimentConfig]:
    if not sweeps:
        return [_with_defaults(given)]
    keys = list(sweeps)
    return [_with_defaults({**given, **dict(zip(keys, combo))}) for combo in itertools.product(*sweeps.values())]


def parse_config(path) -> list[ExperimentConfig]:
    """All configurations described by the file (one unless it sweeps)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "config file not found")
    given, sweeps = parse_lines(path.read_text(encoding="utf-8").splitlines())
    return expand(given, sweeps)


def parse_text(text: str) -> list[ExperimentConfig]:
    return expand(*parse_lines(text.splitlines()))


def sweep_label(cfg: ExperimentConfig, keys) -> str:
    """Directory-safe label for a grid cell."""
    if not keys:
        return ""
    parts = [f"{k.split('.')[-1]}-{_fmt_value(cfg[k]).replace(',', '+')}" for k in keys]
    return "_".join(parts)
