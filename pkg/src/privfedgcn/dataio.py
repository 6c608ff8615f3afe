"""Sensor ingestion, windowing, per-modality encoding and synthetic data.

Dataset layout on disk::

    <root>/<modality>/<subject_id>/<exercise_id>_<repetition>.csv

with rows ``timestamp,v1,...,vK`` (timestamp in integer microseconds since
the Unix epoch; an optional ``timestamp,...`` header line is skipped) and
``K`` = 3 for act/acw, 192 for dc (12x16) and 512 for pm (32x16).
``exercise_id`` is the 0-based class index.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ParameterError, ParseError, SchemaError, ShapeError

log = logging.getLogger(__name__)

MODALITIES = ("act", "acw", "dc", "pm")
FRAME_WIDTH = {"act": 3, "acw": 3, "dc": 192, "pm": 512}
NATIVE_RATE = {"act": 100.0, "acw": 100.0, "dc": 15.0, "pm": 15.0}
FEATURE_DIM = {"act": 180, "acw": 180, "dc": 64, "pm": 64}
DCT_KEEP = 60
AE_HIDDEN = 256
AE_LATENT = 64


@dataclass
class RawRecording:
    client_id: str
    label: int
    modality: str
    rate_hz: float
    frames: np.ndarray  # F x K
    timestamps: np.ndarray  # int64 microseconds
    repetition: int = 1

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.frames.ndim != 2 or self.frames.shape[0] != self.timestamps.shape[0]:
            raise ShapeError(
                f"{self.frames.shape[0] if self.frames.ndim else 0} frames vs "
                f"{self.timestamps.shape[0]} timestamps"
            )
        if np.any(np.diff(self.timestamps) <= 0):
            raise ParseError("timestamps must be strictly increasing")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_s(self) -> float:
        return (self.timestamps[-1] - self.timestamps[0]) / 1e6 if self.n_frames else 0.0


# ---------------------------------------------------------------------------
# loading / writing
# ---------------------------------------------------------------------------


def _estimate_rate(ts: np.ndarray) -> float:
    if ts.size < 2:
        return 0.0
    return (ts.size - 1) / ((ts[-1] - ts[0]) / 1e6)


def read_recording_csv(path: Path, client_id: str, label: int, modality: str, repetition: int = 1) -> RawRecording:
    ts, rows, width = [], [], None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and row[0].strip().lower() == "timestamp":
                continue
            try:
                t = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: malformed row ({exc})") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise SchemaError(f"{path}:{lineno}: {len(vals)} values, expected {width}")
            if ts and t <= ts[-1]:
                raise ParseError(f"{path}:{lineno}: timestamp {t} not after {ts[-1]}")
            ts.append(t)
            rows.append(vals)
    expected = FRAME_WIDTH.get(modality)
    if width is not None and expected is not None and width != expected:
        raise SchemaError(f"{path}: {modality} frames have width {width}, expected {expected}")
    frames = np.array(rows, dtype=np.float64).reshape(len(rows), width or FRAME_WIDTH.get(modality, 0))
    stamps = np.array(ts, dtype=np.int64)
    return RawRecording(client_id, label, modality, _estimate_rate(stamps), frames, stamps, repetition)


def load_mex_layout(root: Path) -> list[RawRecording]:
    """One recording per ``<modality>/<subject>/<exercise>_<rep>.csv`` file, sorted by path."""
    root = Path(root)
    out = []
    for path in sorted(root.glob("*/*/*.csv")):
        modality = path.parent.parent.name
        if modality not in FRAME_WIDTH:
            continue
        stem = path.stem
        try:
            exercise, rep = stem.split("_")
            label, repetition = int(exercise), int(rep)
        except ValueError:
            raise ParseError(f"{path}: file name must be <exercise>_<repetition>.csv") from None
        out.append(read_recording_csv(path, path.parent.name, label, modality, repetition))
    return out


def write_recording_csv(rec: RawRecording, root: Path) -> Path:
    path = Path(root) / rec.modality / rec.client_id / f"{rec.label}_{rec.repetition}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + [f"v{i + 1}" for i in range(rec.frames.shape[1])])
        for t, row in zip(rec.timestamps, rec.frames):
            w.writerow([int(t)] + [f"{v:.17g}" for v in row])
    return path


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def resample(rec: RawRecording, target_hz: float, start_us: int | None = None, end_us: int | None = None) -> RawRecording:
    """Linear interpolation onto a uniform ``target_hz`` grid over the recording span.

    ``start_us``/``end_us`` restrict the grid to a sub-span (used to align
    modalities on their common interval).
    """
    if rec.n_frames < 2:
        raise ParameterError("resample needs at least two frames")
    if target_hz <= 0:
        raise ParameterError(f"target rate must be positive, got {target_hz}")
    t0 = rec.timestamps[0] if start_us is None else start_us
    t1 = rec.timestamps[-1] if end_us is None else end_us
    step_us = 1e6 / target_hz
    n = int(math.floor((t1 - t0) / step_us + 1e-9)) + 1
    # offsets stay small so float64 keeps sub-microsecond resolution
    offsets = np.arange(n) * step_us
    rel = float(t0 - rec.timestamps[0]) + offsets
    src = (rec.timestamps - rec.timestamps[0]).astype(np.float64)
    frames = np.column_stack([np.interp(rel, src, rec.frames[:, k]) for k in range(rec.frames.shape[1])])
    stamps = int(t0) + np.round(offsets).astype(np.int64)
    return RawRecording(rec.client_id, rec.label, rec.modality, float(target_hz), frames, stamps, rec.repetition)


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames: np.ndarray) -> "ChannelStats":
        x = np.asarray(frames, dtype=np.float64)
        return cls(x.mean(axis=0), x.std(axis=0))

    def apply(self, frames: np.ndarray) -> np.ndarray:
        safe = np.where(self.std > 0, self.std, 1.0)
        out = (np.asarray(frames, dtype=np.float64) - self.mean) / safe
        return np.where(self.std > 0, out, 0.0)


def zscore_normalize(rec: RawRecording, stats: ChannelStats | None = None) -> RawRecording:
    """Per-channel z-score with the given (training) statistics; constant channels map to 0."""
    stats = stats or ChannelStats.fit(rec.frames)
    return RawRecording(
        rec.client_id, rec.label, rec.modality, rec.rate_hz, stats.apply(rec.frames), rec.timestamps, rec.repetition
    )


def window_count(n_frames: int, window: int, stride: int) -> int:
    if n_frames < window:
        return 0
    return (n_frames - window) // stride + 1


def segment_windows(rec: RawRecording, window_s: float = 5.0, stride_s: float = 2.0) -> list[tuple[np.ndarray, int]]:
    """``(frame_block, label)`` pairs from a fixed-rate recording."""
    if not window_s >= stride_s > 0:
        raise ParameterError("need window >= stride > 0")
    w = int(round(window_s * rec.rate_hz))
    s = int(round(stride_s * rec.rate_hz))
    n = window_count(rec.n_frames, w, s)
    return [(rec.frames[i * s : i * s + w], rec.label) for i in range(n)]


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def encode_accel(block: np.ndarray, keep: int = DCT_KEEP) -> np.ndarray:
    b = np.asarray(block, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != 3:
        raise ShapeError(f"accelerometer block must be F x 3, got {b.shape}")
    return np.concatenate([nx.dct_1d(b[:, k], keep) for k in range(3)])


def _ae_init(rng: np.random.Generator, width: int) -> dict[str, np.ndarray]:
    def glorot(a, b):
        lim = math.sqrt(6.0 / (a + b))
        return rng.uniform(-lim, lim, size=(a, b))

    return {
        "enc_w0": glorot(width, AE_HIDDEN),
        "enc_b0": np.zeros((1, AE_HIDDEN)),
        "enc_w1": glorot(AE_HIDDEN, AE_LATENT),
        "enc_b1": np.zeros((1, AE_LATENT)),
        "dec_w0": glorot(AE_LATENT, AE_HIDDEN),
        "dec_b0": np.zeros((1, AE_HIDDEN)),
        "dec_w1": glorot(AE_HIDDEN, width),
        "dec_b1": np.zeros((1, width)),
    }


def _encode(p, x):
    h = nx.relu(nx.add(nx.matmul(x, p["enc_w0"]), p["enc_b0"]))
    return nx.add(nx.matmul(h, p["enc_w1"]), p["enc_b1"])


def _decode(p, z):
    h = nx.relu(nx.add(nx.matmul(z, p["dec_w0"]), p["dec_b0"]))
    return nx.add(nx.matmul(h, p["dec_w1"]), p["dec_b1"])


def reconstruction_mse(params: Mapping[str, np.ndarray], x: np.ndarray) -> float:
    return nx.mse(_decode(params, _encode(params, x)), x)


@dataclass
class AutoencoderFit:
    params: dict[str, np.ndarray]
    history: list[float] = field(default_factory=list)

    @property
    def encoder(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith("enc_")}


def _pool(block: np.ndarray) -> np.ndarray:
    b = np.asarray(block, dtype=np.float64)
    return b.mean(axis=0) if b.ndim == 2 else b


def fit_autoencoder(blocks: Sequence[np.ndarray], epochs: int = 200, seed: int = 0, lr: float = 0.01) -> AutoencoderFit:
    """Full-batch Adam on mean-squared reconstruction; blocks are mean-pooled over frames."""
    if len(blocks) == 0:
        raise ParameterError("autoencoder needs at least one block")
    x = np.vstack([_pool(b) for b in blocks])
    params = _ae_init(np.random.default_rng(seed), x.shape[1])
    state = nx.OptimizerState(kind="adam", lr=lr)
    history = [reconstruction_mse(params, x)]
    for _ in range(epochs):
        tape = nx.GradTape()
        p = tape.watch(params)
        loss = nx.mse(_decode(p, _encode(p, x)), x)
        grads = tape.backward(loss)
        params = nx.optimizer_step(state, params, grads)
        history.append(reconstruction_mse(params, x))
    return AutoencoderFit(params, history)


def train_autoencoder(blocks: Sequence[np.ndarray], epochs: int = 200, seed: int = 0, lr: float = 0.01) -> dict[str, np.ndarray]:
    return fit_autoencoder(blocks, epochs, seed, lr).encoder


def encode_image_modality(block: np.ndarray, encoder: Mapping[str, np.ndarray]) -> np.ndarray:
    x = _pool(block)[None, :]
    width = encoder["enc_w0"].shape[0]
    if x.shape[1] != width:
        raise ShapeError(f"frame width {x.shape[1]} does not match encoder input {width}")
    return _encode(encoder, x)[0]


# ---------------------------------------------------------------------------
# window sets
# ---------------------------------------------------------------------------


@dataclass
class WindowSet:
    client_id: str
    features: dict[str, np.ndarray]  # modality -> N x d
    labels: np.ndarray
    window_index: np.ndarray
    recording: np.ndarray  # windows sharing a recording id form a temporal chain

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.window_index = np.asarray(self.window_index, dtype=np.int64)
        self.recording = np.asarray(self.recording, dtype=np.int64)
        n = self.labels.shape[0]
        for m, x in self.features.items():
            if x.shape[0] != n:
                raise ShapeError(f"{m}: {x.shape[0]} feature rows for {n} windows")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(
            self.client_id,
            {m: x[idx] for m, x in self.features.items()},
            self.labels[idx],
            self.window_index[idx],
            self.recording[idx],
        )

    @staticmethod
    def union(parts: Sequence["WindowSet"]) -> "WindowSet":
        """Concatenate and restore window order."""
        mods = list(parts[0].features)
        merged = WindowSet(
            parts[0].client_id,
            {m: np.vstack([p.features[m] for p in parts]) for m in mods},
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.window_index for p in parts]),
            np.concatenate([p.recording for p in parts]),
        )
        return merged.subset(np.argsort(merged.window_index, kind="stable"))


def split_train_test(ws: WindowSet, train_fraction: float = 0.7, seed: int = 0) -> tuple[WindowSet, WindowSet]:
    """Label-stratified split; each part keeps window order."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(ws.labels):
        idx = np.flatnonzero(ws.labels == c)
        if idx.size < 2:
            log.warning("client %s: class %d has %d window(s); kept in train only", ws.client_id, c, idx.size)
            train.extend(idx.tolist())
            continue
        idx = rng.permutation(idx)
        n_train = min(max(int(round(train_fraction * idx.size)), 1), idx.size - 1)
        train.extend(idx[:n_train].tolist())
        test.extend(idx[n_train:].tolist())
    return ws.subset(np.sort(train)), ws.subset(np.sort(np.array(test, dtype=np.int64)))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    clients: int = 5
    classes: int = 3
    windows_per_client: int = 40
    dims: dict[str, int] = field(default_factory=lambda: dict(FEATURE_DIM))
    separation: float = 3.0
    noise: float = 1.0
    seed: int = 0
    dirichlet_alpha: float = 0.5

    def __post_init__(self):
        if self.separation <= 0:
            raise ParameterError("separation must be positive")
        if self.noise < 0:
            raise ParameterError("noise must be non-negative")
        if self.clients < 1 or self.classes < 2 or self.windows_per_client < 1:
            raise ParameterError("need >= 1 client, >= 2 classes, >= 1 window per client")


def client_label_counts(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """clients x classes window counts with Dirichlet label skew."""
    counts = np.zeros((spec.clients, spec.classes), dtype=np.int64)
    for c in range(spec.clients):
        p = rng.dirichlet(np.full(spec.classes, spec.dirichlet_alpha))
        counts[c] = rng.multinomial(spec.windows_per_client, p)
    return counts


def generate_synthetic(spec: SyntheticSpec) -> list[WindowSet]:
    """Encoded-feature windows: class mean plus isotropic Gaussian noise.

    Class means have norm about ``separation`` regardless of dimension.
    Windows of one (client, class) pair form one recording.
    """
    rng = np.random.default_rng(spec.seed)
    means = {
        m: rng.normal(size=(spec.classes, d)) * spec.separation / math.sqrt(d)
        for m, d in spec.dims.items()
    }
    counts = client_label_counts(spec, rng)
    out = []
    for c in range(spec.clients):
        labels = np.repeat(np.arange(spec.classes), counts[c])
        feats = {
            m: means[m][labels] + rng.normal(size=(labels.size, d)) * spec.noise
            for m, d in spec.dims.items()
        }
        out.append(
            WindowSet(f"{c:02d}", feats, labels, np.arange(labels.size), labels.copy())
        )
    return out


def generate_raw_recordings(
    spec: SyntheticSpec,
    window_s: float = 5.0,
    stride_s: float = 2.0,
    modalities: Sequence[str] = MODALITIES,
) -> list[RawRecording]:
    """Raw multimodal recordings with class-specific patterns, one per (client, class, modality).

    Recording length is chosen so segmentation yields the Dirichlet-drawn
    window count for that client and class.
    """
    rng = np.random.default_rng(spec.seed)
    counts = client_label_counts(spec, rng)
    accel_freq = rng.uniform(0.5, 3.0, size=(spec.classes, 3))
    accel_amp = rng.uniform(0.5, 2.0, size=(spec.classes, 3)) * spec.separation / 3.0
    patterns = {m: rng.normal(size=(spec.classes, FRAME_WIDTH[m])) * spec.separation / 3.0 for m in ("dc", "pm")}
    pulse = rng.uniform(0.2, 1.0, size=spec.classes)
    base_us = 1_500_000_000_000_000
    out = []
    for c in range(spec.clients):
        offset = base_us + c * 10**10
        for k in range(spec.classes):
            n_win = int(counts[c, k])
            if n_win == 0:
                continue
            duration = window_s + stride_s * (n_win - 1)
            for m in modalities:
                rate = NATIVE_RATE[m]
                n = int(round(duration * rate)) + 1
                t = np.arange(n) / rate
                if m in ("act", "acw"):
                    phase = rng.uniform(0, 2 * math.pi, size=3)
                    frames = accel_amp[k] * np.sin(2 * math.pi * accel_freq[k] * t[:, None] + phase)
                    if m == "acw":
                        frames = frames[:, ::-1]
                else:
                    frames = patterns[m][k] * (1.0 + 0.3 * np.sin(2 * math.pi * pulse[k] * t))[:, None]
                frames = frames + rng.normal(size=frames.shape) * spec.noise
                stamps = offset + np.round(np.arange(n) * 1e6 / rate).astype(np.int64)
                out.append(RawRecording(f"{c:02d}", k, m, rate, frames, stamps))
    return out


# ---------------------------------------------------------------------------
# recordings -> window sets
# ---------------------------------------------------------------------------


@dataclass
class Session:
    """Modalities of one (client, exercise, repetition) aligned on a common span."""

    client_id: str
    label: int
    repetition: int
    blocks: dict[str, list[np.ndarray]]


def align_and_segment(
    recordings: Sequence[RawRecording],
    modalities: Sequence[str] = MODALITIES,
    window_s: float = 5.0,
    stride_s: float = 2.0,
    rates: Mapping[str, float] = NATIVE_RATE,
) -> list[Session]:
    """Resample each modality, trim to the common span, and pair windows by index."""
    groups: dict[tuple, dict[str, RawRecording]] = defaultdict(dict)
    for r in recordings:
        if r.modality in modalities:
            groups[(r.client_id, r.label, r.repetition)][r.modality] = r
    sessions = []
    for (client, label, rep), recs in sorted(groups.items()):
        if any(m not in recs for m in modalities):
            log.warning("client %s exercise %d rep %d lacks some modalities; skipped", client, label, rep)
            continue
        start = max(recs[m].timestamps[0] for m in modalities)
        end = min(recs[m].timestamps[-1] for m in modalities)
        if end <= start:
            continue
        blocks = {}
        for m in modalities:
            aligned = resample(recs[m], rates[m], start, end)
            blocks[m] = [b for b, _ in segment_windows(aligned, window_s, stride_s)]
        n = min(len(b) for b in blocks.values())
        if n == 0:
            continue
        sessions.append(Session(client, label, rep, {m: b[:n] for m, b in blocks.items()}))
    return sessions


def encode_sessions(
    sessions: Sequence[Session],
    modalities: Sequence[str] = MODALITIES,
    train_fraction: float = 0.7,
    seed: int = 0,
    ae_epochs: int = 200,
) -> list[tuple[WindowSet, WindowSet]]:
    """Split, normalize with training statistics, and encode windows per client.

    Returns ``(train, test)`` window sets per client in client-id order. The
    image-modality autoencoders are fitted on the pooled training windows.
    """
    per_client: dict[str, list[Session]] = defaultdict(list)
    for s in sessions:
        per_client[s.client_id].append(s)

    raw_sets = []
    for ci, (client, sess) in enumerate(sorted(per_client.items())):
        blocks = {m: [] for m in modalities}
        labels, rec = [], []
        for ri, s in enumerate(sess):
            for m in modalities:
                blocks[m].extend(s.blocks[m])
            n = len(s.blocks[modalities[0]])
            labels.extend([s.label] * n)
            rec.extend([ri] * n)
        idx = np.arange(len(labels))
        # index features; real features are filled in after normalization
        ws = WindowSet(client, {"_idx": idx[:, None].astype(float)}, labels, idx, rec)
        train, test = split_train_test(ws, train_fraction, seed + ci)
        stats = {
            m: ChannelStats.fit(np.vstack([blocks[m][i] for i in train.window_index]))
            for m in modalities
        }
        normed = {m: [stats[m].apply(b) for b in blocks[m]] for m in modalities}
        raw_sets.append((ws, train.window_index, test.window_index, normed))

    encoders = {}
    for m in modalities:
        if m in ("dc", "pm"):
            pooled = [normed[m][i] for _, tr, _, normed in raw_sets for i in tr]
            encoders[m] = train_autoencoder(pooled, ae_epochs, seed)

    out = []
    for ws, tr, te, normed in raw_sets:
        feats = {}
        for m in modalities:
            if m in ("act", "acw"):
                feats[m] = np.vstack([encode_accel(b) for b in normed[m]])
            else:
                feats[m] = np.vstack([encode_image_modality(b, encoders[m]) for b in normed[m]])
        full = WindowSet(ws.client_id, feats, ws.labels, ws.window_index, ws.recording)
        out.append((full.subset(tr), full.subset(te)))
    return out
