import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privfedgcn import dataio as dio
from privfedgcn import numerics as nx
from privfedgcn.errors import ParameterError, ParseError, SchemaError, ShapeError


def _rec(values, rate=100.0, label=2, modality="act", t0=1_600_000_000_000_000):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    stamps = t0 + np.round(np.arange(len(values)) * 1e6 / rate).astype(np.int64)
    return dio.RawRecording("07", label, modality, rate, values, stamps)


def _write_csv(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(",".join(str(v) for v in r) for r in rows) + "\n")


# --- loading -------------------------------------------------------------------


def test_load_empty_directory(tmp_path):
    assert dio.load_mex_layout(tmp_path) == []


def test_load_single_act_file(tmp_path):
    rows = [[1_000_000 + 10_000 * i, i, -i, 0.5] for i in range(10)]
    _write_csv(tmp_path / "act" / "03" / "4_1.csv", rows)
    (rec,) = dio.load_mex_layout(tmp_path)
    assert rec.n_frames == 10
    assert rec.client_id == "03" and rec.label == 4 and rec.modality == "act"
    assert rec.frames.shape == (10, 3)
    assert abs(rec.rate_hz - 100.0) < 1e-9


def test_load_decreasing_timestamps(tmp_path):
    _write_csv(tmp_path / "act" / "01" / "0_1.csv", [[20, 1, 2, 3], [10, 1, 2, 3]])
    with pytest.raises(ParseError, match=r"0_1\.csv:2"):
        dio.load_mex_layout(tmp_path)


def test_load_malformed_and_schema(tmp_path):
    _write_csv(tmp_path / "act" / "01" / "0_1.csv", [[1, 1, 2, 3], [2, "x", 2, 3]])
    with pytest.raises(ParseError, match=":2"):
        dio.load_mex_layout(tmp_path)
    _write_csv(tmp_path / "act" / "01" / "0_1.csv", [[1, 1, 2, 3], [2, 1, 2]])
    with pytest.raises(SchemaError):
        dio.load_mex_layout(tmp_path)
    _write_csv(tmp_path / "act" / "01" / "0_1.csv", [[1, 1, 2], [2, 1, 2]])
    with pytest.raises(SchemaError):
        dio.load_mex_layout(tmp_path)


def test_write_then_load_round_trip(tmp_path):
    rec = _rec(np.random.default_rng(0).normal(size=(20, 3)))
    dio.write_recording_csv(rec, tmp_path)
    (back,) = dio.load_mex_layout(tmp_path)
    np.testing.assert_array_equal(back.frames, rec.frames)
    np.testing.assert_array_equal(back.timestamps, rec.timestamps)


# --- resample ------------------------------------------------------------------


def test_resample_uniform_unchanged():
    rec = _rec(np.random.default_rng(1).normal(size=(50, 3)))
    out = dio.resample(rec, 100.0)
    assert np.max(np.abs(out.frames - rec.frames)) < 1e-12


def test_resample_linear_signal_stays_linear():
    rec = _rec(np.arange(300) / 100.0)
    out = dio.resample(rec, 37.0)
    t = np.arange(out.n_frames) / 37.0
    assert np.max(np.abs(out.frames[:, 0] - (t + 0.0))) < 1e-9


def test_resample_sine_matches_two_neighbor_oracle():
    rate = 100.0
    t = np.arange(600) / rate
    rec = _rec(np.sin(2 * math.pi * 1.3 * t))
    out = dio.resample(rec, 15.0)
    src_t = (rec.timestamps - rec.timestamps[0]).astype(float)
    for i, ts in enumerate(out.timestamps):
        x = 1_000_000 * i / 15.0
        j = min(int(np.searchsorted(src_t, x, side="right")) - 1, len(src_t) - 2)
        w = (x - src_t[j]) / (src_t[j + 1] - src_t[j])
        expected = (1 - w) * rec.frames[j, 0] + w * rec.frames[j + 1, 0]
        assert abs(out.frames[i, 0] - expected) < 1e-12


def test_resample_needs_two_frames():
    with pytest.raises(ParameterError):
        dio.resample(_rec([1.0]), 15.0)


# --- normalization ---------------------------------------------------------------


def test_zscore_cases():
    out = dio.zscore_normalize(_rec([1.0, 2.0, 3.0]))
    assert abs(out.frames.mean()) < 1e-15 and abs(out.frames.std() - 1) < 1e-12
    const = dio.zscore_normalize(_rec([4.0, 4.0, 4.0]))
    np.testing.assert_array_equal(const.frames, 0.0)


def test_zscore_two_channel_scalar_oracle():
    x = np.array([[1.0, 10.0], [2.0, 30.0], [4.0, 20.0], [7.0, 60.0]])
    train = x[:3]
    stats = dio.ChannelStats.fit(train)
    out = dio.zscore_normalize(_rec(x), stats).frames
    for k in range(2):
        col = [train[i, k] for i in range(3)]
        mu = sum(col) / 3
        sd = math.sqrt(sum((c - mu) ** 2 for c in col) / 3)
        for i in range(4):
            assert abs(out[i, k] - (x[i, k] - mu) / sd) < 1e-12
    assert np.max(np.abs(stats.apply(train).mean(axis=0))) < 1e-9


# --- segmentation --------------------------------------------------------------------


def test_segment_60s_100hz():
    wins = dio.segment_windows(_rec(np.zeros((6000, 3))), 5.0, 2.0)
    assert len(wins) == (6000 - 500) // 200 + 1 == 28
    assert all(b.shape == (500, 3) and lab == 2 for b, lab in wins)


def test_segment_60s_15hz():
    wins = dio.segment_windows(_rec(np.zeros((900, 192)), rate=15.0, modality="dc"), 5.0, 2.0)
    assert len(wins) == 28 and wins[0][0].shape == (75, 192)


def test_segment_exact_and_short():
    assert len(dio.segment_windows(_rec(np.zeros((500, 3))), 5.0, 2.0)) == 1
    assert dio.segment_windows(_rec(np.zeros((499, 3))), 5.0, 2.0) == []


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 500), st.integers(1, 500))
def test_window_count_formula(f, w, s):
    if s > w:
        return
    rec = _rec(np.zeros((f, 1)), rate=1.0)
    got = len(dio.segment_windows(rec, float(w), float(s)))
    assert got == (0 if f < w else (f - w) // s + 1)


# --- encoders -----------------------------------------------------------------------


def test_encode_accel_cases():
    np.testing.assert_array_equal(dio.encode_accel(np.zeros((500, 3))), np.zeros(180))
    const = dio.encode_accel(np.tile([1.0, -2.0, 3.0], (500, 1)))
    nonzero = np.flatnonzero(np.abs(const) > 1e-9)
    assert nonzero.tolist() == [0, 60, 120]
    block = np.random.default_rng(2).normal(size=(500, 3))
    expected = np.concatenate([nx.dct_1d(block[:, k], 60) for k in range(3)])
    np.testing.assert_array_equal(dio.encode_accel(block), expected)
    with pytest.raises(ShapeError):
        dio.encode_accel(np.zeros((500, 2)))


def test_autoencoder_reduces_error_and_is_deterministic():
    rng = np.random.default_rng(0)
    blocks = [rng.normal(size=(75, 192)) for _ in range(12)]
    fit = dio.fit_autoencoder(blocks, epochs=30, seed=4)
    assert fit.history[-1] < fit.history[0]
    again = dio.train_autoencoder(blocks, epochs=30, seed=4)
    for k, v in fit.encoder.items():
        np.testing.assert_array_equal(v, again[k])
    assert set(again) == {"enc_w0", "enc_b0", "enc_w1", "enc_b1"}
    with pytest.raises(ParameterError):
        dio.train_autoencoder([], 1)


def test_autoencoder_rank_one_data():
    rng = np.random.default_rng(1)
    pattern = rng.normal(size=512)
    scales = rng.uniform(-2, 2, size=40)
    blocks = [s * pattern for s in scales]
    x = np.vstack(blocks)
    fit = dio.fit_autoencoder(blocks, epochs=200, seed=0)
    assert fit.history[-1] < 0.01 * x.var()


def test_encode_image_modality():
    rng = np.random.default_rng(3)
    enc = dio.train_autoencoder([rng.normal(size=(75, 192))], epochs=1, seed=0)
    zero_bias = {k: (np.zeros_like(v) if "_b" in k else v) for k, v in enc.items()}
    np.testing.assert_array_equal(dio.encode_image_modality(np.zeros((75, 192)), zero_bias), np.zeros(64))
    block = rng.normal(size=(75, 192))
    out = dio.encode_image_modality(block, enc)
    assert out.shape == (64,)
    pooled = block.mean(axis=0)
    h = np.maximum(pooled @ enc["enc_w0"] + enc["enc_b0"][0], 0)
    np.testing.assert_allclose(out, h @ enc["enc_w1"] + enc["enc_b1"][0], atol=1e-10)
    with pytest.raises(ShapeError):
        dio.encode_image_modality(np.zeros((75, 512)), enc)


# --- synthetic / split -----------------------------------------------------------------


def test_synthetic_noise_free_classes_identical():
    sets = dio.generate_synthetic(dio.SyntheticSpec(clients=3, noise=0.0, seed=1))
    for ws in sets:
        for c in np.unique(ws.labels):
            rows = ws.features["act"][ws.labels == c]
            assert np.all(rows == rows[0])
    assert all(ws.features[m].shape[1] == d for ws in sets for m, d in dio.FEATURE_DIM.items())


def test_synthetic_deterministic():
    a = dio.generate_synthetic(dio.SyntheticSpec(seed=5))
    b = dio.generate_synthetic(dio.SyntheticSpec(seed=5))
    for x, y in zip(a, b):
        for m in x.features:
            assert x.features[m].tobytes() == y.features[m].tobytes()
        np.testing.assert_array_equal(x.labels, y.labels)


def test_synthetic_nearest_centroid():
    spec = dio.SyntheticSpec(clients=4, classes=2, windows_per_client=100, separation=10, noise=1, seed=2)
    sets = dio.generate_synthetic(spec)
    x = np.vstack([ws.features["act"] for ws in sets])
    y = np.concatenate([ws.labels for ws in sets])
    centroids = np.vstack([x[y == c].mean(axis=0) for c in (0, 1)])
    pred = np.argmin(((x[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == y).mean() > 0.99


def _uniform_ws(per_class, classes=3):
    labels = np.repeat(np.arange(classes), per_class)
    n = labels.size
    return dio.WindowSet("00", {"act": np.arange(n, dtype=float)[:, None]}, labels, np.arange(n), labels)


def test_split_counts_and_partition():
    ws = _uniform_ws(10)
    train, test = dio.split_train_test(ws, 0.7, seed=3)
    for c in range(3):
        assert (train.labels == c).sum() == 7 and (test.labels == c).sum() == 3
    idx_train, idx_test = set(train.window_index), set(test.window_index)
    assert not idx_train & idx_test
    assert idx_train | idx_test == set(range(30))
    again = dio.split_train_test(ws, 0.7, seed=3)
    np.testing.assert_array_equal(again[0].window_index, train.window_index)


def test_split_hundred_uniform():
    labels = np.zeros(100, int)
    ws = dio.WindowSet("00", {"act": np.zeros((100, 1))}, labels, np.arange(100), labels)
    train, test = dio.split_train_test(ws, 0.7)
    assert (len(train), len(test)) == (70, 30)


def test_split_singleton_class_goes_to_train(caplog):
    labels = np.array([0, 0, 0, 1])
    ws = dio.WindowSet("00", {"act": np.zeros((4, 1))}, labels, np.arange(4), labels)
    train, test = dio.split_train_test(ws, 0.7)
    assert 3 in train.window_index and 1 not in test.labels
    assert "kept in train" in caplog.text


def test_union_restores_order():
    ws = _uniform_ws(4)
    train, test = dio.split_train_test(ws, 0.5, seed=1)
    merged = dio.WindowSet.union([test, train])
    np.testing.assert_array_equal(merged.window_index, np.arange(12))


# --- pipeline -------------------------------------------------------------------------------


def test_raw_pipeline_dimensions(tmp_path):
    spec = dio.SyntheticSpec(clients=2, classes=2, windows_per_client=8, seed=0)
    recs = dio.generate_raw_recordings(spec)
    for r in recs:
        dio.write_recording_csv(r, tmp_path)
    loaded = dio.load_mex_layout(tmp_path)
    assert len(loaded) == len(recs)
    sessions = dio.align_and_segment(loaded)
    pairs = dio.encode_sessions(sessions, ae_epochs=5)
    assert len(pairs) == 2
    total = 0
    for train, test in pairs:
        total += len(train) + len(test)
        for part in (train, test):
            for m, d in dio.FEATURE_DIM.items():
                assert part.features[m].shape[1] == d
    assert total == 16
