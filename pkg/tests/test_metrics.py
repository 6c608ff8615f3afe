import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privfedgcn import metrics
from privfedgcn.errors import LabelIndexError, MetricError, ParameterError


def test_accuracy_cases():
    assert metrics.accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert metrics.accuracy([1, 2, 0], [0, 1, 2]) == 0.0
    assert metrics.accuracy([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5
    with pytest.raises(ParameterError):
        metrics.accuracy([0, 1], [0])


def test_macro_f1_hand_case():
    assert metrics.macro_f1([1, 1, 0, 0], [1, 0, 1, 0], 2) == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(metrics.per_class_f1([1, 1, 0, 0], [1, 0, 1, 0], 2), [0.5, 0.5])


def test_macro_f1_perfect_and_absent_class(caplog):
    assert metrics.macro_f1([0, 1, 2, 2], [0, 1, 2, 2], 3) == 1.0
    with caplog.at_level("WARNING"):
        value = metrics.macro_f1([0, 1, 1], [0, 1, 1], 3)
    assert value == pytest.approx(2 / 3)
    assert "absent" in caplog.text


def test_weighted_and_micro():
    pred, true = [0, 0, 1, 1, 1], [0, 1, 1, 1, 1]
    f1 = metrics.per_class_f1(pred, true, 2)
    assert metrics.weighted_f1(pred, true, 2) == pytest.approx((f1[0] + 4 * f1[1]) / 5)
    assert metrics.micro_f1(pred, true, 2) == metrics.accuracy(pred, true)


def test_utility_loss():
    assert metrics.utility_loss(0.9, 0.95) == pytest.approx(0.05263157894736842, abs=1e-12)
    assert metrics.utility_loss(0.0, 0.7) == 1.0
    assert metrics.utility_loss(0.97, 0.95) < 0
    with pytest.raises(MetricError):
        metrics.utility_loss(0.5, 0.0)


@given(st.floats(min_value=1e-6, max_value=1.0))
def test_utility_loss_identity(x):
    assert metrics.utility_loss(x, x) == 0.0


def test_confusion_cases():
    cm = metrics.confusion([0, 1, 1, 2], [0, 1, 1, 2], 3)
    np.testing.assert_array_equal(cm, np.diag([1, 2, 1]))
    cm = metrics.confusion([5], [2], 6)
    assert cm[2, 5] == 1 and cm.sum() == 1
    with pytest.raises(LabelIndexError):
        metrics.confusion([3], [0], 3)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda k: st.tuples(
    st.just(k),
    st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=60),
)))
def test_accuracy_is_confusion_trace(case):
    k, pairs = case
    pred, true = zip(*pairs)
    cm = metrics.confusion(pred, true, k)
    assert cm.sum() == len(pairs)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(true, minlength=k))
    assert np.trace(cm) / cm.sum() == metrics.accuracy(pred, true)
    assert 0.0 <= metrics.macro_f1(pred, true, k) <= 1.0


def test_macro_f1_equals_accuracy_balanced_symmetric():
    true = np.array([0] * 10 + [1] * 10)
    pred = true.copy()
    pred[:3] = 1
    pred[10:13] = 0
    assert metrics.macro_f1(pred, true, 2) == pytest.approx(metrics.accuracy(pred, true))


def test_export_embeddings_round_trip(tmp_path):
    emb = np.random.default_rng(0).normal(size=(7, 64))
    labels = np.arange(7) % 3
    path = tmp_path / "emb.csv"
    metrics.export_embeddings(emb, labels, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 8
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:3] == ["node_id", "label", "h1"]
    assert all(len(r) == 2 + 64 for r in rows)
    back = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    assert back.tobytes() == emb.tobytes()
    np.testing.assert_array_equal([int(r[1]) for r in rows[1:]], labels)
