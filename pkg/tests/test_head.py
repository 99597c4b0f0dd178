import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otnrwkv import head as hd
from otnrwkv.errors import EmptyEvaluation, ShapeMismatch


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def wce_oracle(p, y, r, eps=1e-7):
    total = 0.0
    for i in range(len(y)):
        for j in range(len(y[0])):
            pij = min(max(p[i][j], eps), 1 - eps)
            w = math.exp(1 - r[j]) if y[i][j] else math.exp(r[j])
            total -= w * (math.log(pij) if y[i][j] else math.log(1 - pij))
    return total / len(y)


def metrics_oracle(pred, labels):
    """Scalar loops over (sample, attribute) pairs."""
    n, m = len(labels), len(labels[0])
    TP = TN = FP = FN = 0
    ma = 0.0
    for j in range(m):
        tp = tn = fp = fn = 0
        for i in range(n):
            p, y = pred[i][j], labels[i][j]
            tp += p and y
            tn += (not p) and (not y)
            fp += p and not y
            fn += (not p) and y
        TP, TN, FP, FN = TP + tp, TN + tn, FP + fp, FN + fn
        tpr = tp / (tp + fn) if tp + fn else 0.0
        tnr = tn / (tn + fp) if tn + fp else 0.0
        ma += (tpr + tnr) / 2 / m
    acc = (TP + TN) / (TP + TN + FP + FN)
    prec = TP / (TP + FP) if TP + FP else 0.0
    rec = TP / (TP + FN) if TP + FN else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return {"mA": ma, "acc": acc, "prec": prec, "recall": rec, "f1": f1}


class TestClassify:
    def test_zero_head_ties_positive(self):
        pred = hd.classify(torch.randn(2, 5, 4), torch.zeros(4, 3), torch.zeros(3))
        assert (pred.probabilities == 0.5).all()
        assert (pred.binary == 1).all()

    def test_single_token_identity(self):
        x = torch.randn(1, 1, 3, dtype=torch.float64)
        pred = hd.classify(x, torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
        np.testing.assert_allclose(pred.probabilities.numpy(), torch.sigmoid(x[:, 0]).numpy(), rtol=1e-12)

    def test_mean_then_affine(self, rng):
        x, W, b = rng.normal(size=(3, 7, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)
        pred = hd.classify(t64(x), t64(W), t64(b))
        ref = x.mean(axis=1) @ W + b
        np.testing.assert_allclose(pred.logits.numpy(), ref, rtol=1e-12)
        np.testing.assert_allclose(pred.probabilities.numpy(), 1 / (1 + np.exp(-ref)), rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            hd.classify(torch.zeros(2, 3, 4), torch.zeros(5, 2), torch.zeros(2))


class TestWeights:
    def test_symmetric_point(self):
        w = hd.attribute_weights([[1], [1], [0], [0]])
        assert w.positive_ratio[0] == 0.5
        assert w.positive[0] == pytest.approx(1.6487212707, rel=1e-9)
        assert w.negative[0] == pytest.approx(1.6487212707, rel=1e-9)

    def test_never_positive(self):
        w = hd.attribute_weights([[0], [0]])
        assert w.positive[0] == pytest.approx(math.e)
        assert w.negative[0] == 1.0


class TestWCE:
    def test_half_probability(self):
        w = hd.AttributeWeights(np.ones(1), np.ones(1), np.zeros(1))
        assert float(hd.wce_loss(t64([[0.5]]), [[1]], w)) == pytest.approx(math.log(2), rel=1e-12)

    def test_matches_double_sum(self, rng):
        y = np.array([[1, 0, 1], [0, 0, 1]])
        p = rng.uniform(size=(2, 3))
        w = hd.attribute_weights(y)
        got = float(hd.wce_loss(t64(p), y, w))
        assert got == pytest.approx(wce_oracle(p.tolist(), y.tolist(), y.mean(0).tolist()), rel=1e-12)

    def test_perfect_predictions_near_zero(self):
        y = np.array([[1, 0], [0, 1]])
        w = hd.attribute_weights(y)
        loss = float(hd.wce_loss(t64(y.astype(float)), y, w))
        assert 0 <= loss <= -math.log(1 - 1e-7) * 2 * max(w.positive.max(), w.negative.max()) + 1e-12

    def test_saturated_wrong_prediction_is_finite(self):
        y = np.array([[1]])
        loss = hd.wce_loss(t64([[0.0]]), y, hd.attribute_weights(y))
        assert math.isfinite(float(loss))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            hd.wce_loss(torch.zeros(2, 3), np.zeros((2, 2)), hd.attribute_weights(np.zeros((2, 2))))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.integers(0, 1))
    def test_monotone_toward_label(self, p, step, y):
        w = hd.AttributeWeights(np.full(1, 1.3), np.full(1, 0.7), np.zeros(1))
        closer = p + step if y else p - step
        if not 0 < closer < 1:
            return
        a = float(hd.wce_loss(t64([[p]]), [[y]], w))
        b = float(hd.wce_loss(t64([[closer]]), [[y]], w))
        assert 0 <= b < a


class TestMetrics:
    def counts(self, tp, tn, fp, fn):
        return hd.ConfusionCounts(np.array([tp]), np.array([tn]), np.array([fp]), np.array([fn]))

    def test_hand_example(self):
        m = hd.compute_metrics(self.counts(3, 2, 1, 2))
        assert m["acc"] == pytest.approx(0.625)
        assert m["prec"] == pytest.approx(0.75)
        assert m["recall"] == pytest.approx(0.6)
        assert m["f1"] == pytest.approx(2 / 3, abs=1e-12)

    def test_always_positive_attribute(self):
        labels = np.array([[1], [0], [1], [0]])
        m = hd.compute_metrics(hd.confusion(np.ones_like(labels), labels))
        assert m["tpr"][0] == 1.0 and m["tnr"][0] == 0.0 and m["mA"] == 0.5

    def test_all_correct(self, rng):
        labels = rng.integers(0, 2, size=(10, 4))
        labels[0], labels[1] = 1, 0
        m = hd.compute_metrics(hd.confusion(labels, labels))
        assert all(m[k] == 1.0 for k in ("mA", "acc", "prec", "recall", "f1"))

    def test_complement(self, rng):
        labels = rng.integers(0, 2, size=(6, 3))
        c = hd.confusion(1 - labels, labels)
        assert c.tp.sum() == 0 and c.tn.sum() == 0

    def test_hand_counted_table(self):
        pred = np.array([[1, 0], [1, 1], [0, 0], [0, 1]])
        labels = np.array([[1, 1], [0, 1], [0, 0], [1, 0]])
        c = hd.confusion(pred, labels)
        assert c.tp.tolist() == [1, 1] and c.tn.tolist() == [1, 1]
        assert c.fp.tolist() == [1, 1] and c.fn.tolist() == [1, 1]

    def test_zero_denominators(self):
        m = hd.compute_metrics(self.counts(0, 4, 0, 0))
        assert m["prec"] == 0 and m["recall"] == 0 and m["f1"] == 0 and m["acc"] == 1

    def test_empty(self):
        with pytest.raises(EmptyEvaluation):
            hd.compute_metrics(self.counts(0, 0, 0, 0))

    def test_json_layout(self):
        labels = np.array([[1, 0], [0, 1], [1, 1]])
        out = hd.metrics_json(hd.confusion(labels, labels), ["a", "b"])
        assert set(out) == {"mA", "acc", "prec", "recall", "f1", "per_attribute"}
        assert set(out["per_attribute"]) == {"a", "b"}
        json.loads(hd.dumps_metrics(out))

    def test_json_rounding(self):
        out = hd.metrics_json(self.counts(1, 1, 1, 0))
        assert out["acc"] == 0.66667

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.int8, st.tuples(st.integers(1, 12), st.integers(1, 5)), elements=st.integers(0, 1)),
           st.integers(0, 2**31 - 1))
    def test_matches_oracle_and_invariants(self, labels, seed):
        r = np.random.default_rng(seed)
        pred = r.integers(0, 2, size=labels.shape)
        c = hd.confusion(pred, labels)
        m = hd.compute_metrics(c)
        ref = metrics_oracle(pred.tolist(), labels.tolist())
        for k, v in ref.items():
            assert m[k] == pytest.approx(v, abs=1e-12)
        assert sum(c.pooled()) == labels.size
        if m["prec"] and m["recall"]:
            assert min(m["prec"], m["recall"]) - 1e-12 <= m["f1"] <= max(m["prec"], m["recall"]) + 1e-12
        perm = r.permutation(len(labels))
        m2 = hd.compute_metrics(hd.confusion(pred[perm], labels[perm]))
        assert all(m2[k] == m[k] for k in ref)
        half = len(labels) // 2
        shards = hd.confusion(pred[:half], labels[:half]) + hd.confusion(pred[half:], labels[half:])
        assert shards.pooled() == c.pooled()

    def test_loss_permutation_invariant(self, rng):
        y = rng.integers(0, 2, size=(9, 4))
        p = rng.uniform(size=(9, 4))
        w = hd.attribute_weights(y)
        perm = rng.permutation(9)
        a = float(hd.wce_loss(t64(p), y, w))
        b = float(hd.wce_loss(t64(p[perm]), y[perm], w))
        assert a == pytest.approx(b, rel=1e-12)
