"""Metric definitions against brute-force oracles and hand-computed cases."""

import numpy as np
import pytest

from longmil.errors import ConfigError, MetricUndefinedError
from longmil.linalg import Rng
from longmil.metrics import (
    argmax_preds,
    confusion_counts,
    cross_entropy,
    macro_auc,
    macro_f1,
    per_class_auc,
)

from oracles import f1_per_class, pairwise_auc


class TestAuc:
    def test_documented_case(self):
        scores = np.array([[0.9, 0.1], [0.6, 0.4], [0.65, 0.35], [0.2, 0.8]])
        labels = np.array([0, 0, 1, 1])
        # class-1 scores 0.1/0.4 vs 0.35/0.8: three of four pairs ordered right
        assert macro_auc(scores, labels) == pytest.approx(0.75)

    def test_matches_pair_counting_oracle(self):
        rng = Rng(50)
        for _ in range(30):
            n = int(rng.integers(4, 40))
            labels = rng.integers(0, 3, size=n)
            if len(np.unique(labels)) < 3:
                continue
            scores = rng.uniform(n * 3).reshape(n, 3)
            ours = per_class_auc(scores, labels)
            for cls in range(3):
                brute = pairwise_auc(labels == cls, scores[:, cls])
                assert ours[cls] == pytest.approx(brute)

    def test_ties_earn_half_credit(self):
        scores = np.array([[0.5, 0.5], [0.5, 0.5]])
        labels = np.array([0, 1])
        assert macro_auc(scores, labels) == pytest.approx(0.5)

    def test_perfect_and_inverted(self):
        scores = np.array([[0.9, 0.1], [0.1, 0.9]])
        assert macro_auc(scores, np.array([0, 1])) == 1.0
        assert macro_auc(scores, np.array([1, 0])) == 0.0

    def test_single_class_undefined(self):
        with pytest.raises(MetricUndefinedError):
            macro_auc(np.array([[0.4, 0.6], [0.3, 0.7]]), np.array([1, 1]))

    def test_missing_class_is_nan_per_class(self):
        aucs = per_class_auc(np.array([[0.4, 0.6], [0.3, 0.7]]), np.array([1, 1]))
        assert np.isnan(aucs[0]) and np.isnan(aucs[1])

    def test_shape_checked(self):
        with pytest.raises(ConfigError):
            per_class_auc(np.zeros(4), np.zeros(4))


class TestF1:
    def test_hand_case(self):
        preds = np.array([0, 0, 1, 1, 1])
        labels = np.array([0, 1, 1, 1, 0])
        # class 0: tp=1 fp=1 fn=1 -> 0.5; class 1: tp=2 fp=1 fn=1 -> 2/3
        assert macro_f1(preds, labels, 2) == pytest.approx((0.5 + 2 / 3) / 2)

    def test_matches_oracle(self):
        rng = Rng(51)
        for _ in range(20):
            n = int(rng.integers(5, 30))
            labels = rng.integers(0, 3, size=n)
            preds = rng.integers(0, 3, size=n)
            if len(np.unique(labels)) < 2:
                continue
            brute = np.mean([f1_per_class(preds, labels, c) for c in range(3)])
            assert macro_f1(preds, labels, 3) == pytest.approx(brute)

    def test_empty_class_scores_zero(self):
        preds = np.array([0, 0, 1])
        labels = np.array([0, 0, 1])
        # class 2 never appears: contributes 0 to the mean of three classes
        assert macro_f1(preds, labels, 3) == pytest.approx(2 / 3)

    def test_single_class_split_undefined(self):
        with pytest.raises(MetricUndefinedError):
            macro_f1(np.array([0, 1]), np.array([1, 1]), 2)

    def test_argmax_tie_takes_lower_index(self):
        scores = np.array([[0.5, 0.5], [0.2, 0.8]])
        assert argmax_preds(scores).tolist() == [0, 1]


class TestConfusion:
    def test_counts(self):
        preds = np.array([0, 1, 1, 2, 0])
        labels = np.array([0, 1, 2, 2, 1])
        m = confusion_counts(preds, labels, 3)
        assert m.tolist() == [[1, 0, 0], [1, 1, 0], [0, 1, 1]]
        assert m.sum() == 5


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, grad = cross_entropy(np.zeros(4), 2)
        assert loss == pytest.approx(np.log(4))
        assert grad[2] == pytest.approx(0.25 - 1.0)
        assert grad.sum() == pytest.approx(0.0)

    def test_gradient_finite_difference(self):
        rng = Rng(52)
        logits = rng.gaussian(5)
        _, grad = cross_entropy(logits, 3)
        h = 1e-6
        for i in range(5):
            bump = logits.copy()
            bump[i] += h
            up, _ = cross_entropy(bump, 3)
            bump[i] -= 2 * h
            lo, _ = cross_entropy(bump, 3)
            assert grad[i] == pytest.approx((up - lo) / (2 * h), abs=1e-8)

    def test_shift_invariance(self):
        logits = np.array([1.0, -2.0, 0.5])
        a, _ = cross_entropy(logits, 1)
        b, _ = cross_entropy(logits + 100.0, 1)
        assert a == pytest.approx(b)

    def test_extreme_logits_stay_finite(self):
        loss, grad = cross_entropy(np.array([1000.0, -1000.0]), 1)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))
        assert loss == pytest.approx(2000.0)

    def test_validation(self):
        with pytest.raises(ConfigError):
            cross_entropy(np.array([1.0]), 0)
        with pytest.raises(ConfigError):
            cross_entropy(np.zeros(3), 3)
