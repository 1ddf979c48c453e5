import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hotcalib.errors import DimensionMismatch, InsufficientClasses, NonFiniteInput, SchemaMismatch
from hotcalib.linear_classifier import (
    LinearModel,
    LRConfig,
    loss_and_grad,
    predict,
    predict_proba,
    train_lr,
)

from oracles import central_difference_grad


def with_bias(x):
    return np.hstack([x, np.ones((x.shape[0], 1))])


def relative_error(analytic, numeric):
    return np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)))


class TestGradient:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x1 = with_bias(rng.normal(size=(5, 3)))
        y = rng.integers(0, 2, size=5)
        free = rng.normal(size=(4, 1))
        _, grad = loss_and_grad(free, x1, y, 0.7)
        numeric = central_difference_grad(lambda w: loss_and_grad(w, x1, y, 0.7)[0], free.copy())
        assert relative_error(grad, numeric) < 1e-5

    def test_multiclass(self):
        rng = np.random.default_rng(9)
        x1 = with_bias(rng.normal(size=(12, 4)))
        y = rng.integers(0, 4, size=12)
        free = rng.normal(size=(5, 3))
        _, grad = loss_and_grad(free, x1, y, 0.1)
        numeric = central_difference_grad(lambda w: loss_and_grad(w, x1, y, 0.1)[0], free.copy())
        assert relative_error(grad, numeric) < 1e-5

    def test_bias_not_penalized(self):
        x1 = with_bias(np.zeros((2, 1)))
        y = np.array([0, 1])
        free = np.array([[0.0], [3.0]])
        loss0, _ = loss_and_grad(free, x1, y, 0.0)
        loss1, _ = loss_and_grad(free, x1, y, 5.0)
        assert loss0 == loss1


class TestTraining:
    def test_separable_pair(self):
        model = train_lr([[-1.0], [1.0]], [0, 1])
        labels, _ = predict(model, np.array([[-1.0], [1.0]]))
        np.testing.assert_array_equal(labels, [0, 1])
        assert model.converged

    def test_mirrored_midpoint(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 2)) + [3.0, 0.0]
        data = np.vstack([x, -x])
        labels = np.array([1] * 10 + [0] * 10)
        model = train_lr(data, labels, LRConfig(grad_tol=1e-10))
        _, probs = predict(model, np.zeros(2))
        np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-6)

    def test_loss_history_nonincreasing(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(60, 5))
        y = rng.integers(0, 3, size=60)
        model = train_lr(x, y, LRConfig(l2_weight=0.01, grad_tol=1e-8))
        hist = np.array(model.loss_history)
        assert hist.size > 2
        assert np.all(np.diff(hist) <= 1e-12)
        assert model.train_loss <= hist[0]

    def test_gradient_tolerance_reached(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(40, 3)), rng.integers(0, 3, size=40)
        model = train_lr(x, y)
        ids, yy = np.unique(y, return_inverse=True)
        _, grad = loss_and_grad(model.weights[:, :-1], with_bias(x), yy, 1.0)
        assert model.converged
        assert np.max(np.abs(grad)) <= 1e-4

    def test_iteration_cap_flags_nonconvergence(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(40, 6)), rng.integers(0, 4, size=40)
        model = train_lr(x, y, LRConfig(l2_weight=0.0, grad_tol=1e-12, max_iter=2))
        assert not model.converged
        assert model.n_iter <= 2

    @pytest.mark.parametrize("seed", range(3))
    def test_permutation_reaches_same_objective(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(50, 4)), rng.integers(0, 3, size=50)
        perm = rng.permutation(50)
        cfg = LRConfig(grad_tol=1e-9)
        a, b = train_lr(x, y, cfg), train_lr(x[perm], y[perm], cfg)
        assert abs(a.train_loss - b.train_loss) <= 1e-8

    def test_labels_need_not_be_contiguous(self):
        model = train_lr([[0.0], [1.0], [2.0]], [7, 3, 7])
        assert model.class_ids == (3, 7)

    def test_errors(self):
        with pytest.raises(InsufficientClasses):
            train_lr([[0.0], [1.0]], [1, 1])
        with pytest.raises(NonFiniteInput):
            train_lr([[np.inf], [1.0]], [0, 1])
        with pytest.raises(DimensionMismatch):
            train_lr([[0.0], [1.0]], [0, 1, 1])
        with pytest.raises(ValueError):
            LRConfig(grad_tol=0.0)


class TestPredict:
    def test_zero_weights_uniform_lowest_id(self):
        model = LinearModel(np.zeros((3, 4)), (2, 5, 8, 9), 0.0)
        label, probs = predict(model, np.array([1.0, -2.0]))
        np.testing.assert_allclose(probs, np.full(4, 0.25), atol=1e-15)
        assert label == 2

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)),
           arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)))
    def test_probabilities_on_simplex(self, w, x):
        model = LinearModel(w, (0, 1, 2), 0.0)
        probs = predict_proba(model, x)
        assert np.all(probs >= 0)
        assert abs(probs.sum() - 1.0) <= 1e-12

    def test_agrees_with_training_predictions(self, tmp_path):
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(30, 3)), rng.integers(0, 3, size=30)
        model = train_lr(x, y)
        restored = LinearModel.from_dict(model.to_dict())
        np.testing.assert_array_equal(predict(restored, x)[0], predict(model, x)[0])
        np.testing.assert_array_equal(predict_proba(restored, x), predict_proba(model, x))

    def test_dim_mismatch(self):
        model = LinearModel(np.zeros((3, 2)), (0, 1), 0.0)
        with pytest.raises(DimensionMismatch):
            predict(model, np.zeros(3))

    def test_bad_record(self):
        with pytest.raises(SchemaMismatch):
            LinearModel.from_dict({"weights": [[0.0, 0.0]], "class_ids": [0]})
