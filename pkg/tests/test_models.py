import math

import numpy as np
import pytest

from qffl import models
from qffl.data import SyntheticSpec, generate_synthetic, generating_params
from qffl.models import ModelError, ModelSpec


def test_uniform_softmax_loss():
    spec = ModelSpec("softmax", 4, 3)
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(7, 4)), rng.integers(0, 3, 7)
    assert models.loss(spec, spec.zeros(), X, y) == pytest.approx(math.log(3), abs=1e-12)


def test_svm_zero_params_loss_is_one():
    spec = ModelSpec("svm", 3)
    X = np.random.default_rng(1).normal(size=(5, 3))
    assert models.loss(spec, spec.zeros(), X, np.array([1, -1, 1, 1, -1])) == 1.0


def test_two_class_hand_value():
    spec = ModelSpec("softmax", 1, 2)
    params = np.array([1.0, -1.0, 0.0, 0.0])
    got = models.loss(spec, params, np.array([[2.0]]), np.array([0]))
    assert got == pytest.approx(math.log1p(math.exp(-4)), rel=1e-12)
    assert abs(got - 0.0180) < 2e-4  # 0.018150 to six places


def test_svm_gradient_hand_value():
    spec = ModelSpec("svm", 3)
    x = np.array([[0.5, -2.0, 3.0]])
    g = models.gradient(spec, spec.zeros(), x, np.array([1]))
    assert g.tolist() == [-0.5, 2.0, -3.0, -1.0]


def test_svm_kink_subgradient_zero():
    spec = ModelSpec("svm", 1)
    g = models.gradient(spec, np.array([1.0, 0.0]), np.array([[1.0]]), np.array([1]))
    assert g.tolist() == [0.0, 0.0]


def test_ridge_gradient_is_exact():
    spec = ModelSpec("svm", 2, ridge=0.5)
    params = np.array([3.0, -4.0, 0.0])
    # margin large: hinge inactive, only the ridge term remains
    X = np.array([[10.0, -10.0]])
    g = models.gradient(spec, params, X, np.array([1]))
    assert g.tolist() == [1.5, -2.0, 0.0]
    assert models.loss(spec, params, X, np.array([1])) == 0.5 * 0.5 * 25


def test_perfect_fit_gradient_vanishes():
    spec = ModelSpec("softmax", 1, 2)
    X = np.array([[1.0], [-1.0]])
    y = np.array([0, 1])
    big = np.array([50.0, -50.0, 0.0, 0.0])
    assert np.abs(models.gradient(spec, big, X, y)).max() < 1e-40


@pytest.mark.parametrize("task,C", [("softmax", 5), ("svm", 2)])
def test_gradient_matches_finite_differences(task, C):
    rng = np.random.default_rng(11)
    spec = ModelSpec(task, 6, C, ridge=0.1 if task == "svm" else 0.0)
    for _ in range(20):
        params = rng.normal(size=spec.num_params)
        X = rng.normal(size=(9, 6))
        y = rng.integers(0, C, 9) if task == "softmax" else rng.choice([-1, 1], 9)
        if task == "svm":
            W, b = spec.unpack(params)
            if np.min(np.abs(y * (X @ W + b[0]) - 1)) <= 1e-3:
                continue
        g = models.gradient(spec, params, X, y)
        fd = models.finite_diff_gradient(spec, params, X, y)
        assert np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1e-12) < 1e-6


def test_batch_gradient_matches_checked_path():
    rng = np.random.default_rng(2)
    spec = ModelSpec("softmax", 4, 3)
    params, X, y = rng.normal(size=spec.num_params), rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
    assert np.allclose(models.batch_gradient(spec, params, X, y), models.gradient(spec, params, X, y),
                       rtol=1e-14, atol=1e-15)


def test_finite_difference_second_order():
    rng = np.random.default_rng(5)
    spec = ModelSpec("softmax", 3, 3)
    params, X, y = rng.normal(size=spec.num_params), rng.normal(size=(5, 3)), rng.integers(0, 3, 5)
    g = models.gradient(spec, params, X, y)
    errs = [np.max(np.abs(models.finite_diff_gradient(spec, params, X, y, h) - g)) for h in (1e-2, 1e-3)]
    # error scales like h^2: a 10x smaller step gives ~100x smaller error
    assert errs[1] < errs[0] / 50
    with pytest.raises(ModelError):
        models.finite_diff_gradient(spec, params, X, y, h=0)


def test_accuracy_cases():
    spec = ModelSpec("svm", 2)
    X = np.ones((4, 2))
    assert models.accuracy(spec, spec.zeros(), X, np.array([1, -1, 1, -1])) == 0.5
    soft = ModelSpec("softmax", 1, 2)
    params = np.array([1.0, -1.0, 0.0, 0.0])
    X = np.array([[1.0], [2.0], [-1.0], [3.0]])
    assert models.accuracy(soft, params, X, np.array([0, 0, 1, 1])) == 0.75


def test_generator_params_score_perfectly():
    spec = SyntheticSpec(num_devices=2, mode="iid", seed=1)
    ds = generate_synthetic(spec)
    W, b, _ = generating_params(spec)[0]
    ms = ModelSpec.for_dataset(ds)
    params = np.concatenate([W.ravel(), b])
    for s in ds.shards:
        assert models.accuracy(ms, params, s.features, s.labels) == 1.0


def test_loss_is_nonnegative():
    rng = np.random.default_rng(3)
    for task, C in (("softmax", 4), ("svm", 2)):
        spec = ModelSpec(task, 3, C)
        for _ in range(20):
            X = rng.normal(size=(4, 3)) * 10
            y = rng.integers(0, C, 4) if task == "softmax" else rng.choice([-1, 1], 4)
            assert models.loss(spec, rng.normal(size=spec.num_params) * 10, X, y) >= 0


@pytest.mark.parametrize("kw", [dict(task="tree", feature_dim=2), dict(task="softmax", feature_dim=0),
                                dict(task="svm", feature_dim=2, num_classes=3),
                                dict(task="svm", feature_dim=2, ridge=-1.0)])
def test_invalid_model_spec(kw):
    with pytest.raises(ModelError):
        ModelSpec(**kw)


def test_shape_and_value_errors():
    spec = ModelSpec("softmax", 2, 2)
    with pytest.raises(ModelError):
        models.loss(spec, np.zeros(5), np.zeros((1, 2)), np.array([0]))
    with pytest.raises(ModelError):
        models.loss(spec, spec.zeros(), np.zeros((1, 3)), np.array([0]))
    with pytest.raises(ModelError):
        models.loss(spec, spec.zeros(), np.zeros((0, 2)), np.array([], dtype=int))
    with pytest.raises(ModelError):
        models.loss(spec, np.full(6, np.nan), np.zeros((1, 2)), np.array([0]))
