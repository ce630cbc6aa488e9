"""Linear model families: multinomial softmax classifier and linear SVM.

Parameters live in one flat vector.  Softmax layout is the ``C x d``
weight matrix row-major followed by ``C`` biases; SVM layout is ``d``
weights followed by one bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    task: str
    feature_dim: int
    num_classes: int = 2
    ridge: float = 0.0

    def __post_init__(self):
        if self.task not in ("softmax", "svm"):
            raise ModelError(f"unknown task {self.task!r}")
        if self.feature_dim < 1:
            raise ModelError("feature_dim must be >= 1")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        if self.task == "svm" and self.num_classes != 2:
            raise ModelError("svm is binary; num_classes must be 2")
        if not self.ridge >= 0:
            raise ModelError("ridge must be >= 0")

    @classmethod
    def for_dataset(cls, dataset, ridge: float = 0.0) -> "ModelSpec":
        return cls(dataset.task, dataset.feature_dim, dataset.num_classes, ridge)

    @property
    def num_params(self) -> int:
        if self.task == "softmax":
            return self.num_classes * (self.feature_dim + 1)
        return self.feature_dim + 1

    def zeros(self) -> np.ndarray:
        return np.zeros(self.num_params)

    def unpack(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Views ``(W, b)``; for SVM ``W`` has shape ``(d,)`` and ``b`` shape ``(1,)``."""
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.num_params,):
            raise ModelError(f"expected {self.num_params} parameters, got shape {params.shape}")
        if self.task == "softmax":
            cd = self.num_classes * self.feature_dim
            return params[:cd].reshape(self.num_classes, self.feature_dim), params[cd:]
        return params[:-1], params[-1:]


def _check(spec: ModelSpec, params, X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[1] != spec.feature_dim or y.shape != (X.shape[0],):
        raise ModelError(f"batch shapes {X.shape}/{y.shape} do not match feature_dim {spec.feature_dim}")
    if X.shape[0] == 0:
        raise ModelError("empty sample set")
    W, b = spec.unpack(params)
    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(X))):
        raise ModelError("non-finite parameters or features")
    return W, b, X, y


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def sample_losses(spec: ModelSpec, params, X, y) -> np.ndarray:
    """Per-sample losses ``f_j(w)`` (the SVM ridge term is not included)."""
    W, b, X, y = _check(spec, params, X, y)
    if spec.task == "softmax":
        logp = _log_softmax(X @ W.T + b)
        return -logp[np.arange(y.shape[0]), y]
    return np.maximum(0.0, 1.0 - y * (X @ W + b[0]))


def _ridge_term(spec: ModelSpec, params) -> float:
    if spec.task == "svm" and spec.ridge:
        w = spec.unpack(params)[0]
        return 0.5 * spec.ridge * float(w @ w)
    return 0.0


def loss(spec: ModelSpec, params, X, y) -> float:
    """Empirical risk: mean cross-entropy, or mean hinge plus ridge."""
    return float(sample_losses(spec, params, X, y).mean()) + _ridge_term(spec, params)


def loss_and_grad(spec: ModelSpec, params, X, y) -> tuple[float, np.ndarray]:
    W, b, X, y = _check(spec, params, X, y)
    return _loss_and_grad(spec, params, W, b, X, y)


def _loss_and_grad(spec: ModelSpec, params, W, b, X, y) -> tuple[float, np.ndarray]:
    n = X.shape[0]
    if spec.task == "softmax":
        logp = _log_softmax(X @ W.T + b)
        rows = np.arange(n)
        value = float(-logp[rows, y].mean())
        resid = np.exp(logp)
        resid[rows, y] -= 1.0
        resid /= n
        return value, np.concatenate([(resid.T @ X).ravel(), resid.sum(axis=0)])
    margin = y * (X @ W + b[0])
    value = float(np.maximum(0.0, 1.0 - margin).mean()) + _ridge_term(spec, params)
    # subgradient is zero at margin == 1
    coef = np.where(margin < 1.0, -y, 0).astype(np.float64) / n
    gw = coef @ X
    if spec.ridge:
        gw = gw + spec.ridge * W
    return value, np.concatenate([gw, [coef.sum()]])


def batch_gradient(spec: ModelSpec, params, X, y) -> np.ndarray:
    """:func:`gradient` without input validation, for hot loops over
    batches of an already validated shard."""
    W, b = spec.unpack(params)
    if spec.task != "softmax":
        return _loss_and_grad(spec, params, W, b, X, y)[1]
    n = X.shape[0]
    s = X @ W.T + b
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    s[np.arange(n), y] -= 1.0
    s /= n
    return np.concatenate([(s.T @ X).ravel(), s.sum(axis=0)])


def gradient(spec: ModelSpec, params, X, y) -> np.ndarray:
    return loss_and_grad(spec, params, X, y)[1]


def predict(spec: ModelSpec, params, X) -> np.ndarray:
    W, b = spec.unpack(params)
    X = np.asarray(X, dtype=np.float64)
    if spec.task == "softmax":
        return np.argmax(X @ W.T + b, axis=1)
    return np.where(X @ W + b[0] >= 0.0, 1, -1)


def accuracy(spec: ModelSpec, params, X, y) -> float:
    """Fraction correct; softmax ties go to the lowest class, SVM ``sign(0) = +1``."""
    _, _, X, y = _check(spec, params, X, y)
    return float(np.mean(predict(spec, params, X) == y))


def finite_diff_gradient(spec: ModelSpec, params, X, y, h: float = 1e-6) -> np.ndarray:
    """Central differences of :func:`loss`, one coordinate at a time."""
    if not h > 0:
        raise ModelError("h must be positive")
    params = np.array(params, dtype=np.float64)
    out = np.empty_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + h
        up = loss(spec, params, X, y)
        params[i] = orig - h
        down = loss(spec, params, X, y)
        params[i] = orig
        out[i] = (up - down) / (2 * h)
    return out
