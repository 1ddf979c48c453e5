"""Multinomial logistic regression, full-batch L-BFGS on an exact gradient.

Objective: mean cross-entropy + ``l2_weight / 2 * ||W||^2`` (bias row excluded).
The last class's column is pinned to zero, which removes the softmax gauge
freedom and makes the optimum unique.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax

from .errors import DimensionMismatch, InsufficientClasses, NonFiniteInput, SchemaMismatch


@dataclass(frozen=True)
class LRConfig:
    l2_weight: float = 1.0
    grad_tol: float = 1e-4
    max_iter: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be nonnegative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray  # (V + 1, num_classes); last row is the bias
    class_ids: tuple
    train_loss: float
    converged: bool = True
    n_iter: int = 0
    loss_history: tuple = field(default=(), compare=False, repr=False)

    @property
    def dim(self) -> int:
        return self.weights.shape[0] - 1

    def to_dict(self) -> dict:
        return {
            "class_ids": [int(c) for c in self.class_ids],
            "weights": [[float(v) for v in row] for row in self.weights],
            "train_loss": float(self.train_loss),
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        try:
            weights = np.array(d["weights"], dtype=np.float64)
            class_ids = tuple(int(c) for c in d["class_ids"])
            loss = float(d["train_loss"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"bad linear model record: {exc}") from None
        if weights.ndim != 2 or weights.shape[1] != len(class_ids) or len(class_ids) < 2:
            raise SchemaMismatch(f"weights shape {weights.shape} vs {len(class_ids)} classes")
        if not np.all(np.isfinite(weights)):
            raise SchemaMismatch("non-finite weights in model record")
        return cls(weights, class_ids, loss, bool(d.get("converged", True)), int(d.get("n_iter", 0)))


def _with_bias(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


def loss_and_grad(free: np.ndarray, x1: np.ndarray, y: np.ndarray, l2_weight: float):
    """Objective and gradient with respect to the free ``(V+1, C-1)`` block.

    ``x1`` carries the trailing bias column, ``y`` holds class positions 0..C-1.
    """
    n = x1.shape[0]
    logits = np.hstack([x1 @ free, np.zeros((n, 1))])
    logp = log_softmax(logits, axis=1)
    loss = -logp[np.arange(n), y].mean()
    probs = np.exp(logp[:, :-1])
    # one-hot targets for the free classes only
    onehot = np.zeros_like(probs)
    free_rows = y < free.shape[1]
    onehot[np.flatnonzero(free_rows), y[free_rows]] = 1.0
    grad = x1.T @ (probs - onehot) / n
    w = free[:-1]
    loss += 0.5 * l2_weight * float(np.sum(w * w))
    grad[:-1] += l2_weight * w
    return float(loss), grad


def train_lr(features, labels, cfg: LRConfig = LRConfig()) -> LinearModel:
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise DimensionMismatch(f"features {x.shape} vs labels {labels.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("training features contain NaN or inf")
    class_ids, y = np.unique(labels, return_inverse=True)
    n_classes = class_ids.size
    if n_classes < 2:
        raise InsufficientClasses(f"need at least 2 classes, got {n_classes}")

    x1 = _with_bias(x)
    shape = (x1.shape[1], n_classes - 1)
    history = []

    def fun(flat):
        loss, grad = loss_and_grad(flat.reshape(shape), x1, y, cfg.l2_weight)
        return loss, grad.ravel()

    def record(flat):
        history.append(fun(flat)[0])

    res = minimize(
        fun,
        np.zeros(shape).ravel(),
        jac=True,
        method="L-BFGS-B",
        callback=record,
        options={"maxiter": cfg.max_iter, "gtol": cfg.grad_tol, "ftol": 0.0, "maxcor": 20},
    )
    free = res.x.reshape(shape)
    loss, grad = loss_and_grad(free, x1, y, cfg.l2_weight)
    converged = bool(np.max(np.abs(grad)) <= cfg.grad_tol)
    it = int(res.nit)
    weights = np.hstack([free, np.zeros((free.shape[0], 1))])
    return LinearModel(weights, tuple(int(c) for c in class_ids), loss, converged, it, tuple(history))


def predict_proba(model: LinearModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != model.dim:
        raise DimensionMismatch(f"model expects dim {model.dim}, got {x2.shape[1]}")
    probs = np.exp(log_softmax(_with_bias(x2) @ model.weights, axis=1))
    return probs[0] if single else probs


def predict(model: LinearModel, x):
    """Return ``(label, probabilities)``; ties go to the lowest class id.

    Accepts one vector or a 2-D batch (then labels is an array).
    """
    probs = predict_proba(model, x)
    ids = np.asarray(model.class_ids)
    pos = np.argmax(probs, axis=-1)
    if probs.ndim == 1:
        return int(ids[pos]), probs
    return ids[pos], probs
