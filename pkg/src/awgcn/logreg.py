"""Multinomial logistic regression baseline and the bag-of-calls frequency features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .ingest import CallSequence, Vocabulary
from .numerics import ShapeMismatch, softmax


def frequency_features(seqs: Sequence[CallSequence], vocab: Vocabulary) -> np.ndarray:
    """Call counts over the vocabulary, divided by sequence length."""
    out = np.zeros((len(seqs), len(vocab)))
    for i, s in enumerate(seqs):
        for name in s.names:
            j = vocab.get(name)
            if j is not None:
                out[i, j] += 1.0
        if len(s):
            out[i] /= len(s)
    return out


def loss_and_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray, n_classes: int, l2: float):
    """Mean cross-entropy + (l2/2)·||W||² and its gradient; ``theta`` packs W (p×C) then b (C)."""
    p = X.shape[1]
    W = theta[: p * n_classes].reshape(p, n_classes)
    b = theta[p * n_classes :]
    logits = X @ W + b
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = len(y)
    loss = np.mean(logsum - z[np.arange(n), y]) + 0.5 * l2 * np.sum(W * W)
    probs = np.exp(z - logsum[:, None])
    probs[np.arange(n), y] -= 1.0
    probs /= n
    gW = X.T @ probs + l2 * W
    gb = probs.sum(axis=0)
    return float(loss), np.concatenate([gW.ravel(), gb])


@dataclass
class LogRegModel:
    W: np.ndarray
    b: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    iterations: int
    converged: bool

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.W.shape[0]:
            raise ShapeMismatch(f"expected (n, {self.W.shape[0]}) features, got {X.shape}")
        return softmax(((X - self.mean) / self.scale) @ self.W + self.b)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


def logreg_fit(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int | None = None,
    l2: float = 1e-4,
    tol: float = 1e-6,
    max_iter: int = 5000,
    standardize: bool = True,
) -> LogRegModel:
    """Fit by L-BFGS until the gradient norm drops below ``tol`` or ``max_iter`` iterations."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ShapeMismatch(f"{X.shape} features for {len(y)} labels")
    c = int(n_classes if n_classes is not None else y.max() + 1)
    if standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Xs = (X - mean) / scale
    theta0 = np.zeros(X.shape[1] * c + c)
    res = minimize(
        loss_and_grad,
        theta0,
        args=(Xs, y, c, l2),
        jac=True,
        method="L-BFGS-B",
        # L-BFGS-B bounds the largest gradient entry; scale so the 2-norm meets ``tol``
        options={"maxiter": max_iter, "gtol": tol / np.sqrt(theta0.size), "ftol": 0.0},
    )
    p = X.shape[1]
    grad_norm = np.linalg.norm(loss_and_grad(res.x, Xs, y, c, l2)[1])
    return LogRegModel(
        res.x[: p * c].reshape(p, c), res.x[p * c :], mean, scale, int(res.nit), bool(grad_norm < tol)
    )


def logreg_predict(model: LogRegModel, X: np.ndarray) -> np.ndarray:
    return model.predict(X)
