"""Dense float64 kernels, loss heads, optimisers and a finite-difference gradient check.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .rng import derive_rng


class ShapeMismatch(ValueError):
    pass


class NonDeterministicLoss(RuntimeError):
    pass


def as_matrix(x, checked: bool = True) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {a.shape}")
    if checked and not np.isfinite(a).all():
        raise ValueError("matrix has non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeMismatch(f"entrywise product of {a.shape} and {b.shape}")
    return a * b


def relu_fwd(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_bwd(x: np.ndarray, upstream: np.ndarray | None = None) -> np.ndarray:
    """Gradient through ReLU given the pre-activation ``x``; the bare gate when ``upstream`` is None."""
    gate = (x > 0).astype(np.float64)
    return gate if upstream is None else gate * upstream


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent_fwd(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and the class probabilities."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch(f"{logits.shape[0]} rows of logits, {labels.shape[0]} labels")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(len(labels)), labels]))
    return loss, np.exp(z - logsum[:, None])


def softmax_xent_bwd(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=int).reshape(-1)
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def sigmoid_bce_fwd(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy; ``logits`` of shape (B,) or (B, 1), targets in {0, 1}."""
    x = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape[0]} logits, {y.shape[0]} targets")
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return float(loss.mean()), sigmoid(x).reshape(np.shape(logits))


def sigmoid_bce_bwd(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(p.shape)
    return (p - y) / p.reshape(-1).shape[0]


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1-rate)."""
    if rate <= 0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# --- optimisers -------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **kw) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
            **kw,
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns fresh params and state; inputs are not modified."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeMismatch(f"{k}: param {p.shape}, grad {g.shape}, moment {state.m[k].shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, t, b1, b2, state.eps)


def sgd_step(params, grads, lr: float) -> dict[str, np.ndarray]:
    out = {}
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ShapeMismatch(f"{k}: param {p.shape}, grad {grads[k].shape}")
        out[k] = p - lr * grads[k]
    return out


# --- gradient check -----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float
    coords_checked: dict[str, int]

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error.values())

    def failures(self) -> list[str]:
        return [k for k, e in self.max_rel_error.items() if not e < self.tol]


def finite_diff_check(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int = 50,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic ``grads`` with central differences of ``loss_fn``.

    Tensors with more than ``n_coords`` entries are sub-sampled.  The relative
    error of one coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``; the floor
    keeps round-off on near-zero gradients from dominating.
    """
    base = {k: np.array(p, dtype=np.float64, copy=True) for k, p in params.items()}
    first, second = loss_fn(base), loss_fn(base)
    if first != second:
        raise NonDeterministicLoss(f"loss changed between identical evaluations: {first!r} vs {second!r}")
    errors, counts = {}, {}
    for name in sorted(base):
        p = base[name]
        size = p.size
        rng = derive_rng(seed, "gradcheck", name)
        coords = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
        worst = 0.0
        flat = p.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = loss_fn(base)
            flat[c] = orig - h
            down = loss_fn(base)
            flat[c] = orig
            num = (up - down) / (2 * h)
            ana = float(np.asarray(grads[name]).reshape(-1)[c])
            err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            worst = max(worst, err)
        errors[name] = worst
        counts[name] = len(coords)
    return GradCheckReport(errors, tol, counts)
