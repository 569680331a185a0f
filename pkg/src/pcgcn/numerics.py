"""Dense/sparse kernels, differentiable primitives and the optimizer.

Arrays are plain float64 ``numpy`` arrays. Each differentiable primitive
comes as a forward function plus a ``*_backward`` that maps the upstream
gradient to gradients w.r.t. the inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import NormalizedAdjacency


class ShapeError(ValueError):
    pass


def _check_2d(m, name):
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {m.shape}")


def spmm(a: NormalizedAdjacency, m: np.ndarray) -> np.ndarray:
    """CSR times dense.

    Backed by scipy's CSR kernel, which accumulates each output row over the
    stored entries in order, i.e. ascending column index.
    """
    _check_2d(m, "m")
    if m.shape[0] != a.num_nodes:
        raise ShapeError(f"adjacency has {a.num_nodes} rows, matrix has {m.shape[0]}")
    return np.asarray(a.csr @ m)


def spmm_backward(a: NormalizedAdjacency, d_out: np.ndarray) -> np.ndarray:
    # Â is symmetric, so Âᵀ·dOut = Â·dOut
    return spmm(a, d_out)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_2d(a, "a")
    _check_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(d_out, a, b):
    return d_out @ b.T, a.T @ d_out


def relu(m: np.ndarray) -> np.ndarray:
    return np.where(m > 0, m, 0.0)


def relu_backward(d_out, m):
    # subgradient at exactly 0 is 0
    return np.where(m > 0, d_out, 0.0)


def row_softmax(m: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = m / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax_backward(d_out, probs, tau: float = 1.0):
    inner = (d_out * probs).sum(axis=1, keepdims=True)
    return probs * (d_out - inner) / tau


def log_softmax(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def masked_cross_entropy(logits, labels, mask, reduction: str = "sum"):
    """Cross-entropy over the masked rows and its gradient w.r.t. ``logits``.

    Returns ``(loss, d_logits)``. ``reduction='mean'`` divides both by the
    number of masked rows.
    """
    labels = np.asarray(labels)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("cross-entropy over an empty mask")
    if logits.shape[0] != labels.shape[0]:
        raise ShapeError("logits and labels disagree on the number of rows")
    sub = logits[idx]
    logp = log_softmax(sub)
    y = labels[idx]
    loss = -logp[np.arange(idx.size), y].sum()
    d_sub = np.exp(logp)
    d_sub[np.arange(idx.size), y] -= 1.0
    grad = np.zeros_like(logits)
    grad[idx] = d_sub
    if reduction == "mean":
        loss /= idx.size
        grad /= idx.size
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return float(loss), grad


def dropout(m: np.ndarray, p: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns ``(out, scale)`` where ``out = m * scale``.

    ``scale`` is ``None`` when the call is the identity.
    """
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0:
        return m, None
    keep = rng.random(m.shape) >= p
    scale = keep / (1.0 - p)
    return m * scale, scale


def dropout_backward(d_out, scale):
    return d_out if scale is None else d_out * scale


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class Adam:
    """Bias-corrected Adam with decoupled weight decay."""

    lr: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params):
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        bc1 = 1 - b1 ** t
        bc2 = 1 - b2 ** t
        for p in params:
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            m, v = self.m[p.name], self.v[p.name]
            g = p.grad
            if self.weight_decay:
                p.value *= 1 - self.lr * self.weight_decay
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.zero_grad()


def adam_update(params, state: Adam):
    state.step(params)
    return params
