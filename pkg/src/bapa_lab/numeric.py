"""Dense numeric kernels.

Matrices are row-major ``numpy`` arrays of shape ``(rows, cols)``; vectors are
1-D arrays. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, ShapeError

CHECK_DTYPE = np.float64
TRAIN_DTYPE = np.float32


def as_matrix(a, dtype=None) -> np.ndarray:
    m = np.asarray(a, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def as_vector(v, dtype=None) -> np.ndarray:
    x = np.asarray(v, dtype=dtype)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("vector has non-finite entries")
    return x


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``; ``-inf`` entries get weight 0."""
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_row(v) -> np.ndarray:
    v = as_vector(v)
    if v.size == 0:
        raise ShapeError("softmax of an empty vector")
    return softmax(v)


def cosine(u, v) -> float:
    u = as_vector(u, np.float64)
    v = as_vector(v, np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.size} vs {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6):
    """RMS normalisation over the last axis. Returns ``(y, inv_rms)``."""
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * gain, inv


def rms_norm_backward(dy: np.ndarray, x: np.ndarray, gain: np.ndarray, inv: np.ndarray):
    """Gradients of :func:`rms_norm` w.r.t. ``x`` and ``gain``."""
    xhat = x * inv
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    n = x.shape[-1]
    dx = inv * (dxhat - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True) / n)
    return dx, dgain


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; smooth everywhere, which keeps finite-difference checks clean
    return gelu_with_tanh(x)[0]


def gelu_with_tanh(x: np.ndarray):
    """GELU output and the tanh term, which :func:`gelu_grad` can reuse."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
