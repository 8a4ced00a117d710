"""Dense float64 kernels shared by the encoder, training loop and tests.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  The
functions here validate shapes and finiteness at the boundary and are
otherwise thin wrappers around numpy.  Activation and normalization
primitives come with the matching backward helpers used by
:mod:`etusb.encoder`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or infinite value appeared where a finite one is required."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; the bit generator is always PCG64."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a rank-2 matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Softmax along the last axis with per-row max subtraction.

    Entries may be ``-inf`` (masked), but every row needs at least one
    finite entry.
    """
    m = np.asarray(m, dtype=np.float64)
    if np.isnan(m).any():
        raise NumericError("softmax input contains NaN")
    row_max = m.max(axis=-1, keepdims=True)
    if not np.isfinite(row_max).all():
        raise NumericError("softmax row has no finite entry")
    e = np.exp(m - row_max)
    return e / e.sum(axis=-1, keepdims=True)


def selu(x):
    x = np.asarray(x, dtype=np.float64)
    # expm1 of a clipped argument keeps the unused branch from overflowing
    neg = SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    return SELU_LAMBDA * np.where(x > 0, x, neg)


def selu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def layer_norm(row, gain, bias, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    return layer_norm_forward(row, gain, bias, eps)[0]


def layer_norm_forward(x, gain, bias, eps: float = LAYER_NORM_EPS):
    """Return ``(y, (xhat, inv_std))``; the cache feeds :func:`layer_norm_backward`."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def layer_norm_backward(dy, gain, cache):
    """Gradients ``(dx, dgain, dbias)``; parameter grads are summed over leading axes."""
    xhat, inv_std = cache
    lead = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    dxhat = dy * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def xavier_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot uniform draw on ``[-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]``."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"xavier_init needs positive dimensions, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``x`` may have any shape; the result has the same shape.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
