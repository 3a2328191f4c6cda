"""Dense float64 numeric primitives for the encoder stack.

All operations are pure functions over 2-D numpy arrays (row-major) and
run in float64 throughout, so the oracle comparisons in the test suite
are meaningful down to 1e-12.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

LAYER_NORM_EPS = 1e-5


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a float64 2-D array, copying only if needed."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got array of ndim={a.ndim}")
    return a


def as_vector(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got array of ndim={a.ndim}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with an explicit shape check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability.

    Every output row is nonnegative and sums to 1 (within float64
    rounding) for any finite input.
    """
    m = as_matrix(m)
    if not np.isfinite(m).all():
        raise ValueError("softmax_rows: input must be finite")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Uses the population variance with ``eps`` added inside the square
    root, so a constant row maps to ``beta`` instead of dividing by zero.
    """
    x = as_matrix(x)
    gamma = as_vector(gamma)
    beta = as_vector(beta)
    if gamma.size != x.shape[1] or beta.size != x.shape[1]:
        raise ShapeError(
            f"layer_norm: gamma/beta lengths {gamma.size}/{beta.size} "
            f"do not match width {x.shape[1]}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    normed = centered / np.sqrt(var + eps)
    return normed * gamma + beta


def avg_pool_groups(x, m: int) -> np.ndarray:
    """Average every run of ``m`` consecutive rows into one row.

    The output has ceil(T/m) rows. A final partial group is averaged over
    its actual member count; no zero padding is introduced.
    """
    x = as_matrix(x)
    if m < 1:
        raise ValueError(f"avg_pool_groups: group size must be >= 1, got {m}")
    t = x.shape[0]
    full, rem = divmod(t, m)
    out_rows = full + (1 if rem else 0)
    out = np.empty((out_rows, x.shape[1]), dtype=np.float64)
    if full:
        out[:full] = x[: full * m].reshape(full, m, x.shape[1]).mean(axis=1)
    if rem:
        out[full] = x[full * m :].mean(axis=0)
    return out


def linear(x, w, bias) -> np.ndarray:
    """Affine map x @ w + bias, with bias broadcast across rows."""
    x = as_matrix(x)
    w = as_matrix(w)
    bias = as_vector(bias)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {w.shape}")
    if bias.size != w.shape[1]:
        raise ShapeError(
            f"linear: bias length {bias.size} does not match output width {w.shape[1]}"
        )
    return x @ w + bias


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    """Sinusoidal positional encoding table of shape (t, d).

    entry(p, 2i)   = sin(p / 10000^(2i/d))
    entry(p, 2i+1) = cos(p / 10000^(2i/d))
    """
    if d % 2 != 0:
        raise ValueError(f"sinusoidal_positions: dimension must be even, got {d}")
    if t < 0 or d < 0:
        raise ValueError("sinusoidal_positions: t and d must be nonnegative")
    positions = np.arange(t, dtype=np.float64)[:, None]
    inv_freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    angles = positions * inv_freq
    out = np.empty((t, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out
