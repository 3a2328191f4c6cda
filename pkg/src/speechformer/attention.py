"""Self-attention: single-head, multi-head, and the windowed variant.

The windowed form limits each token's attention to a span of adjacent
tokens, which is what makes long speech sequences cheap to encode. Token
``t`` attends to indices [t - tw//2, t + tw//2], clamped to the sequence
bounds, so boundary tokens simply see shorter spans.

``band_mask_oracle`` computes the same quantity along an independent
route (full attention with out-of-band scores forced to -inf) and exists
purely to cross-check the windowed implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .kernel import as_matrix, softmax_rows

SCALE_MODES = ("sqrt_dh", "dh")


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention layer."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    num_heads: int = 1
    bq: np.ndarray = field(default=None)
    bk: np.ndarray = field(default=None)
    bv: np.ndarray = field(default=None)

    def __post_init__(self):
        self.wq = as_matrix(self.wq)
        self.wk = as_matrix(self.wk)
        self.wv = as_matrix(self.wv)
        d = self.wq.shape[1]
        for name, w in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv)):
            if w.shape != (d, d) or w.shape[0] != self.wq.shape[0]:
                raise ShapeError(f"{name} must be square {d}x{d}, got {w.shape}")
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be >= 1, got {self.num_heads}")
        if d % self.num_heads != 0:
            raise ConfigError(
                f"model width {d} is not divisible by {self.num_heads} heads"
            )
        for name in ("bq", "bk", "bv"):
            b = getattr(self, name)
            b = np.zeros(d) if b is None else np.asarray(b, dtype=np.float64)
            if b.shape != (d,):
                raise ShapeError(f"{name} must have length {d}, got shape {b.shape}")
            setattr(self, name, b)

    @property
    def width(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.width // self.num_heads


@dataclass(frozen=True)
class WindowSpec:
    """Attention window of ``tw`` tokens centred on each position."""

    tw: int

    def __post_init__(self):
        if self.tw < 1:
            raise ValueError(f"window size must be >= 1, got {self.tw}")

    @property
    def half(self) -> int:
        return self.tw // 2

    def span(self, t: int, length: int) -> tuple[int, int]:
        """Half-open index range token ``t`` attends to in a ``length`` sequence."""
        return max(0, t - self.half), min(length, t + self.half + 1)


def scale_factor(head_dim: int, scale_mode: str) -> float:
    """Score divisor: sqrt(d_h) conventionally, or d_h itself."""
    if scale_mode == "sqrt_dh":
        return math.sqrt(head_dim)
    if scale_mode == "dh":
        return float(head_dim)
    raise ConfigError(f"unknown scale_mode {scale_mode!r}; expected one of {SCALE_MODES}")


def ssa(q, k, v, scale_mode: str = "sqrt_dh") -> np.ndarray:
    """Single-head attention: softmax(q k^T / s) v."""
    q, k, v = as_matrix(q), as_matrix(k), as_matrix(v)
    if q.shape[1] != k.shape[1] or k.shape[1] != v.shape[1]:
        raise ShapeError(
            f"ssa: q/k/v widths differ: {q.shape[1]}/{k.shape[1]}/{v.shape[1]}"
        )
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"ssa: k has {k.shape[0]} rows but v has {v.shape[0]}")
    s = scale_factor(q.shape[1], scale_mode)
    weights = softmax_rows(q @ k.T / s)
    return weights @ v


def _project(x: np.ndarray, params: AttentionParams):
    if x.shape[1] != params.width:
        raise ShapeError(
            f"attention input width {x.shape[1]} does not match weights {params.width}"
        )
    q = x @ params.wq + params.bq
    k = x @ params.wk + params.bk
    v = x @ params.wv + params.bv
    return q, k, v


def msa(x, params: AttentionParams, scale_mode: str = "sqrt_dh") -> np.ndarray:
    """Multi-head attention: project, attend per head, concatenate heads."""
    x = as_matrix(x)
    q, k, v = _project(x, params)
    dh = params.head_dim
    out = np.empty_like(x)
    for i in range(params.num_heads):
        cols = slice(i * dh, (i + 1) * dh)
        out[:, cols] = ssa(q[:, cols], k[:, cols], v[:, cols], scale_mode)
    return out


def speech_msa(
    x, params: AttentionParams, window: WindowSpec, scale_mode: str = "sqrt_dh"
) -> np.ndarray:
    """Windowed multi-head attention.

    For each token and head, scores are computed only against the token's
    clamped span, softmax runs over that span, and the output is the
    weighted sum of the spanned value rows. Token t's output therefore
    depends on nothing outside its span.
    """
    x = as_matrix(x)
    q, k, v = _project(x, params)
    t_len = x.shape[0]
    dh = params.head_dim
    s = scale_factor(dh, scale_mode)
    out = np.empty_like(x)
    for i in range(params.num_heads):
        cols = slice(i * dh, (i + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        for t in range(t_len):
            lo, hi = window.span(t, t_len)
            scores = kh[lo:hi] @ qh[t] / s
            scores -= scores.max()
            e = np.exp(scores)
            out[t, cols] = (e / e.sum()) @ vh[lo:hi]
    return out


def band_mask_oracle(
    x, params: AttentionParams, window: WindowSpec, scale_mode: str = "sqrt_dh"
) -> np.ndarray:
    """Reference route for ``speech_msa``: full attention with a band mask.

    Scores outside the band |t - j| <= tw//2 are set to -inf before an
    inline softmax, which zeroes their weights exactly. Used only for
    equivalence testing.
    """
    x = as_matrix(x)
    q, k, v = _project(x, params)
    t_len = x.shape[0]
    dh = params.head_dim
    s = scale_factor(dh, scale_mode)
    idx = np.arange(t_len)
    in_band = np.abs(idx[:, None] - idx[None, :]) <= window.half
    out = np.empty_like(x)
    for i in range(params.num_heads):
        cols = slice(i * dh, (i + 1) * dh)
        scores = q[:, cols] @ k[:, cols].T / s
        scores = np.where(in_band, scores, -np.inf)
        shifted = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        weights = e / e.sum(axis=1, keepdims=True)
        out[:, cols] = weights @ v[:, cols]
    return out
