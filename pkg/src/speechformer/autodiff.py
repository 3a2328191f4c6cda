"""Reverse-mode differentiation for every operation in the encoder.

A small tape: each op produces a `Tensor` holding a float64 array plus a
closure that routes the upstream gradient to its parents analytically.
Attention ops are fused nodes (their forward delegates to the plain
implementations in `attention`, and their backward recomputes the
intermediates), which keeps graphs small enough that central-difference
verification of a whole model runs in seconds.

`finite_diff_check` is the validation leg: it compares the analytic
gradients against central differences coordinate by coordinate and
reports the worst relative error per parameter group.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import attention as att
from . import kernel
from . import model as mdl
from .errors import ShapeError
from .schedule import StageSchedule, derive_schedule


class Tensor:
    """Node in the computation graph: a float64 array plus backward plumbing."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _acc(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(root: Tensor):
    """Backpropagate from a scalar root through the recorded graph."""
    if root.data.size != 1:
        raise ValueError("backward requires a scalar-valued root")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a 1-D bias broadcast across rows."""
    broadcast_bias = b.data.ndim == 1 and a.data.ndim == 2
    if not broadcast_bias and a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    out = Tensor(a.data + b.data, (a, b))

    def bw():
        _acc(a, out.grad)
        _acc(b, out.grad.sum(axis=0) if broadcast_bias else out.grad)

    out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(kernel.matmul(a.data, b.data), (a, b))

    def bw():
        _acc(a, out.grad @ b.data.T)
        _acc(b, a.data.T @ out.grad)

    out._backward = bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), (x,))

    def bw():
        _acc(x, out.grad * (x.data > 0))

    out._backward = bw
    return out


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s, (x,))

    def bw():
        _acc(x, out.grad * s)

    out._backward = bw
    return out


def sumprod(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(x * weights) against a constant array, handy as a test loss."""
    w = np.asarray(weights, dtype=np.float64)
    out = Tensor((x.data * w).sum(), (x,))

    def bw():
        _acc(x, w * out.grad)

    out._backward = bw
    return out


def softmax_rows(x: Tensor) -> Tensor:
    y = kernel.softmax_rows(x.data)
    out = Tensor(y, (x,))

    def bw():
        g = out.grad
        _acc(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    out._backward = bw
    return out


def layer_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = kernel.LAYER_NORM_EPS
) -> Tensor:
    out_data = kernel.layer_norm(x.data, gamma.data, beta.data, eps)
    out = Tensor(out_data, (x, gamma, beta))

    def bw():
        g = out.grad
        mu = x.data.mean(axis=1, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=1, keepdims=True)
        std = np.sqrt(var + eps)
        xhat = centered / std
        _acc(gamma, (g * xhat).sum(axis=0))
        _acc(beta, g.sum(axis=0))
        dxhat = g * gamma.data
        dx = (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        ) / std
        _acc(x, dx)

    out._backward = bw
    return out


def avg_pool_groups(x: Tensor, m: int) -> Tensor:
    out = Tensor(kernel.avg_pool_groups(x.data, m), (x,))
    t = x.data.shape[0]
    full, rem = divmod(t, m)
    sizes = np.array([m] * full + ([rem] if rem else []))

    def bw():
        _acc(x, np.repeat(out.grad / sizes[:, None], sizes, axis=0))

    out._backward = bw
    return out


def mean_rows(x: Tensor) -> Tensor:
    """Mean over tokens, kept as a 1 x d row."""
    out = Tensor(x.data.mean(axis=0, keepdims=True), (x,))

    def bw():
        _acc(x, np.broadcast_to(out.grad / x.data.shape[0], x.data.shape))

    out._backward = bw
    return out


def cross_entropy_with_softmax(logits: Tensor, target: int) -> Tensor:
    """Scalar -log softmax(logits)[target] for a 1 x C logits row."""
    z = logits.data.reshape(-1)
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    probs = np.exp(z - lse)
    out = Tensor(lse - z[target], (logits,))

    def bw():
        d = probs.copy()
        d[target] -= 1.0
        _acc(logits, float(out.grad) * d.reshape(logits.data.shape))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# fused attention ops (forward delegates to `attention`, backward recomputes)


def _softmax_vjp(w: np.ndarray, dw: np.ndarray) -> np.ndarray:
    return w * (dw - (dw * w).sum(axis=-1, keepdims=True))


def ssa(q: Tensor, k: Tensor, v: Tensor, scale_mode: str = "sqrt_dh") -> Tensor:
    out = Tensor(att.ssa(q.data, k.data, v.data, scale_mode), (q, k, v))
    s = att.scale_factor(q.data.shape[1], scale_mode)

    def bw():
        g = out.grad
        w = kernel.softmax_rows(q.data @ k.data.T / s)
        dz = _softmax_vjp(w, g @ v.data.T)
        _acc(v, w.T @ g)
        _acc(q, dz @ k.data / s)
        _acc(k, dz.T @ q.data / s)

    out._backward = bw
    return out


def _attn_params(wq, bq, wk, bk, wv, bv, num_heads) -> att.AttentionParams:
    return att.AttentionParams(
        wq=wq.data,
        wk=wk.data,
        wv=wv.data,
        num_heads=num_heads,
        bq=bq.data,
        bk=bk.data,
        bv=bv.data,
    )


def _project_backward(x, wq, bq, wk, bk, wv, bv, dq, dk, dv):
    _acc(x, dq @ wq.data.T + dk @ wk.data.T + dv @ wv.data.T)
    _acc(wq, x.data.T @ dq)
    _acc(bq, dq.sum(axis=0))
    _acc(wk, x.data.T @ dk)
    _acc(bk, dk.sum(axis=0))
    _acc(wv, x.data.T @ dv)
    _acc(bv, dv.sum(axis=0))


def msa(
    x: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    num_heads: int,
    scale_mode: str = "sqrt_dh",
) -> Tensor:
    params = _attn_params(wq, bq, wk, bk, wv, bv, num_heads)
    parents = (x, wq, bq, wk, bk, wv, bv)
    out = Tensor(att.msa(x.data, params, scale_mode), parents)
    dh = params.head_dim
    s = att.scale_factor(dh, scale_mode)

    def bw():
        g = out.grad
        q = x.data @ wq.data + bq.data
        k_ = x.data @ wk.data + bk.data
        v_ = x.data @ wv.data + bv.data
        dq, dk, dv = np.zeros_like(q), np.zeros_like(k_), np.zeros_like(v_)
        for i in range(num_heads):
            cols = slice(i * dh, (i + 1) * dh)
            qh, kh, vh, gh = q[:, cols], k_[:, cols], v_[:, cols], g[:, cols]
            w = kernel.softmax_rows(qh @ kh.T / s)
            dz = _softmax_vjp(w, gh @ vh.T)
            dv[:, cols] = w.T @ gh
            dq[:, cols] = dz @ kh / s
            dk[:, cols] = dz.T @ qh / s
        _project_backward(x, wq, bq, wk, bk, wv, bv, dq, dk, dv)

    out._backward = bw
    return out


def speech_msa(
    x: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    num_heads: int,
    tw: int,
    scale_mode: str = "sqrt_dh",
) -> Tensor:
    params = _attn_params(wq, bq, wk, bk, wv, bv, num_heads)
    window = att.WindowSpec(tw)
    parents = (x, wq, bq, wk, bk, wv, bv)
    out = Tensor(att.speech_msa(x.data, params, window, scale_mode), parents)
    dh = params.head_dim
    s = att.scale_factor(dh, scale_mode)

    def bw():
        g = out.grad
        t_len = x.data.shape[0]
        q = x.data @ wq.data + bq.data
        k_ = x.data @ wk.data + bk.data
        v_ = x.data @ wv.data + bv.data
        dq, dk, dv = np.zeros_like(q), np.zeros_like(k_), np.zeros_like(v_)
        for i in range(num_heads):
            cols = slice(i * dh, (i + 1) * dh)
            qh, kh, vh, gh = q[:, cols], k_[:, cols], v_[:, cols], g[:, cols]
            dqh, dkh, dvh = (
                dq[:, cols],
                dk[:, cols],
                dv[:, cols],
            )
            for t in range(t_len):
                lo, hi = window.span(t, t_len)
                z = kh[lo:hi] @ qh[t] / s
                z = z - z.max()
                e = np.exp(z)
                w = e / e.sum()
                gt = gh[t]
                dvh[lo:hi] += np.outer(w, gt)
                dw = vh[lo:hi] @ gt
                dz = w * (dw - dw @ w)
                dqh[t] = dz @ kh[lo:hi] / s
                dkh[lo:hi] += np.outer(dz, qh[t]) / s
        _project_backward(x, wq, bq, wk, bk, wv, bv, dq, dk, dv)

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# block-level graphs mirroring `model`


def _attn_args(p: Mapping[str, Tensor]):
    return p["wq"], p["bq"], p["wk"], p["bk"], p["wv"], p["bv"]


def encoder_block(
    x: Tensor,
    p: Mapping[str, Tensor],
    num_heads: int,
    scale_mode: str = "sqrt_dh",
    tw: int | None = None,
) -> Tensor:
    """Differentiable pre-norm block; full attention when ``tw`` is None."""
    h = layer_norm(x, p["ln1_gain"], p["ln1_bias"])
    if tw is None:
        a = msa(h, *_attn_args(p), num_heads, scale_mode)
    else:
        a = speech_msa(h, *_attn_args(p), num_heads, tw, scale_mode)
    x = add(x, a)
    h = layer_norm(x, p["ln2_gain"], p["ln2_bias"])
    f = linear(relu(linear(h, p["ffn_w1"], p["ffn_b1"])), p["ffn_w2"], p["ffn_b2"])
    return add(x, f)


def merging_block(x: Tensor, m: int, w: Tensor, b: Tensor) -> Tensor:
    return linear(avg_pool_groups(x, m), w, b)


def classifier_head(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return linear(mean_rows(x), w, b)


def _block_subdict(params: Mapping[str, Tensor], index: int) -> dict[str, Tensor]:
    return {f: params[mdl.block_key(index, f)] for f in mdl.BLOCK_FIELDS}


def model_forward(
    x_data: np.ndarray,
    params: Mapping[str, Tensor],
    config: mdl.ModelConfig,
    schedule: StageSchedule | None = None,
) -> Tensor:
    """Differentiable replica of `model.forward`, returning 1 x C logits.

    ``params`` is keyed by the canonical tensor names from
    `model.named_tensors`; the input is treated as a constant.
    """
    x_data = kernel.as_matrix(x_data)
    pos = kernel.sinusoidal_positions(x_data.shape[0], x_data.shape[1])
    x = Tensor(x_data + pos)

    if config.variant == "baseline":
        for i in range(config.blocks_per_stage[0]):
            x = encoder_block(
                x, _block_subdict(params, i), config.num_heads, config.scale_mode
            )
    else:
        if schedule is None:
            schedule = derive_schedule(config.hop1_ms)
        index = 0
        for stage, n_blocks in enumerate(config.blocks_per_stage):
            tw = (
                schedule.window_tokens[stage]
                if stage < 3
                else 2 * x.data.shape[0]
            )
            for _ in range(n_blocks):
                x = encoder_block(
                    x,
                    _block_subdict(params, index),
                    config.num_heads,
                    config.scale_mode,
                    tw=tw,
                )
                index += 1
            if stage < 3:
                x = merging_block(
                    x,
                    schedule.merge_scales[stage],
                    params[mdl.merge_key(stage, "w")],
                    params[mdl.merge_key(stage, "b")],
                )
    return classifier_head(x, params[mdl.HEAD_W_KEY], params[mdl.HEAD_B_KEY])


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckResult:
    group: str
    max_rel_err: float
    eps: float
    passed: bool


@dataclass
class GradCheckReport:
    """Worst analytic-vs-numeric relative error per parameter group."""

    results: list[GradCheckResult]

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.results), default=0.0)

    def format(self) -> str:
        return "\n".join(
            f"{r.group}\t{r.max_rel_err:.3e}\t{'pass' if r.passed else 'FAIL'}"
            for r in self.results
        )


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 50,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` with central differences.

    ``loss_fn`` receives a fresh name -> Tensor mapping and must return a
    scalar Tensor deterministically. Groups larger than ``max_coords``
    are checked at that many randomly sampled coordinates (fixed by
    ``seed``); smaller groups are checked exhaustively.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tensors = {k: Tensor(v) for k, v in base.items()}
    out = loss_fn(tensors)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("loss is not finite")
    backward(out)
    analytic = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in tensors.items()
    }

    def eval_at(name: str, arr: np.ndarray) -> float:
        fresh = {k: Tensor(arr if k == name else v) for k, v in base.items()}
        val = loss_fn(fresh).data
        if not np.all(np.isfinite(val)):
            raise FloatingPointError("loss is not finite")
        return float(val)

    rng = np.random.default_rng(seed)
    results = []
    for name, arr in base.items():
        if arr.size <= max_coords:
            coords = np.arange(arr.size)
        else:
            coords = rng.choice(arr.size, size=max_coords, replace=False)
        worst = 0.0
        for c in coords:
            c = int(c)
            plus = arr.copy()
            plus.flat[c] += eps
            minus = arr.copy()
            minus.flat[c] -= eps
            numeric = (eval_at(name, plus) - eval_at(name, minus)) / (2 * eps)
            worst = max(worst, _rel_err(float(analytic[name].flat[c]), numeric))
        results.append(GradCheckResult(name, worst, eps, worst <= tol))
    return GradCheckReport(results)
