"""Dense tensors with tape-based reverse-mode differentiation.

Only the primitives a pre-norm transformer needs are provided. Every primitive
works on arrays with any number of leading (batch) axes; the trailing axes carry
the explicit shapes documented on each function. Broadcasting is limited to a
per-row bias and to non-differentiable constants.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_DTYPES = {"float64": np.float64, "float32": np.float32}
_mode = "float32"
_local = threading.local()


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class DegenerateAttentionError(ValueError):
    pass


def set_precision(mode: str) -> None:
    global _mode
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}")
    _mode = mode


def get_precision() -> str:
    return _mode


def dtype():
    return _DTYPES[_mode]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    previous = _mode
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """A dense array plus the gradient slot filled in by :meth:`Tape.backward`."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as primitives run, so inputs always precede the node
    that consumes them. :meth:`backward` walks the list once in reverse.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for tensor, gi in zip(node.inputs, grads):
                if gi is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = gi
                else:
                    tensor.grad = tensor.grad + gi


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, inputs, out, backward))
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Residual addition of two tensors of identical shape."""
    _check_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_constant(x: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=x.data.dtype)
    return _emit("add_constant", x.data + c, (x,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: float) -> Tensor:
    return _emit("scale", x.data * s, (x,), lambda g: (g * s,))


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_positions(x: Tensor, start: int) -> Tensor:
    """``x[..., start:, :]`` -- drop leading time steps."""
    full = x.shape

    def backward(g):
        out = np.zeros(full, dtype=g.dtype)
        out[..., start:, :] = g
        return (out,)

    return _emit("take_positions", x.data[..., start:, :], (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# dense layers


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a[..., n, k] @ b[k, m]`` (or ``b[m, k]ᵀ`` with ``transpose_b``).

    ``b`` may also carry the same leading axes as ``a``.
    """
    ad, bd = a.data, b.data
    bm = np.swapaxes(bd, -1, -2) if transpose_b else bd
    if ad.shape[-1] != bm.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = ad @ bm

    def backward(g):
        ga = g @ np.swapaxes(bm, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        if transpose_b:
            gb = np.swapaxes(gb, -1, -2)
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (d_in, d_out) and a per-row bias."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear: shape mismatch {x.shape} @ {w.shape}")
    out = xd @ wd
    if b is not None:
        if b.shape != (wd.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} for output {wd.shape[1]}")
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        gx = g @ wd.T
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", out, inputs, backward)


def embedding(ids, table: Tensor) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError("embedding: id out of range")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _emit("embedding", out, (table,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        n = xd.shape[-1]
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, n)
        return gx, (g2 * xhat.reshape(-1, n)).sum(axis=0), g2.sum(axis=0)

    return _emit("layer_norm", out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# normalisers and losses


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    p = _softmax(x.data)
    return _emit("softmax", p, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    lp = _log_softmax(x.data)
    p = np.exp(lp)
    return _emit("log_softmax", lp, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, targets, weights=None, label_smoothing: float = 0.0) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under ``logits[..., V]``.

    ``weights`` (same shape as ``targets``) scales each position; PAD
    positions are excluded by giving them weight 0.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    lp = _log_softmax(logits.data)
    nll = -np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    if label_smoothing:
        nll = (1.0 - label_smoothing) * nll - label_smoothing * lp.mean(axis=-1)
    value = np.asarray((nll * w).sum(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(lp)
        n_classes = lp.shape[-1]
        target_dist = np.zeros_like(p)
        np.put_along_axis(target_dist, targets[..., None], 1.0, axis=-1)
        if label_smoothing:
            target_dist = (1.0 - label_smoothing) * target_dist + label_smoothing / n_classes
        return ((p - target_dist) * (w[..., None] * g).astype(p.dtype),)

    return _emit("cross_entropy", value, (logits,), backward)


# ---------------------------------------------------------------------------
# attention


def _expand_mask(mask, nq: int, nk: int, batch_shape: tuple[int, ...]) -> np.ndarray:
    if mask is None:
        return np.ones(batch_shape + (1, nq, nk), dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.ndim < 2 or m.shape[-1] != nk or m.shape[-2] not in (1, nq):
        raise ValueError(f"attention: mask shape {m.shape} for scores ({nq}, {nk})")
    # head axis goes just before the (n_q, n_k) block
    return np.broadcast_to(m[..., None, :, :], batch_shape + (1, nq, nk))


def attention_weights(q, k, mask=None, n_heads: int = 1) -> np.ndarray:
    """Attention probabilities as a plain array of shape (..., heads, n_q, n_k)."""
    q = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=dtype())
    k = k.data if isinstance(k, Tensor) else np.asarray(k, dtype=dtype())
    qh, kh = _split_heads(q, n_heads), _split_heads(k, n_heads)
    return _attention_probs(qh, kh, mask, q.shape[:-2])


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    *lead, n, d = x.shape
    if d % h:
        raise ValueError(f"width {d} not divisible by {h} heads")
    return np.swapaxes(x.reshape(*lead, n, h, d // h), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, n, dh = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, n, h * dh)


def _attention_probs(qh, kh, mask, batch_shape) -> np.ndarray:
    nq, nk, dh = qh.shape[-2], kh.shape[-2], qh.shape[-1]
    m = _expand_mask(mask, nq, nk, tuple(batch_shape))
    if not m.any(axis=-1).all():
        raise DegenerateAttentionError("degenerate attention row")
    scores = (qh @ np.swapaxes(kh, -1, -2)) / math.sqrt(dh)
    scores = np.where(m, scores, -np.inf)
    return _softmax(scores)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None, n_heads: int = 1) -> Tensor:
    """Scaled dot-product attention ``softmax(Q·Kᵀ/√d + mask)·V``.

    ``q`` is (..., n_q, d), ``k`` is (..., n_k, d), ``v`` is (..., n_k, d_v).
    ``mask`` is boolean (n_q, n_k) or (..., n_q, n_k) with True marking keys a
    query may see. With ``n_heads > 1`` the widths are split into equal heads
    and ``d`` in the scaling is the per-head width.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.shape[-1] != kd.shape[-1] or kd.shape[-2] != vd.shape[-2]:
        raise ValueError(f"attention: shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    if qd.shape[-1] == 0:
        raise ValueError("attention: key width must be positive")
    qh, kh, vh = (_split_heads(x, n_heads) for x in (qd, kd, vd))
    p = _attention_probs(qh, kh, mask, qd.shape[:-2])
    out = _merge_heads(p @ vh)
    inv_sqrt = 1.0 / math.sqrt(qh.shape[-1])

    def backward(g):
        gh = _split_heads(g, n_heads)
        gp = gh @ np.swapaxes(vh, -1, -2)
        gv = np.swapaxes(p, -1, -2) @ gh
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * inv_sqrt
        gq = gs @ kh
        gk = np.swapaxes(gs, -1, -2) @ qh
        return _merge_heads(gq), _merge_heads(gk), _merge_heads(gv)

    return _emit("attention", out, (q, k, v), backward)


# ---------------------------------------------------------------------------
# verification


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def gradient_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-5,
    samples_per_tensor: int = 3,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the parameter mapping to a scalar tensor and must be
    deterministic. A few coordinates of every distinct tensor are probed.
    """
    if get_precision() != "float64":
        raise RuntimeError("gradient_check requires float64 precision")
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError("epsilon must lie in [1e-7, 1e-4]")
    rng = np.random.default_rng(0) if rng is None else rng

    unique: dict[int, Tensor] = {}
    for t in params.values():
        unique.setdefault(id(t), t)
    tensors = list(unique.values())
    for t in tensors:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True

    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("non-finite loss")
    if loss.requires_grad:
        tape.backward(loss)

    def value() -> float:
        out = f(params)
        if not np.isfinite(out.data).all():
            raise NonFiniteError("non-finite loss")
        return float(out.data)

    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up = value()
            flat[idx] = orig - epsilon
            down = value()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = float(analytic.reshape(-1)[idx])
            if a == 0.0 and numeric == 0.0:
                continue
            worst = max(worst, relative_error(a, numeric))
    return worst
