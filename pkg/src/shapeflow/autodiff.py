"""Dense float64 tensors with reverse-mode automatic differentiation.

Every trainable piece of the stack (connector, diffusion transformer,
losses) is expressed through the operations in this module. Arrays are
numpy-backed; the tape, the backward rules, and the finite-difference
checker live here.

Design rules:

* float64 everywhere, row-major evaluation, no op-level parallel
  reductions of our own, so a fixed seed gives bit-identical runs.
* A ``Tape`` records one node per executed op. ``Tape.backward`` walks the
  nodes in exact reverse recording order and *accumulates* into ``.grad``
  buffers (shared subexpressions sum, never overwrite).
* Tensors are immutable once created, except ``.grad`` buffers and the
  in-place parameter updates performed by the optimizer between tapes.
* Ops executed while no tape is active (or on inputs that do not require
  gradients) compute values only and record nothing.

Set ``SHAPEFLOW_NAN_CHECK=1`` to validate every op output for NaN/Inf and
fail fast at the offending op.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "matmul",
    "transpose",
    "permute_axes",
    "reshape",
    "concat",
    "slice_axis0",
    "tensor_sum",
    "tensor_mean",
    "gelu",
    "softmax",
    "layer_norm",
    "scaled_dot_attention",
    "linear",
    "grad_check",
    "grad_check_params",
    "zero_grads",
]

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class NonFiniteError(ArithmeticError):
    """Raised when a NaN or Inf appears and the NaN debug toggle is on."""


def _nan_check_enabled() -> bool:
    return os.environ.get("SHAPEFLOW_NAN_CHECK", "") not in ("", "0")


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    ``data`` is the value, ``grad`` is filled in (lazily) by backward
    passes, and ``requires_grad`` marks leaves the tape must reach.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; the functional forms below are the real API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    """A leaf tensor the optimizer is allowed to update."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


_TAPES = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = []
        _TAPES.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops for one forward pass.

    Use as a context manager; each op executed inside appends one node.
    ``backward(loss)`` seeds d(loss)/d(loss) = 1 and replays the nodes in
    exact reverse recording order. Call it once per recording.
    """

    def __init__(self):
        self._nodes: list[Callable[[], None]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self._nodes):
            node()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(data: np.ndarray, *parents: Tensor) -> Tensor:
    if _nan_check_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced a non-finite value")
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs)


def _record(out: Tensor, backward: Callable[[], None]) -> None:
    if out.requires_grad:
        _active_tape()._nodes.append(backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data + b.data, a, b)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, _unbroadcast(out.grad, a.data.shape))
        _accumulate(b, _unbroadcast(out.grad, b.data.shape))

    _record(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data - b.data, a, b)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, _unbroadcast(out.grad, a.data.shape))
        _accumulate(b, _unbroadcast(-out.grad, b.data.shape))

    _record(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data * b.data, a, b)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))

    _record(out, backward)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(-a.data, a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, -out.grad)

    _record(out, backward)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.exp(a.data), a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, out.grad * out.data)

    _record(out, backward)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.log(a.data), a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, out.grad / a.data)

    _record(out, backward)
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}")
    out = _make(np.matmul(a.data, b.data), a, b)

    def backward():
        if out.grad is None:
            return
        if a.requires_grad:
            _accumulate(a, np.matmul(out.grad, b.data.T))
        if b.requires_grad:
            _accumulate(b, np.matmul(a.data.T, out.grad))

    _record(out, backward)
    return out


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.data.shape}")
    out = _make(a.data.T.copy(), a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, out.grad.T)

    _record(out, backward)
    return out


def permute_axes(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation for shape {a.data.shape}")
    inverse = tuple(np.argsort(axes))
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, np.ascontiguousarray(out.grad.transpose(inverse)))

    _record(out, backward)
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.reshape(shape), a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, out.grad.reshape(a.data.shape))

    _record(out, backward)
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one operand")
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = _make(data, *parts)
    sizes = [p.data.shape[axis] for p in parts]

    def backward():
        if out.grad is None:
            return
        offset = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(offset, offset + n)
            _accumulate(p, out.grad[tuple(sl)])
            offset += n

    _record(out, backward)
    return out


def slice_axis0(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis length {n}")
    out = _make(a.data[start:stop].copy(), a)

    def backward():
        if out.grad is None:
            return
        g = np.zeros_like(a.data)
        g[start:stop] = out.grad
        _accumulate(a, g)

    _record(out, backward)
    return out


def tensor_sum(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.asarray(a.data.sum()), a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, np.broadcast_to(out.grad, a.data.shape).copy())

    _record(out, backward)
    return out


def tensor_mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    out = _make(np.asarray(a.data.mean()), a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, np.broadcast_to(out.grad / n, a.data.shape).copy())

    _record(out, backward)
    return out


def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x), no tanh shortcut."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    out = _make(a.data * cdf, a)

    def backward():
        if out.grad is None:
            return
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        _accumulate(a, out.grad * (cdf + a.data * pdf))

    _record(out, backward)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if a.data.shape == () or a.data.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis, shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _make(p, a)

    def backward():
        if out.grad is None:
            return
        g = out.grad
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(a, p * (g - dot))

    _record(out, backward)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"gain/bias shapes {gain.data.shape}/{bias.data.shape} do not match feature dim ({d},)"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(xhat * gain.data + bias.data, x, gain, bias)

    def backward():
        if out.grad is None:
            return
        g = out.grad
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gx - m1 - xhat * m2))

    _record(out, backward)
    return out


def scaled_dot_attention(q, k, v, heads: int = 1) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d_head)) V with optional column-split heads.

    Shapes: q [Lq, d], k [Lk, d], v [Lk, dv]; result [Lq, dv]. With
    ``heads`` > 1 the feature axes are split into equal slices and each
    slice attends independently; ``heads=1`` is the plain formula.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(
            f"attention expects 2-D q/k/v, got {q.data.shape}, {k.data.shape}, {v.data.shape}"
        )
    lq, d = q.data.shape
    lk, dk = k.data.shape
    lkv, dv = v.data.shape
    if d != dk:
        raise ShapeError(f"query/key feature dims differ: {q.data.shape} vs {k.data.shape}")
    if lk != lkv:
        raise ShapeError(f"key/value lengths differ: {k.data.shape} vs {v.data.shape}")
    if lk < 1 or d < 1:
        raise ShapeError(f"attention needs Lk >= 1 and d >= 1, got {k.data.shape}")
    if d % heads != 0 or dv % heads != 0:
        raise ShapeError(f"heads={heads} must divide feature dims {d} and {dv}")

    dh, dvh = d // heads, dv // heads
    qh = q.data.reshape(lq, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(lk, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(lk, heads, dvh).transpose(1, 0, 2)
    scale = 1.0 / np.sqrt(dh)
    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = np.matmul(probs, vh)
    out = _make(ctx.transpose(1, 0, 2).reshape(lq, dv), q, k, v)

    def backward():
        if out.grad is None:
            return
        go = out.grad.reshape(lq, heads, dvh).transpose(1, 0, 2)
        if v.requires_grad:
            gv = np.matmul(probs.transpose(0, 2, 1), go)
            _accumulate(v, gv.transpose(1, 0, 2).reshape(lk, dv))
        if q.requires_grad or k.requires_grad:
            gp = np.matmul(go, vh.transpose(0, 2, 1))
            gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                gq = np.matmul(gs, kh) * scale
                _accumulate(q, gq.transpose(1, 0, 2).reshape(lq, d))
            if k.requires_grad:
                gk = np.matmul(gs.transpose(0, 2, 1), qh) * scale
                _accumulate(k, gk.transpose(1, 0, 2).reshape(lk, d))

    _record(out, backward)
    return out


def linear(x, w, b) -> Tensor:
    """x @ w + b with a row-broadcast bias."""
    return add(matmul(x, w), b)


def _check_h(h: float) -> None:
    if not (1e-6 <= h <= 1e-4):
        raise ValueError(f"step size h={h} outside the trusted range [1e-6, 1e-4]")


def _select_coords(n: int, max_coords: Optional[int], rng: Optional[np.random.Generator]):
    if max_coords is None or n <= max_coords:
        return range(n)
    if rng is None:
        rng = np.random.default_rng(0)
    return np.sort(rng.choice(n, size=max_coords, replace=False))


def _fd_pair(f, flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    fp = float(f().data)
    flat[i] = orig - h
    fm = float(f().data)
    flat[i] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NonFiniteError("objective became non-finite under perturbation")
    return (fp - fm) / (2.0 * h)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def grad_check(
    f: Callable[[Tensor], Tensor],
    theta: Tensor,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps ``theta`` to a scalar Tensor. Relative error per coordinate
    is |ad - fd| / max(|ad|, |fd|, 1). ``max_coords`` caps the number of
    coordinates probed (a seeded subsample); None probes all of them.
    """
    _check_h(h)
    theta.grad = None
    with Tape() as tape:
        out = f(theta)
    if out.shape != ():
        raise ShapeError(f"grad_check objective must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data):
        raise NonFiniteError("objective is non-finite at theta")
    tape.backward(out)
    g = np.zeros_like(theta.data) if theta.grad is None else theta.grad.copy()
    gflat = g.reshape(-1)
    flat = theta.data.reshape(-1)
    worst = 0.0
    for i in _select_coords(flat.size, max_coords, rng):
        fd = _fd_pair(lambda: f(theta), flat, int(i), h)
        worst = max(worst, _rel_err(float(gflat[i]), fd))
    return worst


def grad_check_params(
    f: Callable[[], Tensor],
    params: dict,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Gradient check over a named parameter dict against one objective.

    Runs one taped forward/backward for all parameters, then probes each
    parameter's coordinates with central differences. Returns the max
    relative error across everything probed.
    """
    _check_h(h)
    tensors = {name: p for name, p in params.items() if p.requires_grad}
    zero_grads(tensors.values())
    with Tape() as tape:
        out = f()
    if not np.isfinite(out.data):
        raise NonFiniteError("objective is non-finite at the current parameters")
    tape.backward(out)
    worst = 0.0
    for name in sorted(tensors):
        p = tensors[name]
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        gflat = g.reshape(-1)
        flat = p.data.reshape(-1)
        for i in _select_coords(flat.size, max_coords, rng):
            fd = _fd_pair(f, flat, int(i), h)
            worst = max(worst, _rel_err(float(gflat[i]), fd))
    return worst
