"""Minimal dense-tensor engine: reverse-mode autodiff over numpy arrays,
a central-difference gradient checker, and a decoupled-weight-decay
adaptive-moment optimizer.

Training runs in f32; gradient verification runs in f64 (finite
differences are unreliable at f32). Finiteness is not checked per op;
NaNs surface when a loss is evaluated or backpropagated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense array plus the reverse-mode tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------

    def __add__(self, other):
        return add(self, self._coerce(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.data.dtype)))

    def __sub__(self, other):
        return add(self, -self._coerce(other))

    def __rsub__(self, other):
        return add(self._coerce(other), -self)

    def __truediv__(self, other):
        other = self._coerce(other)
        return mul(self, power(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self, leaves=()):
        backward(self, leaves=leaves)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# differentiable ops


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._result(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor._result(a.data * b.data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d or equal-batch 3-d matrix product."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ValueError(f"matmul needs matching 2-d or 3-d operands, got {a.shape} @ {b.shape}")

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return Tensor._result(np.matmul(a.data, b.data), (a, b), bwd)


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation of (n, c, h, w) input with (j, c, p, p) kernels,
    no padding. Accumulation order is channel, then kernel row, then kernel
    column, matching a plain quadruple-loop reference bit for bit.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    n, c, h, wd = x.data.shape
    j, wc, p, pq = w.data.shape
    if wc != c or p != pq:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    if h < p or wd < p:
        raise ValueError("kernel larger than input")
    oh = (h - p) // stride + 1
    ow = (wd - p) // stride + 1

    out = np.zeros((n, j, oh, ow), dtype=x.data.dtype)
    xd, wdta = x.data, w.data
    for ci in range(c):
        plane = xd[:, ci]
        for i in range(p):
            for q in range(p):
                patch = plane[:, i : i + stride * oh : stride, q : q + stride * ow : stride]
                out += patch[:, None, :, :] * wdta[None, :, ci, i, q, None, None]

    def bwd(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wdta)
        need_x, need_w = x.requires_grad, w.requires_grad
        for ci in range(c):
            plane = xd[:, ci]
            gplane = gx[:, ci]
            for i in range(p):
                for q in range(p):
                    if need_w:
                        patch = plane[:, i : i + stride * oh : stride, q : q + stride * ow : stride]
                        gw[:, ci, i, q] = np.einsum("njyx,nyx->j", g, patch)
                    if need_x:
                        gpatch = np.einsum("njyx,j->nyx", g, wdta[:, ci, i, q])
                        gplane[:, i : i + stride * oh : stride, q : q + stride * ow : stride] += gpatch
        return gx, gw

    return Tensor._result(out, (x, w), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return Tensor._result(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return Tensor._result(x.data.transpose(axes), (x,), bwd)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows along axis 0. Repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._result(x.data[idx], (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor._result(y, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    y[~pos] = e / (1.0 + e)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return Tensor._result(y, (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated gaussian error linear unit."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner),)

    return Tensor._result(0.5 * xd * (1.0 + t), (x,), bwd)


def log(x: Tensor) -> Tensor:
    def bwd(g):
        return (g / x.data,)

    return Tensor._result(np.log(x.data), (x,), bwd)


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise x**exponent for a scalar exponent."""
    exponent = float(exponent)

    def bwd(g):
        if exponent == 0.0:
            return (np.zeros_like(x.data),)
        return (g * exponent * x.data ** (exponent - 1.0),)

    return Tensor._result(x.data**exponent, (x,), bwd)


def clamp_min(x: Tensor, bound: float) -> Tensor:
    mask = x.data > bound

    def bwd(g):
        return (g * mask,)

    return Tensor._result(np.maximum(x.data, bound), (x,), bwd)


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        for a in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        return (_expand_reduced(g, x.data.shape, axis, keepdims),)

    return Tensor._result(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.data.shape[a] for a in axes]))

    def bwd(g):
        return (_expand_reduced(g, x.data.shape, axis, keepdims) / count,)

    return Tensor._result(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, Tensor(np.asarray(eps, dtype=x.data.dtype))), -0.5)
    return add(mul(mul(centered, inv), gamma), beta)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the tape; each node appears exactly once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves=()) -> None:
    """Accumulate gradients of a finite scalar loss into every reachable
    tensor with requires_grad; listed leaves left untouched get zeros."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float]

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def grad_check(scalar_fn, params, eps: float = 1e-5, max_coords: int | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences in f64.

    `scalar_fn` recomputes the loss from the params' current data. When
    `max_coords` is set, the probes per parameter are its coordinates with
    the largest analytic gradient; coordinates whose true gradient sits at
    the f64 difference-quotient noise floor cannot be checked meaningfully.
    Otherwise every coordinate is swept.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"p{i}", p) for i, p in enumerate(params)]
    for name, p in named:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires f64 parameters ({name} is {p.data.dtype})")

    zero_grads(p for _, p in named)
    loss = scalar_fn()
    backward(loss, leaves=[p for _, p in named])
    analytic = {name: p.grad.copy() for name, p in named}

    per_param: dict[str, float] = {}
    for name, p in named:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            magnitude = np.abs(analytic[name].reshape(-1))
            coords = np.argsort(-magnitude, kind="stable")[:max_coords]
        else:
            coords = np.arange(n)
        worst = 0.0
        for i in coords:
            keep = flat[i]
            flat[i] = keep + eps
            up = float(scalar_fn().data)
            flat[i] = keep - eps
            down = float(scalar_fn().data)
            flat[i] = keep
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while probing {name}[{i}]")
            numeric = (up - down) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
        per_param[name] = worst
    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_err=max_err, per_param=per_param)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """Adaptive-moment state with decoupled weight decay."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: OptimState) -> None:
    """One bias-corrected moment update; weight decay applied to the
    parameter directly, not through the gradient."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("params, grads, and state must align")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= state.lr * (update + state.weight_decay * p.data)


class AdamW:
    """Convenience wrapper binding parameters to optimizer state.

    `decay` marks which parameters receive weight decay (default all);
    biases and norm scales are conventionally exempted by the caller.
    """

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, weight_decay=0.01,
                 decay=None):
        self.params = list(params)
        if decay is None:
            decay = [True] * len(self.params)
        if len(decay) != len(self.params):
            raise ValueError("decay flags must align with params")
        self.decay = list(decay)
        kwargs = dict(lr=lr, beta1=beta1, beta2=beta2)
        self.state_decay = OptimState(weight_decay=weight_decay, **kwargs)
        self.state_plain = OptimState(weight_decay=0.0, **kwargs)

    def step(self):
        groups = {True: ([], []), False: ([], [])}
        for p, d in zip(self.params, self.decay):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            groups[d][0].append(p)
            groups[d][1].append(g)
        if groups[True][0]:
            adam_step(groups[True][0], groups[True][1], self.state_decay)
        if groups[False][0]:
            adam_step(groups[False][0], groups[False][1], self.state_plain)

    def zero_grad(self):
        zero_grads(self.params)
