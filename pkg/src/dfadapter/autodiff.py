"""Minimal define-by-run reverse-mode differentiation on numpy arrays.

Operations are recorded onto the innermost active :class:`Graph` whenever at
least one input requires a gradient.  Outside a ``with Graph():`` block the
same functions run as plain numpy kernels and nothing is retained, which is
what evaluation code relies on.

Only tensors that lie on a path from a ``requires_grad`` leaf receive
gradients; leaves created with ``requires_grad=False`` never get a gradient
buffer.
"""

from __future__ import annotations

import contextlib
import math
import threading
import weakref
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = {"f32": np.float32, "f64": np.float64}

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class GraphError(RuntimeError):
    """Raised for misuse of the recording graph (non-scalar loss, foreign loss)."""


def _graph_stack() -> list:
    stack = getattr(_state, "graphs", None)
    if stack is None:
        stack = _state.graphs = []
    return stack


def _pattern_sink() -> Optional[list]:
    return getattr(_state, "patterns", None)


@contextlib.contextmanager
def record_patterns():
    """Collect the branch decisions (relu masks, pooling argmax) of every kernel run inside.

    Gradient checking uses this to detect when a finite-difference probe
    straddles a kink, where the central difference is not a valid oracle.
    """
    prev = _pattern_sink()
    sink: list = []
    _state.patterns = sink
    try:
        yield sink
    finally:
        _state.patterns = prev


class Tensor:
    """An n-d array with an optional gradient; a node of the recording graph."""

    __slots__ = ("data", "grad", "requires_grad", "retain_grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.retain_grad = False
        self._node: Optional[_Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class _Node:
    """One recorded op.

    Output and graph are held weakly: tensor -> node -> output would otherwise
    form a reference cycle per op, leaving whole graphs (and their activation
    arrays) to the cyclic collector instead of freeing them on last use.
    """

    __slots__ = ("inputs", "_output", "backward", "op", "_graph")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: Callable, graph: "Graph"):
        self.op = op
        self._graph = weakref.ref(graph)
        self.inputs = inputs
        self._output = weakref.ref(output)
        self.backward = backward

    @property
    def output(self) -> Optional[Tensor]:
        return self._output()

    @property
    def graph(self) -> Optional["Graph"]:
        return self._graph()


class Graph:
    """Tape of recorded operations, in execution (hence topological) order."""

    __slots__ = ("ops", "__weakref__")

    def __init__(self):
        self.ops: list[_Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    result = Tensor(out)
    stack = _graph_stack()
    if stack and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = _Node(op, tuple(inputs), result, backward_fn, stack[-1])
        result._node = node
        stack[-1].ops.append(node)
    return result


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._node is None:
        raise GraphError("loss was not produced by a recorded graph")
    if graph is None:
        graph = loss._node.graph
        if graph is None:
            raise GraphError("the graph that recorded loss has been released")
    elif loss._node.graph is not graph:
        raise GraphError("loss not in graph")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.ops):
        out = node.output
        if out is None:  # dropped by the caller and not used downstream: no gradient flows through it
            continue
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if out.retain_grad:
            out.grad = g
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# ---------------------------------------------------------------- helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _need(*ts: Tensor) -> list:
    return [t.requires_grad for t in ts]


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    need = _need(a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(g, b.shape) if need[1] else None,
        )

    return _record("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    need = _need(a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(-g, b.shape) if need[1] else None,
        )

    return _record("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    need = _need(a, b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if need[0] else None,
            _unbroadcast(g * a.data, b.shape) if need[1] else None,
        )

    return _record("mul", out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    sink = _pattern_sink()
    if sink is not None:
        sink.append(mask)
    out = np.where(mask, x.data, x.dtype.type(0))
    return _record("relu", out, (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    t = d.dtype.type
    inner = t(_GELU_C) * (d + t(0.044715) * (d * d * d))
    th = np.tanh(inner)
    out = t(0.5) * d * (t(1) + th)

    def bw(g):
        dinner = t(_GELU_C) * (t(1) + t(3 * 0.044715) * d * d)
        deriv = t(0.5) * (t(1) + th) + t(0.5) * d * (t(1) - th * th) * dinner
        return (g * deriv,)

    return _record("gelu", out, (x,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` of the last axis."""
    out = x.data[..., start:stop]
    src = x.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _record("narrow", out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _record("concat", out, tensors, bw)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_pool(x: Tensor, axis: int = 1) -> Tensor:
    """Average over one axis (token pooling)."""
    if x.shape[axis] == 0:
        raise ShapeError("cannot pool over an empty axis")
    return mean(x, axis=axis)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc
    need = _need(a, b)

    def bw(g):
        ga = gb = None
        if need[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if need[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(lead + (w.shape[1],))
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record("linear", out, inputs, bw)


# ---------------------------------------------------------------- normalisation / softmax


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm expects gamma/beta of shape ({d},), got {gamma.shape}, {beta.shape}")
    t = x.dtype.type
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = t(1) / np.sqrt(var + t(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    need = _need(x, gamma, beta)

    def bw(g):
        gx = gg = gb = None
        if need[0]:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if need[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if need[2]:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _record("layer_norm", out, (x, gamma, beta), bw)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm over (B, H, W).

    In training mode batch statistics normalise the input and the running
    buffers are updated in place; otherwise the running buffers are used and
    left untouched.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm2d channel mismatch: {x.shape} vs {gamma.shape}")
    t = x.dtype.type
    g_ = gamma.data.reshape(1, -1, 1, 1)
    b_ = beta.data.reshape(1, -1, 1, 1)
    need = _need(x, gamma, beta)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        rstd = t(1) / np.sqrt(var + t(eps))
        xhat = xc * rstd
        out = xhat * g_ + b_
        m = running_mean.dtype.type(momentum)
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        running_mean *= 1 - m
        running_mean += m * mu.reshape(-1).astype(running_mean.dtype)
        running_var *= 1 - m
        running_var += m * unbiased.astype(running_var.dtype)

        def bw(g):
            gx = gg = gb = None
            if need[0]:
                dxhat = g * g_
                gx = rstd * (
                    dxhat
                    - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            if need[1]:
                gg = (g * xhat).sum(axis=(0, 2, 3))
            if need[2]:
                gb = g.sum(axis=(0, 2, 3))
            return gx, gg, gb

    else:
        rstd = (t(1) / np.sqrt(running_var.astype(x.dtype) + t(eps))).reshape(1, -1, 1, 1)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(1, -1, 1, 1)) * rstd
        out = xhat * g_ + b_

        def bw(g):
            return (
                g * g_ * rstd if need[0] else None,
                (g * xhat).sum(axis=(0, 2, 3)) if need[1] else None,
                g.sum(axis=(0, 2, 3)) if need[2] else None,
            )

    return _record("batch_norm2d", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- convolution / pooling


def conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    """floor((n + 2p - k) / stride) + 1; trailing rows the stride cannot reach are dropped."""
    if stride <= 0 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    span = n + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} exceeds padded input extent {n + 2 * padding}")
    return span // stride + 1


def _pair(v) -> tuple:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with (O, C, k, k) weights.

    Works internally in channels-last layout; the returned array is a
    (B, O, H', W') view of channels-last memory, which the next convolution
    consumes without copying.  ``stride`` and ``padding`` may be ints or
    (height, width) pairs.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    Ho = conv_out_extent(H, kh, sh, ph)
    Wo = conv_out_extent(W, kw, sw, pw)
    xh = x.data.transpose(0, 2, 3, 1)
    if ph or pw:
        xh = np.pad(xh, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    if kh == kw == 1 and sh == sw == 1:
        cols = np.ascontiguousarray(xh).reshape(B * Ho * Wo, C)
    else:
        cols = np.empty((B, Ho, Wo, kh * kw, C), dtype=x.dtype)
        for t, (i, j) in enumerate(taps):
            cols[:, :, :, t, :] = xh[:, i : i + sh * Ho : sh, j : j + sw * Wo : sw, :]
        cols = cols.reshape(B * Ho * Wo, kh * kw * C)
    # (O, kh, kw, C) ordering matches the column layout
    wmat = w.data.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    inputs = (x, w) if bias is None else (x, w, bias)
    padded_hw = xh.shape[1:3]

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2).copy()
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dx = np.zeros((B,) + padded_hw + (C,), dtype=g.dtype)
            w4 = wmat.reshape(O, kh * kw, C)
            for t, (i, j) in enumerate(taps):
                contrib = (g2 @ w4[:, t, :]).reshape(B, Ho, Wo, C)
                dx[:, i : i + sh * Ho : sh, j : j + sw * Wo : sw, :] += contrib
            dx = dx[:, ph : ph + H, pw : pw + W, :]
            gx = dx.transpose(0, 3, 1, 2)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _record("conv2d", out, inputs, bw)


def maxpool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = kernel if stride is None else stride
    B, C, H, W = x.shape
    if kernel > H or kernel > W:
        raise ShapeError(f"pooling window {kernel} exceeds input extent {(H, W)}")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][
        :, :, :Ho, :Wo
    ]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    sink = _pattern_sink()
    if sink is not None:
        sink.append(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros_like(x.data)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            hit = g * (arg == idx)
            dx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += hit
        return (dx,)

    return _record("maxpool2d", out, (x,), bw)


# ---------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (B, C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    nc = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= nc):
        raise ValueError(f"label out of range for {nc} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(labels.size)
    bsz = logits.dtype.type(labels.size)
    out = np.asarray(-logp[rows, labels].sum() / bsz, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / bsz),)

    return _record("cross_entropy", out, (logits,), bw)
