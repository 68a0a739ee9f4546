"""Dense float64 tensors with reverse-mode automatic differentiation.

Every array in the library is a row-major float64 ndarray wrapped in a
:class:`Tensor`. Operations build a DAG of backward closures; calling
``backward()`` on a scalar loss walks the graph in reverse topological
order and accumulates gradients into every reachable tensor that has
``requires_grad=True``.

Conventions:
  * No implicit broadcasting. Binary ops require identical shapes, except
    that a Python number or a 0-d tensor may combine with any shape.
  * ReLU and leaky ReLU use the negative-side slope as the subgradient at
    exactly zero (0 and alpha respectively).
  * ``maximum`` routes the gradient to the first argument on ties.
  * Max pooling routes the gradient to the first maximum in each window.
  * softmax / log_softmax / logsumexp subtract the max before
    exponentiating.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Array = np.ndarray
Scalar = Union[int, float]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class Tensor:
    """A float64 array plus an optional autodiff graph edge."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        # asarray keeps 0-d arrays 0-d (ascontiguousarray would promote them)
        self.data: Array = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(x) into every reachable x with requires_grad.

        ``self`` must be a scalar (size 1). Calling backward twice without
        zeroing grads adds the new gradients on top of the old ones.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        # Working gradients for this pass; merged into .grad as nodes are
        # retired so repeated backward() calls accumulate additively.
        flow: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                node._backward(g, flow)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})"

    # Arithmetic sugar; scalars allowed on either side.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return negate(self)


class Parameter:
    """A named trainable tensor. Names must be unique within a model."""

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def data(self) -> Array:
        return self.tensor.data

    @data.setter
    def data(self, value: Array) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64, order="C")

    @property
    def grad(self) -> Optional[Array]:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


# ---------------------------------------------------------------------------
# graph plumbing


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data: Array, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _push(flow: dict, t: Tensor, g: Array) -> None:
    """Add gradient g to t's pending entry. Stores a copy so closures may
    pass views or shared arrays."""
    if not t.requires_grad:
        return
    key = id(t)
    if key in flow:
        flow[key] += g
    else:
        flow[key] = np.array(g, dtype=np.float64, copy=True)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not _is_scalar(a) and not _is_scalar(b):
        raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g: Array, shape: tuple) -> Array:
    # Undo a scalar-to-tensor broadcast in a binary op.
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes("add", a, b)

    def bw(g, flow):
        _push(flow, a, _reduce_to(g, a.shape))
        _push(flow, b, _reduce_to(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes("sub", a, b)

    def bw(g, flow):
        _push(flow, a, _reduce_to(g, a.shape))
        _push(flow, b, _reduce_to(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes("mul", a, b)

    def bw(g, flow):
        _push(flow, a, _reduce_to(g * b.data, a.shape))
        _push(flow, b, _reduce_to(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes("div", a, b)

    def bw(g, flow):
        _push(flow, a, _reduce_to(g / b.data, a.shape))
        _push(flow, b, _reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max. On exact ties the gradient goes to ``a``."""
    a, b = _lift(a), _lift(b)
    _binary_shapes("maximum", a, b)
    take_a = a.data >= b.data

    def bw(g, flow):
        _push(flow, a, _reduce_to(g * take_a, a.shape))
        _push(flow, b, _reduce_to(g * ~take_a, b.shape))

    return _node(np.maximum(a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise unary ops


def negate(x) -> Tensor:
    x = _lift(x)

    def bw(g, flow):
        _push(flow, x, -g)

    return _node(-x.data, (x,), bw)


def square(x) -> Tensor:
    x = _lift(x)

    def bw(g, flow):
        _push(flow, x, g * (2.0 * x.data))

    return _node(x.data * x.data, (x,), bw)


def sqrt(x) -> Tensor:
    x = _lift(x)
    root = np.sqrt(x.data)

    def bw(g, flow):
        # Derivative 0.5/sqrt(x) is infinite at exactly 0; downstream
        # masking then yields NaN, which gradient monitoring must detect.
        with np.errstate(divide="ignore", invalid="ignore"):
            _push(flow, x, g * (0.5 / root))

    return _node(root, (x,), bw)


def exp(x) -> Tensor:
    x = _lift(x)
    e = np.exp(x.data)

    def bw(g, flow):
        _push(flow, x, g * e)

    return _node(e, (x,), bw)


def log(x) -> Tensor:
    x = _lift(x)

    def bw(g, flow):
        _push(flow, x, g / x.data)

    return _node(np.log(x.data), (x,), bw)


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0

    def bw(g, flow):
        _push(flow, x, g * mask)

    return _node(x.data * mask, (x,), bw)


def leaky_relu(x, alpha: float = 0.01) -> Tensor:
    x = _lift(x)
    slope = np.where(x.data > 0, 1.0, alpha)

    def bw(g, flow):
        _push(flow, x, g * slope)

    return _node(x.data * slope, (x,), bw)


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = _lift(x)

    def bw(g, flow):
        d = x.data
        sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                       np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
        _push(flow, x, g * sig)

    return _node(np.logaddexp(0.0, x.data), (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axis_grad(g: Array, shape: tuple, axis: Optional[int]) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def tsum(x, axis: Optional[int] = None) -> Tensor:
    x = _lift(x)

    def bw(g, flow):
        _push(flow, x, _axis_grad(g, x.shape, axis))

    return _node(np.sum(x.data, axis=axis), (x,), bw)


def tmean(x, axis: Optional[int] = None) -> Tensor:
    x = _lift(x)
    count = x.data.size if axis is None else x.shape[axis]

    def bw(g, flow):
        _push(flow, x, _axis_grad(g, x.shape, axis) / count)

    return _node(np.mean(x.data, axis=axis), (x,), bw)


def logsumexp(x) -> Tensor:
    """log(sum(exp(x))) over all elements, max-subtracted for stability."""
    x = _lift(x)
    m = np.max(x.data)
    shifted = np.exp(x.data - m)
    total = np.sum(shifted)

    def bw(g, flow):
        _push(flow, x, g * (shifted / total))

    return _node(np.asarray(m + np.log(total)), (x,), bw)


def reshape(x, shape: Iterable[int]) -> Tensor:
    x = _lift(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError("reshape", x.shape, shape)

    def bw(g, flow):
        _push(flow, x, g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input list")
    for t in ts[1:]:
        if t.data.ndim != ts[0].data.ndim:
            raise ShapeError("concat", ts[0].shape, t.shape)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bw(g, flow):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            _push(flow, t, g[tuple(idx)])

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def slice_rows(x, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along axis 0."""
    x = _lift(x)
    n = x.shape[0]
    if not 0 <= start < stop <= n:
        raise ShapeError("slice_rows", x.shape, (start, stop))

    def bw(g, flow):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        _push(flow, x, full)

    return _node(x.data[start:stop].copy(), (x,), bw)


def broadcast_rows(v, n: int) -> Tensor:
    """Explicitly tile a 1-d vector into n identical rows."""
    v = _lift(v)
    if v.data.ndim != 1:
        raise ShapeError("broadcast_rows", v.shape)

    def bw(g, flow):
        _push(flow, v, g.sum(axis=0))

    return _node(np.tile(v.data, (n, 1)), (v,), bw)


# ---------------------------------------------------------------------------
# matrix and normalized-exponential ops


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g, flow):
        _push(flow, a, g @ b.data.T)
        _push(flow, b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def softmax(x) -> Tensor:
    """softmax along the last axis, max-subtracted."""
    x = _lift(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g, flow):
        inner = np.sum(g * s, axis=-1, keepdims=True)
        _push(flow, x, s * (g - inner))

    return _node(s, (x,), bw)


def log_softmax(x) -> Tensor:
    x = _lift(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def bw(g, flow):
        _push(flow, x, g - s * np.sum(g, axis=-1, keepdims=True))

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# convolution, pooling, batch normalization


def _corr2d(x: Array, w: Array) -> Array:
    """Valid cross-correlation of x [B,C,H,W] with w [O,C,kh,kw]."""
    win = sliding_window_view(x, (w.shape[2], w.shape[3]), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, w, bias=None, padding: str = "same") -> Tensor:
    """2-d convolution (cross-correlation), stride 1.

    x: [B,C,H,W]; w: [O,C,kh,kw]; bias: optional [O]. ``same`` padding
    requires odd kernel sides.
    """
    x, w = _lift(x), _lift(w)
    b = _lift(bias) if bias is not None else None
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    kh, kw = w.shape[2], w.shape[3]
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("conv2d: 'same' padding requires odd kernel sides")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw:
        raise ShapeError("conv2d", x.shape, w.shape)

    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    else:
        xp = x.data
    out = _corr2d(xp, w.data)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError("conv2d bias", b.shape, (w.shape[0],))
        out = out + b.data[None, :, None, None]

    def bw(g, flow):
        if w.requires_grad:
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            _push(flow, w, dw)
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dxp = _corr2d(gp, wt)
            if ph or pw:
                dxp = dxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
            _push(flow, x, dxp)
        if b is not None and b.requires_grad:
            _push(flow, b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw)


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2. Trailing odd rows/cols are dropped.

    The gradient goes to the first maximum within each window.
    """
    x = _lift(x)
    if x.data.ndim != 4:
        raise ShapeError("maxpool2d", x.shape)
    B, C, H, W = x.shape
    ho, wo = H // 2, W // 2
    if ho < 1 or wo < 1:
        raise ShapeError("maxpool2d", x.shape)
    r = x.data[:, :, :ho * 2, :wo * 2].reshape(B, C, ho, 2, wo, 2)
    flat = r.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, ho, wo, 4)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g, flow):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = np.zeros_like(x.data)
        dx[:, :, :ho * 2, :wo * 2] = (
            dflat.reshape(B, C, ho, wo, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, C, ho * 2, wo * 2)
        )
        _push(flow, x, dx)

    return _node(out, (x,), bw)


def batchnorm2d_train(x, gamma, beta, eps: float = 1e-5):
    """Batch normalization over (B,H,W) per channel using batch statistics.

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain
    arrays (population variance) for running-average upkeep.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if x.data.ndim != 4:
        raise ShapeError("batchnorm2d", x.shape)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("batchnorm2d", x.shape, gamma.shape)
    n = x.data.size // C
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * ivar[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g, flow):
        if beta.requires_grad:
            _push(flow, beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _push(flow, gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gm = g.mean(axis=(0, 2, 3))
            gxm = (g * xhat).mean(axis=(0, 2, 3))
            dx = (gamma.data * ivar)[None, :, None, None] * (
                g - gm[None, :, None, None] - xhat * gxm[None, :, None, None]
            )
            _push(flow, x, dx)

    return _node(out, (x, gamma, beta), bw), mu, var


def batchnorm2d_eval(x, gamma, beta, mean: Array, var: Array,
                     eps: float = 1e-5) -> Tensor:
    """Batch normalization using fixed (running) statistics."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if x.data.ndim != 4:
        raise ShapeError("batchnorm2d", x.shape)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("batchnorm2d", x.shape, gamma.shape)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * ivar[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g, flow):
        if beta.requires_grad:
            _push(flow, beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _push(flow, gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _push(flow, x, g * (gamma.data * ivar)[None, :, None, None])

    return _node(out, (x, gamma, beta), bw)
