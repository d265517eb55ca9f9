"""Reverse-mode autodiff over float32 numpy arrays.

Define-by-run tape: each op returns a Tensor carrying the forward value and
a closure that routes the output gradient to its parents. ``backward()``
walks the tape in reverse topological order and accumulates gradients
additively. Every op also has a bare numpy path: calling it on plain
ndarrays (no Tensor argument, or inside ``no_grad``) skips graph
construction and preserves the input dtype, so the same network code can be
re-run in float64 for verification.

All graph values are float32. Non-finite values anywhere in a forward
result are an error state and raise immediately.
"""

from __future__ import annotations

import contextlib

import numpy as np


class DiffcoreError(Exception):
    """Base class for engine errors."""


class ShapeError(DiffcoreError):
    """Incompatible operand shapes; message names the op and the shapes."""


class NonFiniteError(DiffcoreError):
    """A forward op produced NaN or Inf."""


class GraphError(DiffcoreError):
    """Graph misuse, e.g. backward called twice without rebuilding."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values (shape {np.shape(data)})")


class Tensor:
    """A float32 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float32)
        _check_finite(arr, _op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = _op
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from this scalar. One shot per graph."""
        if self.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward on a tensor with no gradient path")
        if self._backward_done:
            raise GraphError("backward already ran on this graph; rebuild the forward pass")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # Release the tape so activations free and a second call is rejected.
        for node in topo:
            node._parents = ()
            node._backward = None
            node._backward_done = True

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"


def _toposort(root):
    topo, visited = [], {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                break
        else:
            topo.append(node)
            stack.pop()
    return topo


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32)  # independent buffer
    else:
        t.grad += g


def _node(data, parents, op, backward_fn):
    data = np.asarray(data, dtype=np.float32)
    _check_finite(data, op)
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = req
    out.grad = None
    out._op = op
    out._backward_done = False
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _any_tensor(*args):
    return any(isinstance(a, Tensor) for a in args)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    if not _any_tensor(a, b):
        return np.asarray(a) + np.asarray(b)
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), "add", backward)


def sub(a, b):
    if not _any_tensor(a, b):
        return np.asarray(a) - np.asarray(b)
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(out, (a, b), "sub", backward)


def mul(a, b):
    if not _any_tensor(a, b):
        return np.asarray(a) * np.asarray(b)
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), "mul", backward)


def div(a, b):
    if not _any_tensor(a, b):
        return np.asarray(a) / np.asarray(b)
    a, b = _coerce(a), _coerce(b)
    out = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, (a, b), "div", backward)


def power(x, p: float):
    """Elementwise x**p for a python-scalar exponent."""
    p = float(p)
    if not _any_tensor(x):
        return np.asarray(x) ** p
    x = _coerce(x)
    with np.errstate(over="ignore", invalid="ignore"):
        out = x.data**p

    def backward(g):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            _accum(x, g * p * x.data ** (p - 1.0))

    return _node(out, (x,), "pow", backward)


def exp(x):
    if not _any_tensor(x):
        return np.exp(np.asarray(x))
    x = _coerce(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    node = _node(out, (x,), "exp", None)
    saved = node.data

    def backward(g):
        _accum(x, g * saved)

    node._backward = backward if node.requires_grad else None
    return node


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    if not _any_tensor(x):
        return np.maximum(np.asarray(x), 0)
    x = _coerce(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        _accum(x, g * (x.data > 0.0))

    return _node(out, (x,), "relu", backward)


def sigmoid(x):
    if not _any_tensor(x):
        return _expit(np.asarray(x))
    x = _coerce(x)
    out = _expit(x.data)
    node = _node(out, (x,), "sigmoid", None)
    saved = node.data

    def backward(g):
        _accum(x, g * saved * (1.0 - saved))

    node._backward = backward if node.requires_grad else None
    return node


def silu(x):
    if not _any_tensor(x):
        x = np.asarray(x)
        return x * _expit(x)
    x = _coerce(x)
    s = _expit(x.data)
    out = x.data * s

    def backward(g):
        _accum(x, g * (s + x.data * s * (1.0 - s)))

    return _node(out, (x,), "silu", backward)


def softplus(x):
    if not _any_tensor(x):
        return np.logaddexp(0.0, np.asarray(x))
    x = _coerce(x)
    out = np.logaddexp(np.float32(0.0), x.data)

    def backward(g):
        _accum(x, g * _expit(x.data))

    return _node(out, (x,), "softplus", backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    if not _any_tensor(x):
        return np.reshape(np.asarray(x), shape)
    x = _coerce(x)
    out = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _node(out, (x,), "reshape", backward)


def transpose(x, axes):
    if not _any_tensor(x):
        return np.transpose(np.asarray(x), axes)
    x = _coerce(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def backward(g):
        _accum(x, np.ascontiguousarray(np.transpose(g, inv)))

    return _node(out, (x,), "transpose", backward)


def concat(xs, axis: int):
    if not any(isinstance(x, Tensor) for x in xs):
        return np.concatenate([np.asarray(x) for x in xs], axis=axis)
    xs = [_coerce(x) for x in xs]
    ref = xs[0].ndim
    for x in xs:
        if x.ndim != ref:
            raise ShapeError(f"concat: rank mismatch {[x.shape for x in xs]}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, piece in zip(xs, np.split(g, splits, axis=axis)):
            _accum(x, np.ascontiguousarray(piece))

    return _node(out, tuple(xs), "concat", backward)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims=False):
    if not _any_tensor(x):
        return np.sum(np.asarray(x), axis=axis, keepdims=keepdims)
    x = _coerce(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, x.shape))

    return _node(out, (x,), "sum", backward)


def reduce_mean(x, axis=None, keepdims=False):
    if not _any_tensor(x):
        return np.mean(np.asarray(x), axis=axis, keepdims=keepdims)
    x = _coerce(x)
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g / count, x.shape))

    return _node(out, (x,), "mean", backward)


def cumsum(x, axis: int):
    if not _any_tensor(x):
        return np.cumsum(np.asarray(x), axis=axis)
    x = _coerce(x)
    out = np.cumsum(x.data, axis=axis)

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        _accum(x, np.ascontiguousarray(rev))

    return _node(out, (x,), "cumsum", backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if not _any_tensor(a, b):
        return np.matmul(np.asarray(a), np.asarray(b))
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _node(out, (a, b), "matmul", backward)


def dense(x, w, b=None):
    """Affine map x @ w + b on the trailing axis."""
    if isinstance(x, Tensor) or isinstance(w, Tensor) or isinstance(b, Tensor):
        tx, tw = _coerce(x), _coerce(w)
        if tx.shape[-1] != tw.shape[0]:
            raise ShapeError(f"dense: input width {tx.shape[-1]} != weight rows {tw.shape[0]}")
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def softmax(x, axis: int = -1):
    if not _any_tensor(x):
        x = np.asarray(x)
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)
    x = _coerce(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    node = _node(out, (x,), "softmax", None)
    s = node.data

    def backward(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        _accum(x, s * (g - dot))

    node._backward = backward if node.requires_grad else None
    return node


def mse(a, b):
    """Mean squared error over all elements (mean convention)."""
    diff = sub(a, b)
    return reduce_mean(mul(diff, diff))


# ---------------------------------------------------------------------------
# volumetric ops


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ShapeError(f"expected 3 entries, got {v}")
        return tuple(int(i) for i in v)
    return (int(v),) * 3


def _conv3d_fwd(x, k, stride, pad):
    n, c, d, h, w = x.shape
    co, ck, kd, kh, kw = k.shape
    if c != ck:
        raise ShapeError(f"conv3d: input channels {c} != kernel channels {ck} (x {x.shape}, k {k.shape})")
    sd, sh, sw = stride
    pd, ph, pw = pad
    if pd or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    dd, hh, ww = x.shape[2:]
    od, oh, ow = (dd - kd) // sd + 1, (hh - kh) // sh + 1, (ww - kw) // sw + 1
    if od <= 0 or oh <= 0 or ow <= 0:
        raise ShapeError(f"conv3d: kernel {k.shape} does not fit input {x.shape} at stride {stride}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    cols2 = cols.reshape(n * od * oh * ow, c * kd * kh * kw)
    out = cols2 @ k.reshape(co, -1).T
    out = out.reshape(n, od, oh, ow, co).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(out), cols2, (od, oh, ow)


def conv3d(x, k, bias=None, stride=1, pad=0):
    """3-D cross-correlation. x: (N,C,D,H,W), k: (O,C,kd,kh,kw), bias: (O,)."""
    stride, pad = _triple(stride), _triple(pad)
    if not _any_tensor(x, k, bias):
        out, _, _ = _conv3d_fwd(np.asarray(x), np.asarray(k), stride, pad)
        if bias is not None:
            out = out + np.asarray(bias).reshape(1, -1, 1, 1, 1)
        return out
    x, k = _coerce(x), _coerce(k)
    if x.ndim != 5 or k.ndim != 5:
        raise ShapeError(f"conv3d: need 5-D operands, got x {x.shape}, k {k.shape}")
    out, cols2, odims = _conv3d_fwd(x.data, k.data, stride, pad)
    n, c = x.shape[:2]
    co = k.shape[0]
    kd, kh, kw = k.shape[2:]
    od, oh, ow = odims
    sd, sh, sw = stride
    pd, ph, pw = pad
    saved = {"cols2": cols2}

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(n * od * oh * ow, co)
        if k.requires_grad:
            gk = (g2.T @ saved["cols2"]).reshape(k.shape)
            _accum(k, gk)
        if x.requires_grad:
            gcols = g2 @ k.data.reshape(co, -1)
            gcols = gcols.reshape(n, od, oh, ow, c, kd, kh, kw).transpose(0, 4, 1, 2, 3, 5, 6, 7)
            dd, hh, ww = x.shape[2] + 2 * pd, x.shape[3] + 2 * ph, x.shape[4] + 2 * pw
            gx = np.zeros((n, c, dd, hh, ww), dtype=np.float32)
            for a in range(kd):
                for b_ in range(kh):
                    for c_ in range(kw):
                        gx[:, :, a : a + od * sd : sd, b_ : b_ + oh * sh : sh, c_ : c_ + ow * sw : sw] += gcols[
                            ..., a, b_, c_
                        ]
            if pd or ph or pw:
                gx = gx[:, :, pd : dd - pd, ph : hh - ph, pw : ww - pw]
            _accum(x, np.ascontiguousarray(gx))
        saved["cols2"] = None

    node = _node(out, (x, k), "conv3d", backward if (x.requires_grad or k.requires_grad) else None)
    if bias is not None:
        bias = _coerce(bias)
        node = add(node, reshape(bias, (1, -1, 1, 1, 1)))
    return node


def upsample3d_nearest(x, factor: int):
    """Nearest-neighbor upsampling of the three spatial axes."""
    f = int(factor)
    if not _any_tensor(x):
        x = np.asarray(x)
        return x.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)
    x = _coerce(x)
    if x.ndim != 5:
        raise ShapeError(f"upsample3d_nearest: need (N,C,D,H,W), got {x.shape}")
    out = x.data.repeat(f, axis=2).repeat(f, axis=3).repeat(f, axis=4)
    n, c, d, h, w = x.shape

    def backward(g):
        _accum(x, g.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)))

    return _node(out, (x,), "upsample3d_nearest", backward)


def _trilinear_index_weights(coords, dims):
    """Clamped corner indices and weights for center-based sampling."""
    d, h, w = dims
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"trilinear_sample: coords must be (M,3), got {pts.shape}")
    cz = np.clip(pts[:, 0], 0.0, d - 1.0)
    cy = np.clip(pts[:, 1], 0.0, h - 1.0)
    cx = np.clip(pts[:, 2], 0.0, w - 1.0)
    z0 = np.minimum(np.floor(cz).astype(np.int64), d - 1)
    y0 = np.minimum(np.floor(cy).astype(np.int64), h - 1)
    x0 = np.minimum(np.floor(cx).astype(np.int64), w - 1)
    z1 = np.minimum(z0 + 1, d - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fz, fy, fx = cz - z0, cy - y0, cx - x0
    corners = []
    for dz, iz in ((1.0 - fz, z0), (fz, z1)):
        for dy, iy in ((1.0 - fy, y0), (fy, y1)):
            for dx, ix in ((1.0 - fx, x0), (fx, x1)):
                corners.append((dz * dy * dx, iz, iy, ix))
    return corners


def trilinear_sample(x, coords):
    """Sample (N,C,D,H,W) at continuous center-based points (M,3) -> (N,C,M).

    Coordinates are in (d,h,w) order with voxel i centered at i; points are
    clamped to the grid. Gradients flow to ``x`` only; coords are geometry.
    """
    coords = np.asarray(coords)
    if not _any_tensor(x):
        x = np.asarray(x)
        corners = _trilinear_index_weights(coords, x.shape[2:])
        out = None
        for wgt, iz, iy, ix in corners:
            term = x[:, :, iz, iy, ix] * wgt.astype(x.dtype, copy=False)
            out = term if out is None else out + term
        return out
    x = _coerce(x)
    if x.ndim != 5:
        raise ShapeError(f"trilinear_sample: need (N,C,D,H,W), got {x.shape}")
    n, c, d, h, w = x.shape
    corners = _trilinear_index_weights(coords, (d, h, w))
    out = np.zeros((n, c, coords.shape[0]), dtype=np.float32)
    for wgt, iz, iy, ix in corners:
        out += x.data[:, :, iz, iy, ix] * wgt.astype(np.float32)

    def backward(g):
        gx = np.zeros((d * h * w, n, c), dtype=np.float32)
        gt = np.ascontiguousarray(g.transpose(2, 0, 1))  # (M, N, C)
        for wgt, iz, iy, ix in corners:
            flat = (iz * h + iy) * w + ix
            np.add.at(gx, flat, gt * wgt[:, None, None].astype(np.float32))
        _accum(x, np.ascontiguousarray(gx.transpose(1, 2, 0).reshape(n, c, d, h, w)))

    return _node(out, (x,), "trilinear_sample", backward)
