"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the sparse-encoding / completion / decoding pipeline needs
are provided. Broadcasting is limited to leading batch axes: two operands must
have equal shapes, or the shorter shape must be a suffix of the longer one.

The graph is recorded dynamically while the forward pass runs and released
after :meth:`Tensor.backward` unless ``retain_graph`` is requested.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

from .errors import ContractError, DomainError, ParameterError, ShapeError, TokenIndexError

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def mac_counter():
    """Tally multiply-accumulates of every matmul and conv3d run inside the block.

    Yields a dict ``{"matmul": int, "conv3d": int}`` updated in place.
    """
    prev = getattr(_state, "macs", None)
    tally = {"matmul": 0, "conv3d": 0}
    _state.macs = tally
    try:
        yield tally
    finally:
        _state.macs = prev


def _count_macs(kind, n):
    tally = getattr(_state, "macs", None)
    if tally is not None:
        tally[kind] += int(n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- autodiff ---------------------------------------------------------
    def backward(self, retain_graph=False):
        """Populate ``grad`` on every reachable tensor that requires it.

        Leaf gradients accumulate across calls; intermediate gradients are
        overwritten.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward called on a tensor that does not require grad")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ContractError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._parents = ()
                    node._backward = None


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def make_node(data, parents, backward, op):
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_leading_broadcast(sa, sb, op):
    if sa == sb or len(sa) == 0 or len(sb) == 0:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {sa} and {sb} are not leading-axis broadcastable")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- elementwise arithmetic -----------------------------------------------

def add(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_leading_broadcast(a.shape, b.shape, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_leading_broadcast(a.shape, b.shape, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_leading_broadcast(a.shape, b.shape, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_leading_broadcast(a.shape, b.shape, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "div")


def matmul(a, b):
    """Batched contraction ``[..., m, k] @ [..., k, n]``.

    ``b`` may omit leading batch axes (a shared weight matrix).
    """
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    _check_leading_broadcast(a.shape[:-2], b.shape[:-2], "matmul")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    out = a.data @ b.data
    _count_macs("matmul", out.size * a.shape[-1])
    return make_node(out, (a, b), backward, "matmul")


# -- shape ops --------------------------------------------------------------

def reshape(x, shape):
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return make_node(data, (x,), backward, "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return make_node(np.transpose(x.data, axes), (x,), backward, "transpose")


def getitem(x, key):
    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return make_node(x.data[key], (x,), backward, "getitem")


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def expand_axis(x, axis, size):
    """Insert ``axis`` and repeat ``x`` ``size`` times along it."""
    ax = axis if axis >= 0 else x.ndim + 1 + axis
    data = np.repeat(np.expand_dims(x.data, ax), size, axis=ax)

    def backward(g):
        return (g.sum(axis=ax),)

    return make_node(data, (x,), backward, "expand")


def tsum(x, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(x.shape[a] for a in axes)
    return tsum(x, axis, keepdims) * (1.0 / count)


def mean_pool(z, axis):
    """Average over ``axis`` (the token axis for global feature pooling)."""
    return mean(z, axis=axis)


def stop_gradient(x):
    out = Tensor(x.data)
    out.op = "stop_gradient"
    return out


# -- nonlinearities -----------------------------------------------------------

def sigmoid(x):
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (x,), backward, "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return make_node(0.5 * xd * (1.0 + t), (x,), backward, "gelu")


def log(x):
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive input; clamp first")

    def backward(g):
        return (g / x.data,)

    return make_node(np.log(x.data), (x,), backward, "log")


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return make_node(out, (x,), backward, "exp")


def clamp(x, lo=None, hi=None):
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (x.data >= lo_) & (x.data <= hi_)

    def backward(g):
        return (g * inside,)

    return make_node(np.clip(x.data, lo_, hi_), (x,), backward, "clamp")


def softmax(x, axis=-1, temperature=1.0):
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return make_node(out, (x,), backward, "softmax")


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if not eps > 0:
        raise ParameterError("layernorm eps must be > 0")
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layernorm: affine shapes {gain.shape}/{bias.shape} do not match last axis {c}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return make_node(xhat * gain.data + bias.data, (x, gain, bias), backward, "layernorm")


# -- token routing ------------------------------------------------------------

def _check_indices(indices, n):
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TokenIndexError(f"token indices must be integers, got {idx.dtype}")
    if idx.ndim not in (1, 2):
        raise TokenIndexError(f"token indices must be 1-D or batched 2-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise TokenIndexError(f"token index out of range [0, {n})")
    srt = np.sort(idx, axis=-1)
    if idx.shape[-1] > 1 and np.any(srt[..., 1:] == srt[..., :-1]):
        raise TokenIndexError("duplicate token index")
    return idx


def _row_selector(idx):
    if idx.ndim == 1:
        return (idx,)
    return (np.arange(idx.shape[0])[:, None], idx)


def gather_tokens(z, indices):
    """Select rows ``indices`` along the token axis, preserving their order.

    ``z`` is ``[n, ...]`` with 1-D indices or ``[B, n, ...]`` with ``[B, K]``.
    """
    axis = 0 if np.ndim(indices) == 1 else 1
    idx = _check_indices(indices, z.shape[axis])
    sel = _row_selector(idx)

    def backward(g):
        full = np.zeros_like(z.data)
        full[sel] = g
        return (full,)

    return make_node(z.data[sel], (z,), backward, "gather")


def scatter_tokens(z, indices, n):
    """Place rows of ``z`` at ``indices`` in a zero sequence of length ``n``."""
    axis = 0 if np.ndim(indices) == 1 else 1
    idx = _check_indices(indices, n)
    if idx.shape[-1] != z.shape[axis]:
        raise ShapeError(f"scatter: {idx.shape[-1]} indices for {z.shape[axis]} rows")
    sel = _row_selector(idx)
    shape = list(z.shape)
    shape[axis] = n
    out = np.zeros(shape, dtype=z.dtype)
    out[sel] = z.data

    def backward(g):
        return (g[sel],)

    return make_node(out, (z,), backward, "scatter")


# -- volumetric ops -----------------------------------------------------------

def conv3d(x, weight, bias=None):
    """Same-padded stride-1 3D convolution, channels-last.

    ``x`` is ``[B, H, W, D, Cin]``, ``weight`` is ``[k, k, k, Cin, Cout]`` with odd ``k``.
    Computed as a sum of shifted matmuls to keep memory at one slab per offset.
    """
    k = weight.shape[0]
    if weight.ndim != 5 or weight.shape[:3] != (k, k, k) or k % 2 == 0:
        raise ShapeError(f"conv3d: weight must be [k,k,k,Cin,Cout] with odd k, got {weight.shape}")
    if x.ndim != 5 or x.shape[-1] != weight.shape[3]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with weight {weight.shape}")
    pad = k // 2
    _, h, w, d, cin = x.shape
    cout = weight.shape[4]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    offsets = [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]
    out = np.zeros(x.shape[:4] + (cout,), dtype=np.result_type(x.data, weight.data))
    for a, b, c in offsets:
        out += xp[:, a:a + h, b:b + w, c:c + d, :] @ weight.data[a, b, c]
    _count_macs("conv3d", out.size * cin * len(offsets))
    parents = (x, weight)
    if bias is not None:
        out += bias.data
        parents = (x, weight, bias)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a, b, c in offsets:
                gxp[:, a:a + h, b:b + w, c:c + d, :] += g @ weight.data[a, b, c].T
            gx = gxp[:, pad:pad + h, pad:pad + w, pad:pad + d, :]
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            g2 = g.reshape(-1, cout)
            for a, b, c in offsets:
                gw[a, b, c] = xp[:, a:a + h, b:b + w, c:c + d, :].reshape(-1, cin).T @ g2
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw, gb)[:len(parents)]

    return make_node(out, parents, backward, "conv3d")


def upsample_nearest(x, factor):
    """Nearest-neighbour upsampling of the three spatial axes of ``[B, H, W, D, C]``."""
    f = int(factor)
    if f == 1:
        return x
    out = x.data
    for ax in (1, 2, 3):
        out = np.repeat(out, f, axis=ax)
    b, h, w, d, c = x.shape

    def backward(g):
        return (g.reshape(b, h, f, w, f, d, f, c).sum(axis=(2, 4, 6)),)

    return make_node(out, (x,), backward, "upsample")
