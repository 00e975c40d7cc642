"""Dense float64 tensors with reverse-mode differentiation.

All arrays are row-major contiguous float64. Every forward op validates
that its output is finite; a NaN/Inf aborts with the offending op named.
Gradients are accumulated by a single topological sweep over the recorded
graph, so each node's adjoint runs exactly once.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NumericFault",
    "tensor",
    "parameter",
    "zeros",
    "backward",
    "no_grad",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NumericFault(FloatingPointError):
    """A forward op produced NaN or Inf."""

    def __init__(self, op_id, op_kind):
        super().__init__(f"non-finite output of op #{op_id} ({op_kind})")
        self.op_id = op_id
        self.op_kind = op_kind


_NODE_COUNTER = 0


def _next_node_id():
    global _NODE_COUNTER
    _NODE_COUNTER += 1
    return _NODE_COUNTER


class _Node:
    """One recorded operation: kind, parent tensors, adjoint closure."""

    __slots__ = ("id", "kind", "parents", "backward_fn")

    def __init__(self, kind, parents, backward_fn):
        self.id = _next_node_id()
        self.kind = kind
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    return Tensor(data, requires_grad=True)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends graph recording.

    Useful for momentum-teacher forwards and evaluation, where retaining
    every intermediate would be wasted memory.
    """

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _tracked(*tensors):
    return _GRAD_ENABLED and any(
        t.requires_grad or t.node is not None for t in tensors)


def _make(kind, out_data, parents, backward_fn):
    """Finalize an op: finiteness check plus optional graph recording."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(out_data, dtype=np.float64, order="C")
    out.grad = None
    if _tracked(*parents):
        out.node = _Node(kind, tuple(parents), backward_fn)
        out.requires_grad = True
    else:
        out.node = None
        out.requires_grad = False
    if not np.all(np.isfinite(out.data)):
        raise NumericFault(out.node.id if out.node else -1, kind)
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", ad * bd, (a, b), bwd)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _make("div", ad / bd, (a, b), bwd)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul requires rank >= 1 operands")
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )
    ad, bd = a.data, b.data

    def bwd(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd) if ad.ndim > 1 else g * bd
            gb = ad.T @ g if ad.ndim > 1 else g * ad
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        if ad.ndim == 1:
            ga = ga.reshape(ad.shape) if ga.shape == ad.shape else _unbroadcast(ga, ad.shape)
            gb = np.multiply.outer(ad, g)
            return ga, _unbroadcast(gb, bd.shape)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", ad @ bd, (a, b), bwd)


def reshape(a, shape):
    a = _wrap(a)
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make("reshape", a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    a = _wrap(a)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def getitem(a, key):
    a = _wrap(a)
    shape = a.data.shape

    def bwd(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make("slice", a.data[key], (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]

    def bwd(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.ascontiguousarray(np.squeeze(p, axis=axis)) for p in parts)

    return _make("stack", np.stack([t.data for t in tensors], axis=axis),
                 tuple(tensors), bwd)


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    shape = a.data.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, shape).copy(),)

    return _make("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def exp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _make("exp", out_data, (a,), bwd)


def log(a):
    a = _wrap(a)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _make("log", np.log(ad), (a,), bwd)


def sqrt(a):
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out_data,)

    return _make("sqrt", out_data, (a,), bwd)


def square(a):
    a = _wrap(a)
    ad = a.data

    def bwd(g):
        return (2.0 * g * ad,)

    return _make("square", ad * ad, (a,), bwd)


def sin(a):
    a = _wrap(a)
    ad = a.data

    def bwd(g):
        return (g * np.cos(ad),)

    return _make("sin", np.sin(ad), (a,), bwd)


def cos(a):
    a = _wrap(a)
    ad = a.data

    def bwd(g):
        return (-g * np.sin(ad),)

    return _make("cos", np.cos(ad), (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-form GELU; smooth everywhere so adjoints match finite differences."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make("gelu", 0.5 * x * (1.0 + t), (a,), bwd)


def softmax(a, axis=-1):
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        gy = g * y
        return (gy - y * gy.sum(axis=axis, keepdims=True),)

    return _make("softmax", y, (a,), bwd)


def layer_norm(a, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _wrap(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = x.shape[-1]

    def bwd(g):
        gy = g * inv
        gx = gy - gy.mean(axis=-1, keepdims=True) \
            - y * (gy * y).mean(axis=-1, keepdims=True)
        return (gx,)

    return _make("layer_norm", y, (a,), bwd)


def pool2d(a, k, mode):
    """Pool non-overlapping k x k blocks of a (H, W, C) map."""
    a = _wrap(a)
    h, w, c = a.data.shape
    if h % k or w % k:
        raise ShapeError(f"pool2d: extents ({h},{w}) not divisible by {k}")
    blocks = a.data.reshape(h // k, k, w // k, k, c)
    merged = blocks.transpose(0, 2, 4, 1, 3).reshape(h // k, w // k, c, k * k)
    if mode == "max":
        idx = merged.argmax(axis=-1)
        out_data = np.take_along_axis(merged, idx[..., None], axis=-1)[..., 0]

        def bwd(g):
            gm = np.zeros_like(merged)
            np.put_along_axis(gm, idx[..., None], g[..., None], axis=-1)
            gx = gm.reshape(h // k, w // k, c, k, k).transpose(0, 3, 1, 4, 2)
            return (np.ascontiguousarray(gx.reshape(h, w, c)),)

    elif mode == "mean":
        out_data = merged.mean(axis=-1)

        def bwd(g):
            gm = np.broadcast_to(g[..., None] / (k * k), merged.shape)
            gx = gm.reshape(h // k, w // k, c, k, k).transpose(0, 3, 1, 4, 2)
            return (np.ascontiguousarray(gx.reshape(h, w, c)),)

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return _make(f"pool2d_{mode}", out_data, (a,), bwd)


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(cols.reshape(n, c * kh * kw, ho * wo)), ho, wo


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D convolution: x (N, C, H, W), w (O, C, kh, kw), optional bias (O,)."""
    x, w = _wrap(x), _wrap(w)
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        parents.append(b)
    n, c, h, w_in = x.data.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {cw}")
    if h + 2 * pad < kh or w_in + 2 * pad < kw:
        raise ShapeError("conv2d: padded extents smaller than kernel")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wf = w.data.reshape(o, c * kh * kw)
    out_data = np.einsum("ok,nkl->nol", wf, cols).reshape(n, o, ho, wo)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]

    def bwd(g):
        gf = g.reshape(n, o, ho * wo)
        gw = np.einsum("nol,nkl->ok", gf, cols).reshape(o, c, kh, kw)
        gcols = np.einsum("ok,nol->nkl", wf, gf).reshape(n, c, kh, kw, ho, wo)
        gx = np.zeros((n, c, h + 2 * pad, w_in + 2 * pad))
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] \
                    += gcols[:, :, i, j]
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make("conv2d", out_data, tuple(parents), bwd)


def l2_norm(a):
    """Euclidean norm of the flattened tensor, as a composition of primitives."""
    return sqrt(sum_(square(a)))


# ---------------------------------------------------------------------------
# graph and backward
# ---------------------------------------------------------------------------

class Graph:
    """Topologically ordered view of the recorded operations under a root."""

    def __init__(self, ordered):
        self.tensors = ordered  # leaves first, root last

    @property
    def nodes(self):
        return [t.node for t in self.tensors if t.node is not None]

    @classmethod
    def from_root(cls, root):
        ordered = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if id(t) in seen:
                continue
            if expanded or t.node is None:
                seen.add(id(t))
                ordered.append(t)
            else:
                stack.append((t, True))
                for p in t.node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        return cls(ordered)

    def reaches(self, leaf):
        return any(t is leaf for t in self.tensors)


def backward(root, graph=None):
    """Reverse sweep from a scalar root.

    Returns a map node-id -> gradient array and writes ``.grad`` on every
    requires_grad leaf. Each node's adjoint is invoked exactly once.
    """
    if root.data.ndim != 0 and root.data.size != 1:
        raise ShapeError("backward root must be scalar")
    if graph is None:
        graph = Graph.from_root(root)
    grads = {id(root): np.ones_like(root.data)}
    node_grads = {}
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is not None:
            node_grads[t.node.id] = g
            parent_grads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if not (p.requires_grad or p.node is not None):
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        elif t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
    return node_grads
