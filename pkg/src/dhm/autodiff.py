"""Dense-tensor reverse-mode automatic differentiation engine.

Eager micrograd-style design on numpy buffers: every operation computes its
result immediately and records a backward closure; ``backward`` replays the
graph in reverse topological order, accumulating gradients into ``.grad``.

Layout conventions: images are (H, W, C) row-major; sequences are (G, L, D).
float64 is the verification dtype, float32 the training default.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "AutodiffError", "ShapeError", "Adam",
    "add", "sub", "mul", "div", "neg", "matmul",
    "exp", "expm1", "sqrt", "softplus", "sigmoid", "silu", "gelu",
    "reshape", "permute", "concat", "slice_nd", "pad", "broadcast_to",
    "permute_rows", "tsum", "tmean", "layernorm", "avg_pool2d",
    "conv2d", "depthwise_conv2d", "transposed_conv2d",
    "eval_forward", "backward", "adam_step", "zero_grad",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class Tensor:
    """N-d array plus optional gradient buffer and graph record.

    ``_parents``/``_backward`` form the node record of the producing
    operation; leaves have ``_backward is None``. The graph is acyclic by
    construction (every op allocates a fresh output).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents",
                 "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g, fresh=False):
        """Add g into .grad; fresh=True lets a newly allocated, unaliased
        array be adopted without the defensive copy."""
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match value shape "
                f"{self.data.shape}")
        if self.grad is None:
            if fresh and g.dtype == self.data.dtype and g.flags.writeable:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None):
        backward(self, seed)

    def __repr__(self):
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_nd(self, key)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, op, backward_fn):
    out = Tensor(data)
    track = any(isinstance(p, Tensor) and (p.requires_grad or p._backward)
                for p in parents)
    if track:
        out.requires_grad = True
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = backward_fn
        out._op = op
    return out


def eval_forward(root: Tensor) -> np.ndarray:
    """Return the root's cached forward values (the graph is eager)."""
    if not isinstance(root, Tensor):
        raise AutodiffError("eval_forward expects a Tensor")
    return root.data


def backward(root: Tensor, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's .grad.

    ``root`` must be scalar unless an explicit seed gradient is supplied.
    """
    if root._backward is None and not root.requires_grad:
        raise AutodiffError("backward called on a tensor detached from any graph")
    if seed is None:
        if root.data.size != 1:
            raise AutodiffError(
                f"backward on non-scalar output of shape {root.data.shape} "
                "requires an explicit seed gradient")
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=root.data.dtype)
        if seed.shape != root.data.shape:
            raise ShapeError(
                f"seed shape {seed.shape} does not match root shape "
                f"{root.data.shape}")

    # Iterative topological sort; scan graphs can be deep.
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    root.accumulate_grad(seed)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_broadcast(a_shape, b_shape, op):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast")


def _unbroadcast(g, shape):
    """Sum gradient g down to the given operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), "add", bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))
    return _node(a.data - b.data, (a, b), "sub", bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape), fresh=True)
    return _node(a.data * b.data, (a, b), "mul", bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data),
                                           b.shape), fresh=True)
    return _node(a.data / b.data, (a, b), "div", bwd)


def neg(a):
    a = as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(-g, fresh=True)
    return _node(-a.data, (a,), "neg", bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul (stacked axes)")

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape), fresh=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape), fresh=True)
    return _node(np.matmul(a.data, b.data), (a, b), "matmul", bwd)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
#
# Forward/derivative kernels live in _UNARY_KERNELS so a test harness can
# swap a derivative out and confirm the gradient checker catches it.

def _softplus_np(x):
    # log(1 + e^x) via log1p(exp(-|x|)) + max(x, 0); overflow-free.
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _gelu_np(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def _d_exp(x, y):
    return y


def _d_expm1(x, y):
    return y + 1.0


def _d_sqrt(x, y):
    return 0.5 / y


def _d_softplus(x, y):
    return _sigmoid_np(x)


def _d_sigmoid(x, y):
    return y * (1.0 - y)


def _d_silu(x, y):
    s = _sigmoid_np(x)
    return s * (1.0 + x * (1.0 - s))


def _d_gelu(x, y):
    phi = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    return phi + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


_UNARY_KERNELS = {
    "exp": (np.exp, _d_exp),
    "expm1": (np.expm1, _d_expm1),
    "sqrt": (np.sqrt, _d_sqrt),
    "softplus": (_softplus_np, _d_softplus),
    "sigmoid": (_sigmoid_np, _d_sigmoid),
    "silu": (lambda x: x * _sigmoid_np(x), _d_silu),
    "gelu": (_gelu_np, _d_gelu),
}


def _unary(a, op):
    a = as_tensor(a)
    fwd = _UNARY_KERNELS[op][0]
    y = fwd(a.data)

    def bwd(g):
        if a.requires_grad:
            dfn = _UNARY_KERNELS[op][1]  # looked up at call time
            a.accumulate_grad(g * dfn(a.data, y), fresh=True)
    return _node(y, (a,), op, bwd)


def exp(a):
    return _unary(a, "exp")


def expm1(a):
    return _unary(a, "expm1")


def sqrt(a):
    return _unary(a, "sqrt")


def softplus(a):
    return _unary(a, "softplus")


def sigmoid(a):
    return _unary(a, "sigmoid")


def silu(a):
    return _unary(a, "silu")


def gelu(a):
    return _unary(a, "gelu")


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape):
    a = as_tensor(a)
    if np.prod(shape, dtype=np.int64) != a.data.size and -1 not in tuple(shape):
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}")
    old = a.shape

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(old))
    return _node(a.data.reshape(shape), (a,), "reshape", bwd)


def permute(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))
    return _node(a.data.transpose(axes), (a,), "permute", bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                i != axis and t.shape[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(
                f"concat along axis {axis}: shapes {ref} and {t.shape} differ "
                "off-axis")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])
    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), "concat", bwd)


def _normalize_key(key, shape):
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > len(shape):
        raise ShapeError(f"slice key {key} has more axes than shape {shape}")
    full = []
    for i, s in enumerate(shape):
        k = key[i] if i < len(key) else slice(None)
        if isinstance(k, int):
            k = slice(k, k + 1) if k != -1 else slice(-1, None)
        if not isinstance(k, slice) or k.step not in (None, 1):
            raise ShapeError("slice supports contiguous basic slices only")
        full.append(slice(*k.indices(s)))
    return tuple(full)


def slice_nd(a, key):
    a = as_tensor(a)
    full = _normalize_key(key, a.shape)
    old = a.shape

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros(old, dtype=g.dtype)
            buf[full] = g
            a.accumulate_grad(buf, fresh=True)
    return _node(a.data[full].copy(), (a,), "slice", bwd)


def pad(a, pad_width):
    """Zero-pad; pad_width is ((before, after), ...) per axis."""
    a = as_tensor(a)
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    if len(pad_width) != a.data.ndim:
        raise ShapeError(f"pad spec {pad_width} does not match rank of {a.shape}")
    inner = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.shape))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g[inner])
    return _node(np.pad(a.data, pad_width), (a,), "pad", bwd)


def broadcast_to(a, shape):
    a = as_tensor(a)
    _check_broadcast(a.shape, shape, "broadcast_to")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
    return _node(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast", bwd)


def permute_rows(a, idx, inv_idx=None):
    """Gather rows along axis 0 by a permutation index vector."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[0] != a.shape[0]:
        raise ShapeError(
            f"permutation of length {idx.shape[0]} applied to axis of extent "
            f"{a.shape[0]}")
    if inv_idx is None:
        inv_idx = np.argsort(idx)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g[inv_idx], fresh=True)
    return _node(a.data[idx], (a,), "permute_rows", bwd)


# ---------------------------------------------------------------------------
# reductions

def _axes_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _axes_tuple(axis, a.data.ndim)

    def bwd(g):
        if a.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axes)
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy(), fresh=True)
    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", bwd)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _axes_tuple(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def bwd(g):
        if a.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axes)
            a.accumulate_grad(np.broadcast_to(g / count, a.shape).copy(),
                              fresh=True)
    return _node(a.data.mean(axis=axes, keepdims=keepdims), (a,), "mean", bwd)


# ---------------------------------------------------------------------------
# normalization and pooling

def layernorm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply the affine pair."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match "
            f"feature extent {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0),
                                  fresh=True)
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0), fresh=True)
        if a.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (gx - m1 - xhat * m2), fresh=True)
    return _node(xhat * gamma.data + beta.data, (a, gamma, beta),
                 "layernorm", bwd)


def avg_pool2d(a, k):
    """Non-overlapping k-by-k mean pooling on an (H, W, C) map."""
    a = as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"avg_pool2d expects (H, W, C), got {a.shape}")
    h, w, c = a.shape
    if h % k or w % k:
        raise ShapeError(f"pool size {k} does not divide extents {(h, w)}")
    y = a.data.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3))

    def bwd(g):
        if a.requires_grad:
            gx = np.repeat(np.repeat(g, k, axis=0), k, axis=1) / (k * k)
            a.accumulate_grad(gx, fresh=True)
    return _node(y, (a,), "avg_pool2d", bwd)


# ---------------------------------------------------------------------------
# convolutions ((H, W, C) layout, zero padding)

def _conv_cols(xp, kh, kw, stride):
    # (Hp, Wp, C) -> (Ho, Wo, kh, kw, C) window view, strided by `stride`
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    v = v[::stride, ::stride]          # (Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(np.moveaxis(v, 2, 4))


def _col2im(gcols, xp_shape, kh, kw, stride):
    # adjoint of _conv_cols: scatter-add windows back onto the padded image
    gx = np.zeros(xp_shape, dtype=gcols.dtype)
    ho, wo = gcols.shape[:2]
    for i in range(kh):
        for j in range(kw):
            gx[i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                gcols[:, :, i, j, :]
    return gx


def _conv_out_extent(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution: x (H, W, Cin), w (kh, kw, Cin, Cout), zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects (H,W,Cin) and (kh,kw,Cin,Cout), "
                         f"got {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel "
                         f"{w.shape}")
    b = as_tensor(b) if b is not None else None
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    h, wd = x.shape[:2]
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")

    xp = np.pad(x.data, ((padding,) * 2, (padding,) * 2, (0, 0)))
    cols = _conv_cols(xp, kh, kw, stride)               # (Ho,Wo,kh,kw,Cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    y = cols.reshape(ho * wo, -1) @ wmat
    y = y.reshape(ho, wo, cout)
    if b is not None:
        y = y + b.data

    def bwd(g):
        gmat = g.reshape(ho * wo, cout)
        if b is not None and b.requires_grad:
            b.accumulate_grad(gmat.sum(axis=0), fresh=True)
        if w.requires_grad:
            gw = cols.reshape(ho * wo, -1).T @ gmat
            w.accumulate_grad(gw.reshape(w.shape), fresh=True)
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(ho, wo, kh, kw, cin)
            gxp = _col2im(gcols, xp.shape, kh, kw, stride)
            if padding:
                gxp = gxp[padding:padding + h, padding:padding + wd]
            x.accumulate_grad(gxp, fresh=True)
    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, "conv2d", bwd)


def depthwise_conv2d(x, w, b=None, stride=1, padding=0):
    """Per-channel convolution: x (H, W, C), w (kh, kw, C)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"depthwise_conv2d expects (H,W,C) and (kh,kw,C), "
                         f"got {x.shape} and {w.shape}")
    kh, kw, c = w.shape
    if x.shape[2] != c:
        raise ShapeError(f"depthwise channel mismatch: {x.shape} vs {w.shape}")
    b = as_tensor(b) if b is not None else None
    if b is not None and b.shape != (c,):
        raise ShapeError(f"depthwise bias shape {b.shape} != ({c},)")
    h, wd = x.shape[:2]
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(wd, kw, stride, padding)
    xp = np.pad(x.data, ((padding,) * 2, (padding,) * 2, (0, 0)))

    y = np.zeros((ho, wo, c), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            y += xp[i:i + stride * ho:stride, j:j + stride * wo:stride] * w.data[i, j]
    if b is not None:
        y = y + b.data

    def bwd(g):
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.reshape(-1, c).sum(axis=0), fresh=True)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    sl = xp[i:i + stride * ho:stride, j:j + stride * wo:stride]
                    gw[i, j] = (sl * g).reshape(-1, c).sum(axis=0)
            w.accumulate_grad(gw, fresh=True)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        g * w.data[i, j]
            if padding:
                gxp = gxp[padding:padding + h, padding:padding + wd]
            x.accumulate_grad(gxp, fresh=True)
    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, "depthwise_conv2d", bwd)


def transposed_conv2d(x, w, b=None, stride=1, padding=0):
    """Adjoint-of-convolution upsampling: x (H, W, Cin), w (kh, kw, Cin, Cout).

    Output extent is (H - 1) * stride + kh - 2 * padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects (H,W,Cin) and "
                         f"(kh,kw,Cin,Cout), got {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[2] != cin:
        raise ShapeError(f"transposed_conv2d channel mismatch: {x.shape} vs "
                         f"{w.shape}")
    b = as_tensor(b) if b is not None else None
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"transposed_conv2d bias shape {b.shape} != ({cout},)")
    h, wd = x.shape[:2]
    hf = (h - 1) * stride + kh
    wf = (wd - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"transposed_conv2d output would be empty for "
                         f"input {x.shape}")

    yf = np.zeros((hf, wf, cout), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            yf[i:i + stride * h:stride, j:j + stride * wd:stride] += \
                x.data @ w.data[i, j]
    y = yf[padding:padding + ho, padding:padding + wo]
    if b is not None:
        y = y + b.data

    def bwd(g):
        gf = np.zeros((hf, wf, cout), dtype=g.dtype)
        gf[padding:padding + ho, padding:padding + wo] = g
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.reshape(-1, cout).sum(axis=0), fresh=True)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    sl = gf[i:i + stride * h:stride, j:j + stride * wd:stride]
                    gw[i, j] = np.tensordot(x.data, sl, axes=([0, 1], [0, 1]))
            w.accumulate_grad(gw, fresh=True)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    sl = gf[i:i + stride * h:stride, j:j + stride * wd:stride]
                    gx += sl @ w.data[i, j].T
            x.accumulate_grad(gx, fresh=True)
    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, "transposed_conv2d", bwd)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias-corrected moments; clears grads after each step."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise AutodiffError(f"learning rate must be positive, got {lr}")
        b1, b2 = betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise AutodiffError(f"moment decay rates must lie in (0,1), got {betas}")
        if eps <= 0:
            raise AutodiffError(f"epsilon must be positive, got {eps}")
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                label = p.name if p.name else f"parameter #{i}"
                raise AutodiffError(f"adam step: missing gradient for {label}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def adam_step(opt: Adam) -> None:
    opt.step()
