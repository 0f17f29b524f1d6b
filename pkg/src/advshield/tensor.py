"""Dense float64 tensors with reverse-mode automatic differentiation.

Dynamic tape design: every operation whose inputs require gradients
records a closure that pushes the upstream gradient back to its parents.
Graphs are rebuilt per optimization step and freed with the last
reference, so independent graphs never share mutable state.

Subgradient conventions: sign'(0) = 0, abs'(0) = 0, clamp' = 0 at and
outside the bounds.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import resample

__all__ = [
    "Tensor",
    "as_tensor",
    "matmul",
    "softmax",
    "variance",
    "conv2d",
    "pool_avg",
    "resize",
    "grad_check",
]


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph ---------------------------------------------------------

    def backward(self):
        """Reverse-mode accumulation from a scalar root.

        Populates .grad on every requires_grad tensor reachable from this
        one. A second call on the same root is rejected; rebuild the graph
        instead of reusing it.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if self._backward_done:
            raise RuntimeError("backward() already ran on this graph; rebuild it to differentiate again")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, finished = stack.pop()
            if finished:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        # Leaves get zero-filled grads so "populated after backward" holds
        # even when every path to them has a zero subgradient.
        for node in topo:
            if node._grad_fn is None and node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._grad_fn is None:
                continue
            grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad = parent.grad + g
        self._backward_done = True

    # -- operator sugar --------------------------------------------------

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

    # -- method forms ------------------------------------------------------

    def abs(self):
        return absolute(self)

    def sign(self):
        return sign(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fn) -> Tensor:
    """Build a result node; graph edges are dropped when no parent needs them."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_data(a, b, op_name):
    ta, tb = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(ta.shape, tb.shape)
    except ValueError:
        raise ValueError(f"{op_name}: shape mismatch {ta.shape} vs {tb.shape}") from None
    return ta, tb


# -- elementwise --------------------------------------------------------


def add(a, b) -> Tensor:
    ta, tb = _binary_data(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _make(ta.data + tb.data, (ta, tb), grad_fn)


def sub(a, b) -> Tensor:
    ta, tb = _binary_data(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return _make(ta.data - tb.data, (ta, tb), grad_fn)


def mul(a, b) -> Tensor:
    ta, tb = _binary_data(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)

    return _make(ta.data * tb.data, (ta, tb), grad_fn)


def div(a, b) -> Tensor:
    ta, tb = _binary_data(a, b, "div")

    def grad_fn(g):
        ga = _unbroadcast(g / tb.data, ta.shape)
        gb = _unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape)
        return ga, gb

    return _make(ta.data / tb.data, (ta, tb), grad_fn)


def neg(a) -> Tensor:
    ta = as_tensor(a)
    return _make(-ta.data, (ta,), lambda g: (-g,))


def absolute(a) -> Tensor:
    ta = as_tensor(a)
    s = np.sign(ta.data)  # 0 at the kink
    return _make(np.abs(ta.data), (ta,), lambda g: (g * s,))


def sign(a) -> Tensor:
    ta = as_tensor(a)
    return _make(np.sign(ta.data), (ta,), lambda g: (None,))


def square(a) -> Tensor:
    ta = as_tensor(a)
    return _make(ta.data * ta.data, (ta,), lambda g: (2.0 * ta.data * g,))


def sqrt(a) -> Tensor:
    ta = as_tensor(a)
    y = np.sqrt(ta.data)
    return _make(y, (ta,), lambda g: (g / (2.0 * y),))


def tanh(a) -> Tensor:
    ta = as_tensor(a)
    y = np.tanh(ta.data)
    return _make(y, (ta,), lambda g: (g * (1.0 - y * y),))


def clamp(a, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp: lo {lo} exceeds hi {hi}")
    ta = as_tensor(a)
    inside = (ta.data > lo) & (ta.data < hi)
    return _make(np.clip(ta.data, lo, hi), (ta,), lambda g: (g * inside,))


# -- reductions and shape ops ------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    axes = _axis_tuple(axis, ta.ndim)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, ta.shape).copy(),)

    return _make(ta.data.sum(axis=axes, keepdims=keepdims), (ta,), grad_fn)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    ta = as_tensor(a)
    axes = _axis_tuple(axis, ta.ndim)
    count = 1
    for ax in axes:
        count *= ta.shape[ax]

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, ta.shape).copy(),)

    return _make(ta.data.mean(axis=axes, keepdims=keepdims), (ta,), grad_fn)


def reshape(a, shape) -> Tensor:
    ta = as_tensor(a)
    try:
        data = ta.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {ta.shape} as {shape}") from None
    return _make(data, (ta,), lambda g: (g.reshape(ta.shape),))


def transpose(a, axes=None) -> Tensor:
    ta = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(ta.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(ta.data, axes), (ta,), lambda g: (np.transpose(g, inverse),))


def select(a, axis: int, index: int) -> Tensor:
    """Slice out one index along an axis (the inverse scatter on backward)."""
    ta = as_tensor(a)
    axis = axis % ta.ndim
    data = np.take(ta.data, index, axis=axis)

    def grad_fn(g):
        full = np.zeros_like(ta.data)
        sl = [slice(None)] * ta.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make(data, (ta,), grad_fn)


# -- matmul / softmax / variance ----------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dimensions broadcast numpy-style."""
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim < 2 or tb.ndim < 2:
        raise ValueError(f"matmul: operands must have ndim >= 2, got {ta.shape} and {tb.shape}")
    if ta.shape[-1] != tb.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree, {ta.shape} vs {tb.shape}")
    try:
        data = np.matmul(ta.data, tb.data)
    except ValueError:
        raise ValueError(f"matmul: batch dimensions disagree, {ta.shape} vs {tb.shape}") from None

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(tb.data, -1, -2)), ta.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ta.data, -1, -2), g), tb.shape)
        return ga, gb

    return _make(data, (ta, tb), grad_fn)


def softmax(a, dim: int) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    ta = as_tensor(a)
    if not -ta.ndim <= dim < ta.ndim:
        raise ValueError(f"softmax: axis {dim} invalid for shape {ta.shape}")
    dim = dim % ta.ndim
    shifted = ta.data - ta.data.max(axis=dim, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=dim, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=dim, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (ta,), grad_fn)


def variance(a, dim: int) -> Tensor:
    """Population variance (1/n normalization) along one axis."""
    ta = as_tensor(a)
    if not -ta.ndim <= dim < ta.ndim:
        raise ValueError(f"variance: axis {dim} invalid for shape {ta.shape}")
    dim = dim % ta.ndim
    if ta.shape[dim] < 1:
        raise ValueError("variance: reduced axis must have size >= 1")
    centered = sub(ta, tmean(ta, axis=dim, keepdims=True))
    return tmean(square(centered), axis=dim)


# -- spatial ops --------------------------------------------------------


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation of x[c_in,h,w] with weight[c_out,c_in,kh,kw].

    Gradients flow to the input, the weights, and the bias. 2-D inputs are
    treated as a single channel.
    """
    tx = as_tensor(x)
    tw = as_tensor(weight)
    squeeze = tx.ndim == 2
    if squeeze:
        tx = reshape(tx, (1,) + tx.shape)
    if tx.ndim != 3 or tw.ndim != 4:
        raise ValueError(f"conv2d: expected x[c,h,w] and weight[o,c,kh,kw], got {tx.shape} and {tw.shape}")
    c_in, h, w = tx.shape
    c_out, c_w, kh, kw = tw.shape
    if c_w != c_in:
        raise ValueError(f"conv2d: input has {c_in} channels but weight expects {c_w}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({h + 2 * ph},{w + 2 * pw})")

    xp = np.pad(tx.data, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    out = np.einsum("ockl,chwkl->ohw", tw.data, win, optimize=True)
    tb = None
    if bias is not None:
        tb = as_tensor(bias)
        if tb.shape != (c_out,):
            raise ValueError(f"conv2d: bias shape {tb.shape} does not match {c_out} output channels")
        out = out + tb.data[:, None, None]
    oh, ow = out.shape[1:]

    def grad_fn(g):
        gx = gw = gb = None
        if tx.requires_grad:
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    patch = np.einsum("ohw,oc->chw", g, tw.data[:, :, ki, kj], optimize=True)
                    gxp[:, ki:ki + sh * oh:sh, kj:kj + sw * ow:sw] += patch
            gx = gxp[:, ph:ph + h, pw:pw + w]
        if tw.requires_grad:
            gw = np.einsum("ohw,chwkl->ockl", g, win, optimize=True)
        if tb is not None and tb.requires_grad:
            gb = g.sum(axis=(1, 2))
        return (gx, gw, gb) if tb is not None else (gx, gw)

    parents = (tx, tw, tb) if tb is not None else (tx, tw)
    result = _make(out, parents, grad_fn)
    if squeeze and c_out == 1:
        return select(result, 0, 0)
    return result


def pool_avg(x, kernel, stride=None, ceil_mode: bool = False) -> Tensor:
    """Average pooling over x[c,h,w] (or a bare [h,w] plane).

    Strict mode requires the window grid to tile the input exactly; with
    ceil_mode the trailing partial windows average over their valid cells
    only. The gradient spreads uniformly over each window.
    """
    tx = as_tensor(x)
    squeeze = tx.ndim == 2
    if squeeze:
        tx = reshape(tx, (1,) + tx.shape)
    if tx.ndim != 3:
        raise ValueError(f"pool_avg: expected x[c,h,w], got shape {tx.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    _, h, w = tx.shape
    if not ceil_mode:
        if kh > h or kw > w or (h - kh) % sh or (w - kw) % sw:
            raise ValueError(
                f"pool_avg: kernel {(kh, kw)} stride {(sh, sw)} does not tile input ({h},{w})"
            )
    rows = Tensor(resample.pool_matrix(h, kh, sh, ceil_mode))
    cols = Tensor(resample.pool_matrix(w, kw, sw, ceil_mode))
    out = matmul(matmul(rows, tx), transpose(cols))
    return select(out, 0, 0) if squeeze else out


def resize(x, target, mode: str) -> Tensor:
    """Resample x[c,h,w] to target (h', w') with nearest or bilinear weights.

    Nearest maps destination row i to source row floor(i*h/h'); bilinear
    uses the align-corners=false convention with edge clamping.
    """
    tx = as_tensor(x)
    squeeze = tx.ndim == 2
    if squeeze:
        tx = reshape(tx, (1,) + tx.shape)
    if tx.ndim != 3:
        raise ValueError(f"resize: expected x[c,h,w], got shape {tx.shape}")
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"resize: target dimensions must be >= 1, got {(th, tw)}")
    if mode == "nearest":
        build = resample.nearest_matrix
    elif mode == "bilinear":
        build = resample.bilinear_matrix
    else:
        raise ValueError(f"resize: unknown mode {mode!r}")
    _, h, w = tx.shape
    rows = Tensor(build(h, th))
    cols = Tensor(build(w, tw))
    out = matmul(matmul(rows, tx), transpose(cols))
    return select(out, 0, 0) if squeeze else out


def box_resize(x, target) -> Tensor:
    """Exact area-weighted (box filter) resampling; used by pooled resize paths."""
    tx = as_tensor(x)
    squeeze = tx.ndim == 2
    if squeeze:
        tx = reshape(tx, (1,) + tx.shape)
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"box_resize: target dimensions must be >= 1, got {(th, tw)}")
    _, h, w = tx.shape
    rows = Tensor(resample.box_matrix(h, th))
    cols = Tensor(resample.box_matrix(w, tw))
    out = matmul(matmul(rows, tx), transpose(cols))
    return select(out, 0, 0) if squeeze else out


# -- gradient checking ---------------------------------------------------


def grad_check(f, x, eps: float = 1e-5, coords=None, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor. Every coordinate of x is probed
    unless `coords` limits the count, in which case a seeded rng picks the
    subset. Relative error is |a - n| / max(1e-12, |a| + |n|).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    x0 = _as_array(x.data if isinstance(x, Tensor) else x).copy()
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: f(x) is not finite")
    out.backward()
    analytic = leaf.grad.reshape(-1)

    n = x0.size
    if coords is None or coords >= n:
        indices = range(n)
    else:
        gen = rng if rng is not None else np.random.default_rng(0)
        indices = np.sort(gen.choice(n, size=coords, replace=False))

    flat = x0.reshape(-1)
    worst = 0.0
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + eps
        fp = f(Tensor(x0.copy())).item()
        flat[idx] = orig - eps
        fm = f(Tensor(x0.copy())).item()
        flat[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"grad_check: non-finite value at coordinate {int(idx)}")
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[idx]
        err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
        if err > worst:
            worst = err
    return worst
