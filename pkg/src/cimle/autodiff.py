"""Dense float32 tensors (float64 on request) with tape-based reverse-mode differentiation.

Only the handful of ops the generators and distance metrics need are
provided. Recording is explicit::

    with recording():
        loss = sum_(square(w @ x))
    grads = backward(loss)      # {param: ndarray}

Outside a ``recording()`` block ops compute values only and allocate no tape.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

DTYPE = np.float32
LEAKY_SLOPE = 0.2

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "depth", 0) > 0


@contextlib.contextmanager
def recording():
    """Record a tape for every op executed in this thread inside the block."""
    _state.depth = getattr(_state, "depth", 0) + 1
    try:
        yield
    finally:
        _state.depth -= 1


def compute_dtype():
    """Float type of newly created tensors in this thread (float32 unless overridden)."""
    return getattr(_state, "dtype", DTYPE)


@contextlib.contextmanager
def precision(dtype):
    """Compute in ``dtype`` inside the block; used to verify gradients in float64."""
    prev = compute_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_recording():
    prev = getattr(_state, "depth", 0)
    _state.depth = 0
    try:
        yield
    finally:
        _state.depth = prev


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable array value plus (optionally) the tape node that produced it."""

    __slots__ = ("data", "requires_grad", "op", "parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=compute_dtype())
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents = ()
        self._vjp = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=compute_dtype()))


def _make(data, op, parents, vjp) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(x, slope=LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, DTYPE(1.0), DTYPE(slope))
    return _make(x.data * scale, "leaky_relu", (x,), lambda g: (g * scale,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * sign,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, "square", (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x) -> Tensor:
    """Square root; the derivative at 0 is taken as 0 (norm subgradient)."""
    x = as_tensor(x)
    y = np.sqrt(x.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(y > 0, 0.5 / y, 0.0).astype(compute_dtype())
    return _make(y, "sqrt", (x,), lambda g: (g * d,))


# -- reductions (accumulate in float64) -----------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, dtype=np.float64).astype(compute_dtype())
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def vjp(g):
        return (np.broadcast_to(g.reshape(kept), x.shape).astype(compute_dtype()),)

    return _make(y, "sum", (x,), vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    y = (x.data.sum(axis=axes, dtype=np.float64) / count).astype(compute_dtype())
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def vjp(g):
        return (np.broadcast_to(g.reshape(kept) / count, x.shape).astype(compute_dtype()),)

    return _make(y, "mean", (x,), vjp)


# -- shape ops -------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(y, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis for NCHW tensors)."""
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            n != r for i, (n, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), "concat", tuple(ts), vjp)


def tile_spatial(x, h, w) -> Tensor:
    """Broadcast an (N, C) tensor to (N, C, h, w)."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"tile_spatial: expected (N, C), got {x.shape}")
    y = np.broadcast_to(x.data[:, :, None, None], x.shape + (h, w)).copy()
    return _make(y, "tile", (x,), lambda g: (g.sum(axis=(2, 3)),))


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.data @ b.data,
        "matmul",
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


_COL_BUDGET = 1 << 22  # im2col elements per chunk


def _windows(xp, kh, kw, stride, ho, wo):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _cols(win):
    """``(C*kh*kw, n*ho*wo)`` columns for a slice of windows ``(n, C, ho, wo, kh, kw)``."""
    n, c, ho, wo, kh, kw = win.shape
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def conv2d(x, w, b=None, stride=1, padding=None) -> Tensor:
    """2-D cross-correlation on NCHW input with OIHW weights and zero padding.

    ``padding`` defaults to ``kernel_size // 2`` ("same" size at stride 1).
    The batch is processed in chunks so the column buffer stays small.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    pad = kh // 2 if padding is None else padding
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _windows(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(o, -1)
    step = max(1, _COL_BUDGET // max(c * kh * kw * ho * wo, 1))
    out = np.empty((n, o, ho, wo), dtype=np.result_type(x.data, w.data))
    for s in range(0, n, step):
        m = min(step, n - s)
        out[s : s + m] = (wmat @ _cols(win[s : s + m])).reshape(o, m, ho, wo).transpose(1, 0, 2, 3)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} outputs")
        out += b.data[:, None, None]
        parents = (x, w, b)

    def vjp(g):
        gw = np.zeros(wmat.shape, dtype=compute_dtype())
        gxp = np.zeros(xp.shape, dtype=compute_dtype())
        for s in range(0, n, step):
            m = min(step, n - s)
            gm = g[s : s + m].transpose(1, 0, 2, 3).reshape(o, -1)
            gw += gm @ _cols(win[s : s + m]).T
            gcols = (wmat.T @ gm).reshape(c, kh, kw, m, ho, wo)
            for i in range(kh):
                for j in range(kw):
                    gxp[s : s + m, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, i, j
                    ].transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        grads = (gx, gw.reshape(w.shape))
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, "conv2d", parents, vjp)


# -- resampling ------------------------------------------------------------------


def _bilinear_matrix(n):
    """(2n, n) interpolation matrix for 2x upsampling with half-pixel centres."""
    m = np.zeros((2 * n, n), dtype=compute_dtype())
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        m[o, min(max(lo, 0), n - 1)] += 1.0 - frac
        m[o, min(max(lo + 1, 0), n - 1)] += frac
    return m


def upsample2x(x, mode="nearest") -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected NCHW, got {x.shape}")
    if mode == "nearest":
        y = x.data.repeat(2, axis=2).repeat(2, axis=3)
        n, c, h, w = x.shape

        def vjp(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _make(y, "upsample_nearest", (x,), vjp)
    if mode == "bilinear":
        uh = _bilinear_matrix(x.shape[2])
        uw = _bilinear_matrix(x.shape[3])
        y = np.einsum("ph,nchw,qw->ncpq", uh, x.data, uw, optimize=True)

        def vjp(g):
            return (np.einsum("ph,ncpq,qw->nchw", uh, g, uw, optimize=True).astype(compute_dtype()),)

        return _make(y.astype(compute_dtype()), "upsample_bilinear", (x,), vjp)
    raise ValueError(f"upsample2x: unknown mode {mode!r}")


# -- differentiation -------------------------------------------------------------


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict:
    """Gradients of a scalar ``root`` with respect to every leaf that requires grad.

    Returns a dict keyed by the leaf ``Tensor`` objects.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads = {id(root): np.ones(root.shape, dtype=compute_dtype())}
    leaves = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=compute_dtype())
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


# -- optimizers ------------------------------------------------------------------


def sgd_step(params, grads, lr):
    """In-place ``p <- p - lr * g`` for every parameter with a gradient."""
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: grad shape {g.shape} != param shape {p.shape}")
        p.data = (p.data - lr * g).astype(p.data.dtype)


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def step(self, grads):
        sgd_step(self.params, grads, self.lr)


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros(p.shape, dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * np.square(g, dtype=np.float64)
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


def make_optimizer(kind, params, lr):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
