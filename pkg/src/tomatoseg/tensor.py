"""Dense float32 tensors with reverse-mode automatic differentiation.

Every value flowing through the network is a :class:`Tensor`: a row-major
float32 ndarray plus an optional gradient slot. Operations eagerly compute
their result and, when any input participates in differentiation, record a
backward closure. :func:`backward` replays those records in reverse creation
order, which is a valid topological order because an operation's inputs
always exist before its output.

Layout convention is channel-last (H, W, C). Reductions accumulate in
float64 and store float32 results. Any op that would produce NaN/Inf raises
:class:`NumericError` naming itself.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    CorruptIndexError,
    NumericError,
    ShapeError,
)

_node_ids = itertools.count()
_grad_enabled = True
_nan_checks = True
_dtype = np.float32
# Name of an op whose backward is deliberately corrupted; used only by the
# gradcheck self-test to prove the harness detects a wrong gradient.
_fault_op: str | None = None


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def promoted_precision():
    """Evaluate ops in float64 inside the block.

    Reserved for the finite-difference oracle: difference quotients of a
    float32-stored scalar cannot resolve small gradients, so the oracle
    re-evaluates the same computation with 64-bit accumulation. Stored
    parameters stay float32; only op results are promoted.
    """
    global _dtype
    prev = _dtype
    _dtype = np.float64
    try:
        yield
    finally:
        _dtype = prev


@contextmanager
def inject_backward_fault(op: str):
    """Corrupt the backward rule of ``op`` inside the block (test aid)."""
    global _fault_op
    prev = _fault_op
    _fault_op = op
    try:
        yield
    finally:
        _fault_op = prev


def set_nan_checks(enabled: bool) -> None:
    global _nan_checks
    _nan_checks = enabled


class Tensor:
    """A dense float32 array with an optional gradient of identical dims."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_backward", "_nid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=_dtype)
        if _nan_checks and not np.all(np.isfinite(arr)):
            raise NumericError("tensor", "constructor received non-finite data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._op = "leaf"
        self._parents: tuple = ()
        self._backward = None
        self._nid = next(_node_ids)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got dims {self.dims}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(dims={self.dims}, op={self._op}, requires_grad={self.requires_grad})"

    # Operator sugar; the free functions below are the primary surface.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class PoolIndices:
    """Argmax positions recorded by ``maxpool2x2`` for the paired unpooling.

    ``argmax`` holds one flat index into the pre-pool tensor per pooled
    element; within each window the index attains the window maximum, ties
    resolved to the first position in row-major scan order.
    """

    __slots__ = ("dims", "argmax", "src_dims")

    def __init__(self, dims: tuple, argmax: np.ndarray, src_dims: tuple):
        self.dims = tuple(dims)
        self.argmax = np.ascontiguousarray(argmax, dtype=np.int64)
        self.src_dims = tuple(src_dims)


class ComputeGraph:
    """Operation records reachable from a root, in creation (append) order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: "Tensor") -> "ComputeGraph":
        seen = set()
        stack = [root]
        nodes = []
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._nid)
        return cls(nodes)


def _result(data, op: str, parents: tuple, backward_fn) -> Tensor:
    """Wrap an op output, attaching the backward record when needed."""
    arr = np.ascontiguousarray(data, dtype=_dtype)
    if _nan_checks and not np.isfinite(arr.sum(dtype=np.float64)):
        # cheap single-pass probe; only a genuinely non-finite value or an
        # astronomically large sum lands here, so confirm before raising
        if not np.all(np.isfinite(arr)):
            raise NumericError(op)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out._nid = next(_node_ids)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._op = op
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._op = op
        out._parents = ()
        out._backward = None
    return out


def backward(root: Tensor) -> None:
    """Populate ``grad`` of every parameter reachable from a scalar root."""
    if root.data.size != 1:
        raise ContractError(f"backward requires a scalar root, got dims {root.dims}")
    if root._backward is None:
        if root.requires_grad:
            root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
        return
    graph = ComputeGraph.trace(root)
    buffers: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    # graph.nodes strongly references every recorded tensor, so id() keys
    # cannot be recycled while backward runs.
    for node in reversed(graph.nodes):
        g = buffers.pop(id(node), None)
        if g is None:
            continue
        contribs = node._backward(g)
        if _fault_op is not None and node._op == _fault_op:
            contribs = tuple(None if c is None else 1.25 * c for c in contribs)
        for parent, pg in zip(node._parents, contribs):
            if pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float32)
            if parent._backward is not None:
                key = id(parent)
                if key in buffers:
                    buffers[key] = buffers[key] + pg
                else:
                    buffers[key] = pg
            elif parent.requires_grad:
                if parent.grad is None:
                    parent.grad = pg.copy()
                else:
                    parent.grad = parent.grad + pg


# ---------------------------------------------------------------------------
# elementwise ops


def _check_same_dims(a: Tensor, b: Tensor, op: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{op}: dims {a.dims} vs {b.dims}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + np.float32(c), "add", (a,), lambda g: (g,))
    _check_same_dims(a, b, "add")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data - np.float32(c), "sub", (a,), lambda g: (g,))
    _check_same_dims(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same_dims(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return g / bd, -g * ad / (bd * bd)

    return _result(out, "div", (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s32 = np.float32(s)
    return _result(a.data * s32, "scale", (a,), lambda g: (g * s32,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def powc(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent; data must be >= 0."""
    e = float(exponent)
    ad = a.data
    out = np.power(ad, e, dtype=np.float64).astype(_dtype)

    def bwd(g):
        base = np.power(np.maximum(ad, 1e-12), e - 1.0, dtype=np.float64)
        return ((e * base).astype(np.float32) * g,)

    return _result(out, "powc", (a,), bwd)


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result(out, "log", (a,), lambda g: (g / ad,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    f = np.float32(floor)
    mask = a.data > f
    return _result(np.where(mask, a.data, f), "clamp_min", (a,), lambda g: (g * mask,))


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, scale."""
    if op_kind == "add":
        return add(a, b)
    if op_kind == "sub":
        return sub(a, b)
    if op_kind == "mul":
        return mul(a, b)
    if op_kind == "relu":
        return relu(a)
    if op_kind == "scale":
        return scale(a, b)
    raise ConfigError(f"unknown elementwise op kind '{op_kind}'")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, dims) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.dims} as {dims}")
    src = a.dims
    return _result(a.data.reshape(dims), "reshape", (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(len(a.dims))):
        raise ShapeError(f"permute: axes {axes} invalid for dims {a.dims}")
    inv = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(np.transpose(a.data, axes)),
        "permute",
        (a,),
        lambda g: (np.ascontiguousarray(np.transpose(g, inv)),),
    )


def transpose(a: Tensor) -> Tensor:
    if len(a.dims) != 2:
        raise ShapeError(f"transpose expects a matrix, got dims {a.dims}")
    return permute(a, (1, 0))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    nd = len(a.dims)
    axis = axis % nd
    if start < 0 or start + length > a.dims[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis {axis} of {a.dims}")
    sl = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(nd))
    src = a.dims

    def bwd(g):
        full = np.zeros(src, dtype=np.float32)
        full[sl] = g
        return (full,)

    return _result(a.data[sl].copy(), "narrow", (a,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat of nothing")
    nd = len(ts[0].dims)
    axis = axis % nd
    for t in ts[1:]:
        if len(t.dims) != nd or any(
            t.dims[i] != ts[0].dims[i] for i in range(nd) if i != axis
        ):
            raise ShapeError(f"concat: dims {t.dims} vs {ts[0].dims} on axis {axis}")
    widths = [t.dims[axis] for t in ts]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        outs = []
        for k in range(len(ts)):
            sl = tuple(
                slice(None) if i != axis else slice(offsets[k], offsets[k + 1])
                for i in range(nd)
            )
            outs.append(np.ascontiguousarray(g[sl]))
        return tuple(outs)

    return _result(np.concatenate([t.data for t in ts], axis=axis), "concat", tuple(ts), bwd)


def stack(tensors) -> Tensor:
    """Stack equal-dims tensors along a new leading axis."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("stack of nothing")
    for t in ts[1:]:
        _check_same_dims(ts[0], t, "stack")

    def bwd(g):
        return tuple(np.ascontiguousarray(g[k]) for k in range(len(ts)))

    return _result(np.stack([t.data for t in ts], axis=0), "stack", tuple(ts), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_axes(a: Tensor, axes) -> Tensor:
    axes = tuple(sorted(ax % len(a.dims) for ax in axes))
    out = a.data.sum(axis=axes, dtype=np.float64).astype(_dtype)
    src = a.dims

    def bwd(g):
        gx = g
        for ax in axes:
            gx = np.expand_dims(gx, ax)
        return (np.broadcast_to(gx, src).astype(np.float32),)

    return _result(out, "sum_axes", (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = _dtype(a.data.sum(dtype=np.float64))
    src = a.dims
    return _result(out, "sum_all", (a,), lambda g: (np.full(src, g.reshape(()), dtype=np.float32),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = _dtype(a.data.sum(dtype=np.float64) / n)
    src = a.dims
    return _result(
        out, "mean_all", (a,), lambda g: (np.full(src, g.reshape(()) / n, dtype=np.float32),)
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.dims) != 2 or len(b.dims) != 2:
        raise ShapeError(f"matmul expects matrices, got {a.dims} @ {b.dims}")
    if a.dims[1] != b.dims[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.dims} @ {b.dims}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, "matmul", (a, b), bwd)


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a vector over the last axis (broadcast across leading axes)."""
    if len(bias.dims) != 1 or bias.dims[0] != a.dims[-1]:
        raise ShapeError(f"add_bias: bias {bias.dims} does not match last axis of {a.dims}")
    lead = tuple(range(len(a.dims) - 1))

    def bwd(g):
        return g, g.sum(axis=lead, dtype=np.float64).astype(np.float32)

    return _result(a.data + bias.data, "add_bias", (a, bias), bwd)


def linear(a: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(a, weight)
    if bias is not None:
        out = add_bias(out, bias)
    return out


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding=None) -> Tensor:
    """Cross-correlation (no kernel flip) over a channel-last image.

    x: (H, W, Cin), w: (kh, kw, Cin, Cout), bias: (Cout,) or None.
    """
    if len(x.dims) != 3 or len(w.dims) != 4:
        raise ShapeError(f"conv2d: x dims {x.dims}, w dims {w.dims}")
    kh, kw, cin, cout = w.dims
    H, W, C = x.dims
    if C != cin:
        raise ShapeError(f"conv2d: input channels {C} != kernel channels {cin}")
    if padding is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d: even kernel requires explicit padding")
        padding = (kh // 2, kw // 2)
    if isinstance(padding, int):
        padding = (padding, padding)
    ph, pw = padding
    hp, wp = H + 2 * ph, W + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({hp},{wp})")
    hout = (hp - kh) // stride + 1
    wout = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    wd = w.data
    if stride == 1:
        # accumulate one matmul per kernel offset instead of materializing
        # the full window tensor
        y = None
        for di in range(kh):
            for dj in range(kw):
                term = xp[di : di + hout, dj : dj + wout, :] @ wd[di, dj]
                y = term if y is None else y + term
    else:
        s0, s1, s2 = xp.strides
        win = np.lib.stride_tricks.as_strided(
            xp,
            shape=(hout, wout, kh, kw, cin),
            strides=(s0 * stride, s1 * stride, s0, s1, s2),
            writeable=False,
        )
        y = np.tensordot(win, wd, axes=([2, 3, 4], [0, 1, 2]))
    if bias is not None:
        if bias.dims != (cout,):
            raise ShapeError(f"conv2d: bias dims {bias.dims}, expected ({cout},)")
        y = y + bias.data

    def bwd(g):
        gflat = g.reshape(hout * wout, cout)
        gw = np.empty_like(wd)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                if stride == 1:
                    patch = xp[di : di + hout, dj : dj + wout, :]
                else:
                    patch = xp[di : di + stride * hout : stride, dj : dj + stride * wout : stride, :]
                gw[di, dj] = patch.reshape(hout * wout, cin).T @ gflat
                gxp[di : di + stride * hout : stride, dj : dj + stride * wout : stride, :] += (
                    g @ wd[di, dj].T
                )
        gx = gxp[ph : ph + H, pw : pw + W, :]
        if bias is not None:
            gb = g.sum(axis=(0, 1), dtype=np.float64).astype(np.float32)
            return gx, gw, gb
        return gx, gw

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(y, "conv2d", parents, bwd)


# ---------------------------------------------------------------------------
# normalization


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over the spatial axes of an (H, W, C) map.

    Train mode normalizes with the current statistics and folds them into
    the running buffers as running = m*running + (1-m)*current; eval mode
    normalizes with the running buffers only.
    """
    if len(x.dims) != 3:
        raise ShapeError(f"batchnorm expects (H, W, C), got {x.dims}")
    C = x.dims[-1]
    if gamma.dims != (C,) or beta.dims != (C,):
        raise ShapeError(f"batchnorm: scale/shift dims must be ({C},)")
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 1), dtype=np.float64)
        xc = xd - mu.astype(xd.dtype)
        var = np.square(xc).mean(axis=(0, 1), dtype=np.float64)
        running_mean[:] = (momentum * running_mean + (1.0 - momentum) * mu).astype(np.float32)
        running_var[:] = (momentum * running_var + (1.0 - momentum) * var).astype(np.float32)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        xc = xd - mu.astype(xd.dtype)
    ivstd = 1.0 / np.sqrt(var + eps)
    ivstd_c = ivstd.astype(xd.dtype)
    xhat = xc * ivstd_c
    y = xhat * gamma.data + beta.data
    n = x.dims[0] * x.dims[1]
    gd = gamma.data

    def bwd_train(g):
        dxhat = g * gd
        dvar = ((dxhat * xc).sum(axis=(0, 1), dtype=np.float64)) * (-0.5) * ivstd**3
        dmu = (dxhat.sum(axis=(0, 1), dtype=np.float64)) * (-ivstd) + dvar * (
            -2.0 * xc.mean(axis=(0, 1), dtype=np.float64)
        )
        dx = (
            dxhat * ivstd_c
            + xc * (dvar * 2.0 / n).astype(xd.dtype)
            + (dmu / n).astype(xd.dtype)
        )
        dgamma = (g * xhat).sum(axis=(0, 1), dtype=np.float64)
        dbeta = g.sum(axis=(0, 1), dtype=np.float64)
        return dx.astype(np.float32), dgamma.astype(np.float32), dbeta.astype(np.float32)

    def bwd_eval(g):
        dx = g * gd * ivstd_c
        dgamma = (g * xhat).sum(axis=(0, 1), dtype=np.float64)
        dbeta = g.sum(axis=(0, 1), dtype=np.float64)
        return dx.astype(np.float32), dgamma.astype(np.float32), dbeta.astype(np.float32)

    return _result(y, "batchnorm", (x, gamma, beta), bwd_train if training else bwd_eval)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance over the last axis, then affine."""
    L = x.dims[-1]
    if gamma.dims != (L,) or beta.dims != (L,):
        raise ShapeError(f"layernorm: scale/shift dims must be ({L},)")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * ivstd).astype(_dtype)
    y = xhat * gamma.data + beta.data
    gd = gamma.data
    lead = tuple(range(len(x.dims) - 1))

    def bwd(g):
        dxhat = (g * gd).astype(np.float64)
        xc = xd - mu
        dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * ivstd**3
        dmu = (dxhat * -ivstd).sum(axis=-1, keepdims=True) + dvar * (-2.0 * xc).mean(
            axis=-1, keepdims=True
        )
        dx = dxhat * ivstd + dvar * 2.0 * xc / L + dmu / L
        dgamma = (g * xhat).sum(axis=lead, dtype=np.float64) if lead else (g * xhat).astype(np.float64)
        dbeta = g.sum(axis=lead, dtype=np.float64) if lead else g.astype(np.float64)
        return dx.astype(np.float32), dgamma.astype(np.float32), dbeta.astype(np.float32)

    return _result(y, "layernorm", (x, gamma, beta), bwd)


def softmax_temp(logits: Tensor, tau: float) -> Tensor:
    """Temperature-softened softmax over the last axis, max-stabilized."""
    if not tau > 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")
    z = logits.data.astype(np.float64) / tau
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p64 = e / e.sum(axis=-1, keepdims=True)
    p = p64.astype(_dtype)

    def bwd(g):
        g64 = g.astype(np.float64)
        dz = p64 * (g64 - (g64 * p64).sum(axis=-1, keepdims=True))
        return ((dz / tau).astype(np.float32),)

    return _result(p, "softmax_temp", (logits,), bwd)


# ---------------------------------------------------------------------------
# pooling and resizing


def maxpool2x2(x: Tensor):
    """2x2/stride-2 max pooling; returns (pooled, PoolIndices).

    Ties resolve to the first position in row-major scan order within the
    window.
    """
    if len(x.dims) != 3:
        raise ShapeError(f"maxpool2x2 expects (H, W, C), got {x.dims}")
    H, W, C = x.dims
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 requires even spatial dims, got ({H},{W})")
    h2, w2 = H // 2, W // 2
    win = x.data.reshape(h2, 2, w2, 2, C).transpose(0, 2, 1, 3, 4).reshape(h2, w2, 4, C)
    k = win.argmax(axis=2)
    pooled = np.take_along_axis(win, k[:, :, None, :], axis=2)[:, :, 0, :]
    di, dj = k // 2, k % 2
    ii = np.arange(h2)[:, None, None]
    jj = np.arange(w2)[None, :, None]
    cc = np.arange(C)[None, None, :]
    flat = ((2 * ii + di) * W + (2 * jj + dj)) * C + cc
    idx = PoolIndices((h2, w2, C), flat.ravel(), (H, W, C))
    flat_idx = idx.argmax

    def bwd(g):
        gx = np.zeros(H * W * C, dtype=np.float32)
        gx[flat_idx] = g.ravel()
        return (gx.reshape(H, W, C),)

    return _result(pooled, "maxpool2x2", (x,), bwd), idx


def max_unpool2x2(y: Tensor, idx: PoolIndices, out_dims=None) -> Tensor:
    """Place pooled values back at their recorded positions, zeros elsewhere."""
    if out_dims is None:
        out_dims = idx.src_dims
    out_dims = tuple(int(d) for d in out_dims)
    if y.dims != idx.dims:
        raise ShapeError(f"max_unpool2x2: values {y.dims} vs indices {idx.dims}")
    total = int(np.prod(out_dims))
    if idx.argmax.size and (idx.argmax.min() < 0 or idx.argmax.max() >= total):
        raise CorruptIndexError(
            f"pool indices address [{idx.argmax.min()}, {idx.argmax.max()}] "
            f"outside a tensor of {total} elements"
        )
    buf = np.zeros(total, dtype=np.float32)
    buf[idx.argmax] = y.data.ravel()
    flat_idx = idx.argmax
    ydims = y.dims

    def bwd(g):
        return (g.ravel()[flat_idx].reshape(ydims),)

    return _result(buf.reshape(out_dims), "max_unpool2x2", (y,), bwd)


def resize_bilinear(x: Tensor, new_h: int, new_w: int) -> Tensor:
    """Bilinear resize (align-corners=false), differentiable."""
    if len(x.dims) != 3:
        raise ShapeError(f"resize_bilinear expects (H, W, C), got {x.dims}")
    if new_h < 1 or new_w < 1:
        raise ShapeError(f"resize_bilinear target ({new_h},{new_w}) invalid")
    H, W, C = x.dims

    def axis_map(n_src, n_dst):
        src = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        src = np.clip(src, 0.0, n_src - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_src - 1)
        f = (src - i0).astype(np.float32)
        return i0, i1, f

    y0, y1, fy = axis_map(H, new_h)
    x0, x1, fx = axis_map(W, new_w)
    wy0 = (1.0 - fy)[:, None, None]
    wy1 = fy[:, None, None]
    wx0 = (1.0 - fx)[None, :, None]
    wx1 = fx[None, :, None]
    d = x.data
    out = (
        d[y0[:, None], x0[None, :]] * (wy0 * wx0)
        + d[y0[:, None], x1[None, :]] * (wy0 * wx1)
        + d[y1[:, None], x0[None, :]] * (wy1 * wx0)
        + d[y1[:, None], x1[None, :]] * (wy1 * wx1)
    )

    def bwd(g):
        gx = np.zeros((H, W, C), dtype=np.float32)
        for yi, wyi in ((y0, wy0), (y1, wy1)):
            for xi, wxi in ((x0, wx0), (x1, wx1)):
                np.add.at(gx, (yi[:, None], xi[None, :]), g * (wyi * wxi))
        return (gx,)

    return _result(out, "resize_bilinear", (x,), bwd)
