"""Reverse-mode automatic differentiation on explicit computation graphs.

Evaluation is eager: applying a primitive computes its output immediately
and the resulting Tensor keeps references to its inputs, so the chain of
applications *is* the graph (creation order is a valid topological order).
Every vector-Jacobian rule is written in terms of the same primitives,
which makes the catalog closed under differentiation: gradients returned
with ``create_graph=True`` are ordinary graph nodes and can be
differentiated again.

There is no implicit broadcasting inside primitives. Binary primitives
require equal shapes; the operator sugar on Tensor inserts explicit
``broadcast_to`` nodes instead, so every shape change is visible in the
graph.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "tensor", "no_grad", "grad",
    "set_default_dtype", "get_default_dtype", "precision",
    "add", "sub", "neg", "mul", "div", "reciprocal", "matmul", "affine",
    "transpose2d", "reshape", "concat", "narrow", "broadcast_to", "sigmoid",
    "tanh", "exp", "sqrt", "square", "swish", "layer_norm", "huber",
    "clip_by_value", "minimum", "maximum", "scale", "shift", "conv2d",
    "check_gradients", "GradCheckReport",
]

_DEFAULT_DTYPE = np.float32
_seq = itertools.count()
_state = threading.local()


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created from raw data (32 or 64 bit)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (gradient oracles run in float64)."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording: ops executed inside produce leaf tensors."""
    old = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class ShapeError(ValueError):
    """Raised when an op's input shapes are inconsistent; names the op."""


class Tensor:
    """An n-dimensional array that is also a node of the computation graph.

    Leaf tensors (created from data, or produced under ``no_grad``) have
    ``op is None`` and no parents. ``seq`` is a global creation counter;
    since parents always exist before children, descending ``seq`` order
    is a valid reverse topological order for the backward sweep.
    """

    __slots__ = ("data", "op", "parents", "attrs", "seq")

    def __init__(self, data: np.ndarray, op: str | None = None,
                 parents: tuple = (), attrs: dict | None = None):
        self.data = data
        if op is not None and _grad_enabled():
            self.op = op
            self.parents = parents
            self.attrs = attrs
        else:
            self.op = None
            self.parents = ()
            self.attrs = None
        self.seq = next(_seq)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this tensor's values (stops gradient flow)."""
        return Tensor(self.data)

    # reductions / shape sugar
    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return _mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # operator sugar; inserts explicit broadcast nodes where shapes differ
    def __add__(self, other):
        a, b = _align(self, other)
        return add(a, b)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = _align(self, other)
        return sub(a, b)

    def __rsub__(self, other):
        a, b = _align(self, other)
        return sub(b, a)

    def __mul__(self, other):
        a, b = _align(self, other)
        return mul(a, b)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = _align(self, other)
        return div(a, b)

    def __rtruediv__(self, other):
        a, b = _align(self, other)
        return div(b, a)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    def __repr__(self):
        kind = self.op or "leaf"
        return f"Tensor({kind}, shape={self.shape}, dtype={self.data.dtype})"


def tensor(data, dtype=None) -> Tensor:
    """Create a leaf tensor. Uses the module default dtype unless given."""
    arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
    return Tensor(arr)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _align(a, b):
    """Coerce to tensors of a common shape via explicit broadcast nodes."""
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        out = np.broadcast_shapes(a.shape, b.shape)
        if a.shape != out:
            a = broadcast_to(a, out)
        if b.shape != out:
            b = broadcast_to(b, out)
    return a, b


def _require_same_shape(kind, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{kind}: operand shapes {a.data.shape} and "
                         f"{b.data.shape} differ")


# ---------------------------------------------------------------------------
# primitives
#
# Each op computes eagerly and registers a VJP in _VJPS. A VJP takes the
# upstream gradient g, the op's output and parents, and returns one gradient
# per parent (None where no gradient flows). VJPs are built from primitives
# so they are differentiable again.
# ---------------------------------------------------------------------------

_VJPS: dict = {}


def _vjp(kind):
    def register(fn):
        _VJPS[kind] = fn
        return fn
    return register


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return Tensor(a.data + b.data, "add", (a, b))


@_vjp("add")
def _(g, out, parents, attrs):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return Tensor(a.data - b.data, "sub", (a, b))


@_vjp("sub")
def _(g, out, parents, attrs):
    return g, neg(g)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, "neg", (a,))


@_vjp("neg")
def _(g, out, parents, attrs):
    return (neg(g),)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return Tensor(a.data * b.data, "mul", (a, b))


@_vjp("mul")
def _(g, out, parents, attrs):
    a, b = parents
    return mul(g, b), mul(g, a)


def reciprocal(a: Tensor) -> Tensor:
    return Tensor(1.0 / a.data, "reciprocal", (a,))


@_vjp("reciprocal")
def _(g, out, parents, attrs):
    return (neg(mul(g, square(out))),)


def div(a: Tensor, b: Tensor) -> Tensor:
    return mul(a, reciprocal(b))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    return Tensor(a.data * a.data.dtype.type(c), "scale", (a,), {"c": float(c)})


@_vjp("scale")
def _(g, out, parents, attrs):
    return (scale(g, attrs["c"]),)


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python scalar constant."""
    return Tensor(a.data + a.data.dtype.type(c), "shift", (a,), {"c": float(c)})


@_vjp("shift")
def _(g, out, parents, attrs):
    return (g,)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return Tensor(a.data @ b.data, "matmul", (a, b))


@_vjp("matmul")
def _(g, out, parents, attrs):
    a, b = parents
    return matmul(g, transpose2d(b)), matmul(transpose2d(a), g)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias broadcast over rows (one fused node)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] \
            or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: incompatible shapes {x.shape} @ {w.shape} "
                         f"+ {b.shape}")
    return Tensor(x.data @ w.data + b.data, "affine", (x, w, b))


@_vjp("affine")
def _(g, out, parents, attrs):
    x, w, b = parents
    return matmul(g, transpose2d(w)), matmul(transpose2d(x), g), g.sum(axis=0)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d: expected 2-d tensor, got {a.shape}")
    return Tensor(a.data.T, "transpose2d", (a,))


@_vjp("transpose2d")
def _(g, out, parents, attrs):
    return (transpose2d(g),)


def reshape(a: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    return Tensor(a.data.reshape(new_shape), "reshape", (a,),
                  {"in_shape": a.shape})


@_vjp("reshape")
def _(g, out, parents, attrs):
    return (reshape(g, attrs["in_shape"]),)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape)  # view; graph data is never mutated
    except ValueError as e:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from e
    return Tensor(data, "broadcast", (a,), {"in_shape": a.shape})


@_vjp("broadcast")
def _(g, out, parents, attrs):
    in_shape = attrs["in_shape"]
    pad = g.ndim - len(in_shape)
    padded = (1,) * pad + tuple(in_shape)
    axes = tuple(i for i, (m, n) in enumerate(zip(padded, g.shape)) if m == 1 and n != 1)
    r = g.sum(axis=axes, keepdims=True) if axes else g
    return (reshape(r, in_shape),)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = tuple(t.shape[axis] for t in tensors)
    return Tensor(data, "concat", tensors, {"axis": axis, "sizes": sizes})


@_vjp("concat")
def _(g, out, parents, attrs):
    axis, sizes = attrs["axis"], attrs["sizes"]
    grads, start = [], 0
    for n in sizes:
        grads.append(narrow(g, axis, start, n))
        start += n
    return tuple(grads)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries starting at ``start`` along one axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}] out of range "
                         f"for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    return Tensor(np.ascontiguousarray(a.data[tuple(idx)]), "narrow", (a,),
                  {"axis": axis, "start": start, "extent": a.shape[axis]})


@_vjp("narrow")
def _(g, out, parents, attrs):
    return (pad_axis(g, attrs["axis"], attrs["start"], attrs["extent"]),)


def pad_axis(a: Tensor, axis: int, start: int, extent: int) -> Tensor:
    """Embed into a zero tensor whose given axis has size ``extent``."""
    shape = list(a.shape)
    shape[axis] = extent
    data = np.zeros(shape, dtype=a.dtype)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + a.shape[axis])
    data[tuple(idx)] = a.data
    return Tensor(data, "pad_axis", (a,),
                  {"axis": axis, "start": start, "length": a.shape[axis]})


@_vjp("pad_axis")
def _(g, out, parents, attrs):
    return (narrow(g, attrs["axis"], attrs["start"], attrs["length"]),)


def _norm_axes(axis, ndim):
    if type(axis) is int:
        return (axis % ndim,)
    if axis is None:
        return tuple(range(ndim))
    return tuple(a % ndim for a in axis)


def _sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    return Tensor(np.asarray(data), "sum", (a,),
                  {"axes": axes, "keepdims": keepdims, "in_shape": a.shape})


def _reduction_vjp(g, attrs):
    in_shape = attrs["in_shape"]
    if not attrs["keepdims"]:
        kept = list(in_shape)
        for ax in attrs["axes"]:
            kept[ax] = 1
        g = reshape(g, kept)
    return broadcast_to(g, in_shape)


@_vjp("sum")
def _(g, out, parents, attrs):
    return (_reduction_vjp(g, attrs),)


def _mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.mean(axis=axes, keepdims=keepdims)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return Tensor(np.asarray(data), "mean", (a,),
                  {"axes": axes, "keepdims": keepdims, "in_shape": a.shape, "n": n})


@_vjp("mean")
def _(g, out, parents, attrs):
    return (_reduction_vjp(scale(g, 1.0 / attrs["n"]), attrs),)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # stable single-pass evaluation via the tanh identity
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(a: Tensor) -> Tensor:
    return Tensor(_sigmoid_data(a.data), "sigmoid", (a,))


@_vjp("sigmoid")
def _(g, out, parents, attrs):
    return (mul(g, mul(out, shift(neg(out), 1.0))),)


def tanh(a: Tensor) -> Tensor:
    return Tensor(np.tanh(a.data), "tanh", (a,))


@_vjp("tanh")
def _(g, out, parents, attrs):
    return (mul(g, shift(neg(square(out)), 1.0)),)


def exp(a: Tensor) -> Tensor:
    return Tensor(np.exp(a.data), "exp", (a,))


@_vjp("exp")
def _(g, out, parents, attrs):
    return (mul(g, out),)


def sqrt(a: Tensor) -> Tensor:
    return Tensor(np.sqrt(a.data), "sqrt", (a,))


@_vjp("sqrt")
def _(g, out, parents, attrs):
    return (scale(mul(g, reciprocal(out)), 0.5),)


def square(a: Tensor) -> Tensor:
    return Tensor(np.square(a.data), "square", (a,))


@_vjp("square")
def _(g, out, parents, attrs):
    return (scale(mul(g, parents[0]), 2.0),)


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x), fused; derivative s + x*s*(1-s)."""
    s = _sigmoid_data(a.data)
    return Tensor(a.data * s, "swish", (a,), {"s": s})


@_vjp("swish")
def _(g, out, parents, attrs):
    (x,) = parents
    if _grad_enabled():
        s = sigmoid(x)  # rebuilt from primitives so it stays differentiable
    else:
        s = Tensor(attrs["s"])
    return (mul(g, add(s, mul(mul(x, s), shift(neg(s), 1.0)))),)


def huber(a: Tensor, delta: float) -> Tensor:
    """Elementwise clipped-quadratic loss: z^2/2 inside |z| <= delta,
    delta*(|z| - delta/2) outside. Reduce with .mean() at the call site."""
    if delta <= 0:
        raise ValueError("huber: delta must be positive")
    z = np.abs(a.data)
    data = np.where(z <= delta, 0.5 * np.square(a.data), delta * (z - 0.5 * delta))
    return Tensor(data.astype(a.dtype, copy=False), "huber", (a,), {"delta": float(delta)})


@_vjp("huber")
def _(g, out, parents, attrs):
    # d/dz huber(z) is exactly z clamped to [-delta, delta]
    d = attrs["delta"]
    return (mul(g, clip_by_value(parents[0], -d, d)),)


def clip_by_value(a: Tensor, lo: float, hi: float) -> Tensor:
    if not lo < hi:
        raise ValueError("clip_by_value: lo must be < hi")
    return Tensor(np.clip(a.data, lo, hi), "clip", (a,), {"lo": float(lo), "hi": float(hi)})


@_vjp("clip")
def _(g, out, parents, attrs):
    # unit gradient strictly inside (lo, hi); zero at and beyond saturation
    x = parents[0].data
    mask = ((x > attrs["lo"]) & (x < attrs["hi"])).astype(x.dtype)
    return (mul(g, Tensor(mask)),)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("minimum", a, b)
    return Tensor(np.minimum(a.data, b.data), "minimum", (a, b))


@_vjp("minimum")
def _(g, out, parents, attrs):
    a, b = parents
    take_a = (a.data <= b.data).astype(a.data.dtype)
    return mul(g, Tensor(take_a)), mul(g, Tensor(1.0 - take_a))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("maximum", a, b)
    return Tensor(np.maximum(a.data, b.data), "maximum", (a, b))


@_vjp("maximum")
def _(g, out, parents, attrs):
    a, b = parents
    take_a = (a.data >= b.data).astype(a.data.dtype)
    return mul(g, Tensor(take_a)), mul(g, Tensor(1.0 - take_a))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned gain and bias.

    Fused into one node for speed; the backward rule below is written in
    primitives, so higher-order gradients still work.
    """
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do "
                         f"not match feature axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.square(xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xn = xc * inv
    out = xn * gain.data + bias.data
    return Tensor(out, "layer_norm", (x, gain, bias),
                  {"eps": float(eps), "xn": xn, "inv": inv})


def _layer_norm_parts(x: Tensor, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = sub(x, broadcast_to(mu, x.shape))
    var = square(xc).mean(axis=-1, keepdims=True)
    inv = reciprocal(sqrt(shift(var, eps)))
    return mul(xc, broadcast_to(inv, x.shape)), inv


@_vjp("layer_norm")
def _(g, out, parents, attrs):
    x, gain, bias = parents
    if _grad_enabled():
        # rebuild the normalization from primitives so the rule itself is
        # differentiable; the cached arrays only serve first-order sweeps
        xn, inv = _layer_norm_parts(x, attrs["eps"])
    else:
        xn, inv = Tensor(attrs["xn"]), Tensor(attrs["inv"])
    lead = tuple(range(x.ndim - 1))
    dgain = mul(g, xn).sum(axis=lead) if lead else mul(g, xn)
    dbias = g.sum(axis=lead) if lead else g
    h = mul(g, broadcast_to(gain, x.shape))
    m1 = h.mean(axis=-1, keepdims=True)
    m2 = mul(h, xn).mean(axis=-1, keepdims=True)
    centered = sub(sub(h, broadcast_to(m1, x.shape)),
                   mul(xn, broadcast_to(m2, x.shape)))
    dx = mul(centered, broadcast_to(inv, x.shape))
    return dx, dgain, dbias


# -- convolution ------------------------------------------------------------

def _conv_out_hw(h, w, kh, kw, s):
    oh, ow = (h - kh) // s + 1, (w - kw) // s + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) stride {s} does not fit "
                         f"input ({h},{w})")
    return oh, ow


def _im2col(x: np.ndarray, kh: int, kw: int, s: int) -> np.ndarray:
    n, h, w, c = x.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, s)
    sn, sh, sw, sc = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, (n, oh, ow, kh, kw, c), (sn, sh * s, sw * s, sh, sw, sc))
    return np.ascontiguousarray(cols).reshape(n * oh * ow, kh * kw * c)


def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """Valid-padding 2-d correlation. x: (N,H,W,Cin), k: (kh,kw,Cin,Cout)."""
    if x.ndim != 4 or k.ndim != 4 or x.shape[3] != k.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {k.shape}")
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride)
    cols = _im2col(x.data, kh, kw, stride)
    out = cols @ k.data.reshape(kh * kw * cin, cout)
    return Tensor(out.reshape(n, oh, ow, cout), "conv2d", (x, k),
                  {"stride": stride, "input_hw": (h, w)})


@_vjp("conv2d")
def _(g, out, parents, attrs):
    x, k = parents
    s, hw = attrs["stride"], attrs["input_hw"]
    return conv2d_input_grad(g, k, s, hw), \
        conv2d_kernel_grad(x, g, s, k.shape[:2])


def conv2d_input_grad(g: Tensor, k: Tensor, stride: int, input_hw) -> Tensor:
    """Adjoint of conv2d in its image argument (scatter grads into windows)."""
    n, oh, ow, cout = g.shape
    kh, kw, cin, _ = k.shape
    h, w = input_hw
    patches = g.data.reshape(n * oh * ow, cout) @ k.data.reshape(kh * kw * cin, cout).T
    patches = patches.reshape(n, oh, ow, kh, kw, cin)
    dx = np.zeros((n, h, w, cin), dtype=g.data.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :] += \
                patches[:, :, :, i, j, :]
    return Tensor(dx, "conv2d_input_grad", (g, k),
                  {"stride": stride, "input_hw": tuple(input_hw)})


@_vjp("conv2d_input_grad")
def _(gg, out, parents, attrs):
    g, k = parents
    s = attrs["stride"]
    return conv2d(gg, k, s), conv2d_kernel_grad(gg, g, s, k.shape[:2])


def conv2d_kernel_grad(x: Tensor, g: Tensor, stride: int, kernel_hw) -> Tensor:
    """Adjoint of conv2d in its kernel argument. The kernel extent cannot be
    inferred from the output when the stride does not divide evenly, so it
    is passed explicitly."""
    n, h, w, cin = x.shape
    _, oh, ow, cout = g.shape
    kh, kw = kernel_hw
    if _conv_out_hw(h, w, kh, kw, stride) != (oh, ow):
        raise ShapeError(f"conv2d_kernel_grad: output {g.shape} inconsistent "
                         f"with input {x.shape}, kernel {kernel_hw}, "
                         f"stride {stride}")
    cols = _im2col(x.data, kh, kw, stride)
    dk = cols.T @ g.data.reshape(n * oh * ow, cout)
    return Tensor(dk.reshape(kh, kw, cin, cout), "conv2d_kernel_grad", (x, g),
                  {"stride": stride, "kernel_hw": (kh, kw)})


@_vjp("conv2d_kernel_grad")
def _(ww, out, parents, attrs):
    x, g = parents
    s = attrs["stride"]
    return conv2d_input_grad(g, ww, s, (x.shape[1], x.shape[2])), conv2d(x, ww, s)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

def grad(loss: Tensor, wrt, create_graph: bool = False):
    """Gradients of a scalar loss with respect to ``wrt`` tensors.

    With ``create_graph`` the returned tensors are graph nodes and can be
    differentiated again (needed when an outer objective is taken through
    inner gradient updates). A wrt tensor that does not influence the loss
    yields a zero tensor of its shape; this is documented behavior, not an
    error.
    """
    single = isinstance(wrt, Tensor)
    wrt_list = [wrt] if single else list(wrt)
    if loss.size != 1:
        raise ShapeError(f"grad: loss must be scalar-shaped, got {loss.shape}")

    # Graph bookkeeping is keyed on the unique creation index. Ancestors of
    # the loss that can matter: a node influenced by some wrt tensor was
    # necessarily created after it, so edges into nodes with a smaller
    # creation index than every wrt cannot lie between wrt and loss.
    wrt_seqs = {t.seq for t in wrt_list}
    min_seq = min(wrt_seqs)
    ancestors: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.seq in ancestors:
            continue
        ancestors[t.seq] = t
        for p in t.parents:
            if p.seq >= min_seq and p.seq not in ancestors:
                stack.append(p)
    # restrict to nodes through which a wrt tensor can reach the loss
    needed: set[int] = set()
    for s in sorted(ancestors):
        if s in wrt_seqs:
            needed.add(s)
            continue
        for p in ancestors[s].parents:
            if p.seq in needed or p.seq in wrt_seqs:
                needed.add(s)
                break

    grads: dict[int, Tensor] = {}
    if loss.seq in needed:
        grads[loss.seq] = Tensor(np.ones(loss.shape, dtype=loss.data.dtype))
        order = sorted((s for s in needed if ancestors[s].parents), reverse=True)
        ctx = no_grad() if not create_graph else nullcontext()
        with ctx:
            for s in order:
                # reverse topological order: all contributions to s arrived
                g = grads.get(s)
                if g is None:
                    continue
                t = ancestors[s]
                pgrads = _VJPS[t.op](g, t, t.parents, t.attrs)
                for p, pg in zip(t.parents, pgrads):
                    if pg is None or p.seq not in needed:
                        continue
                    acc = grads.get(p.seq)
                    grads[p.seq] = pg if acc is None else add(acc, pg)

    out = []
    for t in wrt_list:
        g = grads.get(t.seq)
        if g is None:
            g = Tensor(np.zeros(t.shape, dtype=t.data.dtype))
        out.append(g)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    ok: bool


@dataclass
class GradCheckReport:
    """Per-input comparison of reverse-mode gradients against central
    finite differences (f(x+h) - f(x-h)) / 2h."""
    entries: list[GradCheckEntry] = field(default_factory=list)
    tolerance: float = 0.0

    @property
    def ok(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def __str__(self):
        lines = [f"gradient check (tol {self.tolerance:g}):"]
        for e in self.entries:
            status = "ok" if e.ok else "FAIL"
            lines.append(f"  {e.name}: max rel err {e.max_rel_err:.3e} [{status}]")
        return "\n".join(lines)


def check_gradients(fn, inputs, step: float = 1e-5, tolerance: float = 1e-4,
                    names=None) -> GradCheckReport:
    """Compare grad(fn(inputs)) against central finite differences.

    ``fn`` maps a list of leaf tensors to a scalar tensor; it is re-invoked
    for every probe, so it may itself take gradients internally (that is how
    second-order rules are checked). Inputs must be float64.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("check_gradients requires float64 inputs")
        if not t.data.flags["C_CONTIGUOUS"]:
            raise ValueError("check_gradients requires contiguous inputs")
    names = names or [f"input{i}" for i in range(len(inputs))]

    analytic = grad(fn(inputs), inputs)
    report = GradCheckReport(tolerance=tolerance)
    for t, a, name in zip(inputs, analytic, names):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(inputs).item()
            flat[i] = orig - step
            lo = fn(inputs).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        gmax = max(np.abs(a.data).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        floor = max(1e-8, 1e-4 * gmax)
        denom = np.maximum(np.maximum(np.abs(a.data), np.abs(numeric)), floor)
        err = float((np.abs(a.data - numeric) / denom).max(initial=0.0))
        report.entries.append(GradCheckEntry(name, err, err < tolerance))
    return report
