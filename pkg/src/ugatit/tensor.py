"""Dense tensors with reverse-mode differentiation.

The engine is deliberately small: every op computes its forward value with
numpy, records its parents and a closure mapping the upstream gradient to one
gradient per parent, and :func:`backward` replays those closures in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "NonFiniteError", "PrecisionError",
    "backward", "no_grad", "grad_enabled", "frozen_pattern", "precision", "get_precision",
    "conv2d", "pad2d", "fully_connected", "upsample_nearest2x", "global_pool",
    "activation", "relu", "leaky_relu", "tanh", "sigmoid", "log_sigmoid",
    "concat", "abs_", "square",
]

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = {"dtype": np.float32, "grad": True}


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


class PrecisionError(TypeError):
    """Raised when tensors of different floating precision meet in one op."""


def get_precision():
    return _state["dtype"]


def set_precision(dtype) -> None:
    if isinstance(dtype, str):
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype for newly created tensors."""
    prev = _state["dtype"]
    set_precision(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


class _PatternTape:
    """Branch decisions of piecewise ops (masks, signs, argmax), in call order."""

    def __init__(self, mode: str, items=None):
        self.mode = mode
        self.items = [] if items is None else items
        self.pos = 0


_tape: list = [None]


@contextlib.contextmanager
def frozen_pattern(tape: "_PatternTape | None" = None):
    """Record (no ``tape`` given) or replay the branch pattern of piecewise ops.

    Replaying pins every ReLU mask, |x| sign and max-pool argmax to its
    recorded value, so a forward pass evaluates the smooth piece that was
    active during recording. Yields the tape.
    """
    tape = _PatternTape("record") if tape is None else _PatternTape("replay", tape.items)
    prev = _tape[0]
    _tape[0] = tape
    try:
        yield tape
    finally:
        _tape[0] = prev
    if tape.mode == "replay" and tape.pos != len(tape.items):
        raise RuntimeError("replayed forward used fewer piecewise ops than recorded")


def _pattern(value: np.ndarray) -> np.ndarray:
    tape = _tape[0]
    if tape is None:
        return value
    if tape.mode == "record":
        tape.items.append(value)
        return value
    if tape.pos >= len(tape.items) or tape.items[tape.pos].shape != value.shape:
        raise RuntimeError("replayed forward diverged from the recorded op sequence")
    out = tape.items[tape.pos]
    tape.pos += 1
    return out


def grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class Tensor:
    """An array plus an optional gradient and the op record that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = _state["dtype"] if dtype is None else dtype
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # ---- construction -------------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward_fn: Callable, op: str) -> "Tensor":
        """Wrap an op result, recording it for differentiation if needed.

        ``backward_fn(g)`` must return one gradient (or None) per parent.
        """
        if not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite values produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _state["grad"] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # ---- introspection ------------------------------------------------
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def backward(self) -> None:
        backward(self)

    # ---- arithmetic ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

class Graph:
    """Topologically ordered op records reachable from a root tensor."""

    def __init__(self, records: list):
        self.records = records

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order, seen = [], set()
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor) -> Graph:
    """Populate ``.grad`` of every tensor that ``loss`` depends on.

    Leaf gradients accumulate into existing ``.grad`` buffers so that a
    parameter store zeroed beforehand ends up with exact zeros for parameters
    that did not participate. The graph is released afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor with no recorded forward")
    if loss._backward is None and loss._parents == () and loss.op != "leaf":
        raise RuntimeError("graph already released")
    graph = Graph.from_root(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.records):
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
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None
    return graph


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype), dtype=like.data.dtype)


def _check_dtypes(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise PrecisionError(f"mixed precision: {dt} vs {t.data.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_dtypes(a, b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor.from_op(a.data + b.data, (a, b), _bw, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        return Tensor.from_op(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),), "scale")
    _check_dtypes(a, b)
    ad, bd = a.data, b.data

    def _bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor.from_op(ad * bd, (a, b), _bw, "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def abs_(a: Tensor) -> Tensor:
    sign = _pattern(np.sign(a.data))
    return Tensor.from_op(a.data * sign, (a,), lambda g: (sign * g,), "abs")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def _bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    out = a.data.sum(axis=axes, keepdims=keepdims)
    return Tensor.from_op(np.asarray(out), (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; advanced indexing is not supported."""
    items = index if isinstance(index, tuple) else (index,)
    if any(not isinstance(i, (slice, int, type(Ellipsis))) for i in items):
        raise TypeError("only basic slicing is supported")
    shape, dtype = a.shape, a.data.dtype

    def _bw(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[index] = g
        return (gx,)

    return Tensor.from_op(a.data[index], (a,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_dtypes(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis),
                          tuple(tensors), _bw, "concat")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = _pattern(x.data > 0)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = _pattern(np.where(x.data > 0, 1.0, slope).astype(x.data.dtype))
    return Tensor.from_op(x.data * scale, (x,), lambda g: (g * scale,), "lrelu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    z = x.data
    y = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return Tensor.from_op(y.astype(z.dtype), (x,), lambda g: (g * _sigmoid_np(-z),), "log_sigmoid")


def activation(x: Tensor, kind: str, slope: float | None = None) -> Tensor:
    if kind == "lrelu":
        if slope is None:
            raise ValueError("lrelu needs a slope")
        return leaky_relu(x, slope)
    if slope is not None:
        raise ValueError(f"slope only applies to lrelu, not {kind}")
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``out[b, o] = sum_f weight[o, f] * x[b, f] + bias[o]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fully_connected shape mismatch: {x.shape} vs {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    parents = (x, weight) if bias is None else (x, weight, bias)
    _check_dtypes(*parents)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor.from_op(out, parents, _bw, "fully_connected")


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    over = idx > n - 1
    idx[over] = 2 * (n - 1) - idx[over]
    return idx


def pad2d(x: Tensor, pad: int, mode: str = "zero") -> Tensor:
    """Pad the two trailing spatial axes by ``pad`` on every side."""
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    if mode == "zero":
        widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        out = np.pad(x.data, widths)

        def _bw(g):
            return (g[..., pad:pad + h, pad:pad + w],)

        return Tensor.from_op(out, (x,), _bw, "pad_zero")
    if mode == "reflect":
        if pad >= min(h, w):
            raise ValueError(f"reflect pad {pad} too large for {h}x{w} input")
        ih, iw = _reflect_index(h, pad), _reflect_index(w, pad)
        out = x.data[..., ih, :][..., iw]
        # Selection matrices scatter the padded gradient back onto the source.
        sh = np.zeros((h + 2 * pad, h), dtype=x.data.dtype)
        sh[np.arange(h + 2 * pad), ih] = 1.0
        sw = np.zeros((w + 2 * pad, w), dtype=x.data.dtype)
        sw[np.arange(w + 2 * pad), iw] = 1.0

        def _bw(g):
            return (sh.T @ g @ sw,)

        return Tensor.from_op(np.ascontiguousarray(out), (x,), _bw, "pad_reflect")
    raise ValueError(f"unknown pad mode {mode!r}")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Output extent ``floor((size + 2*pad - kernel) / stride) + 1``.

    Strided layers drop the trailing partial window, as the K3-S2-P1
    down-sampling convs require.
    """
    span = size + 2 * pad - kernel
    if span < 0:
        raise ValueError(
            f"kernel {kernel} does not fit input {size} with pad {pad}")
    return span // stride + 1


def _input_grad(g: np.ndarray, w: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    """Input gradient of a valid conv as a full correlation with the flipped kernel."""
    b, cout, ho, wo = g.shape
    _, cin, k, _ = w.shape
    # Dilate by the stride, then pad so every input tap sees its k*k outputs.
    gd = np.zeros((cout, b, hp + k - 1, wp + k - 1), dtype=g.dtype)
    gd[:, :, k - 1:k - 1 + stride * (ho - 1) + 1:stride,
       k - 1:k - 1 + stride * (wo - 1) + 1:stride] = g.transpose(1, 0, 2, 3)
    win = np.lib.stride_tricks.sliding_window_view(gd, (k, k), axis=(2, 3))[:, :, :hp, :wp]
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(cout * k * k, -1)
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
    return np.ascontiguousarray((wf @ cols).reshape(cin, b, hp, wp).transpose(1, 0, 2, 3))


def _conv_core(xp: Tensor, weight: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    # im2col: columns are laid out [Cin*K*K, B*Ho*Wo] so one matmul does the work.
    b, cin, hp, wp = xp.shape
    cout, _, k, _ = weight.shape
    ho = conv_output_size(hp, k, stride, 0)
    wo = conv_output_size(wp, k, stride, 0)
    xd = xp.data
    w2d = weight.data.reshape(cout, -1)
    if k == 1:
        cols = np.ascontiguousarray(xd[:, :, ::stride, ::stride].transpose(1, 0, 2, 3))
    else:
        win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))
    cols = cols.reshape(cin * k * k, b * ho * wo)
    out = w2d @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))

    def _bw(g):
        g2d = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2d @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if xp.requires_grad:
            if k == 1:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = \
                    (w2d.T @ g2d).reshape(cin, b, ho, wo).transpose(1, 0, 2, 3)
            else:
                gx = _input_grad(g, weight.data, stride, hp, wp)
        if bias is None:
            return gx, gw
        return gx, gw, g2d.sum(axis=1)

    parents = (xp, weight) if bias is None else (xp, weight, bias)
    return Tensor.from_op(out, parents, _bw, "conv2d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0, pad_mode: str = "zero") -> Tensor:
    """2-D cross-correlation over ``[B, Cin, H, W]`` with a square kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    cout, cin, k, k2 = weight.shape
    if k != k2 or k < 1:
        raise ValueError(f"kernel must be square and non-empty, got {k}x{k2}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if x.shape[1] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} outputs")
    _check_dtypes(x, weight, *(() if bias is None else (bias,)))
    h, w = x.shape[2:]
    conv_output_size(h, k, stride, pad)
    conv_output_size(w, k, stride, pad)
    return _conv_core(pad2d(x, pad, pad_mode), weight, bias, stride)


def conv2d_direct(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                  stride: int = 1, pad: int = 0, pad_mode: str = "zero") -> np.ndarray:
    """Reference convolution by explicit summation over every tap (no autograd)."""
    mode = {"zero": "constant", "reflect": "reflect"}[pad_mode]
    xp = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)], mode=mode)
    b, cin, hp, wp = xp.shape
    cout, _, k, _ = weight.shape
    ho = conv_output_size(hp, k, stride, 0)
    wo = conv_output_size(wp, k, stride, 0)
    out = np.zeros((b, cout, ho, wo), dtype=x.dtype)
    for n in range(b):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = np.sum(patch * weight[o])
            if bias is not None:
                out[n, o] += bias[o]
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def _bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return Tensor.from_op(out, (x,), _bw, "upsample_nearest2x")


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Per-channel spatial mean or max of ``[B, C, H, W]`` -> ``[B, C]``.

    The max gradient is routed to the first maximal element in row-major order.
    """
    b, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("global_pool needs a non-empty spatial extent")
    flat = x.data.reshape(b, c, h * w)
    if mode == "avg":
        inv = 1.0 / (h * w)

        def _bw(g):
            return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),)

        return Tensor.from_op(flat.mean(axis=2), (x,), _bw, "global_avg_pool")
    if mode == "max":
        idx = _pattern(flat.argmax(axis=2))

        def _bw(g):
            gx = np.zeros_like(flat)
            np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
            return (gx.reshape(x.shape),)

        out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
        return Tensor.from_op(out, (x,), _bw, "global_max_pool")
    raise ValueError(f"unknown pool mode {mode!r}")
