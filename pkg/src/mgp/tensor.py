"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation appends a node to the active :class:`Graph`.
``backward`` walks that graph in reverse append order and accumulates
gradients into leaf tensors. The tape is never cleared implicitly; callers
reset it once per optimization step.

Binary operations require identical shapes. The only broadcasting allowed
is a Python scalar combined with a tensor.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadMagicError, ContractError, NumericError, ParseError, ShapeError, TruncatedError

__all__ = [
    "Tensor", "Graph", "no_grad", "backward", "grad_check",
    "add", "sub", "mul", "neg", "scale", "leaky_relu", "tanh",
    "sum", "mean", "l2_norm_sq", "l1_dist",
    "conv2d", "conv_transpose2d", "channel_scale", "channel_mix",
    "avg_pool2d", "nearest_upsample",
    "encode_mtd", "decode_mtd", "save_tensor", "load_tensor",
]

_local = threading.local()


class Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Graph:
    """Append-only record of executed operations.

    Usable as a context manager to make it the active graph of the current
    thread. Each thread starts with its own default graph.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op, inputs, out, backward_fn):
        self.nodes.append(Node(op, inputs, out, backward_fn))

    def reset(self):
        # node <-> output references form cycles; break them so activations free immediately
        for node in self.nodes:
            node.out._node = None
            node.out._graph = None
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


def _stack() -> list:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = _local.graphs = [Graph()]
    return stack


def current_graph() -> Graph:
    return _stack()[-1]


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (current thread only)."""
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_graph")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = None
        self._graph = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad=False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t._graph = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, arr: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        graph = current_graph()
        graph.record(op, tuple(inputs), out, backward_fn)
        out._node = graph.nodes[-1]
        out._graph = graph
    return out


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


# ---------------------------------------------------------------- pointwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return _result("add_scalar", a.data + float(b), (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return _result("sub_scalar", a.data - float(b), (a,), lambda g: (g,))
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    if _is_scalar(a):
        return scale(b, a)
    _same_shape("mul", a, b)

    def bw(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _result("mul", a.data * b.data, (a, b), bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # subgradient at exactly 0 is 1
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)
    return _result("leaky_relu", out, (x,), lambda g: (np.where(pos, g, slope * g),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


# --------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the tensor op name
    shape = x.shape
    return _result("sum", np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0]),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result("mean", np.array([x.data.mean()]), (x,), lambda g: (np.full(shape, g[0] / n),))


def l2_norm_sq(x: Tensor) -> Tensor:
    """Sum of squares of every entry."""
    return _result("l2_norm_sq", np.array([np.sum(x.data * x.data)]), (x,),
                   lambda g: (2.0 * g[0] * x.data,))


def l1_dist(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute differences; subgradient of |0| is 0."""
    _same_shape("l1_dist", a, b)
    diff = a.data - b.data
    sign = np.sign(diff)

    def bw(g):
        return (g[0] * sign if a.requires_grad else None,
                -g[0] * sign if b.requires_grad else None)

    return _result("l1_dist", np.array([np.abs(diff).sum()]), (a, b), bw)


# -------------------------------------------------------------- convolution


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)


def _col2im(cols: np.ndarray, shape, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c = shape[:2]
    cols = cols.reshape(b, c, k, k, ho, wo)
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += cols[:, :, i, j]
    return out


def _check4(op, name, t: Tensor):
    if t.data.ndim != 4:
        raise ShapeError(f"{op}: {name} must be 4-d, got shape {list(t.shape)}")


def _check_bias(op, bias, cout):
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"{op}: bias shape {list(bias.shape)} does not match {cout} output channels")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-d cross-correlation. ``weight`` is [Cout, Cin, k, k]."""
    _check4("conv2d", "input", x)
    _check4("conv2d", "weight", weight)
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: weight {list(weight.shape)} expects {wcin} input channels, "
                         f"input {list(x.shape)} has {cin}")
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got weight {list(weight.shape)}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride {stride} / padding {padding} out of range")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {list(x.shape)} (padding {padding})")
    _check_bias("conv2d", bias, cout)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wm = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, cout, ho, wo)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = g.reshape(b, cout, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _col2im(np.matmul(wm.T, gm), xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if weight.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return _result("conv2d", out, inputs, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`. ``weight`` is [Cin, Cout, k, k]."""
    _check4("conv_transpose2d", "input", x)
    _check4("conv_transpose2d", "weight", weight)
    b, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: weight {list(weight.shape)} expects {wcin} input channels, "
                         f"input {list(x.shape)} has {cin}")
    if k != k2:
        raise ShapeError(f"conv_transpose2d: kernel must be square, got weight {list(weight.shape)}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv_transpose2d: stride {stride} / padding {padding} out of range")
    _check_bias("conv_transpose2d", bias, cout)
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output extent {ho}x{wo} for input {list(x.shape)}")
    wm = weight.data.reshape(cin, cout * k * k)
    xm = x.data.reshape(b, cin, h * w)
    full = _col2im(np.matmul(wm.T, xm), (b, cout, hf, wf), k, stride, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gp, k, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wm, gcols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return _result("conv_transpose2d", out, inputs, bw)


# ------------------------------------------------------------ channel ops


def channel_scale(feature: Tensor, alpha: Tensor) -> Tensor:
    """Multiply channel ``c`` of a [B,C,H,W] feature map by ``alpha[c]``."""
    _check4("channel_scale", "feature", feature)
    c = feature.shape[1]
    if alpha.shape != (c,):
        raise ShapeError(f"channel_scale: alpha shape {list(alpha.shape)} does not match "
                         f"{c} channels of feature {list(feature.shape)}")
    a4 = alpha.data[None, :, None, None]

    def bw(g):
        return (g * a4 if feature.requires_grad else None,
                (g * feature.data).sum(axis=(0, 2, 3)) if alpha.requires_grad else None)

    return _result("channel_scale", feature.data * a4, (feature, alpha), bw)


def channel_mix(x: Tensor, matrix) -> Tensor:
    """out[:, o] = sum_c matrix[o, c] * x[:, c] for a constant matrix.

    Terms are accumulated in channel order.
    """
    _check4("channel_mix", "input", x)
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != x.shape[1]:
        raise ShapeError(f"channel_mix: matrix {list(m.shape)} incompatible with input {list(x.shape)}")

    def apply(src, mat):
        out = mat[:, 0][None, :, None, None] * src[:, 0:1]
        for c in range(1, mat.shape[1]):
            out = out + mat[:, c][None, :, None, None] * src[:, c : c + 1]
        return out

    return _result("channel_mix", apply(x.data, m), (x,), lambda g: (apply(g, m.T),))


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    _check4("avg_pool2d", "input", x)
    b, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"avg_pool2d: factor {k} does not divide extents {h}x{w}")
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
    inv = 1.0 / (k * k)
    return _result("avg_pool2d", out, (x,),
                   lambda g: (np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3),))


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    _check4("nearest_upsample", "input", x)
    if factor < 1:
        raise ContractError(f"nearest_upsample: factor must be >= 1, got {factor}")
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _result("nearest_upsample", out, (x,),
                   lambda g: (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- backward


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
    if loss.shape != (1,):
        raise ContractError(f"backward needs a scalar loss of shape [1], got {list(loss.shape)}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones(1) if loss.grad is None else loss.grad + 1.0
        return
    grads = {id(loss): np.ones(1)}
    for node in reversed(loss._graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    Per coordinate: |a - d| / max(1, |a|, |d|).
    """
    if h <= 0:
        raise ContractError(f"grad_check: step must be positive, got {h}")
    base = _as_tensor(point).data
    x = Tensor(base, requires_grad=True)
    with Graph():
        out = f(x)
        if not np.all(np.isfinite(out.data)):
            raise NumericError("grad_check: non-finite value at the base point")
        backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)
    worst = 0.0
    with no_grad():
        probe = base.copy()
        flat = probe.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(probe)).item()
            flat[i] = orig - h
            fm = f(Tensor(probe)).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite value perturbing coordinate {i}")
            fd = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a), abs(fd)))
    return worst


# -------------------------------------------------------------- MTD1 files

MTD_MAGIC = b"MTD1"


def encode_mtd(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    shape = arr.shape if arr.ndim else (1,)
    head = MTD_MAGIC + struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_mtd(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one MTD1 record starting at ``offset``; returns (tensor, next offset)."""
    if len(buf) - offset < 8:
        raise TruncatedError(f"MTD1 record truncated at offset {offset}")
    if buf[offset : offset + 4] != MTD_MAGIC:
        raise BadMagicError(f"bad MTD1 magic {bytes(buf[offset:offset + 4])!r}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) - pos < 4 * rank:
        raise TruncatedError("MTD1 extents truncated")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if any(e == 0 for e in shape):
        raise ShapeError(f"MTD1 extents must be positive, got {list(shape)}")
    n = int(np.prod(shape)) if rank else 1
    if len(buf) - pos < 8 * n:
        raise TruncatedError(f"MTD1 data truncated: need {8 * n} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
    return Tensor._wrap(arr), pos + 8 * n


def save_tensor(t, path):
    with open(path, "wb") as fh:
        fh.write(encode_mtd(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = decode_mtd(buf)
    if end != len(buf):
        raise ParseError(f"{path}: {len(buf) - end} trailing bytes after MTD1 record")
    return t
