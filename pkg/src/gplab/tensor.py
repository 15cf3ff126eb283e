"""Dense arrays with reverse-mode automatic differentiation.

Every differentiable operation creates a :class:`Node` carrying a global
sequence number.  ``backward`` gathers the nodes reachable from the loss into
a :class:`Tape` and replays them in exact reverse of their recording order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded primitive: its inputs and a closure mapping d(out) to d(inputs)."""

    __slots__ = ("seq", "inputs", "backward_fn", "op")

    def __init__(self, inputs: tuple, backward_fn: Callable, op: str):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    # --- basic attributes -------------------------------------------------
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
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # --- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        backward(self, grad)

    # --- operators --------------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(tuple(inputs), backward_fn, op)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Tape and backward traversal
# ---------------------------------------------------------------------------


class Tape:
    """Nodes reachable from a root, kept in recording order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [root.node] if root.node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for t in node.inputs:
                if t.node is not None and id(t.node) not in seen:
                    stack.append(t.node)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def reverse_order(self) -> list[Node]:
        return self.nodes[::-1]

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        pending: dict[int, np.ndarray] = {id(root.node): seed}
        for node in self.reverse_order():
            g = pending.pop(id(node), None)
            if g is None:
                continue
            grads = node.backward_fn(g)
            for t, gt in zip(node.inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                if t.node is None:
                    # leaf: accumulate across backward calls
                    if t.grad is None:
                        t.grad = np.array(gt, dtype=t.dtype, copy=True)
                    else:
                        t.grad = t.grad + gt
                else:
                    key = id(t.node)
                    if key in pending:
                        pending[key] = pending[key] + gt
                    else:
                        pending[key] = gt


def backward(loss: Tensor, grad=None) -> None:
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones(loss.shape, dtype=loss.dtype)
    else:
        seed = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor requiring grad")
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    Tape.from_root(loss).run(loss, seed)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _operand(a, b)
    b = _operand(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return _result(ad / bd, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(ad ** exponent, (a,),
                   lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) overflowing to inf yields exactly 0, which is the correct limit
    s = np.negative(x)
    with np.errstate(over="ignore"):
        np.exp(s, out=s)
    s += 1
    return np.reciprocal(s, out=s)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = a.data
    s = _sigmoid(x)
    return _result(x * s, (a,), lambda g: (g * s * (1 + x * (1 - s)),), "silu")


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _result(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def pick(a: Tensor, index) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]`` for a 2-D tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (rows, index), g)
        return (full,)

    return _result(a.data[rows, index], (a,), bw, "pick")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {ad.shape[1]} vs {bd.shape[0]}")

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (N, F) and weight (O, F)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ValueError(f"linear expects (N, F) input and (O, F) weight, got {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ValueError(f"linear feature dimension mismatch: input has {xd.shape[1]}, weight expects {wd.shape[1]}")
    out = xd @ wd.T
    inputs: tuple = (x, weight)
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"linear bias must have shape ({wd.shape[0]},), got {bias.shape}")
        out = out + bias.data
        inputs = (x, weight, bias)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, inputs, bw, "linear")


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    p = _softmax(logits.data, axis)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (logits,), bw, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    x = logits.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (logits,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _tap(xp: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int) -> tuple:
    return (slice(None), slice(None),
            slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_dense(x, w, stride, padding, ho, wo):
    """groups=1 convolution via im2col; returns output and a backward closure."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        xm = x.reshape(n, cin, h * wd)
        wm = w.reshape(cout, cin)
        out = np.matmul(wm, xm).reshape(n, cout, h, wd)

        def bw(g):
            gm = g.reshape(n, cout, h * wd)
            gx = np.matmul(wm.T, gm).reshape(x.shape)
            gw = np.tensordot(gm, xm, axes=([0, 2], [0, 2])).reshape(w.shape)
            return gx, gw

        return out, bw

    xp = _pad(x, padding)
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[_tap(xp, i, j, ho, wo, stride)]
    cols = cols.reshape(n, cin * kh * kw, ho * wo)
    wm = w.reshape(cout, cin * kh * kw)
    out = np.matmul(wm, cols).reshape(n, cout, ho, wo)

    def bw(g):
        gm = g.reshape(n, cout, ho * wo)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.matmul(wm.T, gm).reshape(n, cin, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[_tap(gxp, i, j, ho, wo, stride)] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return out, bw


def _conv_depthwise(x, w, stride, padding, ho, wo):
    n, c, h, wd = x.shape
    _, _, kh, kw = w.shape
    xp = _pad(x, padding)
    taps = w.reshape(c, kh, kw)[None, :, :, :, None, None]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            np.multiply(xp[_tap(xp, i, j, ho, wo, stride)], taps[:, :, i, j], out=tmp)
            out += tmp

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        gw = np.zeros(w.shape, dtype=w.dtype)
        buf = np.empty_like(g)
        for i in range(kh):
            for j in range(kw):
                sl = _tap(xp, i, j, ho, wo, stride)
                np.multiply(g, taps[:, :, i, j], out=buf)
                gxp[sl] += buf
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", xp[sl], g)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return out, bw


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with an (Cout, Cin/groups, Kh, Kw) kernel."""
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D (N, C, H, W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4-D (Cout, Cin/groups, Kh, Kw), got shape {weight.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups:
        raise ValueError(f"conv2d input channels ({cin}) not divisible by groups ({groups})")
    if cout % groups:
        raise ValueError(f"conv2d output channels ({cout}) not divisible by groups ({groups})")
    if cin_g != cin // groups:
        raise ValueError(f"conv2d kernel dimension 1 is {cin_g}, expected input channels / groups = {cin // groups}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")

    xd, wdat = x.data, weight.data
    if groups == 1:
        out, inner = _conv_dense(xd, wdat, stride, padding, ho, wo)
    elif groups == cin and cout == cin:
        out, inner = _conv_depthwise(xd, wdat, stride, padding, ho, wo)
    else:
        ci, co = cin // groups, cout // groups
        parts = [_conv_dense(np.ascontiguousarray(xd[:, gi * ci:(gi + 1) * ci]),
                             wdat[gi * co:(gi + 1) * co], stride, padding, ho, wo)
                 for gi in range(groups)]
        out = np.concatenate([p[0] for p in parts], axis=1)

        def inner(g):
            gx, gw = [], []
            for gi, (_, pbw) in enumerate(parts):
                a, b = pbw(np.ascontiguousarray(g[:, gi * co:(gi + 1) * co]))
                gx.append(a)
                gw.append(b)
            return np.concatenate(gx, axis=1), np.concatenate(gw, axis=0)

    return _result(out, (x, weight), inner, "conv2d")


# ---------------------------------------------------------------------------
# Normalization and pooling
# ---------------------------------------------------------------------------


def batch_norm2d(x: Tensor, scale: Tensor, shift: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place (unbiased
    variance, PyTorch convention); in eval mode they are used for normalization.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if n == 0:
        raise ValueError("batch_norm2d received an empty batch")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"batch_norm2d scale/shift must have length {c}")
    if eps <= 0:
        raise ValueError("batch_norm2d eps must be positive")
    xd = x.data
    gamma = scale.data.reshape(1, c, 1, 1)
    beta = shift.data.reshape(1, c, 1, 1)

    if training:
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gamma + beta
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.reshape(c).astype(running_var.dtype)

        def bw(g):
            gs = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gxhat_sum = (gb * scale.data).reshape(1, c, 1, 1)
                gxhat_dot = (gs * scale.data).reshape(1, c, 1, 1)
                gx = (inv / m) * (m * g * gamma - gxhat_sum - xhat * gxhat_dot)
            return gx, gs, gb

        return _result(out, (x, scale, shift), bw, "batch_norm2d")

    inv = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(1, c, 1, 1)
    xhat = (xd - running_mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv
    out = xhat * gamma + beta

    def bw_eval(g):
        return g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(out, (x, scale, shift), bw_eval, "batch_norm2d")


def adaptive_avg_pool2d(x: Tensor, output_size=1) -> Tensor:
    """Average over adaptive windows; window i spans [floor(i*H/o), ceil((i+1)*H/o))."""
    if x.ndim != 4:
        raise ValueError(f"adaptive_avg_pool2d expects (N, C, H, W), got {x.shape}")
    oh, ow = (output_size, output_size) if isinstance(output_size, int) else output_size
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("adaptive_avg_pool2d needs H, W >= 1")
    xd = x.data
    if (oh, ow) == (1, 1):
        out = xd.mean(axis=(2, 3), keepdims=True)

        def bw1(g):
            return (np.broadcast_to(g / (h * w), xd.shape),)

        return _result(out, (x,), bw1, "adaptive_avg_pool2d")

    rows = [(i * h // oh, -(-(i + 1) * h // oh)) for i in range(oh)]
    cols = [(j * w // ow, -(-(j + 1) * w // ow)) for j in range(ow)]
    out = np.empty((n, c, oh, ow), dtype=xd.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = xd[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw(g):
        gx = np.zeros(xd.shape, dtype=xd.dtype)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / area)[:, :, None, None]
        return (gx,)

    return _result(out, (x,), bw, "adaptive_avg_pool2d")

