"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op builds a node holding its parents and a closure that
pushes the output gradient back into them. ``backward`` orders the graph
topologically (the tape) and replays the closures in reverse.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Per-thread switch that stops ops from recording the graph."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


class Tensor:
    """A float64 array plus an accumulated gradient of the same shape."""

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor's reflected ops

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.array(value, dtype=np.float64).reshape(self.shape)

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # never in place: g may be shared with sibling nodes or be a read-only view
        g = np.asarray(g, dtype=np.float64).reshape(self.shape)
        self._grad = g if self._grad is None else self._grad + g

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- graph construction ---------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out._grad = None
        out.op = op
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(as_tensor(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return texp(self)

    def log(self) -> "Tensor":
        return tlog(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


# ---------------------------------------------------------------------------
# tape / backward
# ---------------------------------------------------------------------------
def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64).reshape(loss.shape)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node._accumulate(g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._make(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return Tensor._make(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def tlog(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tsin(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def tcos(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return Tensor._make(np.maximum(a.data, b.data), (a, b),
                        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)), "maximum")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return Tensor._make(np.minimum(a.data, b.data), (a, b),
                        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)), "minimum")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sigmoid": sigmoid}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch one of add/sub/mul (binary) or relu/sigmoid (unary) by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("relu", "sigmoid"):
        return fn(a)
    if b is None:
        raise ValueError(f"{op} needs two operands")
    return fn(a, b)


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape [B, C, kh, kw, H', W'] over an already padded input."""
    B, C, H, W = x.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (B, C, kh, kw, Ho, Wo), (sb, sc, sh, sw, sh * stride, sw * stride), writeable=False)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of [C_in,H,W] (or batched [B,C_in,H,W]) input.

    The forward pass accumulates products in kernel row-major order
    (c_in, k_row, k_col) for every output element, so it reproduces a plain
    nested-loop convolution bit for bit.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    kd = kernels.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] input and [O,C,kh,kw] kernels, got {x.shape}, {kernels.shape}")
    B, C, H, W = xd.shape
    O, Ck, kh, kw = kd.shape
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = _windows(np.ascontiguousarray(xp), kh, kw, stride)
    Ho, Wo = win.shape[-2:]
    # one contiguous row per (c_in, k_row, k_col), in accumulation order
    cols = np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5)).reshape(C * kh * kw, B * Ho * Wo)
    taps = np.ascontiguousarray(kd.reshape(O, C * kh * kw).T)[:, :, None]

    acc = np.zeros((O, B * Ho * Wo))
    tmp = np.empty_like(acc)
    for r in range(C * kh * kw):
        np.multiply(taps[r], cols[r], out=tmp)
        acc += tmp
    if bias is not None:
        acc += bias.data[:, None]
    out = acc.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = gk = gb = None
        if kernels.requires_grad:
            gk = (g4.transpose(1, 0, 2, 3).reshape(O, -1) @ cols.T).reshape(O, C, kh, kw)
        if x.requires_grad:
            gcols = np.tensordot(kd, g4, axes=([0], [1]))  # [C,kh,kw,B,Ho,Wo]
            gxp = np.zeros((B, C, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gxp = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
            gx = gxp[0] if squeeze else gxp
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return Tensor._make(out[0] if squeeze else out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; ``mask`` False entries get exactly zero weight."""
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise ValueError("softmax input contains non-finite values")
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax mask removes every entry of a slice")
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw, "log_softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine params {gamma.shape}/{beta.shape} do not match last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._make(out, (x, gamma, beta), bw, "layernorm")


# ---------------------------------------------------------------------------
# checking
# ---------------------------------------------------------------------------
def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``t.data``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(fn().data.sum())
            flat[i] = old - h
            fm = float(fn().data.sum())
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(diff / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``."""
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    fn().sum().backward()
    worst = 0.0
    for t in inputs:
        worst = max(worst, relative_error(t.grad, numerical_grad(fn, t, h)))
    return worst
