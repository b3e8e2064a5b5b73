"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the operations needed by the reconstruction loss and the U-Net are
provided.  Every op records a closure that maps the output gradient to the
gradients of its inputs; :meth:`Tensor.backward` walks the graph once in
reverse topological order and accumulates additively.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DIV_EPS = 1e-12

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- graph -----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data + a.data.dtype.type(b), (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data - a.data.dtype.type(b), (a,), lambda g: (g,))
    if _is_scalar(a):
        b = as_tensor(b)
        return _make(b.data.dtype.type(a) - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        s = a.data.dtype.type(b)
        return _make(a.data * s, (a,), lambda g: (g * s,))
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _guard(den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if np.any(den == 0):
        raise ZeroDivisionError("division by an exact zero denominator")
    small = np.abs(den) < DIV_EPS
    if not small.any():
        return den, small
    return np.where(small, np.copysign(DIV_EPS, den), den), small


def div(a, b) -> Tensor:
    if _is_scalar(b):
        if b == 0:
            raise ZeroDivisionError("division by zero")
        return mul(a, 1.0 / b)
    b = as_tensor(b)
    den, clamped = _guard(b.data)
    if _is_scalar(a):
        num = b.data.dtype.type(a)

        def back_s(g):
            gb = -g * num / (den * den)
            return (np.where(clamped, 0, gb) if clamped.any() else gb,)

        return _make(num / den, (b,), back_s)
    a = as_tensor(a)
    _check_same(a, b, "div")
    ad = a.data
    out = ad / den

    def back(g):
        gb = -g * out / den
        if clamped.any():
            gb = np.where(clamped, 0, gb)
        return g / den, gb

    return _make(out, (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    if not _is_scalar(exponent):
        raise TypeError("power() supports scalar exponents only")
    a = as_tensor(a)
    ad = a.data
    p = ad.dtype.type(exponent)
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # numerically stable for large |x|
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def tabs(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)  # abs'(0) = 0
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    den, clamped = _guard(a.data)
    return _make(np.log(a.data), (a,), lambda g: (g / den,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    return _make(np.where(keep, a.data, a.dtype.type(lo)), (a,), lambda g: (g * keep,))


# -- reductions and shape ----------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    keep = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = a.data.sum(axis=axes)
    return _make(np.asarray(out), (a,), lambda g: (np.broadcast_to(g.reshape(keep), shape).copy(),))


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(tsum(a, axes), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(a.data[index], (a,), back)


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(not isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects rank-4 tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _make(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), back)


# -- convolution and resampling -------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> contiguous (N*oh*ow, C*kh*kw) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (Cout, Cin, kh, kw) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise ValueError("conv2d: invalid kernel/stride/padding")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0:
        raise ShapeError("conv2d: kernel larger than padded input")
    if span_h % stride or span_w % stride:
        raise ShapeError("conv2d: output size is not an exact integer for this stride")
    oh, ow = span_h // stride + 1, span_w // stride + 1
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pads) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    k2d = kernel.data.reshape(cout, cin * kh * kw)
    out = cols @ k2d.T  # (N*oh*ow, Cout)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))

    def back(g):
        gx = gk = gb = None
        g2d = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if kernel.requires_grad:
            gk = (g2d.T @ cols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g2d.sum(axis=0)
        if x.requires_grad:
            if stride == 1:
                # transposed convolution: full correlation with the flipped kernel
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                gcols = _im2col(gp, kh, kw, 1)
                kflip = kernel.data[:, :, ::-1, ::-1].reshape(cout, cin, kh * kw)
                kflip = kflip.transpose(0, 2, 1).reshape(cout * kh * kw, cin)
                gfull = (gcols @ kflip).reshape(n, h + 2 * padding, w + 2 * padding, cin)
                gx = gfull[:, padding:padding + h, padding:padding + w].transpose(0, 3, 1, 2)
                gx = np.ascontiguousarray(gx)
            else:
                dcols = (g2d @ k2d).reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[..., i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, back)


def maxpool2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), back)


def avgpool2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    xd = x.data[:, :, : 2 * h2, : 2 * w2]
    out = xd.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))

    def back(g):
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        return (gx,)

    return _make(out, (x,), back)


def upsample_nearest2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest2 expects a rank-4 tensor")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane to zero mean and unit variance."""
    x = as_tensor(x)
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat.astype(x.dtype), (x,), back)


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state shape {m.shape} != param shape {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, *self.betas, self.eps)


# -- verification ----------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-6,
    floor: float = 1e-10,
    sample: int | None = None,
    seed: int = 0,
) -> float:
    """Max elementwise relative error between backward() and central differences.

    ``floor`` bounds the denominator away from zero for vanishing gradients.
    ``sample`` limits the finite-difference probes to that many coordinates,
    drawn without replacement from ``seed``; by default every element is probed.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = (xt.grad if xt.grad is not None else np.zeros_like(x0)).reshape(-1)

    flat = x0.reshape(-1)
    idx = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, sample, replace=False))
    numeric = np.zeros(idx.size)
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(x0)).item()
            flat[i] = orig - eps
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * eps)
    a = analytic[idx]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    return float(np.max(np.abs(a - numeric) / denom))
