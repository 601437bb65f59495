"""Dense float64 tensors with eager, single-use reverse-mode differentiation.

Every op records its parents and a backward closure at forward time. Nodes
carry a per-thread sequence number, so ``backward`` can replay the reachable
part of the graph in exact reverse execution order. A graph is consumed by
its first ``backward``; running it again raises :class:`GraphConsumedError`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand extents are incompatible with the requested op."""


class GraphConsumedError(RuntimeError):
    """A graph was already differentiated and its saved state released."""


_state = threading.local()


def _counter() -> itertools.count:
    c = getattr(_state, "counter", None)
    if c is None:
        c = _state.counter = itertools.count()
    return c


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_counter())
        self._consumed = False

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # parents that are constants now stay constants for this graph, even
        # if their flag is switched back on before backward runs
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor, trace: list | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    ``trace``, when given, receives the op name of each interior node in
    the order it is differentiated.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward")
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        for p in t._parents:
            if p is not None and p.requires_grad and id(p) not in nodes:
                stack.append(p)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if t.is_leaf:
            if t._consumed:
                raise GraphConsumedError("graph already consumed by a previous backward")
            if g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if t._backward is None:
            raise GraphConsumedError("graph already consumed by a previous backward")
        if trace is not None:
            trace.append(t.op)
        if g is not None:
            pgrads = t._backward(g)
            for p, pg in zip(t._parents, pgrads):
                if pg is None or p is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        t._backward = None
        t._parents = ()
        t._consumed = True


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    return _make(a.data**e, (a,), lambda g: (g * e * a.data ** (e - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def max_all(a: Tensor) -> Tensor:
    """Global maximum; the gradient goes to the first arg-max entry."""
    idx = int(np.argmax(a.data))

    def bw(g):
        ga = np.zeros(a.data.size)
        ga[idx] = g.reshape(-1)[0]
        return (ga.reshape(a.shape),)

    return _make(np.array(a.data.reshape(-1)[idx]), (a,), bw, "max")


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; ties send the gradient to the first maximum."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g, axis=axis)
        return (ga,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), bw, "amax")


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(a.data[index], (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra, attention
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
        "softmax",
    )


# ---------------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C,H,W) or (N,C,H,W) with ``w`` (O,C,k,k)."""
    x, w = as_tensor(x), as_tensor(w)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects (N,)C,H,W input and O,C,k,k kernel; got {x.shape}, {w.shape}")
    n, c, h, wd = xd.shape
    o, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise DimensionError(f"kernel {w.shape} incompatible with input {x.shape}")
    if k % 2 == 0:
        raise DimensionError(f"kernel extent must be odd, got {k}")
    if pad < 0 or stride < 1:
        raise DimensionError("pad must be >= 0 and stride >= 1")
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise DimensionError(f"kernel {k}x{k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = cols[:, :, :ho, :wo]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    parents = (x, w) if b is None else (x, w, as_tensor(b))

    def bw(g):
        g4 = g[None] if single else g
        gw = np.tensordot(g4, cols, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g4, w.data, axes=([1], [0]))  # n,ho,wo,c,k,k
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
            if single:
                gx = gx[0]
        grads = (gx, gw)
        if b is not None:
            grads += (g4.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out[0] if single else out, parents, bw, "conv2d")


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` mean pooling over the last two axes."""
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"extent {h}x{w} not divisible by {factor}")
    f = factor
    out = x.data.reshape(*lead, h // f, f, w // f, f).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, f, axis=-2), f, axis=-1) / (f * f),)

    return _make(out, (x,), bw, "avg_pool2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    *lead, h, w = x.shape
    f = factor
    out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)
    return _make(out, (x,), lambda g: (g.reshape(*lead, h, f, w, f).sum(axis=(-3, -1)),), "upsample")


def bilinear_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Sample ``x`` (..., H, W) at normalized ``grid`` (H', W', 2) locations.

    Grid entries are (x, y) in [-1, 1] with pixel centers at
    ``-1 + (2i + 1)/W`` (no corner alignment). Taps outside the image read 0.
    All leading axes of ``x`` share the one grid.
    """
    x, grid = as_tensor(x), as_tensor(grid)
    if grid.ndim != 3 or grid.shape[-1] != 2:
        raise DimensionError(f"grid must be H'xW'x2, got {grid.shape}")
    *lead, h, w = x.shape
    flat = x.data.reshape(-1, h * w)
    px = ((grid.data[..., 0] + 1.0) * w - 1.0) / 2.0
    py = ((grid.data[..., 1] + 1.0) * h - 1.0) / 2.0
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0

    taps = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(valid, yi * w + xi, 0)
            vals = flat[:, idx] * valid  # (B, H', W')
            taps.append((dx, dy, wx, wy, idx, valid, vals))

    out = sum(wx * wy * vals for _, _, wx, wy, _, _, vals in taps)
    out_shape = (*lead, *grid.shape[:2])

    def bw(g):
        gb = g.reshape(-1, *grid.shape[:2])
        gx = None
        if x.requires_grad:
            gflat = np.zeros_like(flat)
            for _, _, wx, wy, idx, valid, _ in taps:
                wgt = (wx * wy * valid).reshape(-1)
                np.add.at(gflat, (slice(None), idx.reshape(-1)), gb.reshape(gb.shape[0], -1) * wgt)
            gx = gflat.reshape(x.shape)
        ggrid = None
        if grid.requires_grad:
            dpx = np.zeros(grid.shape[:2])
            dpy = np.zeros(grid.shape[:2])
            for dx, dy, wx, wy, _, _, vals in taps:
                sx = 1.0 if dx else -1.0
                sy = 1.0 if dy else -1.0
                dpx += (gb * vals).sum(axis=0) * sx * wy
                dpy += (gb * vals).sum(axis=0) * sy * wx
            ggrid = np.stack([dpx * w / 2.0, dpy * h / 2.0], axis=-1)
        return gx, ggrid

    return _make(out.reshape(out_shape), (x, grid), bw, "bilinear_sample")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

BCE_EPS = 1e-7


def loss_bce(pred: Tensor, target: Tensor, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy with ``pred`` clamped to [eps, 1 - eps]."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"bce shape mismatch: {pred.shape} vs {target.shape}")
    p = np.clip(pred.data, eps, 1.0 - eps)
    t = target.data
    n = p.size
    lp, l1p = np.log(p), np.log1p(-p)
    value = -(t * lp + (1.0 - t) * l1p).mean()
    inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)

    def bw(g):
        gp = g * (-t / p + (1.0 - t) / (1.0 - p)) / n * inside
        gt = g * -(lp - l1p) / n
        return gp, gt

    return _make(np.array(value), (pred, target), bw, "bce")


def loss_mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size
    return _make(np.array((d * d).mean()), (a, b), lambda g: (g * 2 * d / n, -g * 2 * d / n), "mse")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: list[float]
    tol: float
    eps: float
    analytic: list[np.ndarray] = field(repr=False, default_factory=list)
    numeric: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def _relative_error(a: np.ndarray, n: np.ndarray) -> float:
    diff = float(np.max(np.abs(a - n))) if a.size else 0.0
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)))
    return diff / scale if scale > 1e-10 else diff


def check_gradients(
    f: Callable[..., Tensor],
    inputs: Iterable,
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    The per-input error is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    taken over the checked entries (absolute when both vanish). With
    ``max_entries`` only a seeded random subset of each input is perturbed.
    """
    arrays = [np.array(as_tensor(v).data, dtype=np.float64) for v in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(f(*leaves))
    analytic_full = [leaf.grad for leaf in leaves]

    rng = np.random.default_rng(seed)
    errors, analytic, numeric = [], [], []
    for k, base in enumerate(arrays):
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_idx = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        num = np.empty(flat_idx.size)
        for m, i in enumerate(flat_idx):
            vals = []
            for sign in (1.0, -1.0):
                pert = [a.copy() for a in arrays]
                pert[k].reshape(-1)[i] += sign * eps
                with no_grad():
                    vals.append(float(f(*[Tensor(p) for p in pert]).data))
            num[m] = (vals[0] - vals[1]) / (2 * eps)
        ana = analytic_full[k].reshape(-1)[flat_idx]
        errors.append(_relative_error(ana, num))
        analytic.append(ana)
        numeric.append(num)
    return GradCheckReport(errors=errors, tol=tol, eps=eps, analytic=analytic, numeric=numeric)
