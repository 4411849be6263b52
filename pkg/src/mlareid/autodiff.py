"""Dense float64 tensors with reverse-mode automatic differentiation.

Every downstream module (attention operators, backbone, contrastive loss)
is built from the ops here. Conventions:

* float64 throughout; image-like data is row-major NHWC,
* the tape is built eagerly per forward pass and freed by ``backward``,
* identical inputs give bit-identical outputs on a single thread,
* normalization ops guard zero denominators with ``NORM_EPS``.

Gradients accumulate into ``Tensor.grad`` across backward calls until
explicitly zeroed; a tensor outside the tape never receives one.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

NORM_EPS = 1e-12  # inside l1/l2 norms and batch-norm variance

ArrayLike = "np.ndarray | float | int | list | Tensor"


class Tensor:
    """An n-dimensional float64 array with optional gradient tape participation."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        """A view of the same data with no tape participation."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every tensor reachable from this scalar.

        The graph is released afterwards (no reuse); gradients of leaves
        accumulate across calls unless zeroed.
        """
        if self.data.size != 1:
            raise ContractError(f"backward expects a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            node._backward = None
            node._parents = ()

    # Operator sugar; the module-level functions are the canonical API.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Parameter(Tensor):
    """A named, trainable tensor; the name is its checkpoint path."""

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _scalar_err(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * 0.5 / data)

    return _make(data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0.0))

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # stable in both tails
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        _accumulate(a, np.broadcast_to(gx, a.shape).copy())

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if not a.requires_grad:
            return
        gx = g / count
        if axis is not None and not keepdims:
            gx = np.expand_dims(gx, axis)
        _accumulate(a, np.broadcast_to(gx, a.shape).copy())

    return _make(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(orig))

    return _make(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse))

    return _make(data, (a,), backward)


def getitem(a, idx) -> Tensor:
    """Slice or fancy indexing; duplicate indices accumulate on the way back."""
    a = as_tensor(a)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            gx = np.zeros_like(a.data)
            np.add.at(gx, idx, g)
            _accumulate(a, gx)

    return _make(np.ascontiguousarray(data), (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(data, ts, backward)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; leading dims broadcast, inner dims must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must have rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.shape[-1]} (axis {a.ndim - 1} of a) "
            f"vs {b.shape[-2]} (axis {b.ndim - 2} of b)"
        )
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def conv2d(x, kernel, bias=None, stride: int = 1, zero_pad: int = 0) -> Tensor:
    """2-D cross-correlation on NHWC input with an HWIO kernel.

    Output spatial extent is floor((dim + 2*pad - k)/stride) + 1. The
    backward pass scatters through the same sliding windows the forward
    contraction uses, so analytic gradients match the naive loop oracle
    bit-for-bit up to float reassociation.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be NHWC rank 4, got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be [kh,kw,c_in,c_out] rank 4, got shape {kernel.shape}")
    n, h, w, c_in = x.shape
    kh, kw, kc_in, c_out = kernel.shape
    if kc_in != c_in:
        raise DimensionError(f"conv2d: channel axis 3 of input has {c_in} channels, kernel expects {kc_in}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be positive, got {stride}")
    if zero_pad < 0:
        raise ContractError(f"conv2d: zero_pad must be non-negative, got {zero_pad}")
    hp, wp = h + 2 * zero_pad, w + 2 * zero_pad
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp} (spatial axes 1,2)"
        )
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    b = as_tensor(bias) if bias is not None else None
    if b is not None and b.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {b.shape} does not match output channels ({c_out},)")

    padded = np.pad(x.data, ((0, 0), (zero_pad, zero_pad), (zero_pad, zero_pad), (0, 0)))
    # windows: [n, h_out, w_out, c_in, kh, kw]
    win = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    data = np.tensordot(win, kernel.data, axes=((4, 5, 3), (0, 1, 2)))
    if b is not None:
        data = data + b.data

    def backward(g):
        if kernel.requires_grad:
            gk = np.tensordot(win, g, axes=((0, 1, 2), (0, 1, 2)))  # [c_in,kh,kw,c_out]
            _accumulate(kernel, gk.transpose(1, 2, 0, 3))
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            for a_off in range(kh):
                for b_off in range(kw):
                    sl_h = slice(a_off, a_off + stride * h_out, stride)
                    sl_w = slice(b_off, b_off + stride * w_out, stride)
                    gpad[:, sl_h, sl_w, :] += np.matmul(g, kernel.data[a_off, b_off].T)
            if zero_pad:
                gpad = gpad[:, zero_pad:hp - zero_pad, zero_pad:wp - zero_pad, :]
            _accumulate(x, gpad)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 1, 2)))

    parents = (x, kernel) if b is None else (x, kernel, b)
    return _make(np.ascontiguousarray(data), parents, backward)


# ---------------------------------------------------------------------------
# normalizations and pooling
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; output sums to 1 along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            _accumulate(x, data * (g - dot))

    return _make(data, (x,), backward)


def _axis_tuple(axis, ndim: int) -> tuple[int, ...]:
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def l2_normalize(x, axis=-1) -> Tensor:
    """x / sqrt(sum(x^2) + eps) along ``axis`` (eps guards the zero vector)."""
    x = as_tensor(x)
    axes = _axis_tuple(axis, x.ndim)
    sq = (x.data * x.data).sum(axis=axes, keepdims=True) + NORM_EPS
    r = np.sqrt(sq)
    data = x.data / r

    def backward(g):
        if x.requires_grad:
            dot = (g * x.data).sum(axis=axes, keepdims=True)
            _accumulate(x, g / r - x.data * dot / (sq * r))

    return _make(data, (x,), backward)


def l1_normalize(x, axis=-1) -> Tensor:
    """x / (sum(|x|) + eps) along ``axis``."""
    x = as_tensor(x)
    axes = _axis_tuple(axis, x.ndim)
    d = np.abs(x.data).sum(axis=axes, keepdims=True) + NORM_EPS
    data = x.data / d

    def backward(g):
        if x.requires_grad:
            dot = (g * x.data).sum(axis=axes, keepdims=True)
            _accumulate(x, g / d - np.sign(x.data) * dot / (d * d))

    return _make(data, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """NHWC feature map -> per-channel spatial mean, shape [n, c]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: input must be NHWC rank 4, got shape {x.shape}")
    n, h, w, c = x.shape
    data = x.data.mean(axis=(1, 2))

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy())

    return _make(data, (x,), backward)


class BatchNormState:
    """Running statistics for one batch-norm site (not tape-tracked)."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch norm over all leading axes (channels last).

    Training mode normalizes by biased batch statistics and folds them into
    the running stats; eval mode uses the frozen running stats. The running
    update is state mutation outside the tape.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match channel axis ({c},)"
        )
    bshape = (1,) * (x.ndim - 1) + (c,)
    g_r = reshape(gamma, bshape)
    b_r = reshape(beta, bshape)
    axes = tuple(range(x.ndim - 1))
    if training:
        m = tmean(x, axis=axes, keepdims=True)
        centered = sub(x, m)
        v = tmean(mul(centered, centered), axis=axes, keepdims=True)
        mom = state.momentum
        state.running_mean = (1.0 - mom) * state.running_mean + mom * m.data.reshape(c)
        state.running_var = (1.0 - mom) * state.running_var + mom * v.data.reshape(c)
        inv = div(1.0, sqrt(add(v, NORM_EPS)))
        return add(mul(mul(centered, inv), g_r), b_r)
    rm = state.running_mean.reshape(bshape)
    rv = state.running_var.reshape(bshape)
    scale = 1.0 / np.sqrt(rv + NORM_EPS)
    return add(mul(mul(sub(x, rm), Tensor(scale)), g_r), b_r)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative disagreement between backward() and central differences.

    ``f`` must be a pure Tensor -> scalar map. Per coordinate the error is
    |analytic - numeric| / max(1, |analytic|, |numeric|); the max over
    coordinates is returned.
    """
    if step <= 0:
        raise ContractError(f"finite_diff_check: step must be positive, got {step}")
    base = as_tensor(x).data.copy()
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ContractError(f"finite_diff_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad.copy()

    numeric = np.zeros_like(base).reshape(-1)
    flat = base.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        fp = f(Tensor(base)).item()
        flat[i] = saved - step
        fm = f(Tensor(base)).item()
        flat[i] = saved
        numeric[i] = (fp - fm) / (2.0 * step)
    numeric = numeric.reshape(base.shape)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
