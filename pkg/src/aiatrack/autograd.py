"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor` whose buffer is read-only. When a
:class:`Tape` is active and any input requires a gradient, the op appends a
node (output, parents, backward closure) to the tape. Recording order is a
topological order, so :meth:`Tape.gradient` only has to walk the node list
backwards once.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
one shape must be a trailing suffix of the other (a bias over the last axis,
a positional table over the last two axes), or one side is a scalar.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _observers() -> list:
    obs = getattr(_state, "softmax_observers", None)
    if obs is None:
        obs = _state.softmax_observers = []
    return obs


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A learnable leaf. The optimizer swaps ``data`` between steps."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)

    def assign(self, values: np.ndarray) -> None:
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"cannot assign {arr.shape} into parameter of shape {self.data.shape}")
        arr.flags.writeable = False
        self.data = arr


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records ops executed inside its ``with`` block.

    >>> x = Parameter([1.0, 2.0])
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.gradient(y, [x])[0]
    array([2., 4.])
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tapes must be exited in LIFO order")
        stack.pop()

    def _record(self, out: Tensor, parents, backward) -> None:
        self.nodes.append(_Node(out, tuple(parents), backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed: np.ndarray | None = None):
        if seed is None:
            if target.size != 1:
                raise ShapeError(f"gradient target must be a scalar, got shape {target.shape}")
            seed = np.ones_like(target.data)
        self.grads = {id(target): np.asarray(seed, dtype=np.float64)}
        keep = {id(s) for s in sources}
        for node in reversed(self.nodes):
            key = id(node.out)
            g = self.grads.get(key) if key in keep else self.grads.pop(key, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in self.grads:
                    self.grads[pid] = self.grads[pid] + pg
                else:
                    self.grads[pid] = pg
        return [self.grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    t = Tensor._wrap(out, op)
    stack = _tape_stack()
    if stack:
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            t.requires_grad = True
            stack[-1]._record(t, parents, backward)
    return t


def _broadcast_shape(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not suffix-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if not shape:
        return np.asarray(g.sum())
    return g.reshape((-1,) + shape).sum(axis=0)


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return _emit(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _emit(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _emit(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "maximum")
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _emit(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)), "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "minimum")
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _emit(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)), "minimum")


# --- shape ops ---------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a) -> Tensor:
    """Swap the two trailing axes (matrix transpose over a batch)."""
    a = _as_tensor(a)
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tensors, backward, "concat")


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(a.data[index]), (a,), backward, "getitem")


# --- reductions / products -------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the trailing two axes.

    ``b`` may be a plain 2-D weight shared across ``a``'s batch axes; otherwise
    both operands must carry identical batch axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit(ad @ bd, (a, b), backward, "matmul")


def linear(x, w, b=None) -> Tensor:
    """Affine map along the last axis: ``x @ w + b``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if axis != -1 and axis != x.ndim - 1:
        raise ValueError("softmax only supports the last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    for obs in _observers():
        obs.append(y)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), backward, "softmax")


softmax_rows = softmax


@contextmanager
def record_softmax():
    """Collect every softmax output produced inside the block (thread-local)."""
    sink: list[np.ndarray] = []
    _observers().append(sink)
    try:
        yield sink
    finally:
        _observers().remove(sink)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        return dx, (flat_g * xhat.reshape(-1, n)).sum(axis=0), flat_g.sum(axis=0)

    return _emit(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


# --- convolution support ------------------------------------------------------

def im2col(x, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Unfold ``(B, H, W, C)`` into ``(B, Ho, Wo, kernel*kernel*C)`` patches."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col expects (B, H, W, C), got {x.shape}")
    B, H, W, C = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Ho = (H + 2 * padding - kernel) // stride + 1
    Wo = (W + 2 * padding - kernel) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"im2col: kernel {kernel} too large for input {x.shape}")
    cols = np.empty((B, Ho, Wo, kernel, kernel, C))
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    padded_shape = xp.shape

    def backward(g):
        g6 = g.reshape(B, Ho, Wo, kernel, kernel, C)
        gp = np.zeros(padded_shape)
        for i in range(kernel):
            for j in range(kernel):
                gp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += g6[:, :, :, i, j, :]
        if padding:
            gp = gp[:, padding:padding + H, padding:padding + W, :]
        return (gp,)

    return _emit(cols.reshape(B, Ho, Wo, kernel * kernel * C), (x,), backward, "im2col")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """NHWC convolution with weights shaped ``(k, k, C_in, C_out)``."""
    w = _as_tensor(w)
    k, k2, cin, cout = w.shape
    if k != k2:
        raise ShapeError("conv2d supports square kernels only")
    if _as_tensor(x).shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {_as_tensor(x).shape[-1]} != weight {cin}")
    cols = im2col(x, k, stride, padding)
    return linear(cols, reshape(w, (k * k * cin, cout)), b)


# --- finite-difference checker ----------------------------------------------

class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    eps: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0

    def summary(self) -> str:
        lines = [f"grad_check eps={self.eps:g} tol={self.tol:g} entries={self.checked_entries} "
                 f"max_rel_err={self.max_rel_err:.3e} -> {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.per_param.items():
            lines.append(f"  {name:<48s} {err:.3e}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], params, eps: float = 1e-4, tol: float = 1e-4,
               floor: float = 1e-6, max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central differences.

    ``params`` is a sequence of tensors or a ``{name: tensor}`` mapping; their
    ``data`` is perturbed in place (and restored). Entries whose analytic and
    numeric gradients are both below ``floor`` are compared on an absolute
    scale. ``max_entries`` caps the entries probed per parameter (sampled with
    ``seed``); ``None`` probes all of them.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    tensors = [p for _, p in named]

    def evaluate() -> float:
        try:
            val = f()
        except NonFiniteError as exc:
            raise GradCheckError(f"objective became non-finite during grad_check: {exc}") from exc
        return float(val.data.sum())

    with Tape() as tape:
        try:
            loss = f()
        except NonFiniteError as exc:
            raise GradCheckError(f"objective is non-finite at the check point: {exc}") from exc
    analytic = tape.gradient(loss, tensors)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, True, tol, eps)
    for (name, p), ga in zip(named, analytic):
        base = p.data.copy()
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_idx = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        numeric = np.empty(len(flat_idx))
        try:
            for n, idx in enumerate(flat_idx):
                bumped = base.copy().reshape(-1)
                bumped[idx] += eps
                p.data = bumped.reshape(base.shape)
                up = evaluate()
                bumped[idx] -= 2 * eps
                p.data = bumped.reshape(base.shape)
                down = evaluate()
                numeric[n] = (up - down) / (2 * eps)
        finally:
            base.flags.writeable = False
            p.data = base
        err = relative_error(ga.reshape(-1)[flat_idx], numeric, floor)
        worst = float(err.max()) if err.size else 0.0
        report.per_param[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
        report.checked_entries += len(flat_idx)
    report.passed = report.max_rel_err < tol
    return report
