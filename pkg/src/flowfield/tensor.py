"""Dense tensors with reverse-mode automatic differentiation.

A thin tape on top of numpy arrays: each operation records its parents and a
vector-Jacobian product, and `backward` walks the graph once in reverse
topological order. float32 is the working precision for training; float64 is
used for gradient checking.

Operations never mutate their input arrays. Gradients accumulate additively
in `.grad` until `zero_grads` is called.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DomainError, EvaluationError, ShapeMismatchError

EPS = 1e-6

# Per-thread so independent graphs (e.g. parallel sampling workers) can
# disable recording without racing each other.
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager disabling graph recording (inference / sampling)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    # -- backward pass -------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in seen and (p.requires_grad or p._parents):
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _record(out_data, parents, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp()
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_op(a, b, fwd):
    try:
        return fwd(a, b)
    except ValueError as exc:
        raise ShapeMismatchError(f"shapes {a.shape} and {b.shape} are not broadcastable") from exc


# -- elementwise binary ops ---------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = _broadcast_op(a.data, b.data, np.add)
    return _record(out, (a, b), lambda: lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = _broadcast_op(a.data, b.data, np.subtract)
    return _record(out, (a, b), lambda: lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = _broadcast_op(a.data, b.data, np.multiply)
    return _record(out, (a, b), lambda: lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = _broadcast_op(a.data, b.data, np.divide)
    return _record(out, (a, b), lambda: lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


# -- elementwise unary ops ----------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda: lambda g: (-g,))


def power(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data ** np.asarray(p, dtype=a.dtype)
    return _record(out, (a,), lambda: lambda g: (
        g * p * a.data ** np.asarray(p - 1.0, dtype=a.dtype),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda: lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    return _record(np.log(a.data), (a,), lambda: lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda: lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.reciprocal(1.0 + np.exp(-a.data.astype(a.dtype)))
    return _record(out, (a,), lambda: lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = np.reciprocal(1.0 + np.exp(-a.data))
    out = a.data * sig
    return _record(out, (a,), lambda: lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _record(out, (a,), lambda: lambda g: (g * (a.data > 0),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    expm1 = np.expm1(a.data)
    out = np.where(a.data > 0, a.data, alpha * expm1).astype(a.dtype)
    return _record(out, (a,), lambda: lambda g: (
        g * np.where(a.data > 0, 1.0, alpha * (expm1 + 1.0)).astype(a.dtype),))


# -- reductions ----------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _record(np.asarray(out, dtype=a.dtype), (a,), lambda: lambda g: (
        _expand_reduced(g, a.shape, axis, keepdims),))


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=a.dtype)
    count = a.data.size if axis is None else a.shape[axis]
    return _record(np.asarray(out, dtype=a.dtype), (a,), lambda: lambda g: (
        _expand_reduced(g, a.shape, axis, keepdims) / count,))


def reduce_max(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def make_vjp():
        def vjp(g):
            if axis is None:
                mask = np.zeros_like(a.data)
                mask.reshape(-1)[np.argmax(a.data)] = 1.0
                return (mask * g,)
            idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
            gi = np.zeros_like(a.data)
            gk = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(gi, idx, gk, axis)
            return (gi,)

        return vjp

    return _record(np.asarray(out, dtype=a.dtype), (a,), make_vjp)


# -- shape manipulation ---------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from exc
    return _record(out, (a,), lambda: lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _record(out, (a,), lambda: lambda g: (np.transpose(g, inv),))


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def take(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]
    basic = _is_basic_key(key)  # no duplicate targets: plain += suffices

    def make_vjp():
        def vjp(g):
            gi = np.zeros_like(a.data)
            if basic:
                gi[key] += g
            else:
                np.add.at(gi, key, g)
            return (gi,)

        return vjp

    return _record(np.asarray(out, dtype=a.dtype), (a,), make_vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from exc
    sizes = [t.shape[axis] for t in tensors]

    def make_vjp():
        def vjp(g):
            splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
            return tuple(splits)

        return vjp

    return _record(out, tuple(tensors), make_vjp)


def repeat_last(a, repeats: int) -> Tensor:
    """Nearest-neighbor upsampling along the last axis."""
    a = as_tensor(a)
    out = np.repeat(a.data, repeats, axis=-1)
    return _record(out, (a,), lambda: lambda g: (
        g.reshape(g.shape[:-1] + (a.shape[-1], repeats)).sum(axis=-1),))


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(str(exc)) from exc

    def make_vjp():
        def vjp(g):
            da = np.matmul(g, np.swapaxes(b.data, -1, -2))
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return (_unbroadcast(da, a.shape), _unbroadcast(db, b.shape))

        return vjp

    return _record(out, (a, b), make_vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def make_vjp():
        def vjp(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - dot),)

        return vjp

    return _record(out, (a,), make_vjp)


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """1D cross-correlation.

    x: [C_in, N] or [B, C_in, N]; w: [C_out, C_in, k].
    """
    x = as_tensor(x)
    w = as_tensor(w, like=x)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.ndim != 3:
        raise ShapeMismatchError(f"conv1d expects x rank 2/3 and w rank 3, got {x.shape}, {w.shape}")
    B, ci, n = xd.shape
    co, wci, k = w.shape
    if wci != ci:
        raise ShapeMismatchError(f"conv1d channel mismatch: input {ci}, weight {wci}")
    n_out = (n + 2 * padding - k) // stride + 1
    if k > n + 2 * padding or n_out < 1:
        raise ShapeMismatchError(
            f"conv1d output would be empty: N={n}, k={k}, stride={stride}, padding={padding}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    # [B, n_out, ci*k] @ [ci*k, co]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(B, n_out, ci * k)
    out = np.matmul(cols, w.data.reshape(co, ci * k).T).transpose(0, 2, 1)
    out = np.ascontiguousarray(out)

    def make_vjp():
        def vjp(g):
            gd = g[None] if squeeze else g
            gcols = gd.transpose(0, 2, 1)  # [B, n_out, co]
            dw = np.matmul(
                gcols.reshape(B * n_out, co).T, cols.reshape(B * n_out, ci * k)
            ).reshape(co, ci, k)
            dcols = np.matmul(gcols, w.data.reshape(co, ci * k))  # [B, n_out, ci*k]
            dwin = dcols.reshape(B, n_out, ci, k).transpose(0, 2, 1, 3)
            dxp = np.zeros_like(xp)
            for i in range(k):
                stop = i + stride * (n_out - 1) + 1
                dxp[:, :, i:stop:stride] += dwin[:, :, :, i]
            dx = dxp[:, :, padding:padding + n] if padding else dxp
            if squeeze:
                dx = dx[0]
            return (dx, dw)

        return vjp

    return _record(out[0] if squeeze else out, (x, w), make_vjp)


def rms_normalize(a, eps: float = EPS) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + eps), as one fused node."""
    a = as_tensor(a)
    d = a.shape[-1]
    ms = np.mean(a.data * a.data, axis=-1, keepdims=True, dtype=a.dtype)
    inv = (ms + np.asarray(eps, dtype=a.dtype)) ** np.asarray(-0.5, dtype=a.dtype)
    out = a.data * inv

    def make_vjp():
        def vjp(g):
            dot = np.sum(g * a.data, axis=-1, keepdims=True)
            return (g * inv - a.data * (inv ** 3 * dot / d),)

        return vjp

    return _record(out, (a,), make_vjp)


# -- gradient checking ------------------------------------------------------------

def grad_check(f, params, h: float = 1e-5) -> dict:
    """Compare analytic gradients of scalar `f()` against central differences.

    `params` is an iterable of (name, Tensor) pairs in float64. Returns a map
    name -> max relative error over that parameter's coordinates.
    """
    params = list(params)
    for name, p in params:
        if p.data.dtype != np.float64:
            raise ContractError(f"grad_check requires float64 parameters, {name} is {p.data.dtype}")
    zero_grads(p for _, p in params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("forward pass produced a non-finite value")
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params}

    report = {}
    for name, p in params:
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                hi = f().item()
            flat[i] = orig - h
            with no_grad():
                lo = f().item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise EvaluationError(f"non-finite forward value while perturbing {name}")
            num[i] = (hi - lo) / (2.0 * h)
        ana = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-12)
        report[name] = float(np.max(np.abs(ana - num) / denom)) if flat.size else 0.0
    return report
