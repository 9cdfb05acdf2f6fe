"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

Eager, tape-free engine in the micrograd style: every operation computes its
value immediately and records a backward closure plus references to its
parents.  ``backward()`` on a scalar output walks the reachable nodes in
exact reverse creation order, which is a valid topological order because
inputs are always created before their outputs.

Design constraints honoured here:
  * float64 everywhere (checkpoints downcast separately),
  * logsumexp is its own primitive so log-domain iterations stay stable,
  * any non-finite op output raises immediately instead of propagating,
  * nothing is mutated in place after the forward pass.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have shapes the requested op cannot combine."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf, which the engine treats as an error state."""


_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph recording (values only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in output")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array participating in a reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _finite("tensor", self.data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None
        self._op = "leaf"
        self._id = next(_ids)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, op: str, parents: tuple["Tensor", ...],
              backward: Callable) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = _finite(op, data)
        out.grad = None
        out._id = next(_ids)
        out._op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic (numpy broadcasting rules) --------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _check_broadcast(op: str, a: "Tensor", b: "Tensor") -> None:
        try:
            np.broadcast_shapes(a.data.shape, b.data.shape)
        except ValueError:
            raise ShapeError(f"{op}: operands have incompatible shapes "
                             f"{a.data.shape} and {b.data.shape}") from None

    def __add__(self, other):
        other = Tensor._coerce(other)
        Tensor._check_broadcast("add", self, other)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

        return Tensor._make(self.data + other.data, "add", (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._coerce(other)
        Tensor._check_broadcast("sub", self, other)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

        return Tensor._make(self.data - other.data, "sub", (a, b), backward)

    def __rsub__(self, other):
        return Tensor._coerce(other) - self

    def __mul__(self, other):
        other = Tensor._coerce(other)
        Tensor._check_broadcast("mul", self, other)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))

        return Tensor._make(self.data * other.data, "mul", (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        Tensor._check_broadcast("div", self, other)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g / b.data, a.data.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._make(self.data / other.data, "div", (a, b), backward)

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __neg__(self):
        a = self
        return Tensor._make(-self.data, "neg", (a,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise TypeError("pow: exponent must be a python scalar")
        a, c = self, float(exponent)

        def backward(g):
            return (g * c * np.power(a.data, c - 1.0),)

        return Tensor._make(np.power(self.data, c), "pow", (a,), backward)

    # -- matmul ---------------------------------------------------------------

    def __matmul__(self, other):
        other = Tensor._coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or \
                self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(f"matmul: operands have incompatible shapes "
                             f"{self.data.shape} and {other.data.shape}")
        a, b = self, other

        def backward(g):
            return (g @ b.data.T, a.data.T @ g)

        return Tensor._make(self.data @ other.data, "matmul", (a, b), backward)

    # -- unary pointwise -------------------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(self.data)

        def backward(g):
            return (g * out_data,)

        return Tensor._make(out_data, "exp", (a,), backward)

    def log(self):
        a = self
        return Tensor._make(np.log(self.data), "log", (a,), lambda g: (g / a.data,))

    def tanh(self):
        a = self
        out_data = np.tanh(self.data)

        def backward(g):
            return (g * (1.0 - out_data * out_data),)

        return Tensor._make(out_data, "tanh", (a,), backward)

    def sigmoid(self):
        a = self
        out_data = _sigmoid(self.data)

        def backward(g):
            return (g * out_data * (1.0 - out_data),)

        return Tensor._make(out_data, "sigmoid", (a,), backward)

    def softplus(self):
        a = self
        out_data = np.maximum(self.data, 0.0) + np.log1p(np.exp(-np.abs(self.data)))

        def backward(g):
            return (g * _sigmoid(a.data),)

        return Tensor._make(out_data, "softplus", (a,), backward)

    def relu(self):
        a = self
        mask = self.data > 0.0

        def backward(g):
            return (g * mask,)

        return Tensor._make(np.where(mask, self.data, 0.0), "relu", (a,), backward)

    def clip(self, lo: float, hi: float):
        """Clamp values to [lo, hi]; gradient passes only inside the interval."""
        a = self
        mask = (self.data >= lo) & (self.data <= hi)

        def backward(g):
            return (g * mask,)

        return Tensor._make(np.clip(self.data, lo, hi), "clip", (a,), backward)

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        in_shape = self.data.shape

        def backward(g):
            return (_spread(g, in_shape, axis, keepdims),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), "sum",
                            (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        in_shape = self.data.shape
        count = self.data.size if axis is None else \
            int(np.prod([in_shape[ax] for ax in _normalize_axes(axis, self.data.ndim)]))

        def backward(g):
            return (_spread(g, in_shape, axis, keepdims) / count,)

        return Tensor._make(self.data.mean(axis=axis, keepdims=keepdims), "mean",
                            (a,), backward)

    def logsumexp(self, axis: int, keepdims: bool = False):
        """Numerically stable log(sum(exp(x))) along one axis."""
        a = self
        m = np.max(self.data, axis=axis, keepdims=True)
        shifted = np.exp(self.data - m)
        total = np.sum(shifted, axis=axis, keepdims=True)
        out_keep = m + np.log(total)
        out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)

        def backward(g):
            g_keep = g if keepdims else np.expand_dims(g, axis)
            return (g_keep * (shifted / total),)

        return Tensor._make(out_data, "logsumexp", (a,), backward)

    # -- shape manipulation -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        in_shape = self.data.shape

        def backward(g):
            return (g.reshape(in_shape),)

        return Tensor._make(self.data.reshape(shape), "reshape", (a,), backward)

    def broadcast_to(self, shape):
        shape = tuple(shape)
        a = self
        in_shape = self.data.shape
        try:
            out_data = np.broadcast_to(self.data, shape)
        except ValueError:
            raise ShapeError(f"broadcast_to: cannot broadcast {in_shape} to {shape}") from None

        def backward(g):
            return (_unbroadcast(g, in_shape),)

        return Tensor._make(out_data, "broadcast", (a,), backward)

    def __getitem__(self, key):
        a = self
        in_shape = self.data.shape
        out_data = self.data[key]
        if not isinstance(out_data, np.ndarray):
            out_data = np.asarray(out_data)

        def backward(g):
            gx = np.zeros(in_shape)
            gx[key] = g
            return (gx,)

        return Tensor._make(out_data.copy(), "slice", (a,), backward)

    # -- autodiff ----------------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into `.grad` of every requires_grad leaf.

        self must be scalar.  Nodes are visited in exact reverse creation
        order, so the result is bit-deterministic for a fixed graph.
        """
        if self.data.shape != ():
            raise ShapeError(f"backward: output must be scalar, got shape {self.data.shape}")

        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[Tensor] = [self]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen.add(node._id)
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._id, reverse=True)

        grads: dict[int, np.ndarray] = {self._id: np.ones(())}
        for node in nodes:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward_fn is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(parent._id)
                grads[parent._id] = pg if acc is None else acc + pg


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _normalize_axes(axis, ndim: int) -> tuple:
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _spread(g: np.ndarray, in_shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        for ax in sorted(_normalize_axes(axis, len(in_shape))):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


# -- multi-input and structured ops -----------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    shapes = [t.data.shape for t in tensors]
    base = list(shapes[0])
    for s in shapes[1:]:
        probe = list(s)
        if len(probe) != len(base):
            raise ShapeError(f"concat: rank mismatch among inputs {shapes}")
        probe[axis] = base[axis]
        if probe != base:
            raise ShapeError(f"concat: incompatible input shapes {shapes} on axis {axis}")
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        "concat", tuple(tensors), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2D convolution, stride 1, zero 'same' padding, square odd kernel (1x1 or 3x3).

    x: (N, C, H, W), w: (O, C, k, k), b: (O,).  Output (N, O, H, W).
    """
    x = Tensor._coerce(x)
    w = Tensor._coerce(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.data.shape} and {w.data.shape}")
    n, c, h, wd = x.data.shape
    o, cw, kh, kw = w.data.shape
    if cw != c or kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel {w.data.shape} incompatible with input {x.data.shape}")
    k = kh
    pad = k // 2

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # (N, C, H, W, k, k) -> (N, C*k*k, H*W), matching w.reshape(O, C*k*k)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, h * wd)
    w2 = w.data.reshape(o, c * k * k)
    out = np.matmul(w2, cols).reshape(n, o, h, wd)
    if b is not None:
        b = Tensor._coerce(b)
        if b.data.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.data.shape} does not match {o} filters")
        out = out + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(n, o, h * wd))
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gcols = np.matmul(w2.T, g2)
        gcols = gcols.reshape(n, c, k, k, h, wd)
        gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        for di in range(k):
            for dj in range(k):
                gxp[:, :, di:di + h, dj:dj + wd] += gcols[:, :, di, dj]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return Tensor._make(out, "conv2d", parents, backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2.  Spatial extents must be even."""
    x = Tensor._coerce(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial extents must be even, got {x.data.shape}")
    a = x
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return Tensor._make(out, "avg_pool2", (a,), backward)


def upsample2(x: Tensor) -> Tensor:
    """2x nearest-neighbour upsampling on the two trailing spatial axes."""
    x = Tensor._coerce(x)
    n, c, h, w = x.data.shape
    a = x
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._make(out, "upsample2", (a,), backward)


# -- gradient checking ---------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing backward() against central finite differences."""

    passed: bool
    max_rel_error: float
    step: float
    tol: float
    per_input: dict[str, float] = field(default_factory=dict)


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor] | dict[str, Tensor],
              step: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued f against central differences.

    The relative error for each input tensor is the max absolute deviation
    scaled by the largest finite-difference gradient magnitude of that
    tensor (floored at 1e-12), so constant functions check out at zero.
    Finite-difference evaluations rerun f on the same tensors with perturbed
    data, keeping the computation path identical to the differentiated one.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"gradcheck: step {step} outside [1e-6, 1e-3]")
    if isinstance(inputs, dict):
        names = list(inputs.keys())
        tensors = [inputs[k] for k in names]
        call = lambda: f(**{k: t for k, t in zip(names, tensors)})
    else:
        names = [f"input{i}" for i in range(len(inputs))]
        tensors = list(inputs)
        call = lambda: f(*tensors)

    for t in tensors:
        t.grad = None
    out = call()
    if out.data.shape != ():
        raise ShapeError("gradcheck: f must be scalar-valued")
    out.backward()
    analytic = [np.zeros(t.data.shape) if t.grad is None else t.grad.copy()
                for t in tensors]

    per_input: dict[str, float] = {}
    worst = 0.0
    for name, t, ana in zip(names, tensors, analytic):
        flat = t.data.reshape(-1)
        fd = np.zeros(flat.shape)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(call().data)
            flat[i] = orig - step
            lo = float(call().data)
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * step)
        fd = fd.reshape(t.data.shape)
        scale = max(np.max(np.abs(fd)), 1e-12)
        err = float(np.max(np.abs(ana - fd)) / scale)
        per_input[name] = err
        worst = max(worst, err)

    return GradCheckReport(passed=worst < tol, max_rel_error=worst,
                           step=step, tol=tol, per_input=per_input)
