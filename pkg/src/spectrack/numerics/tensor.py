"""Reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional backward closure; calling
``backward()`` on a scalar result topologically sorts the recorded graph and
accumulates gradients into every ``requires_grad`` node.  The op set is the
one the tracker needs (matmul, softmax, layer norm, GELU, 2-D convolution,
axis pooling, channel norms, concat/gather/scatter) -- nothing more.

All ops raise ``NonFiniteError`` if they produce NaN/Inf; non-finite values
are an error state, never silently propagated.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "concat",
    "row_scatter",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True
_finite_checks = True


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


@contextmanager
def no_grad():
    """Disable graph recording (inference / finite-difference probing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite output of {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # make `ndarray <op> Tensor` defer to the Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            # views (broadcast results, slices) must not leak out as .grad
            self.grad = g.copy() if (g.base is not None or not g.flags.writeable) else g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar; reduce first")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        out_data = self.data + other.data

        def backward(g):
            self._accum(_unbroadcast(g, self.data.shape))
            other._accum(_unbroadcast(g, other.data.shape))

        return Tensor._make(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accum(-g)

        return Tensor._make(-self.data, (self,), backward, "neg")

    def __sub__(self, other):
        other = Tensor._lift(other)
        out_data = self.data - other.data

        def backward(g):
            self._accum(_unbroadcast(g, self.data.shape))
            other._accum(_unbroadcast(-g, other.data.shape))

        return Tensor._make(out_data, (self, other), backward, "sub")

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        out_data = self.data * other.data

        def backward(g):
            self._accum(_unbroadcast(g * other.data, self.data.shape))
            other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(out_data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = self.data / other.data  # non-finite results raise below

        def backward(g):
            self._accum(_unbroadcast(g / other.data, self.data.shape))
            other._accum(_unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))

        return Tensor._make(out_data, (self, other), backward, "div")

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def pow(self, exponent: float) -> "Tensor":
        e = float(exponent)
        out_data = self.data ** e

        def backward(g):
            self._accum(g * e * self.data ** (e - 1.0))

        return Tensor._make(out_data, (self,), backward, "pow")

    __pow__ = pow

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward(g):
            self._accum(g * out_data)

        return Tensor._make(out_data, (self,), backward, "exp")

    def log(self) -> "Tensor":
        out_data = np.log(self.data)

        def backward(g):
            self._accum(g / self.data)

        return Tensor._make(out_data, (self,), backward, "log")

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def backward(g):
            self._accum(g * 0.5 / out_data)

        return Tensor._make(out_data, (self,), backward, "sqrt")

    def abs(self) -> "Tensor":
        out_data = np.abs(self.data)

        def backward(g):
            self._accum(g * np.sign(self.data))

        return Tensor._make(out_data, (self,), backward, "abs")

    def maximum(self, other) -> "Tensor":
        # ties route the gradient to self (subgradient choice)
        other = Tensor._lift(other)
        out_data = np.maximum(self.data, other.data)

        def backward(g):
            take_self = self.data >= other.data
            self._accum(_unbroadcast(g * take_self, self.data.shape))
            other._accum(_unbroadcast(g * ~take_self, other.data.shape))

        return Tensor._make(out_data, (self, other), backward, "maximum")

    def minimum(self, other) -> "Tensor":
        other = Tensor._lift(other)
        out_data = np.minimum(self.data, other.data)

        def backward(g):
            take_self = self.data <= other.data
            self._accum(_unbroadcast(g * take_self, self.data.shape))
            other._accum(_unbroadcast(g * ~take_self, other.data.shape))

        return Tensor._make(out_data, (self, other), backward, "minimum")

    def clip(self, lo: float, hi: float) -> "Tensor":
        return self.maximum(float(lo)).minimum(float(hi))

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.data.shape))

        return Tensor._make(out_data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def l2norm(self, axis: int, keepdims: bool = False, eps: float = 0.0) -> "Tensor":
        """Euclidean norm along `axis` (the channel/spectral axis in practice)."""
        sq = (self.data * self.data).sum(axis=axis, keepdims=keepdims)
        out_data = np.sqrt(sq + eps)

        def backward(g):
            denom = out_data if keepdims else np.expand_dims(out_data, axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            safe = np.where(denom > 0, denom, 1.0)
            self._accum(gg * self.data / safe)

        return Tensor._make(out_data, (self,), backward, "l2norm")

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def backward(g):
            self._accum(g.reshape(self.data.shape))

        return Tensor._make(out_data, (self,), backward, "reshape")

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def backward(g):
            self._accum(g.transpose(inv))

        return Tensor._make(out_data, (self,), backward, "transpose")

    def swapaxes(self, a: int, b: int) -> "Tensor":
        out_data = self.data.swapaxes(a, b)

        def backward(g):
            self._accum(g.swapaxes(a, b))

        return Tensor._make(out_data, (self,), backward, "swapaxes")

    def gather_rows(self, idx) -> "Tensor":
        """Row slice along axis 0 by an index array (duplicates allowed)."""
        idx = np.asarray(idx, dtype=np.intp)
        out_data = self.data[idx]

        def backward(g):
            gx = np.zeros_like(self.data)
            np.add.at(gx, idx, g)
            self._accum(gx)

        return Tensor._make(out_data, (self,), backward, "gather_rows")

    # -- linear algebra --------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = Tensor._lift(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul requires >=2-D operands")
        if a.ndim != b.ndim and not (a.ndim == 2 or b.ndim == 2):
            raise ShapeError(f"matmul rank mismatch: {a.shape} @ {b.shape}")
        if a.ndim == b.ndim and a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner-dim mismatch: {a.shape} @ {b.shape}")
        out_data = a @ b

        def backward(g):
            ga = g @ b.swapaxes(-1, -2)
            gb = a.swapaxes(-1, -2) @ g
            self._accum(_unbroadcast(ga, a.shape))
            other._accum(_unbroadcast(gb, b.shape))

        return Tensor._make(out_data, (self, other), backward, "matmul")

    __matmul__ = matmul

    # -- nonlinearities --------------------------------------------------------

    def sigmoid(self) -> "Tensor":
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            self._accum(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), backward, "sigmoid")

    def gelu(self) -> "Tensor":
        """Exact (erf-based) GELU."""
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out_data = x * cdf

        def backward(g):
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
            self._accum(g * (cdf + x * pdf))

        return Tensor._make(out_data, (self,), backward, "gelu")

    def softmax(self, axis: int = -1, additive_mask: np.ndarray | None = None) -> "Tensor":
        # `additive_mask` (plain ndarray, not differentiated) may contain -inf
        # to forbid entries; each slice must keep at least one finite logit.
        x = self.data
        if additive_mask is not None:
            x = x + additive_mask
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)
        _check_finite(out_data, "softmax")
        out = Tensor(out_data)
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)

            def backward(g):
                dot = (g * out_data).sum(axis=axis, keepdims=True)
                self._accum(out_data * (g - dot))

            out._backward = backward
        return out

    def layer_norm(self, eps: float = 1e-6) -> "Tensor":
        """Normalize the last axis to zero mean / unit variance (no affine)."""
        x = self.data
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        out_data = xc * inv

        def backward(g):
            n = x.shape[-1]
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * out_data).mean(axis=-1, keepdims=True)
            self._accum(inv * (g - gm - out_data * gy))

        return Tensor._make(out_data, (self,), backward, "layer_norm")

    def conv2d(self, weight: "Tensor", padding: int = 1) -> "Tensor":
        """2-D convolution, stride 1.  self: (Cin,H,W); weight: (Cout,Cin,kh,kw)."""
        x, w = self.data, weight.data
        if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
            raise ShapeError(f"conv2d shapes: x={x.shape}, w={w.shape}")
        cin, H, W = x.shape
        cout, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        oh = H + 2 * padding - kh + 1
        ow = W + 2 * padding - kw + 1
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, cin * kh * kw)
        out_data = (cols @ w.reshape(cout, -1).T).T.reshape(cout, oh, ow)

        def backward(g):
            g2 = g.reshape(cout, oh * ow)
            gw = (g2 @ cols).reshape(w.shape)
            weight._accum(gw)
            gcols = g2.T @ w.reshape(cout, -1)  # (oh*ow, cin*kh*kw)
            gxp = np.zeros_like(xp)
            gc = gcols.reshape(oh, ow, cin, kh, kw).transpose(2, 3, 4, 0, 1)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + oh, j:j + ow] += gc[:, i, j]
            if padding:
                gx = gxp[:, padding:-padding, padding:-padding]
            else:
                gx = gxp
            self._accum(gx)

        return Tensor._make(out_data, (self, weight), backward, "conv2d")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [Tensor._lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    return Tensor._make(out_data, ts, backward, "concat")


def row_scatter(rows: Tensor, idx, length: int, fill: Tensor) -> Tensor:
    """Place `rows` at positions `idx` of a (length, C) matrix; remaining rows
    are copies of `fill` (a (C,) or (1, C) row).  Differentiable in both."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = Tensor._lift(rows)
    fill = Tensor._lift(fill)
    c = rows.data.shape[-1]
    out_data = np.broadcast_to(fill.data.reshape(1, c), (length, c)).copy()
    out_data[idx] = rows.data
    hole = np.ones(length, dtype=bool)
    hole[idx] = False

    def backward(g):
        rows._accum(g[idx])
        fill._accum(g[hole].sum(axis=0).reshape(fill.data.shape))

    return Tensor._make(out_data, (rows, fill), backward, "row_scatter")
