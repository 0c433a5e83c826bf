"""Dense tensors with reverse-mode automatic differentiation.

Numpy arrays provide the storage and kernels; this module adds a tape of
parent links and backward closures so scalar losses can be differentiated
with respect to any leaf marked ``requires_grad``. Every op validates that
its output is finite and fails fast otherwise.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "silu",
    "concat",
    "backward",
    "finite_diff_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)
_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf; computation is aborted."""


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the per-op NaN/Inf guard; returns the previous setting.

    The guard costs one reduction per op, which adds up in tight training
    loops. Disabling it changes no numerical results, only how early a
    non-finite value is reported (the optimizer still validates gradients).
    """
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # A single reduction catches any NaN/Inf: non-finite elements poison the sum.
    if _finite_checks and not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Immutable dense float array, optionally a node in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        # ascontiguousarray promotes 0-d to 1-d, which would break scalar
        # losses; 0-d arrays are always contiguous so skip them.
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- basic introspection --------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.data.dtype != self.data.dtype:
                raise ShapeError(
                    f"dtype mismatch: {self.data.dtype} vs {other.data.dtype}"
                )
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        return _op(
            "add",
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return _op("neg", -self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._coerce(other)
        return _op(
            "sub",
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        return _op(
            "mul",
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        out = a / b
        return _op(
            "div",
            out,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, self.shape),
                _unbroadcast(-g * a / (b * b), other.shape),
            ),
        )

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent: float):
        p = float(exponent)
        a = self.data
        return _op("pow", a**p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _op(
            "reshape",
            self.data.reshape(shape),
            (self,),
            lambda g: (g.reshape(old),),
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _op(
            "transpose",
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        )

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def broadcast_to(self, shape) -> "Tensor":
        shape = tuple(shape)
        old = self.shape
        return _op(
            "broadcast_to",
            np.ascontiguousarray(np.broadcast_to(self.data, shape)),
            (self,),
            lambda g: (_unbroadcast(g, old),),
        )

    def __getitem__(self, idx) -> "Tensor":
        out = self.data[idx]
        shape = self.shape
        dtype = self.data.dtype

        def bwd(g):
            full = np.zeros(shape, dtype=dtype)
            full[idx] += g
            return (full,)

        return _op("getitem", np.ascontiguousarray(out), (self,), bwd)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        return _op("sum", self.data.sum(axis=axis, keepdims=keepdims), (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else _axis_extent(self.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities --------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _op("exp", out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return _op("log", np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return _op("sqrt", out, (self,), lambda g: (g * 0.5 / out,))


def _axis_extent(shape, axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    return int(np.prod([shape[a] for a in axis]))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the pre-broadcast operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _op(name: str, data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(data)
    out.grad = None
    out.node_id = next(_node_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- fused ops ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes with broadcast batch dims."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects Tensors")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        if bd.ndim == 2 and ad.ndim > 2:
            # Linear-layer case: collapse batch axes into one GEMM instead of
            # materializing per-element outer products and reducing them.
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    if bd.ndim == 2 and ad.ndim > 2:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(
            ad.shape[:-1] + (bd.shape[-1],)
        )
    else:
        out = ad @ bd
    return _op("matmul", out, (a, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _op("softmax", out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = (inv * (gg - m1 - xhat * m2)).astype(a.dtype)
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = _unbroadcast((g * xhat).sum(axis=reduce_axes), gamma.shape)
        dbeta = _unbroadcast(g.sum(axis=reduce_axes), beta.shape)
        return dx, dgamma, dbeta

    return _op("layer_norm", out, (x, gamma, beta), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    a = x.data
    # a*a*a instead of a**3: integer-power ufuncs are an order of magnitude
    # slower on float32 arrays.
    u = _GELU_C * (a + _GELU_A * (a * a * a))
    t = np.tanh(u)
    out = 0.5 * a * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * (a * a))
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du),)

    return _op("gelu", out, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    a = x.data
    s = 1.0 / (1.0 + np.exp(-a))
    out = a * s

    def bwd(g):
        return (g * s * (1.0 + a * (1.0 - s)),)

    return _op("silu", out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty sequence")
    dtype = tensors[0].data.dtype
    if any(t.data.dtype != dtype for t in tensors):
        raise ShapeError("concat dtype mismatch")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _op("concat", out, tuple(tensors), bwd)


# -- backward pass --------------------------------------------------------------


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Differentiate a scalar loss; returns node-id -> gradient for grad leaves.

    The traversed graph is released afterwards, so a second backward through
    the same nodes is an error. Each call overwrites ``leaf.grad`` with the
    gradient from this loss alone.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ShapeError("loss is not connected to any tensor requiring grad")

    # Iterative topological order over the requires-grad subgraph.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    result: dict[int, Tensor] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # Leaf gradients are per-call: the tape is consumed by this
            # traversal, so accumulating across separate backward() calls
            # would silently mix gradients from different steps.
            node.grad = g
            result[node.node_id] = Tensor(g)
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # Release the tape so memory is freed and reuse is caught early.
        node._parents = ()
        node._backward = None
    return result


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> float:
    """Max relative error between central differences and autodiff for f at x."""
    base = Tensor(x.data.astype(np.float64), requires_grad=True)
    loss = f(base)
    backward(loss)
    ad = base.grad
    if ad is None:
        ad = np.zeros_like(base.data)
    flat = base.data.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        probe = base.data.copy()
        probe.ravel()[i] = orig + eps
        with no_grad():
            hi = f(Tensor(probe)).item()
        probe.ravel()[i] = orig - eps
        with no_grad():
            lo = f(Tensor(probe)).item()
        fd = (hi - lo) / (2.0 * eps)
        adi = ad.ravel()[i]
        err = abs(fd - adi) / max(abs(fd), abs(adi), 1e-8)
        worst = max(worst, err)
    return worst
