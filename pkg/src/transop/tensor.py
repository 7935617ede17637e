"""Dense float64 tensors with a reverse-mode differentiation tape.

Every differentiable op returns a new :class:`Tensor` holding its parents
and a closure mapping the output cotangent to parent cotangents. Calling
:meth:`Tensor.backward` on a scalar sorts the recorded graph topologically
and visits each node exactly once, accumulating into leaf ``grad`` arrays.

Broadcasting is deliberately narrow: equal shapes, a shape-``()`` scalar,
or a "bias" operand whose shape is a trailing suffix of the other's.
Anything else is a :class:`DimensionError`.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError

__all__ = [
    "DimensionError",
    "Tensor",
    "concat",
    "is_grad_enabled",
    "layer_norm",
    "matmul",
    "no_grad",
    "unfold3d",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Iterable[Tensor], backward: Backward, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        parents = tuple(parents)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- backward ---------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that is not on the tape")

        order = _toposort(self)
        cotangents: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = cotangents.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in cotangents:
                    cotangents[key] = cotangents[key] + pg
                else:
                    cotangents[key] = pg

    # -- operators ------------------------------------------------------------------

    def __add__(self, other) -> Tensor:
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, -_lift(other))

    def __rsub__(self, other) -> Tensor:
        return add(_lift(other), -self)

    def __neg__(self) -> Tensor:
        return self.scale(-1.0)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> Tensor:
        if not isinstance(other, (int, float)):
            raise TypeError("division is only defined by a Python scalar")
        return self.scale(1.0 / float(other))

    def __matmul__(self, other) -> Tensor:
        return matmul(self, _lift(other))

    def __getitem__(self, idx) -> Tensor:
        data = self.data[idx]
        if not _is_basic_index(idx):
            raise TypeError("only basic slicing is supported")
        shape = self.shape

        def backward(g):
            gx = np.zeros(shape)
            gx[idx] = g
            return (gx,)

        return Tensor._from_op(np.array(data, dtype=np.float64), (self,), backward, "slice")

    def scale(self, c: float) -> Tensor:
        c = float(c)
        return Tensor._from_op(self.data * c, (self,), lambda g: (g * c,), "scale")

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"reshape: cannot view {self.shape} as {shape}") from exc
        orig = self.shape
        return Tensor._from_op(data, (self,), lambda g: (g.reshape(orig),), "reshape")

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        if sorted(axes) != list(range(self.ndim)):
            raise DimensionError(f"transpose: {axes} is not a permutation of {self.ndim} axes")
        inverse = tuple(np.argsort(axes))
        data = self.data.transpose(axes)
        return Tensor._from_op(data, (self,), lambda g: (g.transpose(inverse),), "transpose")

    def swap_last(self) -> Tensor:
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(np.asarray(data, dtype=np.float64), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / n)

    def var(self, axis=None, keepdims: bool = False) -> Tensor:
        """Population variance."""
        shape = self.shape
        n = self.data.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))
        centered = self.data - self.data.mean(axis=axis, keepdims=True)
        data = (centered**2).sum(axis=axis, keepdims=keepdims) / n

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (2.0 / n * centered * g,)

        return Tensor._from_op(np.asarray(data, dtype=np.float64), (self,), backward, "var")

    def gelu(self) -> Tensor:
        x = self.data
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return Tensor._from_op(x * cdf, (self,), lambda g: (g * (cdf + x * pdf),), "gelu")

    def softmax(self, axis: int = -1) -> Tensor:
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return Tensor._from_op(y, (self,), backward, "softmax")

    def log_softmax(self, axis: int = -1) -> Tensor:
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - lse

        def backward(g):
            return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

        return Tensor._from_op(y, (self,), backward, "log_softmax")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _broadcast_kind(a: tuple[int, ...], b: tuple[int, ...]) -> str:
    if a == b:
        return "same"
    if b == ():
        return "scalar"
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return "suffix"
    return ""


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    if not kind:
        kind = _broadcast_kind(b.shape, a.shape)
        if not kind:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} are not compatible")
        a, b = b, a
    sb = b.shape

    def backward(g):
        return g, _reduce_to(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == () and b.shape != ():
        a, b = b, a
    if a.shape != b.shape and b.shape != ():
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} are not compatible")
    ad, bd = a.data, b.data

    def backward(g):
        gb = g * ad
        return g * bd, (gb.sum() if bd.ndim == 0 else gb)

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or a batched product with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return Tensor._from_op(data, tensors, backward, "concat")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    k = x.shape[-1]
    if gamma.shape != (k,) or beta.shape != (k,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last dim {k}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    gd = gamma.data

    def backward(g):
        gxhat = g * gd
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _reduce_to(g * xhat, (k,)), _reduce_to(g, (k,))

    return Tensor._from_op(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def unfold3d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Gather ``kernel**3`` neighbourhoods of a channels-last volume batch.

    ``x`` is ``[B, D, W, H, C]``; the result is ``[B, D', W', H', kernel**3 * C]``
    with each row flattened in (d, w, h, c) order and ``D' = (D + 2p - k) // s + 1``.
    """
    if x.ndim != 5:
        raise DimensionError(f"unfold3d: expected [B, D, W, H, C], got {x.shape}")
    b, *spatial, c = x.shape
    padded = [n + 2 * padding for n in spatial]
    if min(padded) < kernel:
        raise DimensionError(f"unfold3d: spatial dims {tuple(spatial)} smaller than kernel {kernel}")
    out = [(n - kernel) // stride + 1 for n in padded]
    xp = np.pad(x.data, ((0, 0), *[(padding, padding)] * 3, (0, 0))) if padding else x.data

    def window(i, j, l):
        return (
            slice(None),
            slice(i, i + stride * (out[0] - 1) + 1, stride),
            slice(j, j + stride * (out[1] - 1) + 1, stride),
            slice(l, l + stride * (out[2] - 1) + 1, stride),
            slice(None),
        )

    offsets = [(i, j, l) for i in range(kernel) for j in range(kernel) for l in range(kernel)]
    cols = np.empty((b, *out, len(offsets), c))
    for n, off in enumerate(offsets):
        cols[:, :, :, :, n, :] = xp[window(*off)]

    def backward(g):
        g = g.reshape(b, *out, len(offsets), c)
        gp = np.zeros(xp.shape)
        for n, off in enumerate(offsets):
            gp[window(*off)] += g[:, :, :, :, n, :]
        if padding:
            gp = gp[:, padding:-padding, padding:-padding, padding:-padding, :]
        return (gp,)

    return Tensor._from_op(cols.reshape(b, *out, len(offsets) * c), (x,), backward, "unfold3d")
