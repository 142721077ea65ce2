"""A small reverse-mode autodiff engine over float64 numpy arrays.

Each operation returns a new :class:`Tensor` holding references to its
parents and a closure that maps the output gradient onto them.
:meth:`Tensor.backward` walks the recorded graph in reverse topological
order and then releases it, so a second call on the same root raises.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, StateError

DTYPE = np.float64


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self._op = _op
        self._released = False

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    @staticmethod
    def _make(data, parents, backward, op: str) -> "Tensor":
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
        if needs:
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._released:
            raise StateError("backward() already called on this graph; run a new forward pass")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for node in order:
            node._parents = ()
            node._backward = None
        self._released = True

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other) -> "Tensor":
        o = other if isinstance(other, Tensor) else Tensor(other)
        a_shape, b_shape = self.shape, o.shape
        return Tensor._make(
            self.data + o.data, (self, o),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)), "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        o = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-o)

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        o = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, o.data
        return Tensor._make(
            a * b, (self, o),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
        return Tensor._make(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g), "matmul")

    # -- shape ops ---------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape")

    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def take_rows(self, cols: np.ndarray) -> "Tensor":
        """Select ``self[i, cols[i]]`` for every row ``i``."""
        rows = np.arange(self.shape[0])
        shape = self.shape

        def back(g):
            out = np.zeros(shape, dtype=DTYPE)
            out[rows, cols] = g
            return (out,)

        return Tensor._make(self.data[rows, cols], (self,), back, "take_rows")

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- nonlinearities ----------------------------------------------------
    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * sign,), "abs")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,), "log")

    def clip_min(self, floor: float) -> "Tensor":
        keep = self.data >= floor
        return Tensor._make(np.maximum(self.data, floor), (self,), lambda g: (g * keep,), "clip_min")

    def softmax(self) -> "Tensor":
        """Row-wise softmax over the last axis of a 2-D tensor."""
        z = self.data - self.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)

        def back(g):
            return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

        return Tensor._make(p, (self,), back, "softmax")


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid (no padding), stride-1 cross-correlation.

    ``x`` is (B, C, H, W), ``w`` is (O, C, k, k), ``b`` is (O,).
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shapes {x.shape} and {w.shape} do not align")
    k = w.shape[2]
    if w.shape[3] != k or x.shape[2] < k or x.shape[3] < k:
        raise DimensionError(f"conv2d kernel {w.shape[2:]} invalid for input {x.shape}")
    xd, wd = x.data, w.data
    cols = sliding_window_view(xd, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    out = np.einsum("bchwij,ocij->bohw", cols, wd, optimize=True) + b.data[None, :, None, None]

    def back(g):
        gw = np.einsum("bchwij,bohw->ocij", cols, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        gcols = sliding_window_view(gp, (k, k), axis=(2, 3))  # B,O,H,W,k,k
        gx = np.einsum("bohwij,ocij->bchw", gcols, wd[:, :, ::-1, ::-1], optimize=True)
        return gx, gw, gb

    return Tensor._make(out, (x, w, b), back, "conv2d")


def pairwise_distance(x: Tensor) -> Tensor:
    """Euclidean distance matrix between the rows of a 2-D tensor.

    The gradient through a zero distance is taken as zero.
    """
    xd = x.data
    diff = xd[:, None, :] - xd[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(d > 0, g / d, 0.0)
        s = w + w.T
        return (s.sum(axis=1, keepdims=True) * xd - s @ xd,)

    return Tensor._make(d, (x,), back, "pairwise_distance")


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of squared Euclidean distances between rows of ``a`` and ``b``."""
    aa = (a * a).sum(axis=1, keepdims=True)
    bb = (b * b).sum(axis=1, keepdims=True).T
    return aa + bb - (a @ b.T) * 2.0
