"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Only the handful of primitives needed by the MLP velocity network are
provided. Broadcasting is limited to exact shape matches and scalars; the
two intentional exceptions are ``linear`` (row-vector bias) and
``row_scale`` (per-sample constant factors).

Recording happens only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = mse(net(x), y)
    grads = tape.backward(loss)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf from its inputs."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad_node: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeNode:
    out: Tensor
    parents: tuple[Tensor, ...]
    parent_nodes: tuple[Optional[int], ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of primitive ops for one backward pass.

    By default ``backward`` clears the tape; pass ``retain=True`` to run
    several backward passes over the same recording.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        out.grad_node = len(self.nodes)
        self.nodes.append(
            TapeNode(out, parents, tuple(p.grad_node for p in parents), vjp)
        )

    def backward(self, loss: Tensor, retain: bool = False) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` for every leaf that requires grad."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[Tensor, np.ndarray] = {}
        if loss.grad_node is None:
            if loss.requires_grad:
                grads[loss] = np.ones_like(loss.data)
            return grads
        if loss.grad_node >= len(self.nodes) or self.nodes[loss.grad_node].out is not loss:
            raise RuntimeError("loss was not recorded on this tape")

        pending: dict[int, np.ndarray] = {loss.grad_node: np.ones_like(loss.data)}
        for idx in range(loss.grad_node, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            for parent, pnode, pg in zip(node.parents, node.parent_nodes, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pnode is None:
                    if parent in grads:
                        grads[parent] = grads[parent] + pg
                    else:
                        grads[parent] = pg
                elif pnode in pending:
                    pending[pnode] = pending[pnode] + pg
                else:
                    pending[pnode] = pg
        if not retain:
            self.clear()
        return grads

    def clear(self) -> None:
        for node in self.nodes:
            node.out.grad_node = None
        self.nodes = []


class no_grad:
    """Suspend recording inside an active tape (used for catch-up targets)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not None:
            raise RuntimeError("tape stack corrupted: no_grad exit mismatch")
        stack.pop()
        return False


def backward(loss: Tensor, tape: Tape, retain: bool = False) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss, retain=retain)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by tensor op")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, vjp)
    return out


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")
    if a.size == 1 and b.size == 1 and a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        c = float(b)
        return _result(a.data - c, (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scale(a, b)
    b = as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _result(
        ad * bd, (a, b), lambda g: (_reduce_to(g * bd, sa), _reduce_to(g * ad, sb))
    )


def scale(a, c: Scalar) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    x = a.data
    return _result(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with ``bias`` broadcast over rows."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data

    def vjp(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _result(xd @ wd + bias.data, (x, weight, bias), vjp)


def row_scale(x, factors) -> Tensor:
    """Multiply row ``i`` of ``x`` by the constant ``factors[i]``.

    ``factors`` is treated as data, never differentiated (it carries
    per-sample times and skip gains).
    """
    x = as_tensor(x)
    f = np.asarray(factors.data if isinstance(factors, Tensor) else factors, dtype=np.float64)
    f = f.reshape(-1)
    if x.data.ndim != 2 or f.shape[0] != x.shape[0]:
        raise ShapeError(f"row_scale: {f.shape[0]} factors for tensor of shape {x.shape}")
    col = f[:, None]
    return _result(x.data * col, (x,), lambda g: (g * col,))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis with affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: bad shapes {x.shape}, {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def vjp(g):
        gx = g * gd
        dx = inv * (
            gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(xhat * gd + beta.data, (x, gamma, beta), vjp)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return _result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    d = sub(a, b)
    return mean(mul(d, d))


def stop_gradient(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data.copy())
