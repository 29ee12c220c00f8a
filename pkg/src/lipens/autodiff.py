"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` carries a value, a lazily allocated gradient and the
closure needed to push gradients to its parents. Only the operations the
rest of the package needs are provided; there is no general broadcasting
except adding a bias vector to every row of a matrix.

Gradients accumulate: calling :meth:`Tensor.backward` twice without
:meth:`Tensor.zero_grad` on the leaves adds the second pass on top of the
first (same convention as most frameworks).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ._kernels import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (e.g. backward from a non-scalar)."""


def _as_array(data) -> np.ndarray:
    return np.array(data, dtype=np.float64)


class Tensor:
    """Dense float64 array that records how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray, dict], None] | None = None,
        op: str = "leaf",
    ):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph plumbing -----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar node into every reachable leaf."""
        if self.data.size != 1:
            raise GraphError(f"backward() requires a scalar output, got shape {self.shape}")
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

        # interior gradients are transient; leaves keep (and accumulate) theirs
        upstream: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
            else:
                node._backward(g, upstream)

    # -- operators ----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other) -> "Tensor":
        return add(_lift(other), scale(self, -1.0))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float, np.floating)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _send(upstream: dict[int, np.ndarray], node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node._backward is None:
        node._accumulate(g)
        return
    key = id(node)
    if key in upstream:
        upstream[key] = upstream[key] + g
    else:
        upstream[key] = g


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors (a 1-D right operand is treated as a column)."""
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise DimensionError(f"matmul expects 2-D @ 1-D/2-D, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g, upstream):
        # skip products whose result nobody needs (e.g. frozen weights)
        if a.requires_grad:
            _send(upstream, a, np.outer(g, b.data) if b.ndim == 1 else g @ b.data.T)
        if b.requires_grad:
            _send(upstream, b, a.data.T @ g)

    return Tensor(out_data, _parents=(a, b), _backward=backward, op="matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector added to each row of ``a``."""
    if a.shape == b.shape:
        def backward(g, upstream):
            _send(upstream, a, g)
            _send(upstream, b, g)

        return Tensor(a.data + b.data, _parents=(a, b), _backward=backward, op="add")
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def backward_bias(g, upstream):
            _send(upstream, a, g)
            _send(upstream, b, g.sum(axis=0))

        return Tensor(a.data + b.data, _parents=(a, b), _backward=backward_bias, op="add_bias")
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g, upstream):
        _send(upstream, a, c * g)

    return Tensor(c * a.data, _parents=(a,), _backward=backward, op="scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")

    def backward(g, upstream):
        _send(upstream, a, g * b.data)
        _send(upstream, b, g * a.data)

    return Tensor(a.data * b.data, _parents=(a, b), _backward=backward, op="mul")


def relu(x: Tensor) -> Tensor:
    """max(0, x) with derivative 0 at exactly 0."""
    xd = np.ascontiguousarray(x.data)

    def backward(g, upstream):
        _send(upstream, x, kernels.relu_backward(np.ascontiguousarray(g), xd))

    return Tensor(kernels.relu_forward(xd), _parents=(x,), _backward=backward, op="relu")


def abs_(x: Tensor) -> Tensor:
    """|x| with the sign subgradient (0 at 0)."""

    def backward(g, upstream):
        _send(upstream, x, g * np.sign(x.data))

    return Tensor(np.abs(x.data), _parents=(x,), _backward=backward, op="abs")


def square(x: Tensor) -> Tensor:
    def backward(g, upstream):
        _send(upstream, x, 2.0 * g * x.data)

    return Tensor(x.data * x.data, _parents=(x,), _backward=backward, op="square")


def sum_(x: Tensor) -> Tensor:
    """Sum of all elements, giving a scalar tensor."""

    def backward(g, upstream):
        _send(upstream, x, np.full(x.shape, float(g)))

    return Tensor(np.array(x.data.sum()), _parents=(x,), _backward=backward, op="sum")


def mean(x: Tensor) -> Tensor:
    return scale(sum_(x), 1.0 / x.data.size)


def row_l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor (gradient 0 on zero rows)."""
    if x.ndim != 2:
        raise DimensionError(f"row_l2_norm expects a 2-D tensor, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1))

    def backward(g, upstream):
        safe = np.where(norms > 0.0, norms, 1.0)
        unit = np.where(norms[:, None] > 0.0, x.data / safe[:, None], 0.0)
        _send(upstream, x, g[:, None] * unit)

    return Tensor(norms, _parents=(x,), _backward=backward, op="row_l2_norm")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate 2-D tensors along columns (or 1-D tensors end to end)."""
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    nd = parts[0].ndim
    if any(p.ndim != nd for p in parts):
        raise DimensionError("concat operands must share rank")
    ax = axis if nd == 2 else 0
    if nd == 2 and len({p.shape[0] for p in parts}) != 1:
        raise DimensionError("concat operands must share the row count")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g, upstream):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _send(upstream, p, g[:, lo:hi] if ax == 1 else g[lo:hi])

    return Tensor(
        np.concatenate([p.data for p in parts], axis=ax),
        _parents=tuple(parts),
        _backward=backward,
        op="concat",
    )


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over rows of ``logits`` against integer labels.

    The max-subtraction trick keeps large logits finite. ``reduction`` is
    ``"mean"`` (training) or ``"sum"`` (per-sample input gradients).
    """
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    if labels.shape != (n,):
        raise DimensionError(f"{n} logit rows but {labels.shape[0]} labels")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    losses, dlogits = kernels.softmax_xent(np.ascontiguousarray(z), labels)
    if reduction == "mean":
        factor = 1.0 / n
    elif reduction == "sum":
        factor = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g, upstream):
        grad = float(g) * factor * dlogits
        _send(upstream, logits, grad.reshape(logits.shape))

    return Tensor(
        np.array(losses.sum() * factor),
        _parents=(logits,),
        _backward=backward,
        op="softmax_xent",
    )


def parameters(*tensors: Tensor) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g, upstream):
        _send(upstream, x, g.reshape(x.shape))

    return Tensor(x.data.reshape(shape), _parents=(x,), _backward=backward, op="reshape")
