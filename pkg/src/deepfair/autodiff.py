"""Minimal reverse-mode automatic differentiation over float64 arrays.

Values are plain ``numpy.ndarray`` objects (float64, C-contiguous). A
:class:`Node` wraps a value together with the closures needed to push an
upstream gradient back to its parents. Only the operations required by the
fair-representation network and the distance-covariance penalties exist here.

Broadcasting is restricted to scalar-vs-tensor and equal shapes, with the
single exception of :func:`add_bias`, which adds a row vector to every row of
a matrix.

Calling :meth:`Node.backward` twice on the same graph without
:meth:`Node.zero_grad` accumulates, so leaf gradients are exactly doubled.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of an elementwise function."""


class BatchTooSmallError(ValueError):
    """Batch normalization in train mode needs at least two rows."""


class ContractError(RuntimeError):
    """A graph-level precondition was violated."""


def as_tensor(values, validate: bool = True) -> np.ndarray:
    """Return ``values`` as a C-contiguous float64 array.

    With ``validate`` set, NaN and infinite entries are rejected.
    """
    arr = np.asarray(values, dtype=np.float64, order="C")
    if validate and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or infinite values")
    return arr


class Node:
    """A value in a differentiation graph.

    Leaves are created directly; interior nodes are produced by the
    operations in this module. ``grad`` is ``None`` until a backward sweep
    reaches the node.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 parents: Sequence[tuple["Node", Callable[[np.ndarray], np.ndarray]]] = ()):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == np.float64 else as_tensor(value)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar; all routed through the module-level ops
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(as_tensor(value))


def parameter(value, name: str | None = None) -> Node:
    return Node(as_tensor(value), requires_grad=True, name=name)


def _make(value: np.ndarray, parents) -> Node:
    # drop parents that cannot receive gradient
    live = [(p, fn) for p, fn in parents if p.requires_grad]
    # op results skip validation so non-finite losses reach the caller's check
    return Node(np.asarray(value, dtype=np.float64), parents=live)


def backward(loss: Node) -> None:
    """Reverse sweep from a scalar ``loss``; gradients accumulate additively."""
    if loss.value.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, fn in node.parents:
            contrib = fn(g)
            key = id(parent)
            pending[key] = contrib if key not in pending else pending[key] + contrib


# ---------------------------------------------------------------------------
# elementwise


def _operands(a, b) -> tuple[Node, Node]:
    a, b = constant(a), constant(b)
    if a.shape != b.shape and a.value.size != 1 and b.value.size != 1:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a, b) -> Node:
    a, b = _operands(a, b)
    return _make(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Node:
    a, b = _operands(a, b)
    return _make(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Node:
    a, b = _operands(a, b)
    av, bv = a.value, b.value
    return _make(av * bv, [
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    ])


def scale(a, c: float) -> Node:
    a = constant(a)
    c = float(c)
    return _make(a.value * c, [(a, lambda g: g * c)])


def relu(a) -> Node:
    a = constant(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)])


def exp(a) -> Node:
    a = constant(a)
    out = np.exp(a.value)
    return _make(out, [(a, lambda g: g * out)])


def log(a) -> Node:
    a = constant(a)
    if np.any(a.value < 0):
        raise DomainError("log of a negative value")
    v = a.value
    with np.errstate(divide="ignore"):
        out = np.log(v)
    return _make(out, [(a, lambda g: g / v)])


def sqrt(a) -> Node:
    a = constant(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.value)
    return _make(out, [(a, lambda g: np.divide(0.5 * g, out, out=np.zeros_like(out), where=out > 0))])


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "exp": exp,
                "log": log, "sqrt": sqrt, "scale": scale}


def elementwise(op: str, *args) -> Node:
    """Dispatch by name: ``elementwise("relu", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and structural ops


def total(a) -> Node:
    """Sum of all entries as a 0-d node."""
    a = constant(a)
    return _make(np.asarray(a.value.sum()), [(a, lambda g: np.full(a.shape, float(g)))])


def mean(a) -> Node:
    a = constant(a)
    return scale(total(a), 1.0 / a.value.size)


def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    av, bv = a.value, b.value
    return _make(av @ bv, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def add_bias(x, b) -> Node:
    """``x[i, :] + b`` for every row ``i``."""
    x, b = constant(x), constant(b)
    if x.value.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"bias of shape {b.shape} does not fit {x.shape}")
    return _make(x.value + b.value, [(x, lambda g: g), (b, lambda g: g.sum(axis=0))])


def linear(x, w, b) -> Node:
    return add_bias(matmul(x, w), b)


def concat(nodes: Sequence[Node], axis: int = 1) -> Node:
    """Concatenate along the feature axis; gradients are split back by width."""
    nodes = [constant(n) for n in nodes]
    if not nodes:
        raise DimensionError("concat of an empty list")
    if len(nodes) == 1:
        return nodes[0]
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise DimensionError(f"batch dimensions differ: {sorted(rows)}")
    widths = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + widths)
    parents = []
    for i, n in enumerate(nodes):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        parents.append((n, lambda g, lo=lo, hi=hi: np.ascontiguousarray(g[:, lo:hi])))
    return _make(np.concatenate([n.value for n in nodes], axis=axis), parents)


def take_rows(x, index) -> Node:
    x = constant(x)
    index = np.asarray(index, dtype=np.intp)

    def grad(g):
        out = np.zeros(x.shape)
        np.add.at(out, index, g)
        return out

    return _make(np.ascontiguousarray(x.value[index]), [(x, grad)])


def pick(x, columns) -> Node:
    """``x[i, columns[i]]`` for each row, as a vector."""
    x = constant(x)
    rows = np.arange(x.shape[0])
    columns = np.asarray(columns, dtype=np.intp)

    def grad(g):
        out = np.zeros(x.shape)
        out[rows, columns] = g
        return out

    return _make(x.value[rows, columns], [(x, grad)])


# ---------------------------------------------------------------------------
# network ops


@dataclass
class BNState:
    """Running statistics of one batch-norm site."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, width: int) -> "BNState":
        return cls(np.zeros(width), np.ones(width))


def batch_norm(x, gamma, beta, state: BNState, mode: str = "train") -> Node:
    """Batch normalization over the rows of ``x``.

    Train mode normalizes with the biased batch variance and updates the
    running statistics (the running variance uses the unbiased estimate, as
    torch does). Eval mode reads the running statistics and mutates nothing.
    """
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    n, m = x.shape
    if gamma.shape != (m,) or beta.shape != (m,):
        raise DimensionError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} vs width {m}")
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.value - state.running_mean) * inv
        gv = gamma.value
        return _make(xhat * gv + beta.value, [
            (x, lambda g: g * (gv * inv)),
            (gamma, lambda g: (g * xhat).sum(axis=0)),
            (beta, lambda g: g.sum(axis=0)),
        ])
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if n < 2:
        raise BatchTooSmallError(f"batch_norm in train mode needs n >= 2, got n={n}")
    mu = x.value.mean(axis=0)
    centered = x.value - mu
    var = (centered * centered).mean(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv
    state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
    state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var * n / (n - 1)
    gv = gamma.value

    def grad_x(g):
        gh = g * gv
        return inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))

    return _make(xhat * gv + beta.value, [
        (x, grad_x),
        (gamma, lambda g: (g * xhat).sum(axis=0)),
        (beta, lambda g: g.sum(axis=0)),
    ])


def log_softmax(x) -> Node:
    x = constant(x)
    if x.value.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"log_softmax needs an n x K input with K >= 2, got {x.shape}")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return _make(out, [(x, lambda g: g - probs * g.sum(axis=1, keepdims=True))])


def pairwise_distances(x) -> Node:
    """Euclidean distance matrix between the rows of ``x``.

    The adjoint of a zero distance is taken to be 0.
    """
    x = constant(x)
    if x.value.ndim != 2 or x.shape[0] < 2:
        raise DimensionError(f"pairwise_distances needs n >= 2 rows, got {x.shape}")
    d = squareform(pdist(x.value, "euclidean"))
    xv = x.value

    def grad(g):
        w = np.divide(g + g.T, d, out=np.zeros_like(d), where=d > 0)
        return w.sum(axis=1)[:, None] * xv - w @ xv

    return _make(d, [(x, grad)])


def u_center(a) -> Node:
    """U-centering of a square matrix; the diagonal of the result is 0.

    ``a~_ij = a_ij - a_i./(n-2) - a_.j/(n-2) + a../((n-1)(n-2))`` off the
    diagonal. The map is linear, so its adjoint is written out directly.
    """
    a = constant(a)
    n = a.shape[0]
    if a.value.ndim != 2 or a.shape[1] != n or n < 3:
        raise DimensionError(f"u_center needs a square matrix with n >= 3, got {a.shape}")
    av = a.value
    rows = av.sum(axis=1)
    cols = av.sum(axis=0)
    out = (av - rows[:, None] / (n - 2) - cols[None, :] / (n - 2)
           + rows.sum() / ((n - 1) * (n - 2)))
    np.fill_diagonal(out, 0.0)

    def grad(g):
        gm = g.copy()
        np.fill_diagonal(gm, 0.0)
        return (gm - gm.sum(axis=1)[:, None] / (n - 2) - gm.sum(axis=0)[None, :] / (n - 2)
                + gm.sum() / ((n - 1) * (n - 2)))

    return _make(out, [(a, grad)])


# ---------------------------------------------------------------------------
# testing helper


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad
