"""Dense 2-D float64 tensors with deterministic reverse-mode differentiation.

Everything is a ``Node`` wrapping a row-major ``(rows, cols)`` float64 array.
Each operation records its parents together with a local-gradient closure;
``backward`` walks the graph once in reverse topological order and accumulates
``d(loss)/d(node)`` into ``Node.grad``.  The engine is CPU-only, single
threaded per graph, and intentionally small: only the shapes and broadcasts
the model needs (full matrices plus 1xC / Rx1 vectors) are supported.

``check_gradient`` is the independent oracle: central finite differences of a
scalar loss over a flat parameter vector, compared coordinate-wise against the
analytic gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, OracleError, ShapeError

EPS = 1e-8


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got ndim={a.ndim}")
    return a


class Node:
    """One value in the computation graph.

    ``parents`` holds ``(parent, pull)`` pairs where ``pull(upstream)`` returns
    this node's gradient contribution to that parent.  ``grad`` is filled by
    ``backward`` and is zero-initialized lazily.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "op", "_spent")

    def __init__(self, value, requires_grad: bool = False, parents=(), op: str = "leaf"):
        self.value = _as_matrix(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.op = op
        self._spent = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:  # pragma: no cover
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar (elementwise / matmul)
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def leaf(value) -> Node:
    """Trainable leaf; ``backward`` accumulates into its ``grad``."""
    return Node(value, requires_grad=True, op="param")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value: np.ndarray, parents: Sequence[tuple[Node, Callable]], op: str) -> Node:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite result in op '{op}'")
    live = tuple((p, fn) for p, fn in parents if p.requires_grad)
    return Node(value, requires_grad=bool(live), parents=live, op=op)


def _check_same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same_shape(a, b, "add")
    return _make(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)], "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same_shape(a, b, "sub")
    return _make(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)], "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)], "mul")


def div_eps(a, b) -> Node:
    """Elementwise a / (b + EPS); intended for nonnegative denominators."""
    a, b = as_node(a), as_node(b)
    _check_same_shape(a, b, "div_eps")
    den = b.value + EPS
    out = a.value / den
    return _make(out, [(a, lambda g: g / den), (b, lambda g: -g * out / den)], "div_eps")


def reciprocal(a) -> Node:
    """Exact 1/a; the caller guarantees a is bounded away from zero."""
    a = as_node(a)
    out = 1.0 / a.value
    return _make(out, [(a, lambda g: -g * out * out)], "reciprocal")


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return _make(a.value * c, [(a, lambda g: g * c)], "scale")


def scale_by(a, s: Node) -> Node:
    """Multiply a matrix by a 1x1 node (e.g. a learnable inverse temperature)."""
    a, s = as_node(a), as_node(s)
    if s.shape != (1, 1):
        raise ShapeError(f"scale_by: scalar operand must be 1x1, got {s.shape}")
    av, sv = a.value, float(s.value[0, 0])
    return _make(
        av * sv,
        [(a, lambda g: g * sv), (s, lambda g: np.array([[np.sum(g * av)]]))],
        "scale_by",
    )


def mul_const(a, arr) -> Node:
    """Elementwise product with a fixed array (masks, hop weights...)."""
    a = as_node(a)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != a.shape:
        raise ShapeError(f"mul_const: mask shape {arr.shape} vs {a.shape}")
    return _make(a.value * arr, [(a, lambda g: g * arr)], "mul_const")


def add_rowvec(a, b) -> Node:
    """Broadcast-add a 1xC row vector to every row of an RxC matrix."""
    a, b = as_node(a), as_node(b)
    if b.shape != (1, a.shape[1]):
        raise ShapeError(f"add_rowvec: expected (1, {a.shape[1]}), got {b.shape}")
    return _make(
        a.value + b.value,
        [(a, lambda g: g), (b, lambda g: g.sum(axis=0, keepdims=True))],
        "add_rowvec",
    )


def sub_rowvec(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if b.shape != (1, a.shape[1]):
        raise ShapeError(f"sub_rowvec: expected (1, {a.shape[1]}), got {b.shape}")
    return _make(
        a.value - b.value,
        [(a, lambda g: g), (b, lambda g: -g.sum(axis=0, keepdims=True))],
        "sub_rowvec",
    )


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Node:
    a = as_node(a)
    mask = (a.value > 0).astype(np.float64)  # subgradient 0 at 0
    return _make(a.value * mask, [(a, lambda g: g * mask)], "relu")


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, [(a, lambda g: g * out)], "exp")


def log_eps(a) -> Node:
    """log(a + EPS); guards zero inputs at the cost of an EPS bias."""
    a = as_node(a)
    shifted = a.value + EPS
    return _make(np.log(shifted), [(a, lambda g: g / shifted)], "log_eps")


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(av * av, [(a, lambda g: 2.0 * g * av)], "square")


def sqrt(a) -> Node:
    a = as_node(a)
    if np.any(a.value < 0):
        raise NumericError("sqrt of a negative entry")
    out = np.sqrt(a.value)
    safe = np.maximum(out, EPS)  # keeps the derivative finite at 0
    return _make(out, [(a, lambda g: 0.5 * g / safe)], "sqrt")


def abs_(a) -> Node:
    a = as_node(a)
    sign = np.sign(a.value)  # 0 at 0: subgradient choice
    return _make(np.abs(a.value), [(a, lambda g: g * sign)], "abs")


# ---------------------------------------------------------------------------
# structural ops


def transpose(a) -> Node:
    a = as_node(a)
    return _make(a.value.T.copy(), [(a, lambda g: g.T)], "transpose")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)], "matmul")


def concat_cols(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts {a.shape[0]} vs {b.shape[0]}")
    na = a.shape[1]
    return _make(
        np.concatenate([a.value, b.value], axis=1),
        [(a, lambda g: g[:, :na]), (b, lambda g: g[:, na:])],
        "concat_cols",
    )


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Node:
    a = as_node(a)
    shape = a.shape
    return _make(
        np.array([[a.value.sum()]]),
        [(a, lambda g: np.full(shape, g[0, 0]))],
        "sum_all",
    )


def mean_all(a) -> Node:
    a = as_node(a)
    n = a.value.size
    shape = a.shape
    return _make(
        np.array([[a.value.mean()]]),
        [(a, lambda g: np.full(shape, g[0, 0] / n))],
        "mean_all",
    )


def col_sums(a) -> Node:
    """Sum over rows -> 1xC."""
    a = as_node(a)
    rows = a.shape[0]
    return _make(
        a.value.sum(axis=0, keepdims=True),
        [(a, lambda g: np.repeat(g, rows, axis=0))],
        "col_sums",
    )


def row_sums(a) -> Node:
    """Sum over columns -> Rx1."""
    a = as_node(a)
    cols = a.shape[1]
    return _make(
        a.value.sum(axis=1, keepdims=True),
        [(a, lambda g: np.repeat(g, cols, axis=1))],
        "row_sums",
    )


def col_means(a) -> Node:
    return scale(col_sums(a), 1.0 / as_node(a).shape[0])


def row_means(a) -> Node:
    return scale(row_sums(a), 1.0 / as_node(a).shape[1])


# ---------------------------------------------------------------------------
# row-wise normalizations


def row_softmax(a) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def pull(g, p=p):
        return p * (g - (g * p).sum(axis=1, keepdims=True))

    return _make(p, [(a, pull)], "row_softmax")


def row_logsumexp(a) -> Node:
    """Stable log(sum(exp(row))) -> Rx1; gradient is the row softmax."""
    a = as_node(a)
    m = a.value.max(axis=1, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=1, keepdims=True)
    out = np.log(s) + m
    p = e / s

    def pull(g, p=p):
        return p * g  # g broadcasts Rx1 over columns

    return _make(out, [(a, pull)], "row_logsumexp")


def row_l2_normalize(a) -> Node:
    """Rows scaled to unit L2 norm; rows with norm <= EPS are divided by EPS."""
    a = as_node(a)
    norm = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, EPS)
    y = a.value / denom
    free = (norm > EPS).astype(np.float64)

    def pull(g, y=y, denom=denom, free=free):
        inner = (g * y).sum(axis=1, keepdims=True)
        return (g - free * y * inner) / denom

    return _make(y, [(a, pull)], "row_l2_normalize")


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of all requires_grad ancestors.

    The root must be scalar (1x1).  Each graph may be backwarded once; a second
    call on the same root raises ``ContractError``.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward root must be 1x1, got {loss.shape}")
    if loss._spent:
        raise ContractError("backward called twice on the same graph")
    loss._spent = True

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

    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node.grad is None:
            continue
        g = node.grad
        for parent, pull in node.parents:
            contrib = pull(g)
            if not np.all(np.isfinite(contrib)):
                raise NumericError(f"non-finite gradient in op '{node.op}'")
            if parent.grad is None:
                parent.grad = np.zeros(parent.shape)
            parent.grad += contrib


def check_gradient(build, theta: np.ndarray, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build(theta)`` must return ``(loss_node, leaves)`` where the leaves'
    values, flattened and concatenated in order, reproduce ``theta``.  The
    relative error per coordinate is |a - f| / max(1, |a|, |f|).
    """
    if h <= 0:
        raise ContractError("h must be positive")
    theta = np.asarray(theta, dtype=np.float64).ravel()

    loss0, leaves = build(theta)
    loss1, _ = build(theta)
    if loss0.item() != loss1.item():
        raise OracleError("build is not deterministic: two evaluations at theta differ")

    sizes = [leaf_.value.size for leaf_ in leaves]
    if sum(sizes) != theta.size:
        raise ContractError(f"leaves hold {sum(sizes)} entries, theta has {theta.size}")

    backward(loss0)
    analytic = np.concatenate(
        [
            (leaf_.grad if leaf_.grad is not None else np.zeros(leaf_.shape)).ravel()
            for leaf_ in leaves
        ]
    )

    worst = 0.0
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] += h
        up, _ = build(bumped)
        bumped[i] -= 2.0 * h
        down, _ = build(bumped)
        fd = (up.item() - down.item()) / (2.0 * h)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]), abs(fd))
        if err > worst:
            worst = err
    return worst


def unpack_theta(theta: np.ndarray, shapes: Sequence[tuple[int, int]]) -> list[Node]:
    """Split a flat vector into leaf nodes of the given shapes (helpers for build fns)."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    leaves, pos = [], 0
    for r, c in shapes:
        n = r * c
        leaves.append(leaf(theta[pos : pos + n].reshape(r, c)))
        pos += n
    if pos != theta.size:
        raise ShapeError(f"theta has {theta.size} entries, shapes require {pos}")
    return leaves
