"""
Dense tensor algebra with reverse-mode automatic differentiation.

Every Tensor is a node of a computation graph. Values are computed eagerly when
a node is built, and `forward(root)` re-evaluates the whole graph from the
current leaf values (used by finite-difference checks, which perturb leaves and
re-run). `backward(root)` accumulates gradients into every node that depends on
a leaf created with `requires_grad=True`.

Primitives: matmul, add, mul, scale, tanh, relu, exp, mean (over one axis),
concat, broadcast_row, gather_rows, sum_square. Everything else in the package
is composed from these.

All arithmetic is float64. Elementwise primitives require identical shapes;
the only broadcasting is broadcast_row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sps

from .errors import NonFiniteError, NonScalarRootError, ShapeMismatchError

PRIMITIVES = (
    "matmul", "add", "mul", "scale", "tanh", "relu", "exp",
    "mean", "concat", "broadcast_row", "gather_rows", "sum_square",
)


class Tensor:
    """A value in the computation graph."""

    __slots__ = ("data", "op", "parents", "attrs", "grad", "name", "requires_grad")

    def __init__(self, data, op: str = "leaf", parents: Sequence["Tensor"] = (),
                 attrs: Optional[dict] = None, name: Optional[str] = None,
                 requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}, shape={self.shape}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, name: Optional[str] = None) -> Tensor:
    """Constant leaf."""
    return Tensor(data, name=name)


def parameter(data, name: str) -> Tensor:
    """Trainable leaf; gradients are reported under `name`."""
    return Tensor(data, name=name, requires_grad=True)


# ---------------------------------------------------------------------------
# forward rules
# ---------------------------------------------------------------------------

def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, f"{a.shape} vs {b.shape}")


def _op_t(x, flag: bool):
    return x.T if flag else x


def _eval(node: Tensor) -> np.ndarray:
    op, at = node.op, node.attrs
    vals = [p.data for p in node.parents]

    if op == "matmul":
        left = at["sparse"] if "sparse" in at else vals[0]
        right = vals[-1]
        if left.ndim != 2 or right.ndim != 2:
            raise ShapeMismatchError(op, f"operands must be 2-D, got {left.shape} and {right.shape}")
        a = _op_t(left, at["trans_a"])
        b = _op_t(right, at["trans_b"])
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(op, f"{a.shape} @ {b.shape}")
        out = a @ b
        return np.asarray(out)
    if op == "add":
        _same_shape(op, vals[0], vals[1])
        return vals[0] + vals[1]
    if op == "mul":
        _same_shape(op, vals[0], vals[1])
        return vals[0] * vals[1]
    if op == "scale":
        return vals[0] * at["c"]
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "exp":
        return np.exp(vals[0])
    if op == "mean":
        axis = at["axis"]
        if axis >= vals[0].ndim or vals[0].shape[axis] == 0:
            raise ShapeMismatchError(op, f"cannot average axis {axis} of {vals[0].shape}")
        return vals[0].mean(axis=axis, keepdims=True)
    if op == "concat":
        axis = at["axis"]
        ref = vals[0].shape
        for v in vals[1:]:
            if v.ndim != len(ref) or any(v.shape[k] != ref[k] for k in range(len(ref)) if k != axis):
                raise ShapeMismatchError(op, f"{ref} vs {v.shape} along axis {axis}")
        return np.concatenate(vals, axis=axis)
    if op == "broadcast_row":
        if vals[0].ndim != 2 or vals[0].shape[0] != 1:
            raise ShapeMismatchError(op, f"expected a (1, c) row, got {vals[0].shape}")
        return np.repeat(vals[0], at["n"], axis=0)
    if op == "gather_rows":
        idx = at["index"]
        if idx.size and (idx.min() < 0 or idx.max() >= vals[0].shape[0]):
            raise ShapeMismatchError(op, f"row index out of range for {vals[0].shape}")
        return vals[0][idx]
    if op == "sum_square":
        return np.array([[np.sum(vals[0] * vals[0])]])
    raise ValueError(f"unknown primitive {op!r}")


def _build(op: str, parents: Sequence[Tensor], **attrs) -> Tensor:
    node = Tensor.__new__(Tensor)
    node.op = op
    node.parents = tuple(parents)
    node.attrs = attrs
    node.grad = None
    node.name = None
    node.requires_grad = any(p.requires_grad for p in node.parents)
    value = _eval(node)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    node.data = np.ascontiguousarray(value, dtype=np.float64)
    return node


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b: Tensor, trans_a: bool = False, trans_b: bool = False) -> Tensor:
    """op(a) @ op(b). `a` may also be a scipy sparse matrix, treated as a constant."""
    if sps.issparse(a):
        return _build("matmul", (b,), sparse=sps.csr_matrix(a), trans_a=trans_a, trans_b=trans_b)
    return _build("matmul", (a, b), trans_a=trans_a, trans_b=trans_b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _build("add", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _build("mul", (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return _build("scale", (a,), c=float(c))


def tanh(a: Tensor) -> Tensor:
    return _build("tanh", (a,))


def relu(a: Tensor) -> Tensor:
    return _build("relu", (a,))


def exp(a: Tensor) -> Tensor:
    return _build("exp", (a,))


def mean(a: Tensor, axis: int = 0) -> Tensor:
    """Mean over one axis, keeping that axis with length 1."""
    return _build("mean", (a,), axis=int(axis))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return _build("concat", tuple(tensors), axis=int(axis))


def broadcast_row(a: Tensor, n: int) -> Tensor:
    """Repeat a (1, c) row n times."""
    return _build("broadcast_row", (a,), n=int(n))


def gather_rows(a: Tensor, index: Iterable[int]) -> Tensor:
    return _build("gather_rows", (a,), index=np.asarray(list(index), dtype=np.int64).reshape(-1))


def sum_square(a: Tensor) -> Tensor:
    """Sum of squared entries, as a (1, 1) tensor."""
    return _build("sum_square", (a,))


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mean_squared_error(a: Tensor, b: Tensor) -> Tensor:
    return scale(sum_square(sub(a, b)), 1.0 / a.data.size)


def mean_all(a: Tensor) -> Tensor:
    out = a
    for axis in range(a.data.ndim):
        out = mean(out, axis=axis)
    return out


def row_sums(a: Tensor) -> Tensor:
    """(n, c) -> (n, 1)."""
    return matmul(a, tensor(np.ones((a.shape[1], 1))))


def outer_ones(col: Tensor, m: int) -> Tensor:
    """(n, 1) -> (n, m), copying the column."""
    return matmul(col, tensor(np.ones((1, m))))


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def forward(root: Tensor) -> np.ndarray:
    """Re-evaluate every node from the current leaf values and return the root value."""
    for node in topological_order(root):
        if node.is_leaf:
            if not np.all(np.isfinite(node.data)):
                raise NonFiniteError(f"leaf {node.name or '<unnamed>'}")
            continue
        value = _eval(node)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(node.op)
        node.data = np.ascontiguousarray(value, dtype=np.float64)
    return root.data


def _vjp(node: Tensor, g: np.ndarray) -> List[Optional[np.ndarray]]:
    op, at = node.op, node.attrs
    vals = [p.data for p in node.parents]

    if op == "matmul":
        ta, tb = at["trans_a"], at["trans_b"]
        left = at["sparse"] if "sparse" in at else vals[0]
        a = _op_t(left, ta)
        b = _op_t(vals[-1], tb)
        grad_b = np.asarray(a.T @ g)
        grad_b = grad_b.T if tb else grad_b
        if "sparse" in at:
            return [grad_b]
        grad_a = g @ b.T
        grad_a = grad_a.T if ta else grad_a
        return [grad_a, grad_b]
    if op == "add":
        return [g, g]
    if op == "mul":
        return [g * vals[1], g * vals[0]]
    if op == "scale":
        return [g * at["c"]]
    if op == "tanh":
        return [g * (1.0 - node.data * node.data)]
    if op == "relu":
        return [g * (vals[0] > 0.0)]
    if op == "exp":
        return [g * node.data]
    if op == "mean":
        n = vals[0].shape[at["axis"]]
        return [np.broadcast_to(g / n, vals[0].shape).copy()]
    if op == "concat":
        axis = at["axis"]
        cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return list(np.split(g, cuts, axis=axis))
    if op == "broadcast_row":
        return [g.sum(axis=0, keepdims=True)]
    if op == "gather_rows":
        out = np.zeros_like(vals[0])
        np.add.at(out, at["index"], g)
        return [out]
    if op == "sum_square":
        return [2.0 * g.reshape(()) * vals[0]]
    raise ValueError(f"unknown primitive {op!r}")


def backward(root: Tensor) -> Dict[str, np.ndarray]:
    """Accumulate d(root)/d(node) into `.grad` and return gradients of named leaves."""
    if root.data.size != 1:
        raise NonScalarRootError(f"backward needs a scalar root, got shape {root.shape}")
    order = topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)

    for node in reversed(order):
        if node.grad is None or node.is_leaf or not node.requires_grad:
            continue
        for parent, pg in zip(node.parents, _vjp(node, node.grad)):
            if not parent.requires_grad:
                continue
            parent.grad = pg.copy() if parent.grad is None else parent.grad + pg

    grads: Dict[str, np.ndarray] = {}
    for node in order:
        if node.is_leaf and node.requires_grad and node.name is not None:
            grads[node.name] = node.grad if node.grad is not None else np.zeros_like(node.data)
    return grads


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter max relative error between reverse-mode and central differences."""
    max_rel_error: Dict[str, float]
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(err <= self.tol for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @classmethod
    def from_gradients(cls, analytic: Dict[str, np.ndarray], numeric: Dict[str, np.ndarray],
                       tol: float) -> "GradCheckReport":
        errors = {}
        for name, num in numeric.items():
            ana = analytic.get(name, np.zeros_like(num))
            denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1.0)
            errors[name] = float(np.max(np.abs(ana - num) / denom)) if num.size else 0.0
        return cls(max_rel_error=errors, tol=tol)


GraphBuilder = Callable[[Dict[str, Tensor]], Tensor]


def numeric_gradients(builder: GraphBuilder, params: Dict[str, np.ndarray],
                      h: float) -> Dict[str, np.ndarray]:
    leaves = {k: parameter(np.array(v, dtype=np.float64), k) for k, v in params.items()}
    root = builder(leaves)
    out = {}
    for name, leaf in leaves.items():
        base = leaf.data.copy()
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            bumped = base.copy()
            bumped[idx] += h
            leaf.data = bumped
            f_plus = forward(root).item()
            bumped = base.copy()
            bumped[idx] -= h
            leaf.data = bumped
            f_minus = forward(root).item()
            grad[idx] = (f_plus - f_minus) / (2.0 * h)
        leaf.data = base
        out[name] = grad
    forward(root)
    return out


def grad_check(builder: GraphBuilder, params: Dict[str, np.ndarray],
               h: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare backward() against central differences for every entry of every parameter."""
    if h <= 0 or tol <= 0:
        raise ValueError("h and tol must be positive")
    leaves = {k: parameter(np.array(v, dtype=np.float64), k) for k, v in params.items()}
    analytic = backward(builder(leaves))
    numeric = numeric_gradients(builder, params, h)
    return GradCheckReport.from_gradients(analytic, numeric, tol)
