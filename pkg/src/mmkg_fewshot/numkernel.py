"""Minimal reverse-mode differentiation over float64 numpy arrays, plus Adam.

Values are carried by :class:`Node`. Learnable leaves are :class:`Param`.
Operations executed while a :class:`GradTape` is active, and touching at least
one node that requires a gradient, are recorded on that tape; ``backward``
replays the record in reverse.

    >>> x = Param(np.array(3.0), "x")
    >>> with GradTape() as tape:
    ...     y = mul(x, x)
    >>> float(backward(tape, y, [x])[x])
    6.0
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes disagree."""


class ContractError(ValueError):
    """A precondition of a kernel operation was violated."""


class Node:
    __slots__ = ("value", "requires_grad", "parents", "backward_fn", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape})"


class Param(Node):
    """A learnable leaf. Identity (not value) keys gradient maps."""

    __slots__ = ("name",)

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name

    @property
    def size(self) -> int:
        return int(self.value.size)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Records differentiable operations in application order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "GradTape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()


def const(value) -> Node:
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def detach(x: Node) -> Node:
    """Stop-gradient: same value, no path back to ``x``."""
    return Node(x.value)


def _record(value, parents: Sequence[Node], backward_fn: Callable) -> Node:
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Node(value)
    out = Node(value, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn)
    tape.nodes.append(out)
    return out


def _check_same(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- elementwise

def add(a: Node, b: Node) -> Node:
    _check_same("add", a, b)
    return _record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _check_same("sub", a, b)
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def shift(a: Node, c: float) -> Node:
    """``a + c`` for a constant scalar ``c``."""
    c = float(c)
    return _record(a.value + c, (a,), lambda g: (g,))


def mask(a: Node, m: np.ndarray) -> Node:
    """Elementwise product with a constant array of the same shape."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != a.shape:
        raise ShapeError(f"mask: shape mismatch {a.shape} vs {m.shape}")
    return _record(a.value * m, (a,), lambda g: (g * m,))


def add_row(x: Node, v: Node) -> Node:
    """Add vector ``v`` (d,) to every row of ``x`` (n, d)."""
    if x.value.ndim != 2 or v.value.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_row: shape mismatch {x.shape} vs {v.shape}")
    return _record(x.value + v.value, (x, v), lambda g: (g, g.sum(axis=0)))


def relu(x: Node) -> Node:
    active = x.value > 0
    return _record(np.where(active, x.value, 0.0), (x,), lambda g: (g * active,))


def hinge(x) -> Node:
    """``max(0, x)``; the subgradient at exactly 0 is 0."""
    return relu(as_node(x))


def leaky_relu(x: Node, slope: float = 0.01) -> Node:
    d = np.where(x.value > 0, 1.0, slope)
    return _record(x.value * d, (x,), lambda g: (g * d,))


# ------------------------------------------------------------------ reductions

def sum_all(x: Node) -> Node:
    shape = x.shape
    return _record(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Node) -> Node:
    n = x.value.size
    if n == 0:
        raise ContractError("mean_all: empty input")
    shape = x.shape
    return _record(np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, g / n),))


def mean_rows(x: Node) -> Node:
    """Mean over axis 0 of an (n, d) array."""
    n = x.shape[0]
    if n == 0:
        raise ContractError("mean_rows: empty input")
    return _record(x.value.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


# -------------------------------------------------------------- linear algebra

def linear_forward(x: Node, W: Node, b: Node) -> Node:
    """``W @ x + b`` for a single vector ``x``."""
    if x.value.ndim != 1 or W.value.ndim != 2 or b.value.ndim != 1 \
            or W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ShapeError(
            f"linear_forward: x{x.shape}, W{W.shape}, b{b.shape} do not agree")
    xv, Wv = x.value, W.value
    return _record(Wv @ xv + b.value, (x, W, b),
                   lambda g: (Wv.T @ g, np.outer(g, xv), g))


def linear_rows(X: Node, W: Node, b: Node) -> Node:
    """Row-wise ``W @ x + b`` for X of shape (n, d_in)."""
    if X.value.ndim != 2 or W.value.ndim != 2 or b.value.ndim != 1 \
            or W.shape[1] != X.shape[1] or W.shape[0] != b.shape[0]:
        raise ShapeError(
            f"linear_rows: X{X.shape}, W{W.shape}, b{b.shape} do not agree")
    Xv, Wv = X.value, W.value
    return _record(Xv @ Wv.T + b.value, (X, W, b),
                   lambda g: (g @ Wv, g.T @ Xv, g.sum(axis=0)))


def take_rows(table: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(table.value[idx], (table,), back)


def concat_cols(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: shape mismatch {a.shape} vs {b.shape}")
    k = a.shape[1]
    return _record(np.concatenate([a.value, b.value], axis=1), (a, b),
                   lambda g: (g[:, :k], g[:, k:]))


def concat(a: Node, b: Node) -> Node:
    """Concatenate two vectors."""
    if a.value.ndim != 1 or b.value.ndim != 1:
        raise ShapeError(f"concat: expected vectors, got {a.shape} and {b.shape}")
    k = a.shape[0]
    return _record(np.concatenate([a.value, b.value]), (a, b), lambda g: (g[:k], g[k:]))


# ------------------------------------------------------------ norms & angles

def row_norms(x: Node) -> Node:
    """L2 norm of each row of (n, d). Gradient is 0 for a zero row."""
    n = np.sqrt(np.einsum("ij,ij->i", x.value, x.value))
    safe = np.where(n > NORM_EPS, n, 1.0)
    unit = np.where((n > NORM_EPS)[:, None], x.value / safe[:, None], 0.0)
    return _record(n, (x,), lambda g: (g[:, None] * unit,))


def normalize_rows(x: Node) -> Node:
    """Rows scaled to unit length; zero rows stay zero."""
    n = np.sqrt(np.einsum("ij,ij->i", x.value, x.value))
    ok = n > NORM_EPS
    safe = np.where(ok, n, 1.0)
    y = np.where(ok[:, None], x.value / safe[:, None], 0.0)

    def back(g):
        proj = np.einsum("ij,ij->i", y, g)
        return (np.where(ok[:, None], (g - y * proj[:, None]) / safe[:, None], 0.0),)

    return _record(y, (x,), back)


def l2_distance(u: Node, v: Node) -> Node:
    _check_same("l2_distance", u, v)
    d = u.value - v.value
    n = float(np.sqrt(d @ d))
    unit = d / n if n > NORM_EPS else np.zeros_like(d)
    return _record(np.asarray(n), (u, v), lambda g: (g * unit, -g * unit))


def cosine_rows(a: Node, b: Node) -> Node:
    """Row-wise cosine similarity; 0 where either row has (near) zero norm."""
    _check_same("cosine_similarity", a, b)
    if a.value.ndim == 1:
        return _reshape_scalar(cosine_rows(_row(a), _row(b)))
    av, bv = a.value, b.value
    na = np.sqrt(np.einsum("ij,ij->i", av, av))
    nb = np.sqrt(np.einsum("ij,ij->i", bv, bv))
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    sa = np.where(ok, na, 1.0)
    sb = np.where(ok, nb, 1.0)
    dot = np.einsum("ij,ij->i", av, bv)
    c = np.where(ok, dot / (sa * sb), 0.0)

    def back(g):
        g = np.where(ok, g, 0.0)[:, None]
        ga = g * (bv / (sa * sb)[:, None] - c[:, None] * av / (sa * sa)[:, None])
        gb = g * (av / (sa * sb)[:, None] - c[:, None] * bv / (sb * sb)[:, None])
        return ga, gb

    return _record(c, (a, b), back)


def cosine_similarity(u: Node, v: Node) -> Node:
    if u.value.ndim != 1 or v.value.ndim != 1:
        raise ShapeError(f"cosine_similarity: expected vectors, got {u.shape} and {v.shape}")
    return cosine_rows(u, v)


def _row(x: Node) -> Node:
    d = x.shape[0]
    return _record(x.value.reshape(1, d), (x,), lambda g: (g.reshape(d),))


def _reshape_scalar(x: Node) -> Node:
    return _record(x.value.reshape(()), (x,), lambda g: (np.reshape(g, (1,)),))


# -------------------------------------------------------------------- backward

def backward(tape: GradTape, loss: Node, params: Iterable[Param] = ()) -> dict:
    """Gradients of scalar ``loss`` for every node on ``tape``.

    Returns a map ``Param -> ndarray``; every param in ``params`` is present,
    with an exact zero array when it does not reach ``loss``.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
    leaves: dict[int, Node] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
            if parent.backward_fn is None:
                leaves[key] = parent
    out = {leaves[k]: grads[k] for k in leaves if k in grads}
    if isinstance(loss, Param):
        out[loss] = np.ones_like(loss.value)
    for p in params:
        if p not in out:
            out[p] = np.zeros_like(p.value)
    return out


# ------------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _adam_update(p: Param, g: np.ndarray, st: AdamState, lr: float) -> None:
    t = st.step
    key = id(p)
    m = st.m.get(key)
    if m is None:
        m = np.zeros_like(p.value)
        st.v[key] = np.zeros_like(p.value)
    m = st.beta1 * m + (1.0 - st.beta1) * g
    v = st.beta2 * st.v[key] + (1.0 - st.beta2) * g * g
    st.m[key], st.v[key] = m, v
    m_hat = m / (1.0 - st.beta1 ** t)
    v_hat = v / (1.0 - st.beta2 ** t)
    p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + st.eps)


def adam_step(params: Sequence[Param], grads: dict, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``."""
    if lr <= 0:
        raise ContractError(f"adam_step: lr must be positive, got {lr}")
    for p in params:
        if grads[p].shape != p.value.shape:
            raise ShapeError(f"adam_step: grad {grads[p].shape} vs param {p.value.shape} for {p.name}")
    state.step += 1
    for p in params:
        _adam_update(p, grads[p], state, lr)
    return state


class Adam:
    """Adam over named parameter groups, each with its own learning rate.

    The registered parameters are the optimizer's registry: the set of scalars
    it is allowed to change.
    """

    def __init__(self, groups: dict[str, tuple[Sequence[Param], float]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = {name: (list(ps), lr) for name, (ps, lr) in groups.items()}
        self.state = AdamState(beta1, beta2, eps)
        seen = set()
        for ps, lr in self.groups.values():
            if lr <= 0:
                raise ContractError(f"Adam: lr must be positive, got {lr}")
            for p in ps:
                if id(p) in seen:
                    raise ContractError(f"Adam: parameter {p.name} registered twice")
                seen.add(id(p))

    @property
    def params(self) -> list[Param]:
        return [p for ps, _ in self.groups.values() for p in ps]

    @property
    def n_scalars(self) -> int:
        return sum(p.size for p in self.params)

    def step(self, grads: dict) -> None:
        """Update every registered param; a param missing from ``grads`` sees a zero gradient."""
        self.state.step += 1
        for ps, lr in self.groups.values():
            for p in ps:
                g = grads.get(p)
                if g is None:
                    g = np.zeros_like(p.value)
                elif g.shape != p.value.shape:
                    raise ShapeError(f"Adam: grad {g.shape} vs param {p.value.shape} for {p.name}")
                _adam_update(p, g, self.state, lr)
