"""Dense 2-D tensor math with recorded-tape reverse-mode differentiation.

Everything is float64 and strictly two-dimensional. A :class:`Tape` is
rebuilt for every forward pass (define-by-run): leaf tensors are
registered with :meth:`Tape.leaf`, every op that touches a recording
tensor appends a node with its pullback closure, and :func:`backward`
replays the tape once in reverse to produce a gradient per leaf.

Tapes are single-threaded; independent tapes on separate threads share
no mutable state.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateRowError, ShapeError

Pullback = Callable[[np.ndarray], tuple]

COSINE_NORM_FLOOR = 1e-12


class _Node:
    """One recorded primitive op: parent handles plus a pullback closure."""

    __slots__ = ("tape", "index", "parents", "pullback")

    def __init__(self, tape: "Tape", index: int, parents: tuple, pullback: Pullback | None):
        self.tape = tape
        self.index = index
        self.parents = parents
        self.pullback = pullback


class Tensor:
    """A row-major float64 matrix, optionally attached to a tape node."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: _Node | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D; got shape {arr.shape}")
        self.data = arr
        self.node = node

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = " (recorded)" if self.node is not None else ""
        return f"Tensor({self.rows}x{self.cols}{tag})"


class Tape:
    """Ordered record of primitive ops; parents always precede children."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaf_tensors: list[Tensor] = []

    def leaf(self, t: Tensor) -> Tensor:
        """Register ``t`` as a trainable leaf; returns the recording twin.

        The twin shares ``t``'s data buffer, so parameter updates made
        between passes are seen by the next ``leaf`` call naturally.
        """
        node = self._record((), None)
        twin = Tensor(t.data, node)
        self._leaf_tensors.append(twin)
        return twin

    def _record(self, parents: tuple, pullback: Pullback | None) -> _Node:
        node = _Node(self, len(self._nodes), parents, pullback)
        self._nodes.append(node)
        return node

    def __len__(self) -> int:
        return len(self._nodes)


def _result(out: np.ndarray, inputs: Sequence[Tensor], pullback: Pullback) -> Tensor:
    """Wrap ``out``; record a node when any input is on a tape."""
    tape = None
    for t in inputs:
        if t.node is not None:
            if tape is None:
                tape = t.node.tape
            elif tape is not t.node.tape:
                raise ValueError("inputs recorded on different tapes")
    if tape is None:
        return Tensor(out)
    parents = tuple(t.node for t in inputs)
    return Tensor(out, tape._record(parents, pullback))


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def pullback(g):
        return g @ bd.T, ad.T @ g

    return _result(out, (a, b), pullback)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ, {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def add_row_broadcast(a: Tensor, bias: Tensor) -> Tensor:
    """Add a 1xd bias to every row of a."""
    if bias.rows != 1 or bias.cols != a.cols:
        raise ShapeError(f"add_row_broadcast: bias {bias.shape} does not fit {a.shape}")

    def pullback(g):
        return g, g.sum(axis=0, keepdims=True)

    return _result(a.data + bias.data, (a, bias), pullback)


def elementwise(a: Tensor, b: Tensor, kind: str = "mul") -> Tensor:
    if kind != "mul":
        raise ValueError(f"unsupported elementwise kind: {kind!r}")
    if a.shape != b.shape:
        raise ShapeError(f"elementwise: shapes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def unary(a: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        out = _sigmoid(a.data)
        pullback = lambda g, s=out: (g * s * (1.0 - s),)
    elif kind == "tanh":
        out = np.tanh(a.data)
        pullback = lambda g, t=out: (g * (1.0 - t * t),)
    elif kind == "relu":
        out = np.maximum(a.data, 0.0)
        # derivative at exactly 0 is taken as 0
        pullback = lambda g, mask=(a.data > 0): (g * mask,)
    else:
        raise ValueError(f"unsupported unary kind: {kind!r}")
    return _result(out, (a,), pullback)


def sigmoid(a: Tensor) -> Tensor:
    return unary(a, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    return unary(a, "tanh")


def relu(a: Tensor) -> Tensor:
    return unary(a, "relu")


def scalar_scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of a by the 1x1 tensor s."""
    if s.shape != (1, 1):
        raise ShapeError(f"scalar_scale: scale must be 1x1, got {s.shape}")
    ad = a.data
    sv = s.data[0, 0]

    def pullback(g):
        return g * sv, np.array([[np.sum(g * ad)]])

    return _result(ad * sv, (a, s), pullback)


def const_scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain (non-trainable) constant."""
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a 1x1 tensor."""
    shape = a.shape
    out = np.array([[a.data.sum()]])
    return _result(out, (a,), lambda g: (np.full(shape, g[0, 0]),))


def hstack(tensors: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation; rows must agree."""
    if not tensors:
        raise ShapeError("hstack of no tensors")
    rows = tensors[0].rows
    for t in tensors[1:]:
        if t.rows != rows:
            raise ShapeError(f"hstack: row counts differ, {tensors[0].shape} vs {t.shape}")
    out = np.hstack([t.data for t in tensors])
    offsets = np.cumsum([0] + [t.cols for t in tensors])

    def pullback(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(offsets) - 1))

    return _result(out, tuple(tensors), pullback)


def rowwise_cosine(h: Tensor) -> Tensor:
    """All-pairs cosine similarity of the rows of h (SxS output)."""
    norms = np.linalg.norm(h.data, axis=1)
    bad = np.flatnonzero(norms < COSINE_NORM_FLOOR)
    if bad.size:
        raise DegenerateRowError(f"rowwise_cosine: row {bad[0]} has norm < {COSINE_NORM_FLOOR}")
    unit = h.data / norms[:, None]
    out = unit @ unit.T

    def pullback(g):
        gs = g + g.T
        lead = gs @ unit
        diag = (gs * out).sum(axis=1)[:, None] * unit
        return ((lead - diag) / norms[:, None],)

    return _result(out, (h,), pullback)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of a recorded scalar w.r.t. every leaf on its tape.

    Leaves the loss does not reach get an all-zero gradient. Each tape
    node is visited exactly once, in reverse recording order.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
    if loss.node is None:
        raise ValueError("backward: loss is not recorded on any tape")
    tape = loss.node.tape
    nodes = tape._nodes
    grads: dict[int, np.ndarray] = {loss.node.index: np.ones((1, 1))}
    for i in range(loss.node.index, -1, -1):
        g = grads.get(i)
        if g is None:
            continue
        node = nodes[i]
        if node.pullback is None:
            continue
        for parent, contrib in zip(node.parents, node.pullback(g)):
            if parent is None or contrib is None:
                continue
            acc = grads.get(parent.index)
            # pullbacks may hand back aliased arrays; accumulate out of place
            grads[parent.index] = contrib if acc is None else acc + contrib

    out: dict[Tensor, np.ndarray] = {}
    for leaf in tape._leaf_tensors:
        g = grads.get(leaf.node.index)
        out[leaf] = g if g is not None else np.zeros_like(leaf.data)
    return out
