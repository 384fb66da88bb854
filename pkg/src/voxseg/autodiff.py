"""Reverse-mode automatic differentiation on dense numpy-backed tensors.

The engine is a tape: every differentiable operation appends one node to a
``Graph`` in execution order, so recording order is already a topological
order and the backward sweep is a single reverse pass over the node list.

Three kinds of values flow through an operation:

* ``Parameter`` -- a persistent trainable array with a stable ``uid``.
  Binding it to a graph (``graph.param``) creates (or reuses) a leaf node,
  so two forward passes on the same tape share the identical node and their
  gradients accumulate.
* bound ``Tensor`` -- produced by ``graph.leaf`` or by an operation; carries
  the node id it came from.
* unbound ``Tensor`` / plain ndarray -- a constant. Operations on constants
  compute eagerly and record nothing, which is how eval-mode forward passes
  stay tape-free.

A backward rule is a closure ``grad_out -> tuple_of_parent_grads`` stored on
the node; parents are node ids. One backward pass per recorded forward is
enforced (`reset` rewinds the tape).
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)

_param_uids = itertools.count()


def _as_array(x, dtype=None) -> np.ndarray:
    a = np.asarray(x.data if isinstance(x, Tensor) else x)
    if a.dtype not in FLOAT_DTYPES:
        a = a.astype(np.float64 if dtype is None else dtype)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    return a


class Parameter:
    """A trainable array with persistent identity across training steps."""

    __slots__ = ("data", "name", "uid")

    def __init__(self, data, name: str = ""):
        self.data = _as_array(data)
        self.name = name
        self.uid = next(_param_uids)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Parameter(uid={self.uid}, name={self.name!r}, shape={self.data.shape})"


class Tensor:
    """Dense row-major N-D array, optionally attached to a recording graph.

    Activations use the (batch, channel, z, y, x) layout. Tensors produced
    by operations are treated as immutable.
    """

    __slots__ = ("data", "graph", "nid")

    def __init__(self, data, graph: "Graph | None" = None, nid: int | None = None):
        self.data = _as_array(data)
        if self.data.ndim > 5:
            raise ShapeError(f"rank {self.data.ndim} exceeds the supported maximum of 5")
        self.graph = graph
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = "" if self.graph is None else f", nid={self.nid}"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))


class _Node:
    __slots__ = ("parents", "backward", "param_uid")

    def __init__(self, parents, backward, param_uid=None):
        self.parents = parents  # tuple of node ids
        self.backward = backward  # grad_out -> tuple of parent grads (or None)
        self.param_uid = param_uid


class GradMap:
    """Gradients keyed by parameter uid, of identical shape to the parameter."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    @staticmethod
    def _key(key) -> int:
        return key.uid if isinstance(key, Parameter) else int(key)

    def __getitem__(self, key) -> np.ndarray:
        return self._grads[self._key(key)]

    def get(self, key, default=None):
        return self._grads.get(self._key(key), default)

    def __contains__(self, key) -> bool:
        return self._key(key) in self._grads

    def __len__(self):
        return len(self._grads)

    def keys(self):
        return self._grads.keys()

    def items(self):
        return self._grads.items()


class Graph:
    """Tape of recorded operations; recording order is topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._param_bindings: dict[int, int] = {}  # Parameter.uid -> nid
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def leaf(self, data) -> Tensor:
        """Record a non-trainable input leaf (no gradient is kept for it)."""
        nid = len(self._nodes)
        self._nodes.append(_Node((), None))
        return Tensor(data, self, nid)

    def param(self, p: Parameter) -> Tensor:
        """Bind a parameter as a leaf node; repeated binds reuse the node."""
        nid = self._param_bindings.get(p.uid)
        if nid is None:
            nid = len(self._nodes)
            self._nodes.append(_Node((), None, param_uid=p.uid))
            self._param_bindings[p.uid] = nid
        return Tensor(p.data, self, nid)

    def record(self, out_data: np.ndarray, parents: Sequence[Tensor],
               backward: Callable[[np.ndarray], tuple]) -> Tensor:
        """Append one operation node. ``parents`` must all be bound to this
        graph; ``backward`` maps the output gradient to one gradient per
        parent (``None`` to skip)."""
        pids = []
        for t in parents:
            if t.graph is not self or t.nid is None:
                raise GraphError("operation parents must be bound to the recording graph")
            pids.append(t.nid)
        nid = len(self._nodes)
        self._nodes.append(_Node(tuple(pids), backward))
        return Tensor(out_data, self, nid)

    def backward(self, loss: Tensor) -> GradMap:
        """Reverse sweep from a scalar node; returns parameter gradients."""
        if loss.graph is not self or loss.nid is None:
            raise GraphError("loss tensor is not bound to this graph")
        if loss.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {loss.data.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by backward; call reset() first")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.nid: np.ones_like(loss.data)}
        for nid in range(loss.nid, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self._nodes[nid]
            if node.backward is None:
                if node.param_uid is not None:
                    grads[nid] = g  # keep parameter leaves
                continue
            parent_grads = node.backward(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg

        return GradMap({uid: grads[nid] for uid, nid in self._param_bindings.items()
                        if nid in grads})

    def reset(self):
        """Rewind the tape. Previously recorded tensors become invalid."""
        self._nodes.clear()
        self._param_bindings.clear()
        self._consumed = False


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def graph_of(*tensors: Tensor) -> Graph | None:
    """The unique graph the bound arguments share, or None if all unbound."""
    g = None
    for t in tensors:
        if isinstance(t, Tensor) and t.graph is not None:
            if g is None:
                g = t.graph
            elif g is not t.graph:
                raise GraphError("operands are bound to different graphs")
    return g


def _bound(graph: Graph, tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if isinstance(t, Tensor) and t.graph is graph and t.nid is not None]


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a, b) -> Tensor:
    """Elementwise sum. The second operand may be a same-shape tensor, a
    same-shape constant array, or a scalar; a *bound* operand must match the
    first operand's shape exactly (no broadcasting on the tape)."""
    a = _lift(a)
    if np.isscalar(b):
        b_t, b_data = None, b
    else:
        b_t = b if isinstance(b, Tensor) else None
        b_data = _as_array(b, a.dtype)
        if b_data.shape not in ((), a.data.shape):
            raise ShapeError(f"add: shapes {a.data.shape} and {b_data.shape} differ")
    out = a.data + b_data
    g = graph_of(a, b_t) if b_t is not None else graph_of(a)
    if g is None:
        return Tensor(out)
    operands = (a, b_t) if b_t is not None else (a,)
    parents = _bound(g, operands)
    for t in parents:
        if t.data.shape != out.shape:
            raise ShapeError("add: bound operands must share one shape")

    def bwd(gy):
        return tuple(gy for _ in parents)

    return g.record(out, parents, bwd)


def mul(a, b) -> Tensor:
    """Elementwise product with a tensor, constant array, or scalar."""
    a = _lift(a)
    if np.isscalar(b):
        return scale(a, float(b))
    b = _lift(b)
    if b.data.shape not in ((), a.data.shape):
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    out = a.data * b.data
    g = graph_of(a, b)
    if g is None:
        return Tensor(out)
    parents = _bound(g, (a, b))
    a_data, b_data = a.data, b.data

    def bwd(gy):
        return tuple(gy * b_data if t is a else gy * a_data for t in parents)

    return g.record(out, parents, bwd)


def scale(x, c: float) -> Tensor:
    x = _lift(x)
    out = x.data * x.dtype.type(c)
    g = graph_of(x)
    if g is None:
        return Tensor(out)

    def bwd(gy):
        return (gy * x.dtype.type(c),)

    return g.record(out, [x], bwd)


def tsum(x, axes: tuple[int, ...] | None = None) -> Tensor:
    """Sum over the given axes (all axes when None, yielding a scalar)."""
    x = _lift(x)
    out = x.data.sum(axis=axes)
    g = graph_of(x)
    if g is None:
        return Tensor(out)
    shape = x.data.shape

    def bwd(gy):
        if axes is None:
            return (np.broadcast_to(gy, shape).copy(),)
        expanded = np.expand_dims(gy, axes)
        return (np.broadcast_to(expanded, shape).copy(),)

    return g.record(out, [x], bwd)


def tmean(x) -> Tensor:
    x = _lift(x)
    return scale(tsum(x), 1.0 / x.data.size)


def tlog(x) -> Tensor:
    x = _lift(x)
    out = np.log(x.data)
    g = graph_of(x)
    if g is None:
        return Tensor(out)
    inv = 1.0 / x.data

    def bwd(gy):
        return (gy * inv,)

    return g.record(out, [x], bwd)


def clamp_min(x, lo: float) -> Tensor:
    """max(x, lo); gradient is zero where the clamp engaged."""
    x = _lift(x)
    out = np.maximum(x.data, x.dtype.type(lo))
    g = graph_of(x)
    if g is None:
        return Tensor(out)
    passthrough = x.data >= lo

    def bwd(gy):
        return (gy * passthrough,)

    return g.record(out, [x], bwd)


def safe_div(num, den) -> Tensor:
    """Elementwise num/den that yields 0 (with zero gradients) where den == 0."""
    num, den = _lift(num), _lift(den)
    if num.data.shape != den.data.shape:
        raise ShapeError(f"safe_div: shapes {num.data.shape} and {den.data.shape} differ")
    ok = den.data != 0
    inv = np.where(ok, 1.0 / np.where(ok, den.data, 1.0), 0.0).astype(num.dtype)
    out = num.data * inv
    g = graph_of(num, den)
    if g is None:
        return Tensor(out)
    parents = _bound(g, (num, den))
    quot = out

    def bwd(gy):
        grads = []
        for t in parents:
            if t is num:
                grads.append(gy * inv)
            else:
                grads.append(-gy * quot * inv)
        return tuple(grads)

    return g.record(out, parents, bwd)


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    out = x.data.reshape(shape)
    g = graph_of(x)
    if g is None:
        return Tensor(out)
    src_shape = x.data.shape

    def bwd(gy):
        return (gy.reshape(src_shape),)

    return g.record(out, [x], bwd)


def mean_of(terms: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of scalar tensors; each receives gradient 1/n."""
    if not terms:
        raise GraphError("mean_of requires at least one term")
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def gradcheck(f: Callable[..., Tensor], points: Sequence[np.ndarray],
              step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of a recorded scalar function against
    central finite differences at 64-bit.

    ``f`` is called as ``f(*tensors)`` with one bound tensor per entry of
    ``points`` and must return a scalar Tensor recorded on the tensors'
    graph. Returns the maximum relative error over every coordinate of
    every point, with denominator ``max(|analytic|, |numeric|, 1e-8)``.
    Non-finite evaluations yield ``inf`` (reported as a failure).
    """
    params = [Parameter(np.asarray(p, dtype=np.float64)) for p in points]

    def evaluate() -> float:
        g = Graph()
        out = f(*(g.param(p) for p in params))
        val = out.item()
        return val

    g = Graph()
    bound = [g.param(p) for p in params]
    loss = f(*bound)
    if not np.isfinite(loss.data).all():
        return math.inf
    grads = g.backward(loss)

    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        a_flat = np.asarray(analytic).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = evaluate()
            flat[i] = orig - step
            f_minus = evaluate()
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                return math.inf
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst
