"""Reverse-mode automatic differentiation on an explicit tape.

A :class:`Tape` is an append-only list of nodes.  Each node stores the ids of
its inputs and a VJP callback mapping the output cotangent to one cotangent
per input.  Tensors created without a tape (or while the tape is paused) are
constants and never receive gradient contributions.

Memory accounting is done by a :class:`MemoryMeter`: every node declares the
arrays its VJP retains, and the meter counts distinct arrays (by identity) so
that a state shared by two nodes is only counted once.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "GradMap", "MemoryMeter", "record", "constant",
    "custom_vjp", "checkpoint", "vjp", "finite_diff_grad",
    "add", "sub", "mul", "div", "neg", "square", "power", "sin", "cos", "tanh", "exp",
    "abs", "softplus", "relu", "maximum", "where", "sum", "mean", "matvec",
    "matmul", "reshape", "getitem", "take", "concat", "stack", "stencil_apply",
    "dot",
]


class MemoryMeter:
    """Counts scalars retained for backward and nodes alive on a tape."""

    def __init__(self):
        self._refs: dict[int, list] = {}
        self.scalars = 0
        self.peak_scalars = 0
        self.nodes = 0
        self.peak_nodes = 0

    def hold(self, arrays: Iterable[np.ndarray]) -> None:
        for a in arrays:
            key = id(a)
            entry = self._refs.get(key)
            if entry is None:
                # keep the array alive so its id cannot be recycled
                self._refs[key] = [a, 1]
                self.scalars += a.size
            else:
                entry[1] += 1
        self.peak_scalars = max(self.peak_scalars, self.scalars)

    def release(self, arrays: Iterable[np.ndarray]) -> None:
        for a in arrays:
            key = id(a)
            entry = self._refs.get(key)
            if entry is None:
                continue
            entry[1] -= 1
            if entry[1] == 0:
                del self._refs[key]
                self.scalars -= a.size

    def add_node(self) -> None:
        self.nodes += 1
        self.peak_nodes = max(self.peak_nodes, self.nodes)

    def drop_nodes(self, count: int) -> None:
        self.nodes -= count

    def snapshot(self) -> dict:
        return {"peak_nodes": self.peak_nodes, "peak_scalars": self.peak_scalars,
                "nodes": self.nodes, "scalars": self.scalars}


@dataclass
class _Node:
    out_id: int
    input_ids: tuple
    vjp: Callable | None
    op_kind: str
    shape: tuple
    saved: tuple = ()
    input_shapes: tuple = ()
    freed: bool = False


class Tensor:
    """Dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def node_id(self):
        return self.node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_constant(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def __float__(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor({self.data!r}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        other = _as_tensor(other)
        if other.ndim == 1:
            return matvec(self, other)
        return matmul(self, other)

    def __rmatmul__(self, other):
        other = _as_tensor(other)
        if self.ndim == 1:
            return matvec(other, self)
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradMap:
    """Accumulated cotangents keyed by node id."""

    def __init__(self, tape: "Tape", entries: dict[int, np.ndarray]):
        self.tape = tape
        self.entries = entries

    def __getitem__(self, key) -> np.ndarray:
        if isinstance(key, Tensor):
            if key.node is None:
                return np.zeros_like(key.data)
            if key.tape is not self.tape:
                raise KeyError("tensor belongs to a different tape")
            got = self.entries.get(key.node)
            return np.zeros(key.shape) if got is None else got
        return self.entries[key]

    def get(self, key, default=None):
        try:
            return self[key]
        except KeyError:
            return default

    def __contains__(self, key) -> bool:
        node = key.node if isinstance(key, Tensor) else key
        return node in self.entries

    def __len__(self):
        return len(self.entries)


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self, meter: MemoryMeter | None = None):
        self.nodes: list[_Node] = []
        self.live = True
        self.meter = meter if meter is not None else MemoryMeter()

    def __len__(self):
        return len(self.nodes)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def leaf(self, value, op_kind: str = "leaf") -> Tensor:
        data = np.array(value, dtype=np.float64)
        nid = len(self.nodes)
        self.nodes.append(_Node(nid, (), None, op_kind, data.shape))
        self.meter.add_node()
        return Tensor(data, self, nid)

    def watch(self, t: Tensor) -> Tensor:
        return self.leaf(t.data if isinstance(t, Tensor) else t)

    @contextlib.contextmanager
    def paused(self):
        prev = self.live
        self.live = False
        try:
            yield self
        finally:
            self.live = prev

    def record(self, op_kind: str, inputs: Sequence[Tensor], value: np.ndarray,
               vjp: Callable, saved: Sequence[np.ndarray] = ()) -> Tensor:
        ids = tuple(t.node if (t.tape is self and t.node is not None) else -1 for t in inputs)
        nid = len(self.nodes)
        saved = tuple(saved)
        self.nodes.append(_Node(nid, ids, vjp, op_kind, value.shape, saved,
                                tuple(t.shape for t in inputs)))
        self.meter.add_node()
        self.meter.hold(saved)
        return Tensor(value, self, nid)

    def backward(self, loss: Tensor, seed=None, retain_graph: bool = False,
                 wrt: Sequence[Tensor] | None = None) -> GradMap:
        """Propagate cotangents from ``loss`` back to every reachable leaf.

        ``seed`` defaults to 1.0 and is then only valid for scalar losses.
        With ``wrt`` given, only nodes that depend on those tensors are visited.
        """
        if loss.tape is not self or loss.node is None:
            raise ValueError("loss is not recorded on this tape")
        if seed is None:
            if loss.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}; pass seed=")
            seed = np.ones(loss.shape)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != loss.shape:
                raise ValueError(f"seed shape {seed.shape} != loss shape {loss.shape}")

        active = None
        if wrt is not None:
            active = self._dependents([t.node for t in wrt if t.tape is self and t.node is not None],
                                      loss.node)

        cot: dict[int, np.ndarray] = {loss.node: seed}
        leaves: dict[int, np.ndarray] = {}
        processed = 0
        for node in reversed(self.nodes[:loss.node + 1]):
            g = cot.pop(node.out_id, None)
            if node.vjp is None:
                if g is not None:
                    leaves[node.out_id] = g
                continue
            if g is None or (active is not None and node.out_id not in active):
                continue
            if node.freed:
                raise RuntimeError(f"node {node.out_id} ({node.op_kind}) was freed by an earlier backward;"
                                   " use retain_graph=True")
            grads = node.vjp(g)
            if not isinstance(grads, (tuple, list)) or len(grads) != len(node.input_ids):
                raise ValueError(f"VJP of '{node.op_kind}' returned {_arity(grads)} cotangents,"
                                 f" expected {len(node.input_ids)}")
            for iid, gi, shp in zip(node.input_ids, grads, node.input_shapes):
                if iid < 0 or gi is None:
                    continue
                gi = np.asarray(gi, dtype=np.float64)
                if gi.shape != shp:
                    raise ValueError(f"VJP of '{node.op_kind}' returned cotangent of shape {gi.shape}"
                                     f" for an input of shape {shp}")
                if active is not None and iid not in active:
                    continue
                prev = cot.get(iid)
                cot[iid] = gi if prev is None else prev + gi
            if not retain_graph:
                self.meter.release(node.saved)
                node.freed = True
                processed += 1
        if not retain_graph:
            self.meter.drop_nodes(processed)
        return GradMap(self, leaves)

    def _dependents(self, sources: list[int], upto: int) -> set[int]:
        dep = set(sources)
        for node in self.nodes[:upto + 1]:
            if node.out_id in dep:
                continue
            if any(i in dep for i in node.input_ids):
                dep.add(node.out_id)
        return dep


def _arity(x):
    return len(x) if isinstance(x, (tuple, list)) else 1


def record(op_kind: str, inputs: Sequence, value, vjp: Callable,
           saved: Sequence[np.ndarray] = ()) -> Tensor:
    """Append an operation to the (single) live tape among ``inputs``.

    Returns a constant tensor when no input is attached to a live tape.
    """
    tape = None
    for t in inputs:
        if t.node is not None and t.tape.live:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError(f"{op_kind}: inputs come from different tapes")
    value = np.asarray(value, dtype=np.float64)
    if tape is None:
        return Tensor(value)
    return tape.record(op_kind, inputs, value, vjp, saved)


# ---------------------------------------------------------------- primitives

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    saved = tuple(x.data for x, other in ((a, b), (b, a)) if other.node is not None)
    return record("mul", (a, b), ad * bd,
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                  saved)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return record("div", (a, b), out,
                  lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                  (bd, out))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return record("neg", (a,), -a.data, lambda g: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return record("square", (a,), ad * ad, lambda g: (2.0 * g * ad,), (ad,))


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant exponent."""
    a = _as_tensor(a)
    ad = a.data
    return record("power", (a,), ad ** p, lambda g: (g * p * ad ** (p - 1.0),), (ad,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return record("sin", (a,), np.sin(ad), lambda g: (g * np.cos(ad),), (ad,))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return record("cos", (a,), np.cos(ad), lambda g: (-g * np.sin(ad),), (ad,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),), (y,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return record("exp", (a,), y, lambda g: (g * y,), (y,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    s = np.sign(a.data)
    return record("abs", (a,), np.abs(a.data), lambda g: (g * s,), (s,))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    y = np.logaddexp(0.0, ad)
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return record("softplus", (a,), y, lambda g: (g * sig,), (sig,))


def relu(a) -> Tensor:
    return maximum(a, 0.0)


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` with a constant floor."""
    a = _as_tensor(a)
    mask = (a.data > floor).astype(np.float64)
    return record("maximum", (a,), np.maximum(a.data, floor), lambda g: (g * mask,), (mask,))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape
    return record("where", (a, b), out,
                  lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                             _unbroadcast(np.where(cond, 0.0, g), sb)),
                  (cond,))


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", (a,), out, vjp)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def matvec(A, x) -> Tensor:
    A, x = _as_tensor(A), _as_tensor(x)
    if A.ndim != 2 or x.ndim != 1 or A.shape[1] != x.shape[0]:
        raise ValueError(f"matvec: incompatible shapes {A.shape} and {x.shape}")
    Ad, xd = A.data, x.data
    saved = tuple(v for v, other in ((Ad, x), (xd, A)) if other.node is not None)
    return record("matvec", (A, x), Ad @ xd, lambda g: (np.outer(g, xd), Ad.T @ g), saved)


def matmul(A, B) -> Tensor:
    A, B = _as_tensor(A), _as_tensor(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {A.shape} and {B.shape}")
    Ad, Bd = A.data, B.data
    saved = tuple(v for v, other in ((Ad, B), (Bd, A)) if other.node is not None)
    return record("matmul", (A, B), Ad @ Bd, lambda g: (g @ Bd.T, Ad.T @ g), saved)


def dot(a, b) -> Tensor:
    return sum(mul(a, b))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} into {shape}") from None
    return record("reshape", (a,), out, lambda g: (g.reshape(old),))


def getitem(a, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in the VJP."""
    a = _as_tensor(a)
    shape = a.shape

    basic = isinstance(idx, (slice, int)) or (
        isinstance(idx, tuple) and all(isinstance(i, (slice, int)) for i in idx))

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return record("slice", (a,), a.data[idx], vjp)


def take(a, indices, axis: int = -1) -> Tensor:
    """Gather along ``axis`` (default last) with a 1-D index array."""
    a = _as_tensor(a)
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise ValueError(f"take: indices must be 1-D, got shape {indices.shape}")
    shape = a.shape
    ax = axis % a.ndim

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(np.moveaxis(out, ax, -1), (Ellipsis, indices), np.moveaxis(g, ax, -1))
        return (out,)

    return record("gather", (a,), np.take(a.data, indices, axis=ax), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return record("concat", ts, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return record("stack", ts, out,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def stencil_apply(x, neighbors: np.ndarray, coeffs) -> Tensor:
    """``out[..., i] = sum_m coeffs[m, i] * x[..., neighbors[m, i]]``.

    ``neighbors`` is an integer table of shape (m, n); ``coeffs`` has the same
    shape and may itself be a tensor (variable-coefficient stencils).  Leading
    axes of ``x`` are batch axes.  One tape node per application.
    """
    x, coeffs = _as_tensor(x), _as_tensor(coeffs)
    neighbors = np.asarray(neighbors)
    if neighbors.ndim != 2 or coeffs.shape != neighbors.shape or x.shape[-1] != neighbors.shape[1]:
        raise ValueError(f"stencil: incompatible shapes x={x.shape} neighbors={neighbors.shape}"
                         f" coeffs={coeffs.shape}")
    xd, cd = x.data, coeffs.data
    out = np.einsum("...mn,mn->...n", xd[..., neighbors], cd)
    n = xd.shape[-1]
    flat_nb = neighbors.reshape(-1)
    xshape = xd.shape

    def vjp(g):
        contrib = g[..., None, :] * cd                       # (..., m, n)
        if len(xshape) == 1:
            gx = np.bincount(flat_nb, weights=contrib.reshape(-1), minlength=n)
        else:
            lead = contrib.reshape(-1, flat_nb.size)
            nb = lead.shape[0]
            idx = (flat_nb[None, :] + n * np.arange(nb)[:, None]).reshape(-1)
            gx = np.bincount(idx, weights=lead.reshape(-1), minlength=nb * n).reshape(xshape)
        gc = xd[..., neighbors] * g[..., None, :]
        if gc.ndim > 2:
            gc = gc.reshape(-1, *cd.shape).sum(axis=0)
        return gx, gc

    saved = (xd,) if coeffs.node is not None else ()
    if x.node is not None:
        saved = saved + (cd,)
    return record("stencil", (x, coeffs), out, vjp, saved)


# ---------------------------------------------------------- composite tools

def _arrays_in(obj) -> list[np.ndarray]:
    if isinstance(obj, np.ndarray):
        return [obj]
    if isinstance(obj, Tensor):
        return [obj.data]
    if hasattr(obj, "saved_arrays"):
        return list(obj.saved_arrays())
    if isinstance(obj, dict):
        obj = list(obj.values())
    if isinstance(obj, (tuple, list)):
        return [a for item in obj for a in _arrays_in(item)]
    return []


def custom_vjp(forward_fn: Callable, backward_fn: Callable, name: str = "custom"):
    """Wrap a function with a hand-written VJP as one tape node.

    ``forward_fn(*arrays) -> (output_array, ctx)`` runs with recording
    suspended.  ``backward_fn(g, ctx)`` must return one cotangent per input
    (``None`` for inputs with no gradient).  Arrays found in ``ctx`` are
    counted as stored for backward.
    """

    def op(*inputs) -> Tensor:
        ts = [_as_tensor(t) for t in inputs]
        tapes = [t.tape for t in ts if t.node is not None]
        with contextlib.ExitStack() as es:
            for tp in {id(tp): tp for tp in tapes}.values():
                es.enter_context(tp.paused())
            out, ctx = forward_fn(*[t.data for t in ts])
        out = np.asarray(out, dtype=np.float64)

        def vjp(g):
            grads = backward_fn(g, ctx)
            if not isinstance(grads, (tuple, list)):
                grads = (grads,)
            if len(grads) != len(ts):
                raise ValueError(f"custom node '{name}': backward returned {len(grads)} cotangents"
                                 f" for {len(ts)} inputs")
            for gi, t in zip(grads, ts):
                if gi is not None and np.shape(gi) != t.shape:
                    raise ValueError(f"custom node '{name}': cotangent shape {np.shape(gi)}"
                                     f" does not match input shape {t.shape}")
            return tuple(grads)

        return record(name, ts, out, vjp, _arrays_in(ctx))

    op.__name__ = name
    return op


def checkpoint(segment_fn: Callable, *inputs, name: str = "checkpoint"):
    """Run ``segment_fn`` without recording its interior; recompute on backward.

    ``segment_fn`` takes tensors and returns a tensor or a list/tuple of
    same-shaped tensors; it must be pure and may only depend on its explicit
    inputs for gradients.  Only the inputs are stored.  A list result is
    returned as a list of tensors sliced from one stacked node.
    """
    ts = [_as_tensor(t) for t in inputs]
    tapes = {id(t.tape): t.tape for t in ts if t.node is not None}
    with contextlib.ExitStack() as es:
        for tp in tapes.values():
            es.enter_context(tp.paused())
        raw = segment_fn(*[Tensor(t.data) for t in ts])
    multi = isinstance(raw, (list, tuple))
    value = np.stack([r.data for r in raw]) if multi else raw.data
    parent = next(iter(tapes.values()), None)

    def vjp(g):
        sub_tape = Tape(meter=parent.meter if parent is not None else None)
        leaves = [sub_tape.leaf(t.data) for t in ts]
        res = segment_fn(*leaves)
        out = stack(list(res)) if multi else res
        if out.node is None:
            return tuple(np.zeros(t.shape) for t in ts)
        grads = sub_tape.backward(out, seed=g)
        return tuple(grads[leaf] for leaf in leaves)

    node = record(name, ts, value, vjp, [t.data for t in ts])
    if multi:
        return [getitem(node, i) for i in range(len(raw))]
    return node


def vjp(fn: Callable, *primals, meter: MemoryMeter | None = None):
    """Record ``fn`` on a private tape; return ``(out, vjp_fn)``.

    ``vjp_fn(cotangent)`` returns one array per primal and can be called
    repeatedly (the private graph is retained).
    """
    tape = Tape(meter=meter)
    leaves = [tape.leaf(p.data if isinstance(p, Tensor) else p) for p in primals]
    out = fn(*leaves)

    def vjp_fn(g, wrt: Sequence[int] | None = None):
        if out.node is None:
            return [np.zeros(l.shape) for l in leaves]
        sel = None if wrt is None else [leaves[i] for i in wrt]
        grads = tape.backward(out, seed=g, retain_graph=True, wrt=sel)
        return [grads[l] for l in leaves]

    return out.data, vjp_fn


def finite_diff_grad(scalar_fn: Callable, x, eps: float = 1e-6,
                     indices: Iterable[int] | None = None) -> np.ndarray:
    """Central-difference gradient of ``scalar_fn`` at ``x``.

    With ``indices`` only those flat coordinates are estimated (others are 0).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(scalar_fn(x.copy()))
        flat[i] = orig - eps
        fm = float(scalar_fn(x.copy()))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)
