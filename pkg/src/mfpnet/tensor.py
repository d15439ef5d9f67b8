"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation produces a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to one gradient per parent.
:func:`backward` walks the recorded graph in reverse topological order and
sums gradients over fan-out.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, ShapeError

FLOAT_TYPES = (np.float32, np.float64)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An immutable n-d float array plus the op record that produced it."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in FLOAT_TYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        # freeze a view so the caller's array stays writeable
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``; used by every differentiable kernel."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    out.op = op
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# creation


@dataclass(frozen=True)
class RandomFill:
    """Seeded random initializer; ``kind`` is ``normal`` or ``uniform``."""

    seed: int
    kind: str = "normal"
    low: float = -1.0
    high: float = 1.0
    std: float = 1.0


def tensor_create(shape: Sequence[int], fill: float | RandomFill = 0.0, dtype=np.float64,
                  requires_grad: bool = False, name: str | None = None) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every extent must be >= 1")
    if isinstance(fill, RandomFill):
        rng = np.random.default_rng(fill.seed)
        if fill.kind == "normal":
            data = rng.standard_normal(shape) * fill.std
        elif fill.kind == "uniform":
            data = rng.uniform(fill.low, fill.high, shape)
        else:
            raise ContractError(f"unknown random fill kind {fill.kind!r}")
        data = data.astype(dtype)
    else:
        data = np.full(shape, fill, dtype=dtype)
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# elementwise


def _operand(b, like: Tensor):
    if isinstance(b, Tensor):
        if b.shape != like.shape:
            raise ShapeError(f"shape mismatch: {like.shape} vs {b.shape}")
        return b
    if np.ndim(b) != 0:
        raise ShapeError("non-scalar operands must be Tensors of identical shape")
    return None


def add(a: Tensor, b) -> Tensor:
    t = _operand(b, a)
    if t is None:
        return record(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    return record(a.data + t.data, (a, t), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    t = _operand(b, a)
    if t is None:
        return record(a.data - a.dtype.type(b), (a,), lambda g: (g,), "sub_scalar")
    return record(a.data - t.data, (a, t), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    t = _operand(b, a)
    if t is None:
        return scale(a, b)
    ad, bd = a.data, t.data
    return record(ad * bd, (a, t), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    t = _operand(b, a)
    if t is None:
        return scale(a, 1.0 / float(b))
    ad, bd = a.data, t.data
    out = ad / bd
    return record(out, (a, t), lambda g: (g / bd, -g * out / bd), "div")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return record(a.data * s, (a,), lambda g: (g * s,), "scale")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Dispatch ``add|sub|mul|scale``; tensor operands must share a shape."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(a, b)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return record(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# reductions and layout


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record(np.sum(a.data, axis=axis), (a,), bw, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def linear(a: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``a @ w + b`` over the last axis of ``a``; ``w`` is (K, N), ``b`` is (N,)."""
    if w.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: cannot contract {a.shape} with {w.shape}")
    ad, wd = a.data, w.data
    out = ad @ wd
    if b is not None:
        if b.shape != (wd.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({wd.shape[1]},)")
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = g @ wd.T
        gw = ad.reshape(-1, ad.shape[-1]).T @ g2
        if b is None:
            return ga, gw
        return ga, gw, g2.sum(axis=0)

    parents = (a, w) if b is None else (a, w, b)
    return record(out, parents, bw, "linear")


# ---------------------------------------------------------------------------
# graph and backward


@dataclass
class Graph:
    """Nodes reachable from ``output`` in topological order (inputs first)."""

    nodes: list[Tensor]
    output: Tensor

    @classmethod
    def build(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order, output)


GradientSet = dict


def backward(loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> GradientSet:
    """Gradients of scalar ``loss`` w.r.t. every tensor in ``wrt``.

    Without ``wrt`` the result covers every named leaf reachable from ``loss``.
    Tensors that do not influence the loss receive zero gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.build(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if wrt is None:
        wrt = {n.name: n for n in graph.nodes if n.backward_fn is None and n.name}
    out = {}
    for name, t in wrt.items():
        g = leaves.get(id(t))
        out[name] = np.zeros(t.shape, dtype=t.dtype) if g is None else np.asarray(g, dtype=t.dtype)
    return out


def check_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        from .errors import NonFiniteError

        raise NonFiniteError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    passed: bool
    eps: float
    tol: float
    fault: str | None = None
    worst: float = field(init=False)

    def __post_init__(self):
        self.worst = max(self.max_rel_error.values(), default=0.0)


def grad_check(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               eps: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` with central differences, in float64.

    ``fn`` receives a dict of leaf tensors keyed like ``params`` and must return
    a scalar tensor. Non-finite values found while probing are reported via
    ``fault`` instead of raising.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(arrays) -> Tensor:
        leaves = {k: Tensor(a, requires_grad=True, name=k) for k, a in arrays.items()}
        # probing may leave the domain; that is reported below, not warned about
        with np.errstate(all="ignore"):
            return fn(leaves), leaves

    loss, leaves = evaluate(base)
    if not np.all(np.isfinite(loss.data)):
        return GradCheckReport({}, False, eps, tol, fault="non-finite loss at base point")
    analytic = backward(loss, leaves)

    errors: dict[str, float] = {}
    for name, arr in base.items():
        worst = 0.0
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(evaluate(base)[0].data)
            flat[i] = orig - eps
            fm = float(evaluate(base)[0].data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(errors, False, eps, tol,
                                       fault=f"non-finite value probing {name}[{i}]")
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        errors[name] = worst
    passed = all(e < tol for e in errors.values())
    return GradCheckReport(errors, passed, eps, tol)
