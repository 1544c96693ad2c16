"""Dense float64 tensors with a dynamic reverse-mode tape.

Every operation returns a new :class:`Tensor`.  When gradient recording is
enabled and any input requires gradients, the result keeps references to its
parents together with a closure mapping the output cotangent to input
cotangents.  :meth:`Tensor.backward` walks that graph in reverse topological
order and frees it afterwards unless ``retain_graph`` is set.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import ContractViolation, DimensionError, NumericError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, parameter updates)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_leaf")
    __array_ufunc__ = None  # make ndarray (op) Tensor dispatch to the reflected Tensor method

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._leaf = True

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

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

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    @staticmethod
    def _wrap(data: np.ndarray) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "const"
        out._leaf = True
        return out

    # -- differentiation --------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        if self.data.size != 1:
            raise ContractViolation(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                raise ContractViolation(
                    f"graph through '{node._op}' was freed by an earlier backward(); "
                    "pass retain_graph=True to differentiate twice"
                )
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            if not retain_graph:
                node._parents = ()
                node._backward = None

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")
    out = Tensor._wrap(data)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._leaf = False
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _result(out, (a, b), back, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**p
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + special.erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _result(out, (a,), back, "gelu")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(out, (a,), lambda g: (g * inside,), "clamp")


# -- reductions and shape manipulation ------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out, dtype=np.float64), (a,), back, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(
        np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast"
    )


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros(a.shape)
        full[idx] += g
        return (full,)

    return _result(a.data[idx], (a,), back, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    ref = ts[0].shape
    for i, t in enumerate(ts[1:], 1):
        if t.ndim != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise DimensionError(
                f"concat along axis {axis}: operand {i} has shape {t.shape}, expected {ref} off-axis"
            )
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def crop_or_pad(a, shape: Sequence[int]) -> Tensor:
    """Keep the overlapping leading block of ``a`` in a zero array of ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    if len(shape) != a.ndim:
        raise DimensionError(f"crop_or_pad: rank {a.ndim} vs target {shape}")
    common = tuple(slice(0, min(n, m)) for n, m in zip(a.shape, shape))
    out = np.zeros(shape)
    out[common] = a.data[common]

    def back(g):
        ga = np.zeros(a.shape)
        ga[common] = g[common]
        return (ga,)

    return _result(out, (a,), back, "crop_or_pad")


# -- generalized contraction ----------------------------------------------
def _parse_spec(spec: str, n: int):
    if "->" not in spec:
        raise DimensionError(f"contraction spec {spec!r} needs an explicit '->' output")
    lhs, out = spec.replace(" ", "").split("->")
    subs = lhs.split(",")
    if len(subs) != n:
        raise DimensionError(f"spec {spec!r} names {len(subs)} operands, got {n}")
    for s in subs + [out]:
        if len(set(s)) != len(s):
            raise DimensionError(f"repeated axis label within {s!r} is not supported")
    return subs, out


_PATHS: dict = {}


def _einsum(spec: str, *arrays) -> np.ndarray:
    """``np.einsum`` with the contraction order cached per (spec, shapes)."""
    key = (spec, tuple(a.shape for a in arrays))
    path = _PATHS.get(key)
    if path is None:
        path = np.einsum_path(spec, *arrays, optimize="greedy")[0]
        _PATHS[key] = path
    return np.einsum(spec, *arrays, optimize=path)


def contract(spec: str, *operands) -> Tensor:
    """Generalised tensor contraction in einsum notation.

    Labels shared between operands and absent from the output are summed;
    labels present in the output appear in the declared order.  Extents of
    identically labelled axes must agree.
    """
    ts = [as_tensor(t) for t in operands]
    subs, out_sub = _parse_spec(spec, len(ts))
    extents: dict[str, tuple[int, int, int]] = {}
    for i, (s, t) in enumerate(zip(subs, ts)):
        if len(s) != t.ndim:
            raise DimensionError(f"operand {i} has rank {t.ndim} but subscripts {s!r}")
        for ax, lab in enumerate(s):
            n = t.shape[ax]
            if lab in extents and extents[lab][0] != n:
                n0, i0, ax0 = extents[lab]
                raise DimensionError(
                    f"axis '{lab}': operand {i0} axis {ax0} has extent {n0}, "
                    f"operand {i} axis {ax} has extent {n}"
                )
            extents.setdefault(lab, (n, i, ax))
    for lab in out_sub:
        if lab not in extents:
            raise DimensionError(f"output label '{lab}' not present in any operand")

    data = _einsum(spec, *[t.data for t in ts])

    def back(g):
        grads = []
        for i, (s, t) in enumerate(zip(subs, ts)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [(subs[j], ts[j].data) for j in range(len(ts)) if j != i]
            avail = set(out_sub).union(*[set(o[0]) for o in others])
            kept = "".join(lab for lab in s if lab in avail)
            lhs = ",".join([out_sub] + [o[0] for o in others])
            r = _einsum(f"{lhs}->{kept}", g, *[o[1] for o in others])
            if kept != s:
                r = r.reshape([t.shape[k] if lab in avail else 1 for k, lab in enumerate(s)])
                r = np.broadcast_to(r, t.shape)
            grads.append(r)
        return grads

    return _result(np.asarray(data, dtype=np.float64), ts, back, f"contract[{spec}]")


def primitive(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Register a custom differentiable operation with a hand-written adjoint."""
    return _result(data, parents, backward, op)


# -- finite differences ----------------------------------------------------
def check_gradient(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                   max_entries: int | None = None, seed: int = 0, floor: float = 1e-12) -> float:
    """Maximum relative error between tape gradients and central differences.

    ``f`` is re-evaluated with each probed parameter entry perturbed by
    ``+-step``; it must be deterministic given the parameter values.  With
    ``max_entries`` only that many entries per tensor are probed, chosen by
    a seeded generator.  The error of an entry is
    ``|a - c| / max(|a|, |c|, floor)``.
    """
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is non-finite at the base point")
    loss.backward()
    pick = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(pick.choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = _scalar(f())
                flat[i] = orig - step
                fm = _scalar(f())
            flat[i] = orig
            central = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - central) / max(abs(a), abs(central), floor)
            worst = max(worst, err)
    return worst


def _scalar(t: Tensor) -> float:
    v = float(np.asarray(t.data).reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError("objective is non-finite at a probe point")
    return v
