"""Reverse-mode automatic differentiation over dense numpy arrays.

Two ways to use it:

* eagerly, by wrapping arrays in :class:`Tensor` and calling the primitive
  functions below; ``loss.backward()`` fills ``.grad`` on every leaf that
  requires it;
* symbolically, by building an :class:`Expr` graph from :func:`var` leaves and
  handing it to :func:`evaluate` / :func:`gradient` / :func:`finite_diff_check`.

Every primitive accepts either form; when any argument is an ``Expr`` the call
is recorded instead of executed.

Broadcasting is restricted to leading dimensions: the smaller operand's shape
must equal a suffix of the larger one (scalars, biases, a shared ``(T, T)``
mask). Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import functools
import math
import warnings
from typing import Any, Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "Expr",
    "ShapeError",
    "UnboundLeafError",
    "NonDifferentiableWarning",
    "GradCheckResult",
    "var",
    "const",
    "evaluate",
    "gradient",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "layernorm",
    "embed",
    "gather",
    "getitem",
    "sum",
    "mean",
    "gelu",
    "relu",
    "clip",
    "reshape",
    "transpose",
    "concat",
    "cross_entropy",
    "ste",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, message: str, node: str | None = None):
        self.node = node
        super().__init__(f"{node}: {message}" if node else message)


class UnboundLeafError(KeyError):
    pass


class NonDifferentiableWarning(UserWarning):
    pass


class Tensor:
    """A value in the eager graph.

    ``data`` is never mutated after construction. ``grad`` is filled by
    :meth:`backward` for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_vjp", "kink")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        # relu/clip record which side of their kink every element sits on
        self.kink: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

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
        if isinstance(other, (Tensor, Expr)):
            raise TypeError("division by a tensor is not a primitive; use mul")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar root, got shape {self.shape}", self.op)
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._vjp is not None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _make(data: np.ndarray, op: str, parents: tuple, vjp) -> Tensor:
    out = Tensor(data)
    out.op = op
    # parents are kept even when nothing needs a gradient, for kink inspection
    out._parents = parents
    if any(isinstance(p, Tensor) and _needs_grad(p) for p in parents):
        out._vjp = vjp
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind in "iub" or arr.dtype != ref.dtype:
        arr = arr.astype(ref.dtype)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# symbolic layer
# ---------------------------------------------------------------------------


class Expr:
    """A node of a deferred expression graph."""

    __slots__ = ("op", "fn", "args", "kwargs", "name", "value", "tensor")

    def __init__(self, op: str, fn=None, args: tuple = (), kwargs: dict | None = None, name=None):
        self.op = op
        self.fn = fn
        self.args = args
        self.kwargs = kwargs or {}
        self.name = name
        self.value: np.ndarray | None = None
        self.tensor: Tensor | None = None

    @property
    def inputs(self) -> tuple[Expr, ...]:
        return tuple(a for a in self.args if isinstance(a, Expr))

    def __repr__(self):
        if self.op in ("var", "const"):
            return f"{self.op}({self.name!r})"
        return f"Expr({self.op})"

    __add__ = Tensor.__add__
    __radd__ = Tensor.__radd__
    __sub__ = Tensor.__sub__
    __rsub__ = Tensor.__rsub__
    __mul__ = Tensor.__mul__
    __rmul__ = Tensor.__rmul__
    __truediv__ = Tensor.__truediv__
    __matmul__ = Tensor.__matmul__
    __neg__ = Tensor.__neg__
    __getitem__ = Tensor.__getitem__


def var(name: str) -> Expr:
    return Expr("var", name=name)


def const(value, name: str = "const") -> Expr:
    e = Expr("const", name=name)
    e.value = np.asarray(value)
    return e


def primitive(op: str):
    """Register an eager implementation; calls with ``Expr`` args are deferred."""

    def wrap(fn):
        @functools.wraps(fn)
        def dispatch(*args, **kwargs):
            if any(isinstance(a, Expr) for a in args) or any(
                isinstance(a, (list, tuple)) and any(isinstance(b, Expr) for b in a) for a in args
            ):
                return Expr(op, fn, args, kwargs)
            return fn(*args, **kwargs)

        dispatch.op = op
        return dispatch

    return wrap


def _expr_order(root: Expr) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in _expr_children(node):
            stack.append((child, False))
    return order


def _expr_children(node: Expr) -> list[Expr]:
    out = []
    for a in node.args:
        if isinstance(a, Expr):
            out.append(a)
        elif isinstance(a, (list, tuple)):
            out.extend(b for b in a if isinstance(b, Expr))
    return out


def _leaves(bindings: Mapping[str, Any], requires_grad: Iterable[str] = ()) -> dict[str, Any]:
    want = set(requires_grad)
    leaves: dict[str, Any] = {}
    for name, value in bindings.items():
        arr = np.asarray(value)
        if arr.dtype.kind in "iub":
            leaves[name] = arr
        else:
            leaves[name] = Tensor(arr, requires_grad=name in want, name=name)
    return leaves


def _run(root, leaves: dict[str, Any]) -> Tensor:
    if callable(root) and not isinstance(root, Expr):
        out = root(**leaves)
        return _as_tensor(out)
    if not isinstance(root, Expr):
        raise TypeError(f"cannot evaluate {type(root).__name__}")

    def resolve(a, env):
        if isinstance(a, Expr):
            return env[id(a)]
        if isinstance(a, (list, tuple)):
            return type(a)(resolve(b, env) for b in a)
        return a

    env: dict[int, Any] = {}
    for node in _expr_order(root):
        if node.op == "var":
            if node.name not in leaves:
                raise UnboundLeafError(f"leaf {node.name!r} is not bound")
            val = leaves[node.name]
        elif node.op == "const":
            val = node.value if node.value.dtype.kind in "iub" else Tensor(node.value)
        else:
            args = [resolve(a, env) for a in node.args]
            try:
                val = node.fn(*args, **node.kwargs)
            except ShapeError as exc:
                if exc.node is None:
                    raise ShapeError(str(exc), node=f"{node.op} node") from None
                raise
        node.tensor = val if isinstance(val, Tensor) else None
        node.value = val.data if isinstance(val, Tensor) else np.asarray(val)
        env[id(node)] = val
    return _as_tensor(env[id(root)])


def evaluate(root, bindings: Mapping[str, Any]) -> np.ndarray:
    """Forward value of ``root`` under ``bindings``.

    ``root`` is an :class:`Expr` or a callable taking the bound leaves as
    keyword arguments. Intermediate values are cached on the Expr nodes.
    """
    return _run(root, _leaves(bindings)).data


def gradient(root, bindings: Mapping[str, Any], wrt: Iterable[str]) -> dict[str, np.ndarray]:
    wrt = list(wrt)
    leaves = _leaves(bindings, wrt)
    out = _run(root, leaves)
    if out.data.size != 1:
        raise ShapeError(f"gradient needs a scalar root, got shape {out.shape}", "root")
    out.backward()
    grads = {}
    for name in wrt:
        leaf = leaves[name]
        grads[name] = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
    return grads


class GradCheckResult(float):
    """Max relative error of a gradient check; ``skipped`` lists kink coordinates."""

    skipped: list[tuple[str, tuple[int, ...]]]

    def __new__(cls, value: float, skipped=()):
        obj = super().__new__(cls, value)
        obj.skipped = list(skipped)
        return obj


def _kink_signature(root: Tensor) -> list[bytes]:
    return [t.kink.tobytes() for t in _topo_order(root) if t.kink is not None]


def finite_diff_check(root, bindings: Mapping[str, Any], wrt: Iterable[str], eps: float = 1e-5) -> GradCheckResult:
    """Compare reverse-mode gradients against central differences.

    Returns max over coordinates of ``|g_ad - g_fd| / max(1, |g_fd|)``.
    Coordinates whose perturbation moves any relu/clip input across its kink
    are skipped and reported through :class:`NonDifferentiableWarning`.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    wrt = list(wrt)
    analytic = gradient(root, bindings, wrt)
    base = {k: np.array(v, copy=True) for k, v in bindings.items()}
    worst = 0.0
    skipped = []
    for name in wrt:
        x = base[name]
        flat = x.reshape(-1)
        g_ad = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = _run(root, _leaves(base))
            flat[i] = orig - eps
            lo = _run(root, _leaves(base))
            flat[i] = orig
            if _kink_signature(hi) != _kink_signature(lo):
                skipped.append((name, np.unravel_index(i, x.shape)))
                continue
            g_fd = (float(hi.data) - float(lo.data)) / (2 * eps)
            err = abs(float(g_ad[i]) - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    if skipped:
        warnings.warn(
            f"non-differentiable point skipped at {len(skipped)} coordinate(s): {skipped[:4]}",
            NonDifferentiableWarning,
            stacklevel=2,
        )
    return GradCheckResult(worst, skipped)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _suffix_shapes(a: np.ndarray, b: np.ndarray, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"shapes {sa} and {sb} differ beyond leading dimensions", op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape) if lead else g


@primitive("add")
def add(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else _as_tensor(b)
    a, b = _const_like(a, ref), _const_like(b, ref)
    _suffix_shapes(a.data, b.data, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), vjp)


@primitive("sub")
def sub(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else _as_tensor(b)
    a, b = _const_like(a, ref), _const_like(b, ref)
    _suffix_shapes(a.data, b.data, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), vjp)


@primitive("mul")
def mul(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else _as_tensor(b)
    a, b = _const_like(a, ref), _const_like(b, ref)
    _suffix_shapes(a.data, b.data, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), vjp)


@primitive("neg")
def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


@primitive("matmul")
def matmul(a, b) -> Tensor:
    """Batched matmul; ``b`` may be a plain 2-D weight shared over the batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}", "matmul")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}", "matmul")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch dimensions differ: {a.shape} @ {b.shape}", "matmul")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


@primitive("exp")
def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


@primitive("log")
def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@primitive("softmax")
def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    y = _softmax(a.data, axis)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (a,), vjp)


@primitive("log_softmax")
def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    y = _log_softmax(a.data, axis)

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, "log_softmax", (a,), vjp)


@primitive("layernorm")
def layernorm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis with affine ``weight`` and ``bias``."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"affine terms must have shape ({d},), got {weight.shape}, {bias.shape}", "layernorm")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var_ = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var_ + eps)
    xhat = xc * rstd

    def vjp(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        gxhat = g * weight.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _make(xhat * weight.data + bias.data, "layernorm", (x, weight, bias), vjp)


@primitive("embed")
def embed(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array ``ids``."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding ids must be integers, got {ids.dtype}", "embed")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"id out of range for table with {table.shape[0]} rows", "embed")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(table.data[ids], "embed", (table,), vjp)


@primitive("gather")
def gather(x, idx) -> Tensor:
    """``take_along_axis`` on the last axis."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if idx.ndim != x.ndim or idx.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} incompatible with {x.shape}", "gather")

    def vjp(g):
        gx = np.zeros_like(x.data)
        grid = np.indices(idx.shape, sparse=True)
        np.add.at(gx, (*grid[:-1], idx), g)
        return (gx,)

    return _make(np.take_along_axis(x.data, idx, axis=-1), "gather", (x,), vjp)


@primitive("getitem")
def getitem(x, key) -> Tensor:
    x = _as_tensor(x)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(x.data[key]), "getitem", (x,), vjp)


@primitive("sum")
def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y), "sum", (x,), vjp)


@primitive("mean")
def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    y = x.data.mean(axis=axis, keepdims=keepdims)
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    n = math.prod(x.shape[a] for a in axes)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _make(np.asarray(y), "mean", (x,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


@primitive("gelu")
def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    v = x.data
    v2 = v * v
    inner = _GELU_C * (v + 0.044715 * v2 * v)
    th = np.tanh(inner)
    y = 0.5 * v * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return _make(y, "gelu", (x,), vjp)


@primitive("relu")
def relu(x) -> Tensor:
    x = _as_tensor(x)
    on = x.data > 0
    out = _make(np.where(on, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * on,))
    out.kink = np.sign(x.data).astype(np.int8)
    return out


@primitive("clip")
def clip(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp into ``[lo, hi]``; gradient is zero where the clamp is active."""
    x = _as_tensor(x)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (x.data > lo_) & (x.data < hi_)
    out = _make(np.clip(x.data, lo_, hi_).astype(x.dtype), "clip", (x,), lambda g: (g * inside,))
    out.kink = (np.sign(x.data - lo_) + 3 * np.sign(x.data - hi_)).astype(np.int8)
    return out


@primitive("reshape")
def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc), "reshape") from None
    return _make(y, "reshape", (x,), lambda g: (g.reshape(x.shape),))


@primitive("transpose")
def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


@primitive("concat")
def concat(xs, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc), "concat") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(y, "concat", tuple(xs), vjp)


@primitive("cross_entropy")
def cross_entropy(logits, targets) -> Tensor:
    """Mean natural-log cross-entropy of ``logits[..., V]`` against integer targets."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}", "cross_entropy")
    if targets.size == 0:
        raise ShapeError("empty target sequence", "cross_entropy")
    V = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= V:
        raise ShapeError(f"target id out of range for vocab {V}", "cross_entropy")
    lsm = _log_softmax(logits.data, -1)
    picked = np.take_along_axis(lsm, targets[..., None], axis=-1)
    n = targets.size
    loss = -picked.sum() / n

    def vjp(g):
        d = np.exp(lsm)
        np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], -1) - 1, -1)
        return (d * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), vjp)


@primitive("ste")
def ste(soft, hard) -> Tensor:
    """Straight-through: forward value ``hard``, identity Jacobian to ``soft``."""
    soft = _as_tensor(soft)
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"hard value {hard.shape} must match soft {soft.shape}", "ste")
    return _make(hard.copy(), "ste", (soft,), lambda g: (g,))
