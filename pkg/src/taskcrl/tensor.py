"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable quantity in the package is a :class:`Tensor`. Operations
record a node (op kind, inputs, backward closure) whenever any input requires
gradients; :func:`backward` walks those nodes in reverse topological order.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes, a 0-d operand, or an operand whose shape is a trailing suffix of the
other's (leading batch broadcasting). Anything else needs
:func:`broadcast_to` or :func:`reshape` first.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "TensorError", "ShapeError", "DomainError", "NumericError", "BackwardError",
    "tensor", "constant", "zeros", "ones", "no_grad", "backward", "grad",
    "add", "sub", "mul", "div", "neg", "matmul", "relu", "leaky_relu", "tanh", "sigmoid",
    "exp", "log", "square", "sqrt", "abs", "clip", "sum", "mean", "logsumexp", "softmax",
    "log_softmax", "concat", "stack", "getitem", "transpose", "reshape", "broadcast_to",
    "stop_gradient", "apply_primitive", "finite_diff_check", "LEAKY_SLOPE",
]

LEAKY_SLOPE = 0.2

_ids = itertools.count(1)
_grad_state = {"enabled": True}


class TensorError(Exception):
    """Base class for tensor-engine errors."""


class ShapeError(TensorError, ValueError):
    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(TensorError, ValueError):
    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op}: input outside domain for shapes {self.shapes}: {detail}")


class NumericError(TensorError, FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


class BackwardError(TensorError, RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic info
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def detach(self) -> "Tensor": return stop_gradient(self)


def _raise_item(t):
    raise ShapeError("item", [t.shape], "only size-1 tensors convert to float")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation)."""
    prev = _grad_state["enabled"]
    _grad_state["enabled"] = False
    try:
        yield
    finally:
        _grad_state["enabled"] = prev


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(op: str, data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite output for input shapes {[p.shape for p in parents]}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.op = op
    if _grad_state["enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- broadcasting

def _broadcast_shape(op: str, sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if len(sa) == 0:
        return sb
    if len(sb) == 0:
        return sa
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(op, [sa, sb], "only leading-batch broadcasting is supported")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _node("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    if np.any(b.data == 0):
        raise DomainError("div", [a.shape, b.shape], "division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def _bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node("div", out, (a, b), _bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``matmul`` semantics for 1-D and batched operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", [a.shape, b.shape], "0-d operand")
    a2 = a.data if a.ndim > 1 else a.data[None, :]
    b2 = b.data if b.ndim > 1 else b.data[:, None]
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape], "inner dimensions differ")
    ba, bb = a2.shape[:-2], b2.shape[:-2]
    if ba and bb and ba != bb:
        raise ShapeError("matmul", [a.shape, b.shape], "batch dimensions differ")
    out2 = np.matmul(a2, b2)
    out = out2
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def _bw(g):
        g2 = g
        if b.ndim == 1:
            g2 = g2[..., None]
        if a.ndim == 1:
            g2 = g2[..., None, :]
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if ga.ndim > a2.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - a2.ndim)))
        if gb.ndim > b2.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - b2.ndim)))
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return _node("matmul", out, (a, b), _bw)


# ---------------------------------------------------------------- unary ops

def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _node("relu", a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, alpha: float = LEAKY_SLOPE) -> Tensor:
    a = _as_tensor(a)
    slope = np.where(a.data > 0, 1.0, alpha)
    return _node("leaky_relu", a.data * slope, (a,), lambda g: (g * slope,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log", [a.shape], "log of nonpositive value")
    ad = a.data
    return _node("log", np.log(ad), (a,), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _node("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("sqrt", [a.shape], "sqrt requires strictly positive input")
    out = np.sqrt(a.data)
    return _node("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    sgn = np.sign(a.data)
    return _node("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside the range."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def stop_gradient(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.grad = None
    out.node_id = next(_ids)
    out.op = "stop_gradient"
    out.requires_grad = False
    out.parents = ()
    out._backward = None
    return out


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand(g: np.ndarray, axes: tuple, keepdims: bool, shape: tuple) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    return _node("sum", out, (a,), lambda g: (_expand(g, axes, keepdims, shape),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))
    return _node("mean", out, (a,), lambda g: (_expand(g, axes, keepdims, shape) / count,))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    m = a.data.max(axis=axes, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axes, keepdims=True)
    out_k = m + np.log(s)
    soft = e / s
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)
    shape = a.shape
    return _node("logsumexp", out, (a,), lambda g: (_expand(g, axes, keepdims, shape) * soft,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node("softmax", out, (a,), _bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def _bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node("log_softmax", out, (a,), _bw)


# ---------------------------------------------------------------- structural ops

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat", [], "no inputs")
    nd = ts[0].ndim
    ax = axis % nd if nd else 0
    for t in ts:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError("concat", [t.shape for t in ts])
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node("concat", out, ts, _bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    shape = ts[0].shape
    ax = axis % (len(shape) + 1)
    expanded = [reshape(t, shape[:ax] + (1,) + shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    """Indexing/slicing (the ``slice`` primitive); integer-array gathers are supported."""
    a = _as_tensor(a)
    if isinstance(idx, Tensor):
        raise ShapeError("slice", [a.shape, idx.shape], "index with integer arrays, not tensors")
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("slice", [a.shape], str(exc)) from None
    out = np.array(out, dtype=np.float64)
    basic = _is_basic_index(idx)
    shape = a.shape

    def _bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node("slice", out, (a,), _bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", [a.shape], f"bad axes {axes}")
    inv = np.argsort(axes)
    return _node("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape, shape]) from None
    orig = a.shape
    return _node("reshape", out, (a,), lambda g: (g.reshape(orig),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-rule broadcast; gradients are summed over expanded axes."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", [a.shape, shape]) from None
    orig = a.shape

    def _bw(g):
        lead = g.ndim - len(orig)
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, (s, t) in enumerate(zip(orig, g.shape)) if s == 1 and t != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _node("broadcast_to", out, (a,), _bw)


_PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul, "relu": relu,
    "leaky_relu": leaky_relu, "tanh": tanh, "exp": exp, "log": log, "square": square,
    "sum": sum, "mean": mean, "logsumexp": logsumexp, "softmax": softmax, "concat": concat,
    "slice": getitem, "transpose": transpose, "stop_gradient": stop_gradient,
    "sigmoid": sigmoid, "sqrt": sqrt, "abs": abs, "clip": clip, "reshape": reshape,
    "broadcast_to": broadcast_to, "log_softmax": log_softmax, "neg": neg,
}


def apply_primitive(kind: str, *inputs, **params) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("leaky_relu", x, alpha=0.1)``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise TensorError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **params)
    return fn(*inputs, **params)


# ---------------------------------------------------------------- backward

def backward(root: Tensor) -> dict[int, Tensor]:
    """Back-propagate from a scalar root.

    Returns ``{leaf node_id: gradient}`` for every requires-grad leaf reachable
    from ``root`` and stores the same array on ``leaf.grad``.
    """
    if root.size != 1:
        raise BackwardError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise BackwardError("root is detached from the tape (no input requires grad)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.node_id not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node.node_id] = Tensor(g)
            continue
        for p, gp in zip(node.parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(p.node_id)
            grads[p.node_id] = gp if prev is None else prev + gp
    return leaves


def grad(root: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` for ``params`` in order; zeros for unreachable ones."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(root)
    return [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` maps a tensor to a scalar tensor. Relative error per coordinate is
    ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise NumericError("finite_diff_check: f returned a non-finite value")
    if out.requires_grad:
        backward(out)
        analytic = leaf.grad if leaf.grad is not None else np.zeros(base.shape)
    else:
        analytic = np.zeros(base.shape)

    numeric = np.zeros(base.shape)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        xp = base.copy().reshape(-1)
        xm = base.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        with no_grad():
            fp = f(Tensor(xp.reshape(base.shape))).data
            fm = f(Tensor(xm.reshape(base.shape))).data
        if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
            raise NumericError("finite_diff_check: f returned a non-finite value")
        flat[i] = (float(np.sum(fp)) - float(np.sum(fm))) / (2.0 * step)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
