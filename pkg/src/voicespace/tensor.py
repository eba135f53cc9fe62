"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the rest of the package needs are provided. Broadcasting
is limited to two cases: a 0-d (scalar) operand, and a 1-d operand applied
row-wise to a 2-d one (bias add / per-column gain).

    >>> a = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> loss = (a * a).sum()
    >>> backward(loss)
    >>> a.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

KL_FLOOR = 1e-12

_state = threading.local()  # per thread, so benchmark workers cannot leave recording off


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def abs(self) -> Tensor:
        return tabs(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


# ---------------------------------------------------------------------------
# Graph and backward pass


class Graph:
    """Topologically ordered record of the operations that produced a tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.leaves = [n for n in nodes if n.is_leaf() and n.requires_grad]

    @classmethod
    def build(cls, output: Tensor) -> Graph:
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad``.

    Gradients add onto whatever is already stored, so a second call without
    ``zero_grad`` doubles them.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.build(loss)
    if not loss.requires_grad:
        return graph
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return graph


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar_b"
    if a.ndim == 0:
        return "scalar_a"
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "row_b"
    if b.ndim == 2 and a.ndim == 1 and a.shape[0] == b.shape[1]:
        return "row_a"
    raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"scalar_{side}":
        return np.asarray(g.sum())
    if kind == f"row_{side}":
        return g.sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def bw(g):
        return _reduce_to(g, kind, "a"), _reduce_to(g, kind, "b")

    return _result(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def bw(g):
        return _reduce_to(g, kind, "a"), -_reduce_to(g, kind, "b")

    return _result(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _reduce_to(g * bd, kind, "a") if a.requires_grad else None
        gb = _reduce_to(g * ad, kind, "b") if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _reduce_to(g / bd, kind, "a") if a.requires_grad else None
        gb = _reduce_to(-g * out / bd, kind, "b") if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), "div", bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), "log", lambda g: (g / ad,))


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), "abs", lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), "square", lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _result(x * s, (a,), "silu", lambda g: (g * (s + x * s * (1.0 - s)),))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "silu": silu,
    "none": lambda a: a,
}


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ContractError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# ---------------------------------------------------------------------------
# Shape manipulation and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), "matmul", bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), "transpose", lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), "sum", bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(out, tuple(tensors), "concat", bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop], (a,), "slice_cols", bw)


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), "take_rows", bw)


def diag(a: Tensor) -> Tensor:
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise DimensionError(f"diag needs a square matrix, got {a.shape}")

    def bw(g):
        return (np.diag(g),)

    return _result(np.diagonal(a.data).copy(), (a,), "diag", bw)


def offdiag(a: Tensor) -> Tensor:
    """Drop the diagonal of a square N x N matrix, giving N x (N-1)."""
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise DimensionError(f"offdiag needs a square matrix, got {a.shape}")
    mask = ~np.eye(n, dtype=bool)

    def bw(g):
        full = np.zeros((n, n))
        full[mask] = g.reshape(-1)
        return (full,)

    return _result(a.data[mask].reshape(n, n - 1), (a,), "offdiag", bw)


# ---------------------------------------------------------------------------
# Composite numerical kernels with hand-written backward


def softmax_rows(a: Tensor) -> Tensor:
    if a.shape[-1] < 1:
        raise DimensionError("softmax over an empty row")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), "softmax_rows", bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), "log_softmax_rows", bw)


def _check_stochastic(x: np.ndarray, name: str) -> None:
    dev = np.abs(x.sum(axis=-1) - 1.0)
    if np.any(dev > 1e-6) or np.any(x < 0):
        raise ContractError(f"{name} rows must be probability distributions (max deviation {dev.max():.3g})")


def kl_rows(p: Tensor, q: Tensor, floor: float = KL_FLOOR) -> Tensor:
    """Mean over rows of KL(p_i || q_i), with 0 log 0 = 0 and q floored."""
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape or p.ndim != 2:
        raise DimensionError(f"kl_rows needs equal 2-d shapes, got {p.shape} and {q.shape}")
    _check_stochastic(p.data, "p")
    _check_stochastic(q.data, "q")
    m = p.shape[0]
    pd = p.data
    qc = np.maximum(q.data, floor)
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    logq = np.log(qc)
    terms = np.where(pos, pd * (logp - logq), 0.0)

    def bw(g):
        gp = g * np.where(pos, logp - logq + 1.0, 0.0) / m if p.requires_grad else None
        gq = g * np.where(q.data >= floor, -pd / qc, 0.0) / m if q.requires_grad else None
        return gp, gq

    return _result(np.asarray(terms.sum() / m), (p, q), "kl_rows", bw)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape or a.shape[0] < 1:
        raise DimensionError(f"cosine_sim needs equal-length vectors, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a.data), np.linalg.norm(b.data)
    if na == 0.0 or nb == 0.0:
        raise ContractError("cosine_sim of a zero-norm vector is undefined")
    c = float(a.data @ b.data) / (na * nb)

    def bw(g):
        ga = g * (b.data / (na * nb) - c * a.data / na**2)
        gb = g * (a.data / (na * nb) - c * b.data / nb**2)
        return ga, gb

    return _result(np.asarray(c), (a, b), "cosine_sim", bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = (g * xhat).sum(axis=0) if gain.requires_grad else None
        gbias = g.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(xhat * gd + bias.data, (x, gain, bias), "layer_norm", bw)


# ---------------------------------------------------------------------------
# Finite-difference oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``.

    ``x`` is perturbed in place (one coordinate at a time) and restored, so
    ``f`` may close over the same tensor object. ``coords`` restricts the
    check to a subset of flat indices; other entries are returned as NaN.
    """
    t = x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=np.float64))
    if not t.data.flags.c_contiguous:
        t.data = np.ascontiguousarray(t.data)
    flat = t.data.reshape(-1)
    out = np.full(flat.shape, np.nan) if coords is not None else np.zeros(flat.shape)
    idx = range(flat.size) if coords is None else coords

    def value() -> float:
        with no_grad():
            v = f(t)
        return v.item() if isinstance(v, Tensor) else float(v)

    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = value()
        flat[i] = orig - h
        fm = value()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(t.shape)


def grad_error(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-4, abs_tol: float = 1e-7):
    """Return (max error, passes) for the combined rel/abs tolerance.

    The error is ``|a - n| / max(|a|, |n|, abs_tol / rel)``: a relative error
    that switches to an absolute one near zero, and is <= ``rel`` exactly when
    the check passes.
    """
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    ok = bool(np.all(diff <= np.maximum(rel * scale, abs_tol)))
    relerr = diff / np.maximum(scale, abs_tol / rel)
    return float(relerr.max(initial=0.0)), ok
