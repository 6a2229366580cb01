"""Dense float64 tensors with a small reverse-mode gradient tape.

Ops run eagerly on numpy arrays. When a :class:`GradTape` is active and at
least one input is being watched, the op records a node holding the saved
intermediates and a vector-Jacobian closure. ``GradTape.gradient`` walks the
nodes once in reverse recording order.

Only the operations the multimodal model needs are provided.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "GradTape",
    "backward",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "gelu",
    "softmax_rows",
    "layer_norm",
    "cross_entropy",
    "reshape",
    "swapaxes",
    "take_rows",
    "concat",
    "getitem",
    "sum_all",
    "mean_all",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """A tensor would contain NaN or Inf."""


_ACTIVE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "kneurons_active_tape", default=None
)


def _all_finite(arr: np.ndarray) -> bool:
    # a finite sum implies finite entries; only an overflowing sum needs the full scan
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(arr.sum()):
            return True
    return bool(np.isfinite(arr).all())


class Tensor:
    """Immutable float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "_tape", "_tid")

    def __init__(self, data, *, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if check and not _all_finite(arr):
            raise NonFiniteError("tensor contains non-finite entries")
        arr.setflags(write=False)
        self.data = arr
        self._tape: GradTape | None = None
        self._tid = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tracked = " tracked" if self._tape is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    out_id: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Records operations on watched tensors for one forward/backward pass.

    Use as a context manager; tapes are not shared between threads, but
    distinct tapes may be active in distinct contexts.
    """

    nodes: list[_Node] = field(default_factory=list)
    _next_id: int = 0
    _token: contextvars.Token | None = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def watch(self, t) -> Tensor:
        """Return ``t`` as a tracked leaf on this tape."""
        t = tensor(t)
        if t._tape is self:
            return t
        leaf = Tensor(t.data, check=False)
        leaf._tape = self
        leaf._tid = self._new_id()
        return leaf

    def tracks(self, t: Tensor) -> bool:
        return isinstance(t, Tensor) and t._tape is self

    def gradient(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

        ``wrt`` may hold leaves or intermediate tracked tensors. Untracked or
        unreachable tensors get zeros of their own shape.
        """
        if output.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {}
        if self.tracks(output):
            grads[output._tid] = np.ones_like(output.data)
        for node in reversed(self.nodes):
            g = grads.get(node.out_id)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not self.tracks(inp):
                    continue
                prev = grads.get(inp._tid)
                grads[inp._tid] = ig if prev is None else prev + ig
        out = []
        for t in wrt:
            g = grads.get(t._tid) if self.tracks(t) else None
            out.append(np.zeros(t.shape) if g is None else np.reshape(g, t.shape))
        return out


def backward(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``output`` via the tape that recorded it."""
    tape = output._tape
    if tape is None:
        if output.data.size != 1:
            raise ShapeError("backward needs a scalar output")
        return [np.zeros(t.shape) for t in wrt]
    return tape.gradient(output, wrt)


def _record(op: str, out: np.ndarray, inputs: tuple, vjp) -> Tensor:
    res = Tensor(out)
    tape = _ACTIVE.get()
    if tape is not None and any(tape.tracks(x) for x in inputs):
        res._tape = tape
        res._tid = tape._new_id()
        tape.nodes.append(_Node(op, inputs, res._tid, vjp))
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {A.shape} x {B.shape}")
    out = np.matmul(A, B)

    def vjp(g):
        if B.ndim == 2:
            # (..., m, k) @ (k, n): fold leading axes instead of broadcasting
            ga = g @ B.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape)
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def _check_broadcast(A: np.ndarray, B: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(A.shape, B.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {A.shape} with {B.shape}") from exc


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _record(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    A, B = a.data, b.data
    return _record(
        "mul", A * B, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape))
    )


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = _as_tensor(a)
    # the local derivative is only formed if a backward pass asks for it
    return _record("gelu", _kernels.gelu(a.data), (a,),
                   lambda g: (g * _kernels.gelu_with_grad(a.data)[1],))


def softmax_rows(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable boolean) marks the allowed entries; disallowed
    entries get probability exactly 0. Every row must allow at least one entry.
    """
    a = _as_tensor(a)
    x = a.data
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        m = np.broadcast_to(mask, x.shape)
        xm = np.where(m, x, -np.inf)
        z = np.where(m, x - xm.max(axis=-1, keepdims=True), 0.0)
        e = np.where(m, np.exp(z), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", p, (a,), vjp)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data
    out = xhat * G + beta.data

    def vjp(g):
        n = x.shape[-1]
        gx_hat = g * G
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n
        )
        return gx, _unbroadcast(g * xhat, G.shape), _unbroadcast(g, beta.shape)

    return _record("layer_norm", out, (a, gamma, beta), vjp)


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over all leading positions.

    ``targets`` and ``weights`` have the leading shape of ``logits``; the
    result is sum(w * nll) / sum(w).
    """
    logits = _as_tensor(logits)
    x = logits.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(s)
    tgt = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("cross_entropy weights sum to zero")
    nll = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    out = np.array((w * nll).sum() / wsum)

    def vjp(g):
        p = e / s
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (w / wsum)[..., None],)

    return _record("cross_entropy", out, (logits,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)
    return _record(
        "swapaxes", np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),)
    )


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    T = table.data

    def vjp(g):
        gt = np.zeros_like(T)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, T.shape[1]))
        return (gt,)

    return _record("take_rows", T[ids], (table,), vjp)


def concat(parts: Sequence, axis: int) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _record("concat", out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis for i in parts)

    def vjp(g):
        ga = np.zeros_like(A)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _record("getitem", A[idx], (a,), vjp)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shp = a.shape
    return _record("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shp).copy(),))


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    shp, n = a.shape, a.data.size
    return _record(
        "mean", np.array(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shp).copy(),)
    )
