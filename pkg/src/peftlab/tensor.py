"""Reverse-mode autodiff over numpy arrays.

Storage is float32 throughout; matrix products and reductions accumulate in
float64 and round back to float32, so results are reproducible bit for bit on
a given platform (numpy's kernels fix the summation order). The graph is
define-by-run: every op that touches a grad-requiring tensor records a node,
and ``backward`` replays the tape once in reverse topological order.

A single graph must stay on one thread; independent graphs may run in
parallel. Tensors with ``requires_grad=False`` never enter the tape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, GraphError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "ComputeGraph",
    "no_grad",
    "backward",
    "finite_diff_grad",
    "matmul",
    "add",
    "subtract",
    "hadamard",
    "scale",
    "divide",
    "exp",
    "relu",
    "gelu",
    "sigmoid",
    "softmax",
    "log_softmax_nll",
    "layer_norm",
    "column_l2_norm",
    "concat",
    "concat_rows",
    "slice_axis",
    "reshape",
    "transpose",
    "embedding",
    "broadcast_to",
    "sum_all",
    "mean_all",
    "sum_axis",
    "mean_axis",
]

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording (used by evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _f32(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    return arr


class Tensor:
    """A float32 array plus an optional gradient and tape node.

    ``grad`` is populated only on leaves (tensors the user created with
    ``requires_grad=True``); intermediate gradients are released as soon as
    backward consumes them.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    """Tape entry: the op name, its input tensors, and a pullback.

    The pullback maps the output cotangent (float32 array) to one cotangent
    per input, ``None`` for inputs that do not require grad.
    """

    __slots__ = ("op", "inputs", "pullback")

    def __init__(self, op: str, inputs: tuple[Tensor, ...],
                 pullback: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.pullback = pullback


def _record(op: str, data: np.ndarray, inputs: tuple[Tensor, ...],
            pullback: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = _Node(op, inputs, pullback)
    return out


def _sum_to_shape(grad64: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting: sum a float64 cotangent down to ``shape``."""
    extra = grad64.ndim - len(shape)
    if extra > 0:
        grad64 = grad64.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad64.shape[i] != 1)
    if axes:
        grad64 = grad64.sum(axis=axes, keepdims=True)
    return grad64.astype(np.float32).reshape(shape)


class ComputeGraph:
    """Topologically ordered tape (inputs precede consumers)."""

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "ComputeGraph":
        """Collect every recorded tensor ``output`` depends on, topo-sorted.

        Iterative postorder DFS; a cycle (impossible by construction, checked
        anyway) raises GraphError.
        """
        order: list[Tensor] = []
        state: dict[int, int] = {}  # id -> 1 visiting, 2 done
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            tid = id(t)
            if expanded:
                state[tid] = 2
                order.append(t)
                continue
            st = state.get(tid)
            if st == 2:
                continue
            if st == 1:
                raise GraphError(f"cycle through op '{t.node.op}'")
            state[tid] = 1
            stack.append((t, True))
            if t.node is not None:
                for inp in t.node.inputs:
                    if inp.node is not None and state.get(id(inp)) != 2:
                        stack.append((inp, False))
        return cls(order)


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requiring leaf.

    ``loss`` must be scalar. Each node is visited exactly once; cotangents of
    interior tensors are dropped once consumed. Grads add onto whatever is
    already in ``.grad``, so callers zero leaves between backward passes.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            seed = np.ones(loss.shape, dtype=np.float32)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if graph is None:
        graph = ComputeGraph.trace(loss)
    cotangents: dict[int, np.ndarray] = {
        id(loss): np.ones(loss.shape, dtype=np.float32)
    }
    for t in reversed(graph.nodes):
        g = cotangents.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.pullback(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi if inp.grad is None else inp.grad + gi
            else:
                acc = cotangents.get(id(inp))
                cotangents[id(inp)] = gi if acc is None else acc + gi


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; float64 accumulation."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = np.matmul(a64, b64).astype(np.float32)

    def pull(g: np.ndarray):
        g64 = g.astype(np.float64)
        ga = _sum_to_shape(np.matmul(g64, np.swapaxes(b64, -1, -2)), a.shape)
        gb = _sum_to_shape(np.matmul(np.swapaxes(a64, -1, -2), g64), b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), pull)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def pull(g: np.ndarray):
        g64 = g.astype(np.float64)
        return _sum_to_shape(g64, a.shape), _sum_to_shape(g64, b.shape)

    return _record("add", out, (a, b), pull)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def pull(g: np.ndarray):
        g64 = g.astype(np.float64)
        return _sum_to_shape(g64, a.shape), _sum_to_shape(-g64, b.shape)

    return _record("subtract", out, (a, b), pull)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting (also the masking primitive:
    multiplying by a 0/1 array zeroes masked entries exactly and leaves kept
    entries bitwise unchanged, since x * 1.0 == x in IEEE arithmetic)."""
    out = a.data * b.data

    def pull(g: np.ndarray):
        g64 = g.astype(np.float64)
        ga = _sum_to_shape(g64 * b.data, a.shape)
        gb = _sum_to_shape(g64 * a.data, b.shape)
        return ga, gb

    return _record("hadamard", out, (a, b), pull)


def scale(a: Tensor, s: float) -> Tensor:
    s32 = np.float32(s)
    out = a.data * s32

    def pull(g: np.ndarray):
        return (g * s32,)

    return _record("scale", out, (a,), pull)


def divide(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def pull(g: np.ndarray):
        g64 = g.astype(np.float64)
        b64 = b.data.astype(np.float64)
        ga = _sum_to_shape(g64 / b64, a.shape)
        gb = _sum_to_shape(-g64 * a.data.astype(np.float64) / (b64 * b64), b.shape)
        return ga, gb

    return _record("divide", out, (a, b), pull)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def pull(g: np.ndarray):
        return (g * out,)

    return _record("exp", out, (a,), pull)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, np.float32(0))

    def pull(g: np.ndarray):
        return (g * (a.data > 0),)

    return _record("relu", out, (a,), pull)


def gelu(a: Tensor) -> Tensor:
    """Exact-erf gelu: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x64 = a.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(x64 / np.sqrt(2.0)))
    out = (x64 * cdf).astype(np.float32)

    def pull(g: np.ndarray):
        pdf = np.exp(-0.5 * x64 * x64) / np.sqrt(2.0 * np.pi)
        return ((g.astype(np.float64) * (cdf + x64 * pdf)).astype(np.float32),)

    return _record("gelu", out, (a,), pull)


def sigmoid(a: Tensor) -> Tensor:
    x64 = a.data.astype(np.float64)
    y64 = np.where(x64 >= 0, 1.0 / (1.0 + np.exp(-x64)),
                   np.exp(x64) / (1.0 + np.exp(x64)))
    out = y64.astype(np.float32)

    def pull(g: np.ndarray):
        return ((g.astype(np.float64) * y64 * (1.0 - y64)).astype(np.float32),)

    return _record("sigmoid", out, (a,), pull)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed shift-stably in float64."""
    x64 = a.data.astype(np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y64 = e / e.sum(axis=-1, keepdims=True)
    out = y64.astype(np.float32)

    def pull(g: np.ndarray):
        g64 = g.astype(np.float64)
        inner = (g64 * y64).sum(axis=-1, keepdims=True)
        return ((y64 * (g64 - inner)).astype(np.float32),)

    return _record("softmax", out, (a,), pull)


def log_softmax_nll(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Fused log-softmax + negative log likelihood of integer labels.

    ``logits`` is [N, C]; ``labels`` an int array of shape [N]. Returns a
    scalar (mean or sum over the batch).
    """
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction '{reduction}'")
    if logits.ndim != 2:
        raise ShapeError(f"log_softmax_nll expects [N, C] logits, got {logits.shape}")
    y = np.asarray(labels)
    if y.shape != (logits.shape[0],):
        raise ShapeError(
            f"labels shape {y.shape} does not match batch {logits.shape[0]}")
    n, c = logits.shape
    if y.min() < 0 or y.max() >= c:
        raise ContractError(f"labels must lie in [0, {c}), got range "
                            f"[{int(y.min())}, {int(y.max())}]")
    x64 = logits.data.astype(np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = logp[np.arange(n), y]
    total = -picked.sum()
    denom = float(n) if reduction == "mean" else 1.0
    out = np.float32(total / denom)

    def pull(g: np.ndarray):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        gs = float(g.reshape(())) / denom
        return ((p * gs).astype(np.float32),)

    return _record("log_softmax_nll", np.asarray(out), (logits,), pull)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature dim {d}")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    g64 = gamma.data.astype(np.float64)
    out = (g64 * xhat + beta.data.astype(np.float64)).astype(np.float32)

    def pull(g: np.ndarray):
        go = g.astype(np.float64)
        dxhat = go * g64
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(go.ndim - 1))
        dgamma = (go * xhat).sum(axis=lead)
        dbeta = go.sum(axis=lead)
        return (dx.astype(np.float32), dgamma.astype(np.float32),
                dbeta.astype(np.float32))

    return _record("layer_norm", out, (x, gamma, beta), pull)


def column_l2_norm(w: Tensor) -> Tensor:
    """Column-wise Euclidean norm of a [d, k] matrix, shape [1, k]."""
    if w.ndim != 2:
        raise ShapeError(f"column_l2_norm expects a matrix, got {w.shape}")
    w64 = w.data.astype(np.float64)
    y64 = np.sqrt((w64 * w64).sum(axis=0, keepdims=True))
    out = y64.astype(np.float32)

    def pull(g: np.ndarray):
        if np.any(y64 == 0.0):
            col = int(np.argmax(y64[0] == 0.0))
            raise NumericError(f"column_l2_norm grad undefined: column {col} "
                               f"has zero norm")
        return ((g.astype(np.float64) * w64 / y64).astype(np.float32),)

    return _record("column_l2_norm", out, (w,), pull)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty sequence")
    parts = tuple(tensors)
    out = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    splits = np.cumsum(sizes)[:-1]

    def pull(g: np.ndarray):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _record("concat", out, parts, pull)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the second-to-last axis (rows of the trailing matrices)."""
    return concat((a, b), axis=-2)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def pull(g: np.ndarray):
        full = np.zeros(a.shape, dtype=np.float32)
        full[idx] = g
        return (full,)

    return _record("slice_axis", out, (a,), pull)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def pull(g: np.ndarray):
        return (g.reshape(a.shape),)

    return _record("reshape", out, (a,), pull)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = np.argsort(axes)

    def pull(g: np.ndarray):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _record("transpose", out, (a,), pull)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ContractError(f"embedding ids out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def pull(g: np.ndarray):
        acc = np.zeros(table.shape, dtype=np.float64)
        np.add.at(acc, idx, g.astype(np.float64))
        return (acc.astype(np.float32),)

    return _record("embedding", out, (table,), pull)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def pull(g: np.ndarray):
        return (_sum_to_shape(g.astype(np.float64), a.shape),)

    return _record("broadcast_to", out, (a,), pull)


def sum_all(a: Tensor) -> Tensor:
    out = np.float32(a.data.astype(np.float64).sum())

    def pull(g: np.ndarray):
        return (np.full(a.shape, g.reshape(()), dtype=np.float32),)

    return _record("sum_all", np.asarray(out), (a,), pull)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.float32(a.data.astype(np.float64).sum() / n)

    def pull(g: np.ndarray):
        val = np.float32(float(g.reshape(())) / n)
        return (np.full(a.shape, val, dtype=np.float32),)

    return _record("mean_all", np.asarray(out), (a,), pull)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.astype(np.float64).sum(axis=axis, keepdims=keepdims)

    def pull(g: np.ndarray):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(np.float32).copy(),)

    return _record("sum_axis", out.astype(np.float32), (a,), pull)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]
    out = a.data.astype(np.float64).sum(axis=axis, keepdims=keepdims) / n

    def pull(g: np.ndarray):
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(gg, a.shape) / np.float32(n)).astype(np.float32),)

    return _record("mean_axis", out.astype(np.float32), (a,), pull)


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f: Callable[[Tensor], float], w: Tensor,
                     step: float = 1e-3) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``w``.

    ``f`` receives a fresh non-grad Tensor per evaluation and must be
    deterministic. The result is float32, matching ``backward`` outputs.
    """
    base = w.data.ravel()
    grad = np.empty(base.size, dtype=np.float64)
    for i in range(base.size):
        plus = base.copy()
        plus[i] = np.float32(plus[i] + step)
        minus = base.copy()
        minus[i] = np.float32(minus[i] - step)
        f_plus = float(f(Tensor(plus.reshape(w.shape))))
        f_minus = float(f(Tensor(minus.reshape(w.shape))))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"finite_diff_grad: non-finite objective at "
                               f"coordinate {i}")
        h = float(plus[i]) - float(minus[i])
        grad[i] = (f_plus - f_minus) / h
    return Tensor(grad.reshape(w.shape))


def grad_close(got: np.ndarray, want: np.ndarray, rtol: float = 1e-3) -> bool:
    """|got - want| <= rtol * max(1, |got|, |want|), elementwise."""
    g = np.asarray(got, dtype=np.float64)
    x = np.asarray(want, dtype=np.float64)
    tol = rtol * np.maximum(1.0, np.maximum(np.abs(g), np.abs(x)))
    return bool(np.all(np.abs(g - x) <= tol))
