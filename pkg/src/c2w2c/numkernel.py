"""Dense tensors with reverse-mode gradients.

A deliberately small kernel: every operation takes and returns 2-D (or 1-D)
numpy-backed :class:`Tensor` objects, records a closure that maps the output
gradient onto its inputs, and :meth:`Tensor.backward` walks the recorded graph
in reverse topological order. Shapes are explicit; the only broadcasting is a
scalar ``scale`` and the row-bias add used by affine layers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"float64": np.float64, "float32": np.float32}

_grad_enabled = True


class DimensionError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the kernel functions below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf
        with ``requires_grad``. ``self`` must be a scalar (size 1)."""
        if self._consumed:
            raise BackwardError("backward() already called on this graph; rebuild the forward pass")
        if self.data.size != 1:
            raise BackwardError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
        self._consumed = True


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[i, :] + bias`` for every row of a 2-D ``x``."""
    if x.data.ndim != 2 or bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise DimensionError(f"add_bias: cannot add bias {bias.shape} to {x.shape}")

    def backward(g):
        return g, g.sum(axis=0)

    return _result(x.data + bias.data, (x, bias), backward)


# -- elementwise ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = a.data.dtype.type(alpha)
    return _result(a.data * alpha, (a,), lambda g: (g * alpha,))


def one_minus(a: Tensor) -> Tensor:
    return _result(1 - a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1 - y),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "tanh": tanh, "sigmoid": sigmoid, "scale": scale}


def elementwise(op: str, *args):
    """Dispatch by name: ``elementwise("tanh", x)``, ``elementwise("scale", x, 0.5)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def pairwise_max(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum. On exact ties the gradient goes to ``a``."""
    _check_same("pairwise_max", a, b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        return np.where(take_a, g, 0), np.where(take_a, 0, g)

    return _result(out, (a, b), backward)


# -- structural ----------------------------------------------------------------


def lookup(table: Tensor, index) -> Tensor:
    """Row gather. A scalar ``index`` gives a 1-D row, an index array gives
    a ``(len(index), d)`` matrix; repeated indices accumulate gradient."""
    v = table.shape[0]
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise IndexError(f"lookup: index must be integer, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"lookup: index out of range for table with {v} rows")
    T = table.data

    def backward(g):
        full = np.zeros_like(T)
        np.add.at(full, idx, g)
        return (full,)

    return _result(T[idx].copy(), (table,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[1]

    def backward(g):
        full = np.zeros((x.shape[0], n), dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop], (x,), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _result(x.data[start:stop], (x,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.shape[1:] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: trailing shapes differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return [g[bounds[i] : bounds[i + 1]] for i in range(len(parts))]

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def mask_rows(new: Tensor, old: Tensor, keep_new: np.ndarray) -> Tensor:
    """Per-row select: row i comes from ``new`` where ``keep_new[i]`` else ``old``.

    Used to freeze recurrent state on padded time steps.
    """
    _check_same("mask_rows", new, old)
    m = np.asarray(keep_new, dtype=bool)[:, None]
    out = np.where(m, new.data, old.data)

    def backward(g):
        return np.where(m, g, 0), np.where(m, 0, g)

    return _result(out, (new, old), backward)


def dropout_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant mask (already scaled for inverted dropout)."""
    if mask.shape != x.shape:
        raise DimensionError(f"dropout_mask: mask {mask.shape} vs input {x.shape}")
    m = mask.astype(x.dtype, copy=False)
    return _result(x.data * m, (x,), lambda g: (g * m,))


# -- probabilities ---------------------------------------------------------------


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    x = logits.data
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("softmax of an empty tensor")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (logits,), backward)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(probabilities: Tensor, target: int) -> Tensor:
    """``-ln p[target]`` for a 1-D probability vector."""
    p = probabilities.data
    n = p.shape[-1]
    if not 0 <= target < n:
        raise IndexError(f"cross_entropy: target {target} out of range for {n} classes")
    val = -np.log(p[target])

    def backward(g):
        full = np.zeros_like(p)
        full[target] = -g / p[target]
        return (full,)

    return _result(np.asarray(val), (probabilities,), backward)


def softmax_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum over rows of ``-log softmax(logits[i])[targets[i]]``.

    Fused so the log never sees a zero probability; gradient per row is
    ``weight * (p - onehot(target))``. A 1-D ``logits`` is treated as a single row.
    """
    x = logits.data
    single = x.ndim == 1
    if single:
        x = x[None, :]
    tgt = np.atleast_1d(np.asarray(targets))
    n_rows, n = x.shape
    if tgt.shape != (n_rows,):
        raise DimensionError(f"softmax_cross_entropy: {tgt.shape} targets for {n_rows} rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n):
        raise IndexError(f"softmax_cross_entropy: target out of range for {n} classes")
    w = np.ones(n_rows, dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype)
    logp = log_softmax_np(x)
    rows = np.arange(n_rows)
    nll = -logp[rows, tgt]
    val = np.asarray((w * nll).sum(), dtype=x.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, tgt] -= 1
        grad *= (w * g)[:, None]
        return (grad[0] if single else grad,)

    return _result(val, (logits,), backward)


# -- helpers for optimisers and gradient checks ------------------------------------


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
