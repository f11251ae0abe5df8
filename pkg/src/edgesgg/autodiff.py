"""Small 2-D reverse-mode autodiff over numpy float64 arrays.

Only the operations the DualMPNN needs are provided.  Each op records its
parents and a closure mapping the output gradient to parent gradients;
:func:`backward` walks the tape in reverse topological order.
"""
from __future__ import annotations

import contextlib
import json
import math
import os
import zlib
from collections import OrderedDict
from typing import Callable, Sequence

import numpy as np

LOG_CLAMP = 1e-12

_grad_enabled = True
_debug = os.environ.get("EDGESGG_DEBUG", "") not in ("", "0")


class TensorError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    """Turn per-op finiteness checks on or off."""
    global _debug
    _debug = bool(flag)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {where}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise TensorError(f"tensors are 2-D, got shape {arr.shape}")
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise TensorError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _debug:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise TensorError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return _result(
        a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul"
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # two-branch form avoids overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax_row(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    p = ex / ex.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (x,), backward, "softmax_row")


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise TensorError(f"concat_cols: row mismatch {a.shape[0]} vs {b.shape[0]}")
    k = a.shape[1]
    return _result(
        np.concatenate([a.data, b.data], axis=1), (a, b),
        lambda g: (g[:, :k], g[:, k:]), "concat_cols",
    )


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result(x.data[:, start:stop].copy(), (x,), backward, "slice_cols")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[k] = x[index[k]]``."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward, "gather_rows")


def scatter_add_rows(x: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """``out[r] = sum of x[k] over k with index[k] == r``; rows with no
    contributions are zero."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],):
        raise TensorError(f"scatter_add_rows: {x.shape[0]} rows but {index.shape[0]} indices")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise TensorError(f"scatter_add_rows: index out of range [0, {n_rows})")
    out = np.zeros((n_rows, x.shape[1]))
    np.add.at(out, index, x.data)
    return _result(out, (x,), lambda g: (g[index],), "scatter_add_rows")


def sum_all(x: Tensor) -> Tensor:
    return _result(
        np.array([[x.data.sum()]]), (x,), lambda g: (np.full_like(x.data, g[0, 0]),), "sum"
    )


def cross_entropy(probs: Tensor, targets: Sequence[int], weights=None) -> Tensor:
    """Weighted negative log-likelihood of already-softmaxed rows.

    With ``weights=None`` this is the plain mean over rows.  Log is taken of
    ``max(p, 1e-12)``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, c = probs.shape
    if targets.shape != (n,):
        raise TensorError(f"cross_entropy: {n} rows but {targets.shape[0]} targets")
    if n == 0:
        raise TensorError("cross_entropy: no rows")
    if np.any(targets < 0) or np.any(targets >= c):
        raise TensorError(f"cross_entropy: target index out of range [0, {c})")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = np.arange(n)
    picked = probs.data[rows, targets]
    clamped = np.maximum(picked, LOG_CLAMP)
    loss = float(-(w * np.log(clamped)).sum())
    if not math.isfinite(loss):
        raise FloatingPointError("cross_entropy produced a non-finite loss")

    def backward(g):
        full = np.zeros_like(probs.data)
        live = picked >= LOG_CLAMP
        full[rows[live], targets[live]] = -w[live] / picked[live]
        return (full * g[0, 0],)

    return _result(np.array([[loss]]), (probs,), backward, "cross_entropy")


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.shape != (1, 1):
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorError("loss does not depend on any parameter")
    grads = {id(loss): np.ones((1, 1))}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def leaf_parameters(loss: Tensor) -> list[Tensor]:
    """Leaves with ``requires_grad`` reachable from ``loss`` (tape tracing)."""
    return [t for t in _topo_order(loss) if t._backward is None and t.requires_grad]


class ParamStore:
    """Named trainable tensors with seeded, name-keyed initialization."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.params: OrderedDict[str, Tensor] = OrderedDict()

    def create(self, name: str, shape: tuple[int, int], fan_in: int | None = None,
               zero: bool = False) -> Tensor:
        if name in self.params:
            raise TensorError(f"duplicate parameter {name!r}")
        if zero:
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in if fan_in else shape[0])
            rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
            data = rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "params": {
                name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                for name, t in self.params.items()
            },
        }

    def load_dict(self, doc: dict) -> None:
        """Overwrite values in place from a checkpoint document."""
        stored = doc["params"]
        if set(stored) != set(self.params):
            missing = set(self.params) ^ set(stored)
            raise TensorError(f"checkpoint parameter names differ: {sorted(missing)}")
        for name, t in self.params.items():
            shape = tuple(stored[name]["shape"])
            if shape != t.shape:
                raise TensorError(f"shape mismatch for {name}: {shape} vs {t.shape}")
            data = np.asarray(stored[name]["data"], dtype=np.float64).reshape(shape)
            _check_finite(data, f"checkpoint {name}")
            t.data = data

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def sgd_step(params: ParamStore, lr: float) -> None:
    """``p <- p - lr * grad`` for every parameter, then zero the grads.
    ``lr=0`` only clears the grads."""
    if lr < 0 or not math.isfinite(lr):
        raise TensorError(f"learning rate must be finite and >= 0, got {lr}")
    for _, t in params:
        t.data = t.data - lr * t.grad
        t.zero_grad()


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Rescale all grads so their joint L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    if not max_norm > 0:
        raise TensorError(f"max_norm must be > 0, got {max_norm}")
    total = math.sqrt(sum(float(np.sum(t.grad * t.grad)) for _, t in params))
    if total > max_norm:
        scale = max_norm / total
        for _, t in params:
            t.grad *= scale
    return total


def numerical_gradient(fn: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``fn()`` with respect to each entry of ``t``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    g = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = fn()
        flat[k] = orig - h
        fm = fn()
        flat[k] = orig
        g[k] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``."""
    num = float(np.linalg.norm(analytic - numeric))
    den = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return num / den
