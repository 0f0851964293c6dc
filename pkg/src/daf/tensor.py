"""Minimal reverse-mode automatic differentiation on numpy arrays.

Each op returns a new :class:`Tensor` holding references to its inputs and
a closure that maps the output gradient to input gradients. ``backward``
orders the graph topologically and runs the closures in reverse.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 10.0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- core ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, _parents=(a, b), _backward=grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, _parents=(a, b), _backward=grad_fn)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, _parents=(a,), _backward=lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    def grad_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor(a.data**exponent, _parents=(a,), _backward=grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, _parents=(a,), _backward=lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), _parents=(a,), _backward=lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor(np.clip(a.data, lo, hi), _parents=(a,), _backward=lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(a.data * mask, _parents=(a,), _backward=lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, _parents=(a, b), _backward=grad_fn)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ValueError(f"add_bias: incompatible shapes {x.shape} and {bias.shape}")
    return Tensor(x.data + bias.data, _parents=(x, bias),
                  _backward=lambda g: (g, g.sum(axis=0)))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor(np.concatenate([t.data for t in tensors], axis=ax),
                  _parents=tuple(tensors), _backward=grad_fn)


def take(a: Tensor, index) -> Tensor:
    """Basic indexing/slicing with scatter-add backward."""
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ValueError(f"slice: index {index!r} invalid for shape {a.shape}") from exc

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor(out, _parents=(a,), _backward=grad_fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ValueError(f"slice: columns [{start}, {stop}) invalid for shape {a.shape}")
    return take(a, (slice(None), slice(start, stop)))


def total(a: Tensor) -> Tensor:
    return Tensor(a.data.sum(), _parents=(a,), _backward=lambda g: (np.full(a.shape, g),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return Tensor(a.data.mean(), _parents=(a,), _backward=lambda g: (np.full(a.shape, g / n),))


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor(p, _parents=(logits,), _backward=grad_fn)


# ------------------------------------------------------------------ losses

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    x = logits.data
    if x.ndim == 1:
        x = x[None, :]
    n, c = x.shape
    if labels.shape[0] != n:
        raise ValueError(f"cross entropy: {n} rows of logits but {labels.shape[0]} labels")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"cross entropy: labels must lie in [0, {c}), got {labels.tolist()}")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - shifted[rows, labels])

    def grad_fn(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return ((g / n * p).reshape(logits.shape),)

    return Tensor(loss, _parents=(logits,), _backward=grad_fn)


def mse(pred: Tensor, target, reduction: str = "half_sum") -> Tensor:
    """Squared error summed over the batch.

    ``half_sum``: ``0.5 * sum ||pred - target||^2``.
    ``mean_over_dim``: ``(1/d) * sum ||pred - target||^2`` with ``d`` the
    size of the last axis.
    """
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    if reduction == "half_sum":
        scale = 0.5
    elif reduction == "mean_over_dim":
        scale = 1.0 / pred.shape[-1]
    else:
        raise ValueError(f"mse: unknown reduction {reduction!r}")
    diff = pred.data - target.data

    def grad_fn(g):
        gd = 2.0 * scale * g * diff
        return gd, -gd

    return Tensor(scale * np.sum(diff * diff), _parents=(pred, target), _backward=grad_fn)


def kl_diag_gaussian(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over all entries."""
    if mu.shape != log_sigma.shape:
        raise ValueError(f"kl: shape mismatch {mu.shape} vs {log_sigma.shape}")
    m, ls = mu.data, log_sigma.data
    s2 = np.exp(2.0 * ls)
    value = 0.5 * np.sum(m * m + s2 - 1.0 - 2.0 * ls)

    def grad_fn(g):
        return g * m, g * (s2 - 1.0)

    return Tensor(value, _parents=(mu, log_sigma), _backward=grad_fn)


def reparameterize(mu: Tensor, log_sigma: Tensor, rng: np.random.Generator) -> Tensor:
    """``mu + exp(log_sigma) * eps`` with ``eps ~ N(0, I)`` held constant."""
    eps = rng.standard_normal(mu.shape)
    sigma = exp(clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
    return add(mu, mul(sigma, Tensor(eps)))


# ---------------------------------------------------------------- backward

@dataclass
class Tape:
    """Operations reachable from a loss, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tensor needing it."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return tape


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# -------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Iterable[Tensor]) -> "AdamState":
        params = list(params)
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float = 1e-3, weight_decay: float = 0.0) -> Sequence[Tensor]:
    """One bias-corrected Adam update, in place; missing grads count as zero.

    ``weight_decay`` shrinks weights directly (decoupled, as in AdamW).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# -------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"dafckpt-v1\n"


def save_checkpoint(path: str | Path, arch: dict, tensors: Sequence[tuple[str, np.ndarray]]) -> None:
    """Header line, length-prefixed JSON (architecture + tensor table), then
    little-endian float64 data per tensor in declaration order."""
    table = [[name, list(np.shape(arr))] for name, arr in tensors]
    header = json.dumps({"arch": arch, "tensors": table}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    magic = fh.read(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a dafckpt-v1 checkpoint")
    (n,) = struct.unpack("<I", fh.read(4))
    return json.loads(fh.read(n))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        out: dict[str, np.ndarray] = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {name}")
            out[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return header["arch"], out
