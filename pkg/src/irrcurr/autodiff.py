"""Dense float32 tensors with reverse-mode differentiation.

Only the operations a GPT-style decoder needs are provided, and broadcasting
is limited to adding a bias vector along the last axis. Every op checks its
inputs for non-finite values, so a NaN surfaces at the op that first sees it.

Float64 inputs are accepted and kept in float64; verification code uses that
to build finite-difference oracles above float32 rounding noise.
"""

from __future__ import annotations

import math
import threading
from collections.abc import Mapping
from contextlib import contextmanager
from types import MappingProxyType
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .errors import ContractViolation, NumericError

DEFAULT_DTYPE = np.float32
TAGS = ("dense", "attention", "embedding", "other")

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording the graph (evaluation, scoring)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = data
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None):
    """Wrap array-like data as a leaf tensor (float32 unless float64 is given)."""
    arr = np.asarray(data)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else DEFAULT_DTYPE
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim and 0 in arr.shape:
        raise ContractViolation(f"empty dimension in shape {arr.shape}")
    _check_finite(arr)
    return Tensor(arr, requires_grad=requires_grad)


def _check_finite(*arrays):
    for a in arrays:
        if not kernels.all_finite(a):
            raise NumericError("non-finite value in op input")


def _make(data, parents, backward):
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


# ---- elementwise ------------------------------------------------------------


def add(a, b):
    """``a + b`` for equal shapes, or a bias vector ``b`` along a's last axis."""
    if not isinstance(b, Tensor):
        _check_finite(a.data)
        return _make(a.data + a.dtype.type(b), (a,), lambda g, needs: (g,))
    if a.dtype != b.dtype:
        raise ContractViolation(f"dtype mismatch {a.dtype} vs {b.dtype}")
    _check_finite(a.data, b.data)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g, needs: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def backward(g, needs):
            gb = g.reshape(-1, b.shape[0]).sum(axis=0) if needs[1] else None
            return g, gb

        return _make(a.data + b.data, (a, b), backward)
    raise ContractViolation(f"add: cannot combine shapes {a.shape} and {b.shape}")


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -b)
    if a.shape != b.shape or a.dtype != b.dtype:
        raise ContractViolation(f"sub: shapes {a.shape} and {b.shape} differ")
    _check_finite(a.data, b.data)
    return _make(a.data - b.data, (a, b), lambda g, needs: (g, -g if needs[1] else None))


def mul(a, b):
    if not isinstance(b, Tensor):
        _check_finite(a.data)
        s = a.dtype.type(b)
        return _make(a.data * s, (a,), lambda g, needs: (g * s,))
    if a.shape != b.shape or a.dtype != b.dtype:
        raise ContractViolation(f"mul: shapes {a.shape} and {b.shape} differ")
    _check_finite(a.data, b.data)

    def backward(g, needs):
        return (g * b.data if needs[0] else None, g * a.data if needs[1] else None)

    return _make(a.data * b.data, (a, b), backward)


def tanh(x):
    _check_finite(x.data)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g, needs: (g * (1 - y * y),))


def gelu(x):
    """Tanh-approximated GELU."""
    _check_finite(x.data)
    return _make(kernels.gelu_forward(x.data), (x,), lambda g, needs: (kernels.gelu_backward(x.data, g),))


# ---- reductions and shape ---------------------------------------------------


def reduce_sum(x):
    _check_finite(x.data)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _make(out, (x,), lambda g, needs: (np.full(x.shape, g, dtype=x.dtype),))


def reduce_mean(x):
    return mul(reduce_sum(x), 1.0 / x.size)


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g, needs: (g.reshape(x.shape),))


def transpose(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ContractViolation(f"transpose: bad axes {axes} for ndim {x.ndim}")
    inv = tuple(int(i) for i in np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g, needs: (g.transpose(inv),))


def take(x, index):
    """``x[index]`` along the first axis."""
    if not 0 <= index < x.shape[0]:
        raise ContractViolation(f"take: index {index} out of range for {x.shape}")

    def backward(g, needs):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), backward)


# ---- linear algebra ---------------------------------------------------------


def matmul(a, b):
    """Matrix product.

    Supports ``(..., k) @ (k, n)`` (a shared weight matrix) and batched
    ``(..., m, k) @ (..., k, n)`` with identical leading dimensions.
    """
    if a.dtype != b.dtype:
        raise ContractViolation(f"dtype mismatch {a.dtype} vs {b.dtype}")
    if a.ndim < 2 and not (a.ndim >= 1 and b.ndim == 2):
        raise ContractViolation(f"matmul: unsupported shapes {a.shape} @ {b.shape}")
    _check_finite(a.data, b.data)
    if b.ndim == 2:
        k, n = b.shape
        if a.shape[-1] != k:
            raise ContractViolation(f"matmul: shape mismatch {a.shape} @ {b.shape}")
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def backward(g, needs):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if needs[0] else None
            gb = a2.T @ g2 if needs[1] else None
            return ga, gb

        return _make(out, (a, b), backward)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g, needs):
        ga = np.matmul(g, b.data.swapaxes(-1, -2)) if needs[0] else None
        gb = np.matmul(a.data.swapaxes(-1, -2), g) if needs[1] else None
        return ga, gb

    return _make(out, (a, b), backward)


# ---- normalization and attention --------------------------------------------


def layernorm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ContractViolation(f"layernorm: gamma/beta must have shape ({d},)")
    _check_finite(x.data, gamma.data, beta.data)
    x2 = x.data.reshape(-1, d)
    y, mu, rstd = kernels.layernorm_forward(x2, gamma.data, beta.data, eps)

    def backward(g, needs):
        gx, gg, gb = kernels.layernorm_backward(g.reshape(-1, d), x2, mu, rstd, gamma.data)
        return gx.reshape(x.shape), gg, gb

    return _make(y.reshape(x.shape), (x, gamma, beta), backward)


def softmax(x, causal=False, scale=1.0):
    """Softmax over the last axis of ``scale * x``; ``causal`` masks keys after each query."""
    if causal and (x.ndim < 2 or x.shape[-1] != x.shape[-2]):
        raise ContractViolation(f"causal softmax needs square trailing axes, got {x.shape}")
    _check_finite(x.data)
    p = kernels.softmax_forward(x.data, scale, causal)
    return _make(p, (x,), lambda g, needs: (kernels.softmax_backward(p, g, scale),))


def embedding(table, ids):
    """Row lookup ``table[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractViolation("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(f"embedding id out of range [0, {table.shape[0]})")
    _check_finite(table.data)

    def backward(g, needs):
        full = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward)


def cross_entropy(logits, targets, weights=None):
    """Weighted mean next-token NLL over rows of 2-D logits.

    ``weights`` (0/1 masks in practice) drop padded positions from the mean.
    """
    if logits.ndim != 2:
        raise ContractViolation("cross_entropy expects (rows, classes) logits")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ContractViolation("targets length must match logits rows")
    if n and (targets.min() < 0 or targets.max() >= v):
        raise ContractViolation(f"target id out of range [0, {v})")
    _check_finite(logits.data)
    w = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    total = float(w.sum(dtype=np.float64))
    if total <= 0:
        raise ContractViolation("cross_entropy: no unmasked positions")
    losses, probs = kernels.cross_entropy_forward(logits.data, targets)
    out = np.asarray(np.dot(losses.astype(np.float64), w) / total, dtype=logits.dtype)

    def backward(g, needs):
        grow = (w * (float(g) / total)).astype(logits.dtype)
        return (kernels.cross_entropy_backward(probs, targets, grow),)

    return _make(out, (logits,), backward)


def row_losses(logits, targets):
    """Per-row NLL as a plain array (no graph)."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    _check_finite(logits.data)
    losses, _ = kernels.cross_entropy_forward(logits.data, targets)
    return losses


# ---- parameter containers ---------------------------------------------------


class ParameterSet(Mapping):
    """Named leaf tensors, each tagged dense / attention / embedding / other."""

    def __init__(self, params: Mapping[str, Tensor], tags: Mapping[str, str]):
        if set(params) != set(tags):
            raise ContractViolation("every parameter needs exactly one tag")
        for name, tag in tags.items():
            if tag not in TAGS:
                raise ContractViolation(f"unknown tag {tag!r} for {name}")
        self._params = dict(params)
        self._tags = MappingProxyType(dict(tags))
        for t in self._params.values():
            t.requires_grad = True

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    @property
    def tags(self):
        return self._tags

    @property
    def num_params(self):
        return int(np.sum([p.size for p in self._params.values()]))

    def arrays(self):
        return {k: p.data for k, p in self._params.items()}

    def select(self, tags: str | Iterable[str]):
        """Subset sharing the same tensors, filtered by tag."""
        wanted = {tags} if isinstance(tags, str) else set(tags)
        names = [k for k in self._params if self._tags[k] in wanted]
        return ParameterSet({k: self._params[k] for k in names}, {k: self._tags[k] for k in names})

    def with_arrays(self, arrays: Mapping[str, np.ndarray]):
        """New set where the named parameters are replaced by fresh leaves."""
        out = {}
        for k, p in self._params.items():
            if k in arrays:
                a = arrays[k]
                if a.shape != p.shape:
                    raise ContractViolation(f"shape mismatch for {k}: {a.shape} vs {p.shape}")
                out[k] = Tensor(np.ascontiguousarray(a, dtype=p.dtype))
            else:
                out[k] = Tensor(p.data)
        unknown = set(arrays) - set(self._params)
        if unknown:
            raise ContractViolation(f"unknown parameters {sorted(unknown)}")
        return ParameterSet(out, self._tags)

    def copy(self):
        return self.with_arrays({k: p.data.copy() for k, p in self._params.items()})

    def astype(self, dtype):
        # with_arrays keeps each leaf's dtype, so build the leaves directly
        return ParameterSet({k: Tensor(np.ascontiguousarray(p.data, dtype=dtype))
                             for k, p in self._params.items()}, self._tags)


class GradientSet(Mapping):
    """Arrays keyed and shaped exactly like a ParameterSet (or a subset of one)."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays = dict(arrays)

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def __repr__(self):
        return f"GradientSet({list(self._arrays)})"

    def norm(self):
        return math.sqrt(sum_squares(self._arrays.values()))

    def dot(self, other):
        self._check_keys(other)
        return float(np.sum([np.vdot(a.astype(np.float64), other[k].astype(np.float64)) for k, a in self.items()]))

    def scale(self, s):
        return GradientSet({k: a * a.dtype.type(s) for k, a in self.items()})

    def __add__(self, other):
        self._check_keys(other)
        return GradientSet({k: a + other[k] for k, a in self.items()})

    def __sub__(self, other):
        self._check_keys(other)
        return GradientSet({k: a - other[k] for k, a in self.items()})

    def _check_keys(self, other):
        if list(self) != list(other):
            raise ContractViolation("gradient sets have different keys")

    def to_vector(self):
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.reshape(-1).astype(np.float64) for a in self._arrays.values()])

    @classmethod
    def from_vector(cls, vec, like: Mapping[str, object], dtype=None):
        """Unflatten ``vec`` into the key order and shapes of ``like``."""
        total = sum(int(np.prod(ref.shape)) for ref in like.values())
        if total != len(vec):
            raise ContractViolation(f"vector length {len(vec)} != parameter count {total}")
        out, pos = {}, 0
        for k, ref in like.items():
            shape = ref.shape
            n = int(np.prod(shape))
            dt = dtype or getattr(ref, "dtype", np.float64)
            out[k] = np.asarray(vec[pos:pos + n], dtype=dt).reshape(shape)
            pos += n
        return cls(out)


def sum_squares(arrays):
    return float(np.sum([np.vdot(a, a).astype(np.float64) for a in arrays])) if arrays else 0.0


# ---- differentiation --------------------------------------------------------


def _toposort(root, targets):
    """Nodes reachable from ``root`` that lead to a target leaf, children first."""
    order, needed, visited = [], {}, set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            need = id(node) in targets or any(needed.get(id(p), False) for p in node._parents)
            needed[id(node)] = need
            if need:
                order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order, needed


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> GradientSet:
    """d loss / d params for a scalar loss built from ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ContractViolation(f"grad needs a scalar loss, got shape {loss.shape}")
    if not math.isfinite(float(loss.data)):
        raise NumericError(f"non-finite loss {float(loss.data)}")
    targets = {id(t): name for name, t in params.items()}
    result = {name: None for name in params}
    if loss.requires_grad:
        order, needed = _toposort(loss, targets)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in targets:
                result[targets[id(node)]] = g
            if node._backward is None:
                continue
            needs = tuple(needed.get(id(p), False) for p in node._parents)
            for p, gp, need in zip(node._parents, node._backward(g, needs), needs):
                if not need or gp is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp
    out = {}
    for name, t in params.items():
        g = result[name]
        out[name] = np.zeros(t.shape, dtype=t.dtype) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
    return GradientSet(out)


def value_and_grad(loss_fn: Callable[[ParameterSet], Tensor], params: ParameterSet, wrt=None):
    loss = loss_fn(params)
    return float(loss.data), grad(loss, params if wrt is None else wrt)


def hvp(loss_fn: Callable[[ParameterSet], Tensor], params: ParameterSet, v: Mapping[str, np.ndarray], eps: float = 1e-3):
    """Hessian-vector product by central differences of the gradient.

    Only the parameters named in ``v`` are perturbed and differentiated, so
    the product is with the Hessian block of that subset. The step is taken
    along ``v / |v|`` with length ``eps`` and rescaled by ``|v|``.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    v = v if isinstance(v, GradientSet) else GradientSet(v)
    unknown = set(v) - set(params)
    if unknown:
        raise ContractViolation(f"direction has unknown parameters {sorted(unknown)}")
    vnorm = v.norm()
    if not vnorm > 0:
        raise ContractViolation("hvp direction must have nonzero norm")
    if not math.isfinite(vnorm):
        raise NumericError("non-finite hvp direction")
    step = eps / vnorm
    keys = list(v)

    def grad_at(sign):
        shifted = params.with_arrays({k: params[k].data + (sign * step) * v[k] for k in keys})
        return grad(loss_fn(shifted), {k: shifted[k] for k in keys})

    gp = grad_at(1.0)
    gm = grad_at(-1.0)
    factor = vnorm / (2.0 * eps)
    return GradientSet({
        k: ((gp[k].astype(np.float64) - gm[k].astype(np.float64)) * factor).astype(params[k].dtype) for k in keys
    })
