"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: only the operations the dialog models need. Every op
records its parents and a closure that pushes the output gradient back to
them; ``backward`` walks the graph once in reverse topological order, so
gradient accumulation is deterministic.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError, EvaluationError, ShapeError


class Rng:
    """Seeded deterministic random stream (PCG64 under the hood)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.algorithm = "pcg64"
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def standard_normal(self, shape=None):
        return self._gen.standard_normal(shape)

    def random(self, shape=None):
        return self._gen.random(shape)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def shuffle(self, seq):
        self._gen.shuffle(seq)

    def child(self, offset: int) -> "Rng":
        # Independent substream; deterministic in (seed, offset).
        return Rng((self.seed * 1_000_003 + offset) % (2**63))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_push")

    def __init__(self, data, requires_grad=False, _parents=(), _push=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._push = _push if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._push is not None:
                node._push(node.grad)

    # operator sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, da, db):
    a, b = _lift(a), _lift(b)
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc
    out = Tensor(out_data, _parents=(a, b))

    def push(g):
        if a.requires_grad:
            a._accum(_unbroadcast(da(g, a.data, b.data), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(db(g, a.data, b.data), b.shape))

    out._push = push if out.requires_grad else None
    return out


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(
        a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner-dimension mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def push(g):
        x, y = a.data, b.data
        if a.requires_grad:
            if x.ndim == 1 and y.ndim == 2:
                a._accum(y @ g)
            elif x.ndim == 2 and y.ndim == 1:
                a._accum(np.outer(g, y))
            elif x.ndim == 1 and y.ndim == 1:
                a._accum(g * y)
            else:
                a._accum(g @ y.T)
        if b.requires_grad:
            if x.ndim == 1 and y.ndim == 2:
                b._accum(np.outer(x, g))
            elif x.ndim == 2 and y.ndim == 1:
                b._accum(x.T @ g)
            elif x.ndim == 1 and y.ndim == 1:
                b._accum(g * x)
            else:
                b._accum(x.T @ g)

    out._push = push if out.requires_grad else None
    return out


def _unary(a, fwd, dgrad):
    a = _lift(a)
    out = Tensor(fwd(a.data), _parents=(a,))

    def push(g):
        if a.requires_grad:
            a._accum(dgrad(g, a.data, out.data))

    out._push = push if out.requires_grad else None
    return out


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def sigmoid(a):
    return _unary(
        a,
        lambda x: 1.0 / (1.0 + np.exp(-x)),
        lambda g, x, y: g * y * (1.0 - y),
    )


def exp(a):
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a):
    return _unary(a, np.log, lambda g, x, y: g / x)


def sqrt(a):
    return _unary(a, np.sqrt, lambda g, x, y: g / (2.0 * np.maximum(y, 1e-300)))


def softplus(a):
    return _unary(
        a,
        lambda x: np.logaddexp(0.0, x),
        lambda g, x, y: g / (1.0 + np.exp(-x)),
    )


def softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, _parents=(a,))

    def push(g):
        if a.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            a._accum(s * (g - dot))

    out._push = push if out.requires_grad else None
    return out


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def push(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                t._accum(g[tuple(idx)])
            offset += n

    out._push = push if out.requires_grad else None
    return out


def stack(tensors):
    tensors = [_lift(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors]), _parents=tuple(tensors))

    def push(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(g[i])

    out._push = push if out.requires_grad else None
    return out


def rows(a, idx):
    """Row gather (embedding lookup); gradient scatter-adds into the table."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], _parents=(a,))

    def push(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accum(acc)

    out._push = push if out.requires_grad else None
    return out


def row(a, i):
    a = _lift(a)
    out = Tensor(a.data[i], _parents=(a,))

    def push(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[i] = g
            a._accum(acc)

    out._push = push if out.requires_grad else None
    return out


def narrow(a, start, length):
    """Contiguous 1-D slice a[start:start+length]."""
    a = _lift(a)
    if a.data.ndim != 1:
        raise ShapeError(f"narrow expects a 1-D tensor, got shape {a.shape}")
    out = Tensor(a.data[start : start + length], _parents=(a,))

    def push(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[start : start + length] = g
            a._accum(acc)

    out._push = push if out.requires_grad else None
    return out


def reshape(a, shape):
    a = _lift(a)
    out = Tensor(a.data.reshape(shape), _parents=(a,))

    def push(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    out._push = push if out.requires_grad else None
    return out


def take_pairs(a, row_idx, col_idx):
    """a[row_idx[k], col_idx[k]] for each k; 2-D input, 1-D output."""
    a = _lift(a)
    ri = np.asarray(row_idx, dtype=np.int64)
    ci = np.asarray(col_idx, dtype=np.int64)
    out = Tensor(a.data[ri, ci], _parents=(a,))

    def push(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, (ri, ci), g)
            a._accum(acc)

    out._push = push if out.requires_grad else None
    return out


def tsum(a, axis=None):
    a = _lift(a)
    out = Tensor(np.sum(a.data, axis=axis), _parents=(a,))

    def push(g):
        if a.requires_grad:
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy())
            else:
                a._accum(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    out._push = push if out.requires_grad else None
    return out


def tmean(a):
    a = _lift(a)
    n = a.data.size
    out = Tensor(np.mean(a.data), _parents=(a,))

    def push(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g / n, a.data.shape).copy())

    out._push = push if out.requires_grad else None
    return out


def gaussian_sample(mu, var, rng: Rng):
    """Reparameterized draw z = mu + sqrt(var) * eps, differentiable in mu/var."""
    mu, var = _lift(mu), _lift(var)
    if mu.shape != var.shape:
        raise ShapeError(f"gaussian_sample shape mismatch: {mu.shape} vs {var.shape}")
    if np.any(var.data < 0):
        raise DomainError("gaussian_sample requires nonnegative variance")
    eps = Tensor(rng.standard_normal(mu.shape))
    return add(mu, mul(sqrt(var), eps))


def grad_check(f, theta: np.ndarray, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a 1-D parameter Tensor to a scalar Tensor and must be
    deterministic (reseed any sampling inside it per call).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    theta = np.asarray(theta, dtype=np.float64).ravel()
    leaf = Tensor(theta.copy(), requires_grad=True)
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise EvaluationError("function value is non-finite at theta")
    out.backward()
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(theta)

    worst = 0.0
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] += eps
        hi = float(f(Tensor(bumped)).data)
        bumped[i] -= 2 * eps
        lo = float(f(Tensor(bumped)).data)
        numeric = (hi - lo) / (2 * eps)
        denom = max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
