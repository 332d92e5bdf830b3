"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: ops execute eagerly with numpy and, while a ``Tape`` is
active, record backward closures in execution order.  Without an active
tape the same ops run as plain numpy, so network code serves both
training and fast evaluation.  Double precision throughout.

Subgradient conventions: relu/clip/norm2 use 0 at their kinks.
"""
from __future__ import annotations

import numpy as np

_TAPES: list["Tape"] = []


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __getstate__(self):
        return (self.data, self.requires_grad)

    def __setstate__(self, state):
        self.data, self.requires_grad = state
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants auto-wrap as non-grad tensors
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of operations; one backward pass unless reset()."""

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []
        self._used = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._records)

    def reset(self):
        self._records.clear()
        self._used = False

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(t) into t.grad for every recorded tensor."""
        if self._used:
            raise TapeError("tape already consumed by a backward pass; reset() first")
        if not self._records:
            raise TapeError("backward on empty tape")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is None:
                continue
            fn(out.grad)


def _tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _make(data, inputs, backward_fn) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _tape()
    if tape is not None and out.requires_grad:
        tape._records.append((out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, np.where(a.data > 0.0, g, 0.0))

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def sin(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g * np.cos(a.data))

    return _make(np.sin(a.data), (a,), backward)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g * np.sin(a.data))

    return _make(np.cos(a.data), (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Elementwise clamp; zero gradient strictly outside (lo, hi)."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        _accum(a, g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(out_data, ts, backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accum(a, full)

    return _make(a.data[sl].copy(), (a,), backward)


def gather(a, index: np.ndarray) -> Tensor:
    """Select rows a[index]; backward scatter-adds."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accum(a, full)

    return _make(a.data[index], (a,), backward)


def segment_sum(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of a into num_segments buckets; empty buckets are zero."""
    a = as_tensor(a)
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    if segment_ids.shape[0] != a.data.shape[0]:
        raise ValueError("segment_ids must have one id per row")
    out_data = np.zeros((num_segments,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out_data, segment_ids, a.data)

    def backward(g):
        _accum(a, g[segment_ids])

    return _make(out_data, (a,), backward)


def bmatvec(B: np.ndarray, u) -> Tensor:
    """Row-batched matrix-vector product: out[n] = B[n] @ u[n].

    B is a constant (n, d, m) stack; u an (n, m) tensor.
    """
    u = as_tensor(u)
    B = np.asarray(B, dtype=np.float64)
    out_data = np.einsum("ndm,nm->nd", B, u.data)

    def backward(g):
        _accum(u, np.einsum("ndm,nd->nm", B, g))

    return _make(out_data, (u,), backward)


def norm2(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; subgradient 0 where the norm is exactly 0."""
    a = as_tensor(a)
    out_data = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def backward(g):
        n = out_data
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            n = np.expand_dims(n, axis)
        safe = np.where(n == 0.0, 1.0, n)
        _accum(a, np.where(n == 0.0, 0.0, g / safe) * a.data)

    return _make(out_data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), backward)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def grad_check(f, params, h: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None,
               atol: float = 1e-7) -> float:
    """Max relative error between tape gradients and central differences.

    f is a zero-argument callable returning a scalar Tensor, closing over
    the params.  When max_coords is set, that many coordinates are sampled
    per parameter; otherwise every coordinate is checked.  Coordinates
    where both gradients sit below atol count as matching: there the
    difference quotient measures only roundoff (e.g. parameters the output
    is structurally invariant to, like a softmax logit shift).
    """
    params = list(params)
    zero_grads(params)
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    zero_grads(params)

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        if max_coords is not None and n > max_coords:
            idxs = rng.choice(n, size=max_coords, replace=False)
        else:
            idxs = np.arange(n)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = g.reshape(-1)[i]
            if max(abs(ad), abs(fd)) < atol:
                continue
            rel = abs(ad - fd) / (abs(fd) + 1e-8)
            worst = max(worst, rel)
    return worst
