"""Minimal differentiable-computation substrate on NumPy.

Reverse-mode automatic differentiation over a small operator set, the
attention / layer-normalization / feed-forward primitives the encoder is
built from, a named parameter store with an Adam optimizer, and a central
finite-difference gradient checker. Training runs in 32-bit; gradient checks
run the same code in 64-bit.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np


class GradientError(RuntimeError):
    """A gradient or loss value is unusable (NaN/Inf or wrong setup)."""


class Tensor:
    """An n-d array node in a reverse-mode autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ) -> None:
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar."""
        if self.data.size != 1:
            raise GradientError(f"backward requires a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        return mul(self, power(other, -1.0))

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def detach(self) -> "Tensor":
        return Tensor(self.data)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def constant(x, dtype=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, parents=(a,), backward=lambda g: a._accumulate(-g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data**exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return Tensor(out_data, parents=(a,), backward=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise GradientError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            bt = b.data.swapaxes(-1, -2) if b.data.ndim > 1 else b.data[None, :]
            a._accumulate(_unbroadcast(g @ bt if b.data.ndim > 1 else np.outer(g, b.data), a.shape))
        if b.requires_grad:
            at = a.data.swapaxes(-1, -2) if a.data.ndim > 1 else a.data[:, None]
            b._accumulate(_unbroadcast(at @ g if a.data.ndim > 1 else (at @ g[None, :]).reshape(b.shape), b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return Tensor(out_data, parents=(a,), backward=backward)


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), parents=(a,), backward=lambda g: a._accumulate(g / a.data))


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return Tensor(out_data, parents=(a,), backward=backward)


def cos(a: Tensor) -> Tensor:
    return Tensor(
        np.cos(a.data), parents=(a,), backward=lambda g: a._accumulate(-g * np.sin(a.data))
    )


def sin(a: Tensor) -> Tensor:
    return Tensor(
        np.sin(a.data), parents=(a,), backward=lambda g: a._accumulate(g * np.cos(a.data))
    )


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def backward(g):
        a._accumulate(g * keep)

    return Tensor(a.data * keep, parents=(a,), backward=backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return Tensor(
        out_data, parents=(a,), backward=lambda g: a._accumulate(g * (1.0 - out_data * out_data))
    )


def gelu(a: Tensor) -> Tensor:
    """Gaussian-error linear unit (tanh form), smooth everywhere."""
    scale = math.sqrt(2.0 / math.pi)
    inner = (a + a * a * a * 0.044715) * scale
    return a * (tanh(inner) + 1.0) * 0.5


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def backward(g):
        a._accumulate(g * sign)

    return Tensor(np.abs(a.data), parents=(a,), backward=backward)


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor(out_data, parents=(a,), backward=backward)


def tensor_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(
        a.data.reshape(shape),
        parents=(a,),
        backward=lambda g: a._accumulate(g.reshape(a.shape)),
    )


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor(
        a.data.swapaxes(ax1, ax2),
        parents=(a,),
        backward=lambda g: a._accumulate(g.swapaxes(ax1, ax2)),
    )


def take(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing with scatter-add backward."""
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor(out_data, parents=(a,), backward=backward)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            if t.requires_grad:
                t._accumulate(g[tuple(sl)])
            offset += size

    return Tensor(out_data, parents=tuple(tensors), backward=backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; -inf logits contribute exactly zero.

    The row maximum is treated as a constant, so exp(logit - max) underflows
    to an exact 0.0 for fully suppressed positions and perturbations of them
    cannot leak through the normalization bitwise.
    """
    if np.isneginf(a.data).all(axis=axis).any():
        raise GradientError("softmax row has every position masked")
    m = np.max(a.data, axis=axis, keepdims=True)
    e = exp(a - Tensor(m))
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return (centered / sqrt(var + eps)) * gain + bias


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer position-wise network with a GELU between.

    The smooth activation keeps the whole network differentiable, so
    finite-difference gradient checks stay valid at every point.
    """
    return gelu(x @ w1 + b1) @ w2 + b2


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    n_heads: int,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention with learned projections.

    q is (..., Sq, d); k and v are (..., Sk, d). An optional boolean mask of
    shape (Sq, Sk) (or broadcastable with leading batch axes) suppresses True
    positions by setting their logits to -inf before the softmax.
    """
    d = q.shape[-1]
    if d % n_heads != 0:
        raise GradientError(f"model dim {d} not divisible by {n_heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise GradientError(f"attention dims disagree: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[:-1] != v.shape[:-1]:
        raise GradientError(f"key/value lengths disagree: {k.shape} vs {v.shape}")
    dh = d // n_heads

    def split(t: Tensor) -> Tensor:
        s = t.shape
        return swapaxes(reshape(t, s[:-1] + (n_heads, dh)), -2, -3)

    qh = split(q @ wq)  # (..., H, Sq, dh)
    kh = split(k @ wk)
    vh = split(v @ wv)
    logits = (qh @ swapaxes(kh, -1, -2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (q.shape[-2], k.shape[-2]):
            raise GradientError(
                f"mask shape {mask.shape} does not match ({q.shape[-2]}, {k.shape[-2]})"
            )
        addend = np.zeros(mask.shape, dtype=logits.dtype)
        addend[mask] = -np.inf
        logits = logits + Tensor(addend)
    attn = softmax(logits, axis=-1)
    ctx = attn @ vh  # (..., H, Sq, dh)
    s = ctx.shape
    merged = reshape(swapaxes(ctx, -2, -3), s[:-3] + (s[-2], n_heads * dh))
    return merged @ wo


def xavier_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """Named trainable tensors plus Adam moments."""

    def __init__(self, dtype=np.float32) -> None:
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise GradientError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(values, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return sorted(self.params)

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        """A deep copy in another dtype (optimizer state is not carried)."""
        out = ParamStore(dtype)
        for name in self.names():
            out.add(name, self.params[name].data.astype(dtype))
        return out

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        if sorted(values) != self.names():
            raise GradientError("parameter names do not match the store")
        for name, arr in values.items():
            cur = self.params[name]
            if arr.shape != cur.data.shape:
                raise GradientError(f"parameter {name!r} shape changed: {arr.shape}")
            cur.data = np.asarray(arr, dtype=self.dtype)


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction over every parameter's gradient."""
    store.step_count += 1
    t = store.step_count
    for name in store.names():
        p = store.params[name]
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise GradientError(f"non-finite gradient for parameter {name!r}")
        m = store._m.setdefault(name, np.zeros_like(p.data))
        v = store._v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def grad_check(
    compute_loss: Callable[[], Tensor],
    store: ParamStore,
    step: float = 1e-3,
    max_coords: int = 200,
    param_names: Iterable[str] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to max_coords evenly spaced coordinates per parameter. The
    computation must be deterministic and run in 64-bit.

    Central differences are meaningless within a step of a kink (relu, abs),
    so when a coordinate disagrees with the analytic value the estimate is
    recomputed at half the step. For a smooth function the two estimates agree
    up to the expected O(h^2) truncation shrinkage and Richardson
    extrapolation recovers an accurate value; if instead they disagree with
    each other, the coordinate straddles a non-smooth point and is skipped.
    The skip rule compares only numeric values against each other, so it
    cannot hide a wrong analytic gradient (a bug makes both estimates agree on
    a value far from the analytic one); at most a quarter of a parameter's
    sampled coordinates may be skipped before the check fails outright.
    """
    if store.dtype != np.float64:
        raise GradientError("grad_check requires a float64 parameter store")
    store.zero_grad()
    loss = compute_loss()
    if not np.isfinite(loss.data).all():
        raise GradientError(f"loss is not finite: {loss.data!r}")
    loss.backward()

    def numeric_at(flat: np.ndarray, c: int, h: float) -> float:
        orig = flat[c]
        flat[c] = orig + h
        f_plus = float(compute_loss().data)
        flat[c] = orig - h
        f_minus = float(compute_loss().data)
        flat[c] = orig
        return (f_plus - f_minus) / (2.0 * h)

    worst = 0.0
    names = list(param_names) if param_names is not None else store.names()
    for name in names:
        p = store.params[name]
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        n_coords = min(max_coords, flat.size)
        coords = np.unique(np.linspace(0, flat.size - 1, n_coords).astype(int))
        skipped = 0
        for c in coords:
            numeric = numeric_at(flat, c, step)
            a = float(a_flat[c])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if rel > 1e-6:
                refined = numeric_at(flat, c, step / 2.0)
                richardson = (4.0 * refined - numeric) / 3.0
                rel = min(rel, abs(a - richardson) / max(1.0, abs(a), abs(richardson)))
                if rel > 1e-6 and abs(refined - numeric) > 0.25 * max(
                    abs(a - numeric), abs(a - refined)
                ):
                    skipped += 1
                    continue
            worst = max(worst, rel)
        if skipped > max(1, len(coords) // 4):
            raise GradientError(
                f"parameter {name!r}: {skipped}/{len(coords)} coordinates sit on "
                "non-smooth points; the check cannot certify this function"
            )
    return worst
