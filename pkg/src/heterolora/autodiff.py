"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
inputs and a closure that maps the output adjoint to input adjoints.  Calling
:meth:`Tensor.backward` on a scalar replays those closures in reverse creation
order, so each recorded operation is visited exactly once.

Conventions:

* Sequences are row-major ``(time, d_model)`` matrices and projections
  right-multiply (``x @ W``).
* Broadcasting is limited to adding or multiplying a vector over the last
  dimension (biases and layer-norm gains).  Anything else must match exactly.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_counter = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateSliceError(ValueError):
    """A softmax slice is entirely masked."""


class NumericError(ArithmeticError):
    """A value that must be finite is not."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A numpy array that can participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_counter)
        self.name = name

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate ``d self / d leaf`` into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        backward(self, grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def backward(loss: Tensor, grad: np.ndarray) -> None:
    # collect every recorded node reachable from the loss
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes or not t.requires_grad:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)
    adjoints: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        g = adjoints.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            # leaf
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adjoints[key] = pg if key not in adjoints else adjoints[key] + pg


def _check_vec_broadcast(a: Tensor, b: Tensor, op: str) -> bool:
    """True when b is a last-dimension vector to broadcast over a."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _sum_to_vec(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    vec = _check_vec_broadcast(a, b, "add")

    def fn(g):
        return g, (_sum_to_vec(g) if vec else g)

    return _record(a.data + b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    vec = _check_vec_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        gb = g * ad
        return g * bd, (_sum_to_vec(gb) if vec else gb)

    return _record(ad * bd, (a, b), fn)


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix or has
    exactly the same leading axes as ``a``.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(ad @ bd, (a, b), fn)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _lift(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def index(a, key) -> Tensor:
    """Basic or integer-array indexing; adjoint scatters back with accumulation."""
    a = _lift(a)
    shape, dtype = a.shape, a.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _record(a.data[key], (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def relu(a) -> Tensor:
    a = _lift(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * pos,))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _lift(a)
    shape = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = _lift(a)
    return scale(sum(a), 1.0 / a.data.size)


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis`` with max-subtraction.

    ``mask`` is an additive constant (0 or -inf entries) broadcast against
    ``x``; -inf inputs get exactly zero probability.
    """
    x = _lift(x)
    z = x.data if mask is None else x.data + mask
    zmax = np.max(z, axis=axis, keepdims=True)
    if np.any(np.isneginf(zmax)):
        raise DegenerateSliceError("softmax: a slice is entirely -inf")
    e = np.exp(z - zmax)
    p = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record(p, (x,), fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _sum_to_vec(g * xhat), _sum_to_vec(g)

    return _record(xhat * gd + bias.data, (x, gain, bias), fn)


def embedding_gather(table, ids) -> Tensor:
    table = _lift(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_gather: ids outside [0, {table.shape[0]})")
    return index(table, ids)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    zmax = x.data.max(axis=axis, keepdims=True)
    lse = zmax + np.log(np.exp(x.data - zmax).sum(axis=axis, keepdims=True))
    out = x.data - lse
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row-wise softmax."""
    logits = _lift(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n, c = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"cross_entropy: target ids must be in [0, {c})")
    logp = log_softmax(logits, axis=-1)
    picked = index(logp, (np.arange(n), targets))
    return scale(sum(picked), -1.0 / n)


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    n_checked: int

    def ok(self, rtol: float) -> bool:
        return self.max_rel_error <= rtol


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    h: float = 1e-4,
    atol: float = 1e-9,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads ``params`` in place.  The relative
    error of a coordinate is ``|g - fd| / max(|g|, |fd|, atol)``, so
    coordinates where both sides are below ``atol`` count as exact.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_diff_check: f returned a non-finite value")
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    worst = (0.0, 0.0, None, None)
    n = 0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"finite_diff_check: non-finite value perturbing {name}[{i}]")
                fd = (fp - fm) / (2 * h)
                g = analytic[name].reshape(-1)[i]
                abs_err = abs(g - fd)
                rel = abs_err / max(abs(g), abs(fd), atol)
                n += 1
                if rel > worst[0]:
                    worst = (rel, abs_err, name, np.unravel_index(i, p.shape))
    for p in params.values():
        p.grad = None
    return GradCheckReport(worst[0], worst[1], worst[2], worst[3], n)
