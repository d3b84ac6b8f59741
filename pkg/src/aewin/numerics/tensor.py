"""Dense float64 tensors, a gradient tape, and the primitive ops the model uses.

Every op is a pure function of immutable :class:`Tensor` values.  When a
:class:`GradTape` is active and any input requires a gradient, the op records
a vector-Jacobian product on the tape so ``tape.gradient`` can replay it in
reverse.

Shape rules are explicit.  The only implicit broadcasting is along leading
(batch) axes, e.g. a ``[..., m, k]`` activation times a ``[k, n]`` weight.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erfc

__all__ = [
    "Tensor",
    "GradTape",
    "NonFiniteError",
    "MacCounter",
    "count_macs",
    "matmul",
    "linear",
    "add",
    "mul",
    "scale",
    "add_bias",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "depthwise_conv3x3",
    "cyclic_roll",
    "reshape",
    "transpose",
    "swap_spatial",
    "concat",
    "slice_last",
    "mean",
    "sum_all",
    "cross_entropy",
    "space_to_depth",
]

LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    """Immutable n-d array of float64 values.

    ``data`` is a read-only, C-contiguous numpy array, so the flat row-major
    buffer is ``data.ravel()``.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        self._init(arr, requires_grad)

    def _init(self, arr: np.ndarray, requires_grad: bool) -> None:
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Takes ownership of `arr` without copying.
        t = cls.__new__(cls)
        t._init(np.ascontiguousarray(arr, dtype=np.float64), requires_grad)
        return t

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
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: VJP


_state = threading.local()


def _tapes() -> list["GradTape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


@dataclass
class GradTape:
    """Records executed ops so gradients can be replayed in reverse.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = sum_all(mul(x, x))
    >>> tape.gradient(y, [x])[0].data
    array([2., 4.])
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes().remove(self)

    def gradient(self, target: Tensor, sources: Iterable[Tensor]) -> list[Tensor]:
        """Gradients of scalar ``target`` w.r.t. each source, shape-equal to it.

        Sources the target does not depend on get an all-zero gradient.
        """
        if target.size != 1:
            raise ValueError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones(target.shape)}
        for rec in reversed(self.records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(Tensor._wrap(np.zeros(s.shape) if g is None else np.array(g)))
        return out


def _emit(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    tapes = _tapes()
    track = bool(tapes) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=track)
    if track:
        rec = _Record(out, inputs, vjp)
        for tape in tapes:
            tape.records.append(rec)
    return out


# --------------------------------------------------------------------------
# Multiply-accumulate instrumentation
# --------------------------------------------------------------------------


@dataclass
class MacCounter:
    """Multiply-accumulate totals split by operand kind.

    ``linear`` counts products against a 2-D weight (token-wise projections);
    ``batched`` counts products between two activation tensors (attention).
    """

    linear: int = 0
    batched: int = 0

    @property
    def total(self) -> int:
        return self.linear + self.batched


def _counters() -> list[MacCounter]:
    if not hasattr(_state, "counters"):
        _state.counters = []
    return _state.counters


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().remove(counter)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a[..., m, k] @ b[..., k, n]`` summed strictly left-to-right over k."""
    k = a.shape[-1]
    # overflow surfaces as NonFiniteError when the result is wrapped
    with np.errstate(over="ignore", invalid="ignore"):
        out = a[..., :, 0:1] * b[..., 0:1, :]
        for p in range(1, k):
            out += a[..., :, p : p + 1] * b[..., p : p + 1, :]
    return out


def _tally(kind: str, a_shape, b_shape) -> None:
    counters = _counters()
    if not counters:
        return
    lead = a_shape[:-2] if kind == "batched" else a_shape[:-1]
    macs = math.prod(lead) * (a_shape[-2] if kind == "batched" else 1) * a_shape[-1] * b_shape[-1]
    for c in counters:
        setattr(c, kind, getattr(c, kind) + macs)


# --------------------------------------------------------------------------
# Ops
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with a fixed summation order.

    ``b`` 2-D: ``a[..., k] @ b[k, n] -> [..., n]`` (leading axes of ``a`` are
    token/batch axes).  Otherwise both operands are ``[..., m, k]`` and
    ``[..., k, n]`` with identical leading axes.
    """
    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        _tally("linear", a.shape, b.shape)
        out = _mm(a2, b.data).reshape(*lead, b.shape[1])

        def vjp(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = _mm(g2, b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = _mm(a2.T, g2) if b.requires_grad else None
            return ga, gb

        return _emit(out, (a, b), vjp)

    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    _tally("batched", a.shape, b.shape)
    out = _mm(a.data, b.data)

    def vjp(g):
        ga = _mm(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = _mm(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def _sum_leading(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., n] + b[n]``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"bias shape {b.shape} does not match last axis of {x.shape}")
    n = b.shape[0]
    return _emit(x.data + b.data, (x, b), lambda g: (g, _sum_leading(g, n)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted per row."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match channels {c}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    sigma = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc / sigma
    y = xhat * gamma.data + beta.data

    def vjp(g):
        gh = g * gamma.data
        gx = (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        ) / sigma
        return gx, _sum_leading(g * xhat, c), _sum_leading(g, c)

    return _emit(y, (x, gamma, beta), vjp)


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``.

    ``Phi(x) = erfc(-x / sqrt 2) / 2`` keeps full relative precision in the
    negative tail, where ``1 + erf`` cancels.
    """
    cdf = 0.5 * erfc(-x.data / _SQRT2)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _emit(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def depthwise_conv3x3(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel 3x3 cross-correlation with zero padding 1 over ``[..., H, W, C]``."""
    c = x.shape[-1]
    if x.ndim < 3:
        raise ValueError(f"depthwise_conv3x3 needs [..., H, W, C], got {x.shape}")
    if kernels.shape != (3, 3, c):
        raise ValueError(f"kernel shape {kernels.shape} does not match channels {c}")
    h, w = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x.data, pad)
    k = kernels.data
    out = np.zeros(x.shape)
    for a in range(3):
        for b in range(3):
            out += xp[..., a : a + h, b : b + w, :] * k[a, b]

    def vjp(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for a in range(3):
                for b in range(3):
                    gxp[..., a : a + h, b : b + w, :] += g * k[a, b]
            gx = gxp[..., 1:-1, 1:-1, :]
        if kernels.requires_grad:
            gk = np.empty((3, 3, c))
            for a in range(3):
                for b in range(3):
                    gk[a, b] = _sum_leading(xp[..., a : a + h, b : b + w, :] * g, c)
        return gx, gk

    return _emit(out, (x, kernels), vjp)


def cyclic_roll(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal shift of ``[..., H, W, C]``: ``out[(i+dy)%H, (j+dx)%W] = x[i, j]``."""
    if x.ndim < 3:
        raise ValueError(f"cyclic_roll needs [..., H, W, C], got {x.shape}")
    out = np.roll(x.data, (dy, dx), axis=(-3, -2))
    return _emit(out, (x,), lambda g: (np.roll(g, (-dy, -dx), axis=(-3, -2)),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.size:
        raise ValueError(f"cannot reshape {x.shape} to {shape}")
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_spatial(x: Tensor) -> Tensor:
    """``[..., H, W, C] -> [..., W, H, C]``."""
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return transpose(x, axes)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    axis = axis % xs[0].ndim
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, xs, vjp)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""
    n = x.shape[-1]
    if not 0 <= start < stop <= n:
        raise ValueError(f"bad slice [{start}:{stop}] of last axis {n}")

    def vjp(g):
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return (full,)

    return _emit(x.data[..., start:stop], (x,), vjp)


def mean(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(sorted(a % x.ndim for a in axes))
    count = math.prod(x.shape[a] for a in axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)

    return _emit(x.data.mean(axis=axes), (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, g.item()),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[..., n]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[-1]
    z = logits.data.reshape(-1, n)
    labels = labels.reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = (logsum - shifted[rows, labels]).mean()

    def vjp(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, labels] -= 1.0
        return ((g.item() / z.shape[0]) * p.reshape(logits.shape),)

    return _emit(np.array(loss), (logits,), vjp)


def space_to_depth(x: Tensor, p: int) -> Tensor:
    """Fold each ``p x p`` spatial patch into channels.

    ``[..., H, W, C] -> [..., H/p, W/p, p*p*C]`` with the patch flattened in
    (row, column, channel) order.
    """
    *lead, h, w, c = x.shape
    if h % p or w % p:
        raise ValueError(f"spatial size {h}x{w} is not divisible by {p}")
    n = len(lead)
    y = reshape(x, (*lead, h // p, p, w // p, p, c))
    y = transpose(y, list(range(n)) + [n, n + 2, n + 1, n + 3, n + 4])
    return reshape(y, (*lead, h // p, w // p, p * p * c))
