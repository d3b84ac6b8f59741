"""Axially expanded window attention.

The ``K`` heads of a layer are split into three groups that attend in
parallel over different token sets of the ``H x W`` map:

* heads ``[0, K/4)`` along each row (horizontal stripes of ``1 x W``),
* heads ``[K/4, K/2)`` along each column,
* heads ``[K/2, K)`` inside non-overlapping ``M x M`` windows.

Group outputs are concatenated in that order and mixed by ``wo``.  In the
shifted variant the window heads split again: the first half uses windows
displaced right by ``s``, the second half windows displaced down by ``s``,
realized by a cyclic roll with no mask across the wrapped border.

All functions take feature maps shaped ``[..., H, W, C]``; leading axes are
independent examples.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import oracle
from .numerics import (
    Tensor,
    concat,
    cyclic_roll,
    linear,
    matmul,
    reshape,
    scale,
    slice_last,
    softmax_rows,
    swap_spatial,
    transpose,
)
from .oracle import DivisibilityError

__all__ = [
    "AewinConfig",
    "AttentionWeights",
    "BlockMode",
    "DivisibilityError",
    "HeadGroup",
    "head_groups",
    "scaled_dot_attention",
    "horizontal_axis_attention",
    "vertical_axis_attention",
    "window_partition",
    "window_reverse",
    "window_attention",
    "psw_window_attention",
    "aewin_forward",
    "psw_aewin_forward",
    "attention_reachability",
]


class HeadGroup(enum.Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    WINDOW = "window"


class BlockMode(enum.Enum):
    REGULAR = "regular"
    SHIFTED = "shifted"


@dataclass(frozen=True)
class AewinConfig:
    channels: int
    heads: int
    window: int
    shift: int | None = None

    def __post_init__(self):
        c, k, m = self.channels, self.heads, self.window
        if c <= 0 or k <= 0 or m <= 0:
            raise ValueError(f"channels, heads and window must be positive: {self}")
        if k % 4:
            raise ValueError(f"heads must be a multiple of 4 for the 1/4,1/4,1/2 split, got {k}")
        if c % k:
            raise ValueError(f"channels {c} not divisible by heads {k}")
        if self.shift is None:
            object.__setattr__(self, "shift", m // 2)
        if self.shift < 0:
            raise ValueError(f"shift must be nonnegative, got {self.shift}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def group_channels(self) -> tuple[int, int, int]:
        """Widths of the horizontal, vertical and window outputs."""
        c = self.channels
        return c // 4, c // 4, c // 2


def head_groups(heads: int) -> list[HeadGroup]:
    """Group of each head, 0-based."""
    q = heads // 4
    return [HeadGroup.HORIZONTAL] * q + [HeadGroup.VERTICAL] * q + [HeadGroup.WINDOW] * (heads - 2 * q)


@dataclass(frozen=True)
class AttentionWeights:
    """``C x C`` projections; head ``k`` owns columns ``[k*d, (k+1)*d)``.

    There is no key bias: adding a constant vector to every key shifts each
    score row by a constant, which the softmax cancels.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor | None = None
    bv: Tensor | None = None
    bo: Tensor | None = None

    def __post_init__(self):
        c = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (c, c):
                raise ValueError(f"{name} must be {c}x{c}, got {getattr(self, name).shape}")
        for name in ("bq", "bv", "bo"):
            b = getattr(self, name)
            if b is not None and b.shape != (c,):
                raise ValueError(f"{name} must have length {c}, got {b.shape}")

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, std: float | None = None, bias: bool = True):
        std = 1.0 / math.sqrt(channels) if std is None else std

        def mat():
            return Tensor(rng.standard_normal((channels, channels)) * std)

        def vec():
            return Tensor(rng.standard_normal(channels) * std) if bias else None

        return cls(mat(), mat(), mat(), mat(), vec(), vec(), vec())


def _check_channels(x: Tensor, config: AewinConfig) -> None:
    if x.ndim < 3 or x.shape[-1] != config.channels:
        raise ValueError(f"expected [..., H, W, {config.channels}], got {x.shape}")


def _project(x: Tensor, w: Tensor, b: Tensor | None, lo: int, hi: int) -> Tensor:
    return linear(x, slice_last(w, lo, hi) if (lo, hi) != (0, w.shape[1]) else w,
                  None if b is None else slice_last(b, lo, hi))


def _qkv(x: Tensor, weights: AttentionWeights, lo: int, hi: int):
    return (
        _project(x, weights.wq, weights.bq, lo, hi),
        _project(x, weights.wk, None, lo, hi),
        _project(x, weights.wv, weights.bv, lo, hi),
    )


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over ``[..., t, d]`` operands."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[-1]
    n = q.ndim
    kt = transpose(k, list(range(n - 2)) + [n - 1, n - 2])
    scores = scale(matmul(q, kt), 1.0 / math.sqrt(d))
    return matmul(softmax_rows(scores), v)


def _multihead(q: Tensor, k: Tensor, v: Tensor, head_dim: int) -> Tensor:
    """Per-head attention over the token axis of ``[..., T, nh*d]`` operands."""
    *lead, t, width = q.shape
    nh = width // head_dim
    n = len(lead)
    perm = list(range(n)) + [n + 1, n, n + 2]

    def split(z):
        return transpose(reshape(z, (*lead, t, nh, head_dim)), perm)

    y = scaled_dot_attention(split(q), split(k), split(v))
    return reshape(transpose(y, perm), (*lead, t, width))


def _stripe_group(x: Tensor, weights: AttentionWeights, lo: int, hi: int, head_dim: int) -> Tensor:
    # each row of [..., H, W, C] is one stripe of W tokens
    q, k, v = _qkv(x, weights, lo, hi)
    return _multihead(q, k, v, head_dim)


def horizontal_axis_attention(x: Tensor, weights: AttentionWeights, config: AewinConfig) -> Tensor:
    """Row-stripe attention of the horizontal heads, ``-> [..., H, W, C/4]``."""
    _check_channels(x, config)
    q = config.channels // 4
    return _stripe_group(x, weights, 0, q, config.head_dim)


def vertical_axis_attention(x: Tensor, weights: AttentionWeights, config: AewinConfig) -> Tensor:
    """Column-stripe attention of the vertical heads, ``-> [..., H, W, C/4]``."""
    _check_channels(x, config)
    q = config.channels // 4
    y = _stripe_group(swap_spatial(x), weights, q, 2 * q, config.head_dim)
    return swap_spatial(y)


def window_partition(x: Tensor, window: int) -> Tensor:
    """``[..., H, W, C] -> [..., N, M*M, C]``.

    Window ``n = (i // M) * (W // M) + j // M``, slot ``(i % M) * M + j % M``.
    """
    *lead, h, w, c = x.shape
    m = window
    if h % m or w % m:
        raise DivisibilityError(f"{h}x{w} map is not divisible into {m}x{m} windows")
    n = len(lead)
    y = reshape(x, (*lead, h // m, m, w // m, m, c))
    y = transpose(y, list(range(n)) + [n, n + 2, n + 1, n + 3, n + 4])
    return reshape(y, (*lead, (h // m) * (w // m), m * m, c))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    *lead, nwin, mm, c = windows.shape
    m = window
    if h % m or w % m or nwin != (h // m) * (w // m) or mm != m * m:
        raise DivisibilityError(f"cannot fold {windows.shape} back to {h}x{w} with window {m}")
    n = len(lead)
    y = reshape(windows, (*lead, h // m, w // m, m, m, c))
    y = transpose(y, list(range(n)) + [n, n + 2, n + 1, n + 3, n + 4])
    return reshape(y, (*lead, h, w, c))


def _window_group(x: Tensor, weights: AttentionWeights, lo: int, hi: int, config: AewinConfig) -> Tensor:
    h, w = x.shape[-3], x.shape[-2]
    m = config.window
    if h % m or w % m:
        raise DivisibilityError(f"{h}x{w} map is not divisible into {m}x{m} windows")
    q, k, v = (window_partition(t, m) for t in _qkv(x, weights, lo, hi))
    return window_reverse(_multihead(q, k, v, config.head_dim), m, h, w)


def window_attention(x: Tensor, weights: AttentionWeights, config: AewinConfig) -> Tensor:
    """Window-head attention inside regular ``M x M`` windows, ``-> [..., H, W, C/2]``."""
    _check_channels(x, config)
    c = config.channels
    return _window_group(x, weights, c // 2, c, config)


def psw_window_attention(x: Tensor, weights: AttentionWeights, config: AewinConfig) -> Tensor:
    """Window heads over right- and down-displaced windows, ``-> [..., H, W, C/2]``.

    Rolling the map left (up) by ``s`` and partitioning regularly is the same
    as displacing the partition lines right (down) by ``s`` on the torus.
    """
    _check_channels(x, config)
    c, s = config.channels, config.shift
    if (config.heads // 2) % 2:
        raise ValueError("window heads must split into two equal subgroups")
    mid = 3 * c // 4
    right = cyclic_roll(_window_group(cyclic_roll(x, 0, -s), weights, c // 2, mid, config), 0, s)
    down = cyclic_roll(_window_group(cyclic_roll(x, -s, 0), weights, mid, c, config), s, 0)
    return concat([right, down], axis=-1)


def _combine(parts: Sequence[Tensor], weights: AttentionWeights) -> Tensor:
    return linear(concat(parts, axis=-1), weights.wo, weights.bo)


def aewin_forward(x: Tensor, weights: AttentionWeights, config: AewinConfig) -> Tensor:
    """Regular-window AEWin attention, ``[..., H, W, C] -> [..., H, W, C]``."""
    return _combine(
        [
            horizontal_axis_attention(x, weights, config),
            vertical_axis_attention(x, weights, config),
            window_attention(x, weights, config),
        ],
        weights,
    )


def psw_aewin_forward(x: Tensor, weights: AttentionWeights, config: AewinConfig) -> Tensor:
    """AEWin attention with parallel shifted windows; axial heads unchanged."""
    return _combine(
        [
            horizontal_axis_attention(x, weights, config),
            vertical_axis_attention(x, weights, config),
            psw_window_attention(x, weights, config),
        ],
        weights,
    )


def layer_adjacency(config: AewinConfig, h: int, w: int, mode: BlockMode) -> np.ndarray:
    """Union of all token pairs some head of one layer lets attend."""
    m, s = config.window, config.shift
    masks = [oracle.row_mask(h, w), oracle.col_mask(h, w)]
    if mode is BlockMode.SHIFTED:
        masks += [oracle.shifted_window_mask(h, w, m, 0, s), oracle.shifted_window_mask(h, w, m, s, 0)]
    else:
        masks.append(oracle.window_mask(h, w, m))
    return oracle.mask_union(masks).allowed


def attention_reachability(config: AewinConfig, h: int, w: int, layers: Sequence[BlockMode]) -> np.ndarray:
    """``[p, q]`` is True iff token ``q`` can influence token ``p`` after ``layers``."""
    return oracle.reachability_closure([layer_adjacency(config, h, w, mode) for mode in layers])
