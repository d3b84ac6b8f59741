"""Brute-force reference attention over explicit token masks.

Tokens of an ``H x W`` map are numbered row-major, ``p = i * W + j``.  Every
mask here is built from per-token group labels by index arithmetic alone; no
partition, transpose or roll code from :mod:`aewin.attention` is used, so the
equivalence tests compare two independent routes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Tensor, matmul, softmax_rows

_MOST_NEGATIVE = np.finfo(np.float64).min


class DivisibilityError(ValueError):
    """A spatial extent is not a multiple of the window size."""


@dataclass(frozen=True)
class AttentionMask:
    """``allowed[p, q]`` is True iff token ``p`` may attend to token ``q``."""

    allowed: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.allowed, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"mask must be square, got {a.shape}")
        if not a.any(axis=1).all():
            raise ValueError("every mask row needs at least one allowed entry")
        a = a.copy()
        a.flags.writeable = False
        object.__setattr__(self, "allowed", a)

    @property
    def n(self) -> int:
        return self.allowed.shape[0]


def _coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    p = np.arange(h * w)
    return p // w, p % w


def _from_labels(labels: np.ndarray) -> AttentionMask:
    return AttentionMask(labels[:, None] == labels[None, :])


def _check_div(h: int, w: int, m: int) -> None:
    if h % m or w % m:
        raise DivisibilityError(f"{h}x{w} map is not divisible into {m}x{m} windows")


def row_mask(h: int, w: int) -> AttentionMask:
    rows, _ = _coords(h, w)
    return _from_labels(rows)


def col_mask(h: int, w: int) -> AttentionMask:
    _, cols = _coords(h, w)
    return _from_labels(cols)


def window_mask(h: int, w: int, m: int) -> AttentionMask:
    return shifted_window_mask(h, w, m, 0, 0)


def shifted_window_mask(h: int, w: int, m: int, dy: int, dx: int) -> AttentionMask:
    """Windows whose partition lines are displaced down by ``dy`` and right by
    ``dx``, grouped on the torus (a window cut by the border wraps around)."""
    _check_div(h, w, m)
    rows, cols = _coords(h, w)
    labels = ((rows - dy) % h // m) * (w // m) + (cols - dx) % w // m
    return _from_labels(labels)


def mask_union(masks: Sequence[AttentionMask]) -> AttentionMask:
    n = masks[0].n
    if any(m.n != n for m in masks):
        raise ValueError("cannot union masks of different sizes")
    return AttentionMask(np.logical_or.reduce([m.allowed for m in masks]))


def reachability_closure(adjacency: np.ndarray | Sequence[np.ndarray], steps: int | None = None) -> np.ndarray:
    """Boolean reachability after composing adjacency matrices.

    With a single matrix and ``steps``, it is applied ``steps`` times.  With a
    sequence, layer ``t`` of the sequence is applied ``t``-th.  Entry
    ``[p, q]`` is True iff information at ``q`` can reach ``p``.
    """
    if steps is not None:
        layers = [np.asarray(adjacency, dtype=bool)] * steps
    else:
        layers = [np.asarray(a, dtype=bool) for a in adjacency]
    n = layers[0].shape[0]
    reach = np.eye(n, dtype=bool)
    for a in layers:
        if a.shape != (n, n):
            raise ValueError("adjacency size mismatch")
        reach = (a.astype(np.int64) @ reach.astype(np.int64)) > 0
    return reach


# --------------------------------------------------------------------------
# Masked global attention
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadWeights:
    """Projections for one head: ``C x d`` matrices and length-``d`` biases."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    bq: np.ndarray | None = None
    bv: np.ndarray | None = None


def head_weights(weights, head: int, head_dim: int) -> HeadWeights:
    """Column block ``[head*d, (head+1)*d)`` of each projection (0-based head)."""
    cols = slice(head * head_dim, (head + 1) * head_dim)
    bq = None if weights.bq is None else weights.bq.data[cols]
    bv = None if weights.bv is None else weights.bv.data[cols]
    return HeadWeights(weights.wq.data[:, cols], weights.wk.data[:, cols], weights.wv.data[:, cols], bq, bv)


def masked_global_attention(x: Tensor, hw: HeadWeights, mask: AttentionMask) -> Tensor:
    """Single-head attention of ``x[n, C]`` with disallowed pairs excluded.

    Disallowed scores are set to the most negative finite float before the
    softmax, and their weights are then zeroed explicitly.
    """
    n = x.shape[0]
    if mask.n != n:
        raise ValueError(f"mask is {mask.n}x{mask.n} but there are {n} tokens")
    q = matmul(x, Tensor(hw.wq))
    k = matmul(x, Tensor(hw.wk))
    v = matmul(x, Tensor(hw.wv))
    if hw.bq is not None:
        q = Tensor(q.data + hw.bq)
    if hw.bv is not None:
        v = Tensor(v.data + hw.bv)
    d = q.shape[1]
    scores = matmul(q, Tensor(k.data.T)).data * (1.0 / math.sqrt(d))
    if not mask.allowed.all():
        scores = np.where(mask.allowed, scores, _MOST_NEGATIVE)
    probs = softmax_rows(Tensor(scores)).data
    if not mask.allowed.all():
        probs = np.where(mask.allowed, probs, 0.0)
    return matmul(Tensor(probs), v)


def attention_weights_under_mask(x: Tensor, hw: HeadWeights, mask: AttentionMask) -> np.ndarray:
    """The ``n x n`` softmax weights used by :func:`masked_global_attention`."""
    q = x.data @ hw.wq + (0.0 if hw.bq is None else hw.bq)
    k = x.data @ hw.wk
    scores = (q @ k.T) / math.sqrt(q.shape[1])
    scores = np.where(mask.allowed, scores, _MOST_NEGATIVE)
    probs = softmax_rows(Tensor(scores)).data
    return np.where(mask.allowed, probs, 0.0)


def group_oracle(x: Tensor, weights, heads: Sequence[int], head_dim: int, mask: AttentionMask) -> Tensor:
    """Concatenated outputs of ``heads`` each attending under ``mask``; ``x`` is ``[n, C]``."""
    outs = [masked_global_attention(x, head_weights(weights, k, head_dim), mask).data for k in heads]
    return Tensor(np.concatenate(outs, axis=1))


def aewin_group_masks(h: int, w: int, window: int, shift: int, shifted: bool) -> list[tuple[range, AttentionMask]]:
    """Masks of one AEWin layer, keyed by ranges of head quarters.

    Quarter 0 is horizontal, 1 vertical, 2-3 window (2 right-displaced and
    3 down-displaced when ``shifted``).
    """
    if shifted:
        win = [
            (range(2, 3), shifted_window_mask(h, w, window, 0, shift)),
            (range(3, 4), shifted_window_mask(h, w, window, shift, 0)),
        ]
    else:
        win = [(range(2, 4), window_mask(h, w, window))]
    return [(range(0, 1), row_mask(h, w)), (range(1, 2), col_mask(h, w)), *win]


def aewin_oracle(x: Tensor, weights, heads: int, window: int, shift: int = 0, shifted: bool = False) -> Tensor:
    """Dense reference for a whole AEWin layer on ``x[H, W, C]``.

    Heads ``[0, K/4)`` use the row mask, ``[K/4, K/2)`` the column mask and
    the rest the window mask; with ``shifted`` the window heads split in two
    halves using right- and down-displaced torus windows.  The concatenation
    is projected by ``wo``.
    """
    h, w, c = x.shape
    d = c // heads
    quarter = heads // 4
    flat = Tensor(x.data.reshape(h * w, c))
    parts = []
    for block, mask in aewin_group_masks(h, w, window, shift, shifted):
        ks = range(block.start * quarter, block.stop * quarter)
        parts.append(group_oracle(flat, weights, ks, d, mask).data)
    cat = Tensor(np.concatenate(parts, axis=1))
    out = matmul(cat, weights.wo).data
    if weights.bo is not None:
        out = out + weights.bo.data
    return Tensor(out.reshape(h, w, c))
