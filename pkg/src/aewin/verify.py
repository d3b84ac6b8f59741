"""Oracle-equivalence and gradient suites behind ``aewin verify`` / ``aewin gradcheck``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import attention as att
from . import oracle
from .attention import AewinConfig, AttentionWeights, BlockMode
from .backbone import BlockParams, aewin_block, block_shapes, cpe
from .numerics import (
    Tensor,
    cross_entropy,
    cyclic_roll,
    depthwise_conv3x3,
    gelu,
    grad_check,
    grad_check_many,
    layer_norm,
    matmul,
    mul,
    softmax_rows,
    sum_all,
)

ORACLE_TOL = 1e-10
GRAD_TOL = 1e-4
OP_GRAD_TOL = 1e-6
# single primitives, held to OP_GRAD_TOL; compositions get GRAD_TOL
PRIMITIVE_OPS = (
    "matmul",
    "matmul_batched",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "depthwise_conv3x3",
    "cyclic_roll",
    "cross_entropy",
)
DEFAULT_SIZES = ((4, 4), (4, 8), (8, 8))
DEFAULT_WINDOWS = (2, 4)


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    cases: int = 0

    @property
    def passed(self) -> bool:
        return self.value < self.tolerance if self.tolerance > 0 else self.value == 0


def _merge(results: dict[str, CheckResult], name: str, value: float, tol: float) -> None:
    r = results.setdefault(name, CheckResult(name, 0.0, tol))
    r.value = max(r.value, value)
    r.cases += 1


def _diff(a: Tensor, b: Tensor) -> float:
    return float(np.abs(a.data - b.data).max())


def oracle_cases(sizes: Iterable[tuple[int, int]], windows: Sequence[int]) -> list[tuple[int, int, int]]:
    return [(h, w, m) for (h, w) in sizes for m in windows if h % m == 0 and w % m == 0]


def run_verify(
    seed: int = 0,
    sizes: Iterable[tuple[int, int]] = DEFAULT_SIZES,
    windows: Sequence[int] = DEFAULT_WINDOWS,
    seeds: int = 10,
    channels: int = 8,
    heads: int = 4,
) -> list[CheckResult]:
    """Compare every head group against masked global attention over the grid."""
    results: dict[str, CheckResult] = {}
    cases = oracle_cases(sizes, windows)
    q = heads // 4
    for (h, w, m), k in itertools.product(cases, range(seeds)):
        rng = np.random.default_rng([seed, h, w, m, k])
        config = AewinConfig(channels, heads, m)
        s = config.shift
        d = config.head_dim
        weights = AttentionWeights.random(channels, rng)
        x = Tensor(rng.standard_normal((h, w, channels)))
        flat = Tensor(x.data.reshape(h * w, channels))

        def ref(heads_: range, mask) -> np.ndarray:
            return oracle.group_oracle(flat, weights, heads_, d, mask).data.reshape(h, w, -1)

        def cmp(name: str, got: Tensor, want: np.ndarray) -> None:
            _merge(results, name, float(np.abs(got.data - want).max()), ORACLE_TOL)

        cmp("horizontal_vs_row_mask", att.horizontal_axis_attention(x, weights, config), ref(range(0, q), oracle.row_mask(h, w)))
        cmp("vertical_vs_col_mask", att.vertical_axis_attention(x, weights, config), ref(range(q, 2 * q), oracle.col_mask(h, w)))
        cmp("window_vs_window_mask", att.window_attention(x, weights, config), ref(range(2 * q, heads), oracle.window_mask(h, w, m)))
        psw = att.psw_window_attention(x, weights, config).data
        half = channels // 4
        cmp("psw_right_vs_torus_mask", Tensor(psw[..., :half]), ref(range(2 * q, 3 * q), oracle.shifted_window_mask(h, w, m, 0, s)))
        cmp("psw_down_vs_torus_mask", Tensor(psw[..., half:]), ref(range(3 * q, heads), oracle.shifted_window_mask(h, w, m, s, 0)))
        _merge(results, "aewin_vs_oracle", _diff(att.aewin_forward(x, weights, config), oracle.aewin_oracle(x, weights, heads, m)), ORACLE_TOL)
        _merge(
            results,
            "psw_aewin_vs_oracle",
            _diff(att.psw_aewin_forward(x, weights, config), oracle.aewin_oracle(x, weights, heads, m, s, shifted=True)),
            ORACLE_TOL,
        )
        no_shift = AewinConfig(channels, heads, m, shift=0)
        _merge(results, "psw_s0_equals_window", _diff(att.psw_window_attention(x, weights, no_shift), att.window_attention(x, weights, no_shift)), 0)
        _merge(results, "partition_round_trip", _diff(att.window_reverse(att.window_partition(x, m), m, h, w), x), 0)

    for h, w, m in cases:
        config = AewinConfig(channels, heads, m)
        worst = 0.0
        for modes in itertools.product(BlockMode, repeat=2):
            reach = att.attention_reachability(config, h, w, modes)
            worst = max(worst, float((~reach).sum()))
        _merge(results, "two_layer_full_reachability", worst, 0)
    return list(results.values())


# --------------------------------------------------------------------------
# Gradients
# --------------------------------------------------------------------------


def random_block_params(channels: int, mlp_ratio: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Block parameters at a scale where every gradient is well above round-off."""
    out = {}
    for name, shape in block_shapes("b", channels, mlp_ratio).items():
        if name.endswith(".gamma"):
            arr = 1.0 + 0.3 * rng.standard_normal(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else 9
            arr = rng.standard_normal(shape) / np.sqrt(fan_in)
        out[name] = Tensor(arr)
    return out


def _projected(fn: Callable[..., Tensor], r: np.ndarray) -> Callable[..., Tensor]:
    def loss(*args):
        y = fn(*args)
        return sum_all(mul(y, Tensor(r.reshape(y.shape))))

    return loss


def op_grad_errors(rng: np.random.Generator) -> dict[str, float]:
    """Max relative error of each primitive's VJP against central differences."""
    errors = {}

    def check(name: str, fn, inputs: dict[str, np.ndarray], out_shape) -> None:
        r = rng.standard_normal(out_shape)
        loss = _projected(lambda d: fn(**d), r)
        errs = grad_check_many(loss, {k: Tensor(v) for k, v in inputs.items()})
        errors[name] = max(errs.values())

    n = rng.standard_normal
    check("matmul", lambda a, b: matmul(a, b), {"a": n((3, 4)), "b": n((4, 2))}, (3, 2))
    check("matmul_batched", lambda a, b: matmul(a, b), {"a": n((2, 3, 4)), "b": n((2, 4, 3))}, (2, 3, 3))
    check("softmax_rows", lambda x: softmax_rows(x), {"x": n((3, 5))}, (3, 5))
    check(
        "layer_norm",
        lambda x, g, b: layer_norm(x, g, b),
        {"x": n((4, 6)), "g": 1 + 0.3 * n(6), "b": n(6)},
        (4, 6),
    )
    # elementwise, so checked per coordinate: in a summed loss the finite
    # difference inherits round-off from every other term, which swamps the
    # tiny derivatives in the far negative tail
    x, r = 2 * n(12), n(12)
    errors["gelu"] = max(
        grad_check(lambda t, ri=ri: sum_all(mul(gelu(t), Tensor([ri]))), Tensor([xi])) for xi, ri in zip(x, r)
    )
    check(
        "depthwise_conv3x3",
        lambda x, k: depthwise_conv3x3(x, k),
        {"x": n((4, 5, 3)), "k": n((3, 3, 3))},
        (4, 5, 3),
    )
    check("cyclic_roll", lambda x: cyclic_roll(x, 1, -2), {"x": n((3, 4, 2))}, (3, 4, 2))
    check(
        "scaled_dot_attention",
        lambda q, k, v: att.scaled_dot_attention(q, k, v),
        {"q": n((5, 3)), "k": n((5, 3)), "v": n((5, 3))},
        (5, 3),
    )
    labels = rng.integers(0, 4, size=3)
    errors["cross_entropy"] = grad_check(lambda z: cross_entropy(z, labels), Tensor(n((3, 4))))
    return errors


def block_grad_errors(
    rng: np.random.Generator, mode: BlockMode, size: int = 8, channels: int = 8, heads: int = 4, window: int = 2
) -> dict[str, float]:
    """Relative error of a whole AEWin block w.r.t. its input and every parameter."""
    config = AewinConfig(channels, heads, window)
    params = random_block_params(channels, 4, rng)
    x = Tensor(rng.standard_normal((size, size, channels)))
    r = rng.standard_normal((size, size, channels))

    def loss(d: dict[str, Tensor]) -> Tensor:
        p = BlockParams.from_params(d, "b")
        y = aewin_block(d["x"], p, config, mode)
        return sum_all(mul(y, Tensor(r)))

    return grad_check_many(loss, {"x": x, **params})


def attention_grad_errors(rng: np.random.Generator, shifted: bool, size: int = 4, channels: int = 8) -> dict[str, float]:
    config = AewinConfig(channels, 4, 2)
    weights = AttentionWeights.random(channels, rng)
    x = Tensor(rng.standard_normal((size, size, channels)))
    r = rng.standard_normal((size, size, channels))
    forward = att.psw_aewin_forward if shifted else att.aewin_forward
    names = ("wq", "wk", "wv", "wo", "bq", "bv", "bo")

    def loss(d):
        w = AttentionWeights(**{k: d[k] for k in names})
        return sum_all(mul(forward(d["x"], w, config), Tensor(r)))

    return grad_check_many(loss, {"x": x, **{k: getattr(weights, k) for k in names}})


def run_gradcheck(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [
        CheckResult(f"op.{k}", v, OP_GRAD_TOL if k in PRIMITIVE_OPS else GRAD_TOL, 1)
        for k, v in op_grad_errors(rng).items()
    ]
    for shifted in (False, True):
        name = "psw_aewin_forward" if shifted else "aewin_forward"
        results.append(CheckResult(name, max(attention_grad_errors(rng, shifted).values()), GRAD_TOL, 1))
    cpe_err = grad_check_many(
        _projected(lambda d: cpe(d["x"], d["k"]), rng.standard_normal((4, 4, 3))),
        {"x": Tensor(rng.standard_normal((4, 4, 3))), "k": Tensor(rng.standard_normal((3, 3, 3)))},
    )
    results.append(CheckResult("cpe", max(cpe_err.values()), GRAD_TOL, 1))
    for mode in BlockMode:
        errs = block_grad_errors(rng, mode)
        results.append(CheckResult(f"aewin_block.{mode.value}", max(errs.values()), GRAD_TOL, len(errs)))
    return results
