"""Closed-form cost models and instrumented checks against them.

All counts are multiply-accumulates, held as exact integers.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .attention import AewinConfig, AttentionWeights, aewin_forward, psw_aewin_forward
from .backbone import IN_CHANS, ModelSpec, param_count, stage_config, stage_resolutions
from .numerics import MacCounter, Tensor, count_macs


def flops_global(h: int, w: int, c: int) -> int:
    """Global self-attention: ``4HWC^2 + 2(HW)^2 C``."""
    _positive(h, w, c)
    return 4 * h * w * c * c + 2 * (h * w) ** 2 * c


def flops_aewin_exact(h: int, w: int, c: int, m: int) -> Fraction:
    _positive(h, w, c, m)
    return 4 * h * w * c * c + h * w * c * (Fraction(h, 2) + Fraction(w, 2) + m * m)


def flops_aewin(h: int, w: int, c: int, m: int) -> int:
    """AEWin attention: ``4HWC^2 + HWC (H/2 + W/2 + M^2)``, floored if fractional."""
    return math.floor(flops_aewin_exact(h, w, c, m))


def _positive(*dims: int) -> None:
    if any(d <= 0 for d in dims):
        raise ValueError(f"dimensions must be positive, got {dims}")


@dataclass(frozen=True)
class LayerFlops:
    layer: str
    mechanism: str
    h: int
    w: int
    c: int
    m: int | None
    projection: int
    attention: int

    @property
    def total(self) -> int:
        return self.projection + self.attention


@dataclass
class FlopsReport:
    spec: str
    image_size: tuple[int, int]
    entries: list[LayerFlops] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(e.total for e in self.entries)

    def by_mechanism(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.mechanism] = out.get(e.mechanism, 0) + e.total
        return out


COUNTED_TERMS = (
    "patch embedding projection (HW * p^2 * 3 * C)",
    "AEWin attention per block: 4HWC^2 + HWC(H/2 + W/2 + M^2)",
    "MLP per block: 2 * mlp_ratio * HWC^2",
    "CPE depthwise 3x3 per block: 9HWC",
    "patch merging projection: HW * 4C_in * C_out",
    "classifier: C * num_classes",
)
EXCLUDED_TERMS = "layer norms, softmax, GELU, residual adds, biases, pooling"


def flops_model(spec: ModelSpec, image_size: int | tuple[int, int]) -> FlopsReport:
    """Itemized multiply-accumulate count of one forward pass."""
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    height, width = image_size
    grids = stage_resolutions(spec, height, width)
    report = FlopsReport(spec.name, (height, width))
    report.notes = [f"counted: {t}" for t in COUNTED_TERMS] + [f"excluded: {EXCLUDED_TERMS}"]

    h, w = grids[0]
    p = spec.patch_size
    report.entries.append(
        LayerFlops("patch_embed", "embed", h, w, spec.dims[0], None, h * w * p * p * IN_CHANS * spec.dims[0], 0)
    )
    for i, (h, w) in enumerate(grids):
        c = spec.dims[i]
        if i > 0:
            cin = spec.dims[i - 1]
            report.entries.append(LayerFlops(f"stage{i + 1}.merge", "merge", h, w, c, None, h * w * 4 * cin * c, 0))
        m = stage_config(spec, i, h, w).window
        exact = flops_aewin_exact(h, w, c, m)
        if exact.denominator != 1:
            report.notes.append(f"stage{i + 1}: fractional AEWin term {exact} floored")
        proj = 4 * h * w * c * c
        for j in range(spec.depths[i]):
            name = f"stage{i + 1}.block{j + 1}"
            report.entries.append(LayerFlops(f"{name}.cpe", "cpe", h, w, c, None, 9 * h * w * c, 0))
            report.entries.append(LayerFlops(f"{name}.attn", "aewin", h, w, c, m, proj, math.floor(exact) - proj))
            report.entries.append(
                LayerFlops(f"{name}.mlp", "mlp", h, w, c, None, 2 * spec.mlp_ratio * h * w * c * c, 0)
            )
    c = spec.dims[-1]
    report.entries.append(LayerFlops("head", "classifier", 1, 1, c, None, c * spec.num_classes, 0))
    return report


def measured_macs(config: AewinConfig, h: int, w: int, shifted: bool = False, seed: int = 0) -> MacCounter:
    """Instrumented multiply-accumulate count of one AEWin attention layer."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((h, w, config.channels)))
    weights = AttentionWeights.random(config.channels, rng)
    forward = psw_aewin_forward if shifted else aewin_forward
    with count_macs() as counter:
        forward(x, weights, config)
    return counter


def measured_flops_check(config: AewinConfig, h: int, w: int) -> float:
    """Measured MACs of :func:`aewin_forward` over :func:`flops_aewin`."""
    counted = measured_macs(config, h, w).total
    return counted / flops_aewin(h, w, config.channels, config.window)


# --------------------------------------------------------------------------
# Text output
# --------------------------------------------------------------------------


def human(n: float) -> str:
    for unit, scale in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(n) >= scale:
            return f"{n / scale:.2f}{unit}"
    return str(n)


def format_table(headers: list[str], rows: list[list]) -> str:
    cells = [[str(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(wd) for h, wd in zip(headers, widths))]
    lines.append("  ".join("-" * wd for wd in widths))
    for r in cells:
        lines.append("  ".join(v.rjust(wd) if v.lstrip("-").isdigit() else v.ljust(wd) for v, wd in zip(r, widths)))
    return "\n".join(lines)


def format_csv(headers: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(headers)
    writer.writerows(rows)
    return buf.getvalue()


FLOPS_HEADERS = ["layer", "mechanism", "H", "W", "C", "M", "projection", "attention", "total"]


def flops_rows(report: FlopsReport) -> list[list]:
    return [
        [e.layer, e.mechanism, e.h, e.w, e.c, "" if e.m is None else e.m, e.projection, e.attention, e.total]
        for e in report.entries
    ]


def render_flops(report: FlopsReport, as_csv: bool = False, reference: float | None = None) -> str:
    rows = flops_rows(report)
    rows.append(["total", "", "", "", "", "", "", "", report.total])
    if as_csv:
        return format_csv(FLOPS_HEADERS, rows)
    out = [f"{report.spec} @ {report.image_size[0]}x{report.image_size[1]}", format_table(FLOPS_HEADERS, rows), ""]
    for mech, n in report.by_mechanism().items():
        out.append(f"{mech:>10}: {n:>14}  ({human(n)})")
    out.append(f"{'total':>10}: {report.total:>14}  ({human(report.total)})")
    if reference is not None:
        out.append(f"reference {human(reference)}, relative difference {(report.total - reference) / reference:+.1%}")
    out.extend(report.notes)
    return "\n".join(out)


def render_params(spec: ModelSpec, as_csv: bool = False, reference: float | None = None) -> str:
    report = param_count(spec)
    headers = ["section", "part", "params"]
    rows = [list(r) for r in report.rows()] + [["total", "", report.total]]
    if as_csv:
        return format_csv(headers, rows)
    out = [spec.name, format_table(headers, rows), f"total {report.total} ({human(report.total)})"]
    if reference is not None:
        out.append(f"reference {human(reference)}, relative difference {(report.total - reference) / reference:+.1%}")
    return "\n".join(out)
