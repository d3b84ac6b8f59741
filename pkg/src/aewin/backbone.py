"""Hierarchical AEWin backbone: patch embedding, four stages of AEWin blocks
with patch merging in between, mean pooling and a linear classifier.

Parameters live in a flat ``dict[str, Tensor]``; :func:`param_shapes` is the
single source of the naming scheme and shapes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AewinConfig, AttentionWeights, BlockMode, DivisibilityError, aewin_forward, psw_aewin_forward
from .numerics import (
    ContainerError,
    Tensor,
    add,
    depthwise_conv3x3,
    gelu,
    layer_norm,
    linear,
    load_tensors,
    mean,
    save_tensors,
    space_to_depth,
)

IN_CHANS = 3
INIT_STD = 0.02


@dataclass(frozen=True)
class StageSpec:
    depth: int
    dim: int
    heads: int
    window: int


@dataclass(frozen=True)
class ModelSpec:
    name: str
    dims: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    heads: tuple[int, int, int, int]
    window: int = 7
    patch_size: int = 4
    num_classes: int = 1000
    mlp_ratio: int = 4

    def __post_init__(self):
        for key in ("dims", "depths", "heads"):
            value = tuple(int(v) for v in getattr(self, key))
            if len(value) != 4:
                raise ValueError(f"{key} needs exactly 4 entries, got {value}")
            object.__setattr__(self, key, value)
        if any(d < 1 for d in self.depths):
            raise ValueError(f"stage depths must be >= 1, got {self.depths}")
        for a, b in zip(self.dims, self.dims[1:]):
            if b != 2 * a:
                raise ValueError(f"stage dims must double, got {self.dims}")
        for dim, k in zip(self.dims, self.heads):
            AewinConfig(dim, k, self.window)
        if self.patch_size < 1 or self.num_classes < 1 or self.mlp_ratio < 1 or self.window < 1:
            raise ValueError(f"invalid spec {self}")

    @property
    def stages(self) -> list[StageSpec]:
        return [StageSpec(d, c, k, self.window) for d, c, k in zip(self.depths, self.dims, self.heads)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


PRESETS = {
    "aewin-t": ModelSpec("aewin-t", (64, 128, 256, 512), (2, 2, 16, 2), (4, 4, 8, 16)),
    "aewin-b": ModelSpec("aewin-b", (96, 192, 384, 768), (2, 4, 24, 2), (4, 8, 16, 32)),
    "aewin-toy": ModelSpec("aewin-toy", (8, 16, 32, 64), (2, 2, 2, 2), (4, 4, 4, 4), window=2, num_classes=3),
}


def load_spec(name_or_path: str | os.PathLike) -> ModelSpec:
    """A preset name or a JSON file with the :class:`ModelSpec` fields."""
    key = str(name_or_path)
    if key in PRESETS:
        return PRESETS[key]
    if not os.path.exists(key):
        raise ValueError(f"unknown spec {key!r}: not a preset ({', '.join(PRESETS)}) or a file")
    with open(key) as fh:
        fields = json.load(fh)
    return ModelSpec(**fields)


def stage_resolutions(spec: ModelSpec, height: int, width: int) -> list[tuple[int, int]]:
    """Token grid of each stage; raises if the downsampling does not divide."""
    p = spec.patch_size
    if height % p or width % p:
        raise DivisibilityError(f"image {height}x{width} not divisible by patch size {p}")
    h, w = height // p, width // p
    out = [(h, w)]
    for stage in range(1, 4):
        if h % 2 or w % 2:
            raise DivisibilityError(f"stage {stage + 1}: cannot merge an odd {h}x{w} map")
        h, w = h // 2, w // 2
        out.append((h, w))
    return out


def stage_config(spec: ModelSpec, stage: int, h: int, w: int) -> AewinConfig:
    """Attention config of a stage at an ``h x w`` grid.

    A grid smaller than the window in either axis uses a window of
    ``min(h, w)`` instead.
    """
    s = spec.stages[stage]
    m = s.window if (h >= s.window and w >= s.window) else min(h, w)
    if h % m or w % m:
        raise DivisibilityError(f"stage {stage + 1}: {h}x{w} grid not divisible into {m}x{m} windows")
    return AewinConfig(s.dim, s.heads, m)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


def linear_param_count(cin: int, cout: int, bias: bool = True) -> int:
    return cin * cout + (cout if bias else 0)


def _norm(prefix: str, c: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.gamma": (c,), f"{prefix}.beta": (c,)}


def block_shapes(prefix: str, c: int, mlp_ratio: int) -> dict[str, tuple[int, ...]]:
    hidden = mlp_ratio * c
    shapes = {f"{prefix}.cpe": (3, 3, c)}
    shapes |= _norm(f"{prefix}.norm1", c)
    shapes |= {f"{prefix}.attn.{n}": (c, c) for n in ("wq", "wk", "wv", "wo")}
    shapes |= {f"{prefix}.attn.{n}": (c,) for n in ("bq", "bv", "bo")}
    shapes |= _norm(f"{prefix}.norm2", c)
    shapes |= {
        f"{prefix}.mlp.fc1.weight": (c, hidden),
        f"{prefix}.mlp.fc1.bias": (hidden,),
        f"{prefix}.mlp.fc2.weight": (hidden, c),
        f"{prefix}.mlp.fc2.bias": (c,),
    }
    return shapes


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    p = spec.patch_size
    d0 = spec.dims[0]
    shapes = {"patch_embed.weight": (p * p * IN_CHANS, d0), "patch_embed.bias": (d0,)}
    shapes |= _norm("patch_embed.norm", d0)
    for i, stage in enumerate(spec.stages):
        if i > 0:
            cin = spec.dims[i - 1]
            shapes |= _norm(f"stages.{i}.merge.norm", 4 * cin)
            shapes |= {f"stages.{i}.merge.weight": (4 * cin, stage.dim), f"stages.{i}.merge.bias": (stage.dim,)}
        for j in range(stage.depth):
            shapes |= block_shapes(f"stages.{i}.blocks.{j}", stage.dim, spec.mlp_ratio)
    c = spec.dims[-1]
    shapes |= _norm("head.norm", c)
    shapes |= {"head.weight": (c, spec.num_classes), "head.bias": (spec.num_classes,)}
    return shapes


def _is_projection(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("weight", "wq", "wk", "wv", "wo", "cpe")


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_weights(spec: ModelSpec, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if _is_projection(name):
            arr = trunc_normal(rng, shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr)
    return params


@dataclass
class ParamReport:
    total: int
    breakdown: dict[str, dict[str, int]] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, int]]:
        return [(section, part, n) for section, parts in self.breakdown.items() for part, n in parts.items()]


def _param_part(name: str) -> tuple[str, str]:
    parts = name.split(".")
    if parts[0] == "patch_embed":
        return "patch_embed", "norm" if parts[1] == "norm" else "projection"
    if parts[0] == "head":
        return "head", "norm" if parts[1] == "norm" else "classifier"
    section = f"stage{int(parts[1]) + 1}"
    if parts[2] == "merge":
        return section, "merge"
    kind = parts[4]
    return section, {"norm1": "norm", "norm2": "norm"}.get(kind, kind)


def param_count(spec: ModelSpec) -> ParamReport:
    report = ParamReport(total=0)
    for name, shape in param_shapes(spec).items():
        n = math.prod(shape)
        section, part = _param_part(name)
        bucket = report.breakdown.setdefault(section, {})
        bucket[part] = bucket.get(part, 0) + n
        report.total += n
    return report


def save_weights(path: str | os.PathLike, params: dict[str, Tensor], spec: ModelSpec) -> None:
    _check_params(params, spec)
    save_tensors(path, {k: params[k] for k in param_shapes(spec)}, meta={"spec": spec.to_json()})


def load_weights(path: str | os.PathLike, spec: ModelSpec | None = None) -> tuple[dict[str, Tensor], ModelSpec]:
    """Read a weight container, validated against ``spec`` (default: the spec stored in the file)."""
    tensors, meta = load_tensors(path)
    if spec is None:
        if "spec" not in meta:
            raise ContainerError(f"{path}: no spec stored; pass one explicitly")
        spec = ModelSpec(**json.loads(meta["spec"]))
    _check_params(tensors, spec)
    return tensors, spec


def _check_params(params: dict[str, Tensor], spec: ModelSpec) -> None:
    shapes = param_shapes(spec)
    for name, shape in shapes.items():
        if name not in params:
            raise ContainerError(f"missing tensor {name!r} for spec {spec.name}")
        if params[name].shape != shape:
            raise ContainerError(
                f"tensor {name!r} has shape {params[name].shape}, spec {spec.name} expects {shape}"
            )
    extra = sorted(set(params) - set(shapes))
    if extra:
        raise ContainerError(f"unexpected tensor {extra[0]!r} for spec {spec.name}")


# --------------------------------------------------------------------------
# Forward
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockParams:
    cpe: Tensor
    norm1: tuple[Tensor, Tensor]
    attn: AttentionWeights
    norm2: tuple[Tensor, Tensor]
    fc1: tuple[Tensor, Tensor]
    fc2: tuple[Tensor, Tensor]

    @classmethod
    def from_params(cls, params: dict[str, Tensor], prefix: str) -> "BlockParams":
        g = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
        return cls(
            cpe=g("cpe"),
            norm1=(g("norm1.gamma"), g("norm1.beta")),
            attn=AttentionWeights(
                g("attn.wq"), g("attn.wk"), g("attn.wv"), g("attn.wo"),
                g("attn.bq"), g("attn.bv"), g("attn.bo"),
            ),
            norm2=(g("norm2.gamma"), g("norm2.beta")),
            fc1=(g("mlp.fc1.weight"), g("mlp.fc1.bias")),
            fc2=(g("mlp.fc2.weight"), g("mlp.fc2.bias")),
        )


def patch_embed(image: Tensor, params: dict[str, Tensor], patch_size: int = 4) -> Tensor:
    """Linear projection of flattened ``p x p`` patches followed by layer norm."""
    x = space_to_depth(image, patch_size)
    x = linear(x, params["patch_embed.weight"], params["patch_embed.bias"])
    return layer_norm(x, params["patch_embed.norm.gamma"], params["patch_embed.norm.beta"])


def patch_merge(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Concatenate each 2x2 neighbourhood (row-major), normalize, project 4C -> 2C."""
    y = space_to_depth(x, 2)
    y = layer_norm(y, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"])
    return linear(y, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def cpe(x: Tensor, kernels: Tensor) -> Tensor:
    return add(x, depthwise_conv3x3(x, kernels))


def aewin_block(x: Tensor, p: BlockParams, config: AewinConfig, mode: BlockMode) -> Tensor:
    y = cpe(x, p.cpe)
    attend = psw_aewin_forward if mode is BlockMode.SHIFTED else aewin_forward
    z = add(y, attend(layer_norm(y, *p.norm1), p.attn, config))
    hidden = gelu(linear(layer_norm(z, *p.norm2), *p.fc1))
    return add(z, linear(hidden, *p.fc2))


def block_mode(index: int) -> BlockMode:
    return BlockMode.REGULAR if index % 2 == 0 else BlockMode.SHIFTED


@dataclass
class ForwardTrace:
    """Shapes and modes observed during :func:`model_forward`."""

    embed_shape: tuple[int, ...] | None = None
    stage_shapes: list[tuple[int, ...]] = field(default_factory=list)
    blocks: list[tuple[int, int, BlockMode]] = field(default_factory=list)
    windows: list[int] = field(default_factory=list)


def model_forward(
    image: Tensor,
    params: dict[str, Tensor],
    spec: ModelSpec,
    trace: ForwardTrace | None = None,
) -> Tensor:
    """Logits ``[..., num_classes]`` for images ``[..., H, W, 3]``."""
    stage_resolutions(spec, image.shape[-3], image.shape[-2])
    x = patch_embed(image, params, spec.patch_size)
    if trace is not None:
        trace.embed_shape = x.shape
    for i in range(4):
        if i > 0:
            x = patch_merge(x, params, f"stages.{i}.merge")
        config = stage_config(spec, i, x.shape[-3], x.shape[-2])
        for j in range(spec.depths[i]):
            mode = block_mode(j)
            x = aewin_block(x, BlockParams.from_params(params, f"stages.{i}.blocks.{j}"), config, mode)
            if trace is not None:
                trace.blocks.append((i, j, mode))
        if trace is not None:
            trace.stage_shapes.append(x.shape)
            trace.windows.append(config.window)
    pooled = mean(x, (-3, -2))
    pooled = layer_norm(pooled, params["head.norm.gamma"], params["head.norm.beta"])
    return linear(pooled, params["head.weight"], params["head.bias"])
