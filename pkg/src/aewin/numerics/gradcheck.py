"""Central-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import GradTape, Tensor

REL_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    base = np.array(x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty(flat.shape)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base)))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base)))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


def _scalar(y: Tensor) -> float:
    if y.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    return y.item()


def grad_check_many(
    f: Callable[[dict[str, Tensor]], Tensor],
    inputs: Mapping[str, Tensor],
    h: float = 1e-5,
) -> dict[str, float]:
    """Max relative error per named input of ``f``.

    ``f`` receives a dict with the same keys as ``inputs``.  Every input is
    differentiated; the others are held at their base values while one is
    perturbed.
    """
    leaves = {k: Tensor(v.data, requires_grad=True) for k, v in inputs.items()}
    with GradTape() as tape:
        y = f(leaves)
    _scalar(y)
    names = list(leaves)
    grads = dict(zip(names, tape.gradient(y, [leaves[k] for k in names])))

    errors = {}
    for name in names:
        rest = {k: Tensor(v.data) for k, v in inputs.items()}

        def partial(t: Tensor, name=name, rest=rest) -> Tensor:
            return f({**rest, name: t})

        numeric = numeric_gradient(partial, inputs[name].data, h)
        errors[name] = relative_error(grads[name].data, numeric)
    return errors


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of scalar ``f`` at ``x``
    and central differences with step ``h``.

    The per-coordinate denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    return grad_check_many(lambda d: f(d["x"]), {"x": x}, h)["x"]
