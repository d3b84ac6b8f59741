"""Synthetic three-class orientation images.

Class 0 is horizontal stripes, class 1 vertical stripes, class 2 a
checkerboard.  Stripes are one patch thick and checker blocks one window of
patches wide, so each class lines up with one head group (rows, columns,
windows).  Each example is a pure function of ``(seed, index)``.
"""

from __future__ import annotations

import numpy as np

NUM_CLASSES = 3
CLASS_NAMES = ("horizontal", "vertical", "checkerboard")


def synthetic_example(
    seed: int,
    index: int,
    size: int = 32,
    patch: int = 4,
    window: int = 2,
    noise: float = 0.3,
) -> tuple[np.ndarray, int]:
    """One ``[size, size, 3]`` image and its label (``index % 3``)."""
    rng = np.random.default_rng([seed, index])
    label = index % NUM_CLASSES
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    if label == 2:
        block = patch * window
        py, px = rng.integers(0, 2 * block, size=2)
        parity = ((rows + py) // block + (cols + px) // block) % 2
    else:
        phase = rng.integers(0, 2 * patch)
        axis = rows if label == 0 else cols
        parity = np.broadcast_to((axis + phase) // patch % 2, (size, size))
    pattern = np.where(parity == 0, 1.0, 0.0)
    image = pattern[:, :, None] + noise * rng.standard_normal((size, size, 3))
    return image, label


def synthetic_batch(seed: int, indices, **kwargs) -> tuple[np.ndarray, np.ndarray]:
    pairs = [synthetic_example(seed, int(i), **kwargs) for i in indices]
    return np.stack([p[0] for p in pairs]), np.array([p[1] for p in pairs])
