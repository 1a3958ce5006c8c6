"""Procedural fixtures shared by several test modules."""

from __future__ import annotations

import numpy as np

from salad.data import CompositionMap


def random_composition_map(rng: np.random.Generator, size: int = 256, num_classes: int = 4,
                           n_shapes: int = 6) -> CompositionMap:
    """Background plus a handful of rectangles and disks of random part classes."""
    classes = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[:size, :size]
    for _ in range(n_shapes):
        cls = int(rng.integers(1, num_classes))
        cx, cy = rng.integers(size // 8, size - size // 8, 2)
        r = int(rng.integers(size // 16, size // 6))
        if rng.random() < 0.5:
            m = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            m = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r // 2 + 2)
        classes[m] = cls
    return CompositionMap(classes, num_classes)
