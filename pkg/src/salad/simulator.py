"""Synthetic anomalies on composition maps.

Three strategies produce an augmented map and its ground-truth mask:

* ``perlin_paste``: a random class pasted under a binarised Perlin mask,
* ``component_removal``: one component erased and refilled with a class
  sampled from its surrounding ring,
* ``component_inpaint``: one component copied in from another map at its
  original coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import CompositionMap

KINDS = ("perlin_paste", "component_inpaint", "component_removal", "none")
EIGHT = np.ones((3, 3), dtype=bool)
MAX_ATTEMPTS = 10


@dataclass(frozen=True)
class SyntheticSample:
    augmented: CompositionMap
    gt_mask: np.ndarray
    kind: str


@dataclass(frozen=True)
class Component:
    mask: np.ndarray
    class_id: int
    area: int


def _clean(c: CompositionMap) -> SyntheticSample:
    return SyntheticSample(CompositionMap(c.classes.copy(), c.num_classes), np.zeros(c.shape, dtype=bool), "none")


def perlin_noise(height: int, width: int, res: tuple[int, int], rng: np.random.Generator, octaves: int = 1) -> np.ndarray:
    """Gradient noise with ``res = (cells_y, cells_x)`` lattice cells across the frame.

    ``octaves > 1`` sums further octaves at doubled frequency and halved amplitude.
    """
    total = np.zeros((height, width))
    amp = 1.0
    for o in range(octaves):
        ry, rx = res[0] * 2**o, res[1] * 2**o
        angles = 2 * math.pi * rng.random((ry + 1, rx + 1))
        grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        u = (np.arange(height) + 0.5) / height * ry
        v = (np.arange(width) + 0.5) / width * rx
        iy, ix = np.floor(u).astype(int), np.floor(v).astype(int)
        fy, fx = (u - iy)[:, None], (v - ix)[None, :]

        def corner(dy, dx):
            g = grads[np.ix_(iy + dy, ix + dx)]
            return g[..., 0] * (fy - dy) + g[..., 1] * (fx - dx)

        def fade(t):
            return 6 * t**5 - 15 * t**4 + 10 * t**3

        ty, tx = fade(fy), fade(fx)
        top = corner(0, 0) + tx * (corner(0, 1) - corner(0, 0))
        bottom = corner(1, 0) + tx * (corner(1, 1) - corner(1, 0))
        total += amp * (top + ty * (bottom - top))
        amp *= 0.5
    return total


def perlin_mask(height: int, width: int, seed, threshold: float = 0.5, max_power: int = 5) -> np.ndarray:
    """Binary Perlin mask with per-axis period ``2**p``, ``p`` uniform in ``{1..max_power}``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    py, px = rng.integers(1, max_power + 1, size=2)
    noise = perlin_noise(height, width, (2**int(py), 2**int(px)), rng)
    lo, hi = noise.min(), noise.max()
    if hi - lo <= 0:
        return np.zeros((height, width), dtype=bool)
    return (noise - lo) / (hi - lo) > threshold


def simulate_structural(c: CompositionMap, seed) -> SyntheticSample:
    rng = np.random.default_rng(seed)
    h, w = c.shape
    for _ in range(MAX_ATTEMPTS):
        target = int(rng.integers(0, c.num_classes))
        mask = perlin_mask(h, w, rng)
        changed = mask & (c.classes != target)
        if changed.any():
            out = c.classes.copy()
            out[mask] = target
            return SyntheticSample(CompositionMap(out, c.num_classes), changed, "perlin_paste")
    return _clean(c)


def connected_components(c: CompositionMap, min_area: int = 50) -> list[Component]:
    """8-connected components of every part class, smaller than ``min_area`` dropped."""
    out = []
    for cls in range(1, c.num_classes):
        labels, n = ndimage.label(c.classes == cls, structure=EIGHT)
        if n == 0:
            continue
        areas = np.bincount(labels.ravel(), minlength=n + 1)
        for lab in range(1, n + 1):
            if areas[lab] >= min_area:
                out.append(Component(labels == lab, cls, int(areas[lab])))
    return out


def simulate_removal(c: CompositionMap, seed, min_area: int = 50, ring_width: int = 5,
                     components: list[Component] | None = None) -> SyntheticSample:
    rng = np.random.default_rng(seed)
    comps = components if components is not None else connected_components(c, min_area)
    if not comps:
        return _clean(c)
    for _ in range(MAX_ATTEMPTS):
        comp = comps[int(rng.integers(len(comps)))]
        ring = ndimage.binary_dilation(comp.mask, structure=EIGHT, iterations=ring_width) & ~comp.mask
        ring_classes = c.classes[ring]
        ring_classes = ring_classes[ring_classes != comp.class_id]
        if ring_classes.size == 0:
            continue
        freq = np.bincount(ring_classes, minlength=c.num_classes).astype(np.float64)
        fill = int(rng.choice(c.num_classes, p=freq / freq.sum()))
        out = c.classes.copy()
        out[comp.mask] = fill
        labels, _ = ndimage.label(out == fill, structure=EIGHT)
        merged = labels == labels[comp.mask][0]
        return SyntheticSample(CompositionMap(out, c.num_classes), merged, "component_removal")
    return _clean(c)


def simulate_inpaint(c: CompositionMap, source: CompositionMap, seed, min_area: int = 50,
                     components: list[Component] | None = None) -> SyntheticSample:
    if source.shape != c.shape or source.num_classes != c.num_classes:
        raise ValueError("source map must match the target's shape and class count")
    rng = np.random.default_rng(seed)
    comps = components if components is not None else connected_components(source, min_area)
    if not comps:
        return _clean(c)
    for _ in range(MAX_ATTEMPTS):
        comp = comps[int(rng.integers(len(comps)))]
        if np.all(c.classes[comp.mask] == comp.class_id):
            continue
        out = c.classes.copy()
        out[comp.mask] = comp.class_id
        return SyntheticSample(CompositionMap(out, c.num_classes), out == comp.class_id, "component_inpaint")
    return _clean(c)


def sample_training_example(
    c: CompositionMap,
    corpus: list[CompositionMap],
    seed,
    p_anomaly: float = 0.5,
    exclude: int | None = None,
    strategies: tuple[str, ...] = ("perlin_paste", "component_inpaint", "component_removal"),
    min_area: int = 50,
    component_cache: dict[int, list[Component]] | None = None,
) -> SyntheticSample:
    """Clean with probability ``1 - p_anomaly``, otherwise a uniformly chosen strategy.

    ``exclude`` is the corpus index of ``c`` itself, never used as an
    inpainting source. ``component_cache`` maps corpus indices to
    precomputed components and only saves time.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    rng = np.random.default_rng(seed)
    if rng.random() >= p_anomaly:
        return _clean(c)
    kind = strategies[int(rng.integers(len(strategies)))]
    sub_seed = int(rng.integers(2**63))
    cache = component_cache if component_cache is not None else {}
    if kind == "perlin_paste":
        return simulate_structural(c, sub_seed)
    if kind == "component_removal":
        return simulate_removal(c, sub_seed, min_area, components=cache.get(exclude) if exclude is not None else None)
    candidates = [i for i in range(len(corpus)) if i != exclude] or [0]
    src = candidates[int(rng.integers(len(candidates)))]
    return simulate_inpaint(c, corpus[src], sub_seed, min_area, components=cache.get(src))


def check_invariants(source: CompositionMap, sample: SyntheticSample) -> list[str]:
    """Violations of the kind-specific ground-truth rules (empty list when valid)."""
    problems = []
    a, g = sample.augmented.classes, sample.gt_mask
    if a.min() < 0 or a.max() >= source.num_classes:
        problems.append("class values out of range")
    changed = a != source.classes
    if sample.kind == "none":
        if g.any() or changed.any():
            problems.append("clean sample differs from source or has non-empty gt")
        return problems
    if not g.any() or not changed.any():
        problems.append("anomalous sample without change or gt")
    if sample.kind == "perlin_paste" and not np.array_equal(g, changed):
        problems.append("perlin gt != changed pixels")
    if sample.kind == "component_removal" and not np.all(g[changed]):
        problems.append("removal gt does not cover the erased component")
    if sample.kind == "component_inpaint":
        pasted = np.unique(a[changed])
        if len(pasted) != 1 or not np.array_equal(g, a == pasted[0]):
            problems.append("inpaint gt != all pixels of the pasted class")
    return problems
