"""Procedural toy dataset in the MVTec LOCO directory layout.

Every image shows a fixed arrangement of coloured parts on a grey canvas.
Logical anomalies break the arrangement (a part is missing, duplicated or
moved); structural anomalies overlay a patch of strong pixel noise. Part
segmentations and region masks are written next to the images so the
composition-map and localisation stages can be scored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import CompositionMap, DatasetIndex, load_dataset_index, save_composition_map, save_image

LOGICAL_KINDS = ("missing", "extra", "misplaced")
PARTS_DIR = "part_masks"


@dataclass(frozen=True)
class PartSpec:
    """One part class; ``positions`` lists the nominal ``(x, y)`` centre of each instance."""

    name: str
    shape: str  # "disk" or "square"
    color: tuple[float, float, float]
    size: int  # radius or half side
    positions: tuple[tuple[int, int], ...]


def _default_parts() -> tuple[PartSpec, ...]:
    return (
        PartSpec("red_disk", "disk", (0.85, 0.2, 0.2), 28, ((72, 76),)),
        PartSpec("green_square", "square", (0.2, 0.75, 0.3), 24, ((180, 76),)),
        PartSpec("blue_dot", "disk", (0.2, 0.3, 0.85), 14, ((84, 184), (172, 184))),
    )


@dataclass(frozen=True)
class ToySpec:
    category: str = "toy"
    size: int = 256
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_noise: float = 0.015
    jitter: int = 6
    color_jitter: float = 0.03
    parts: tuple[PartSpec, ...] = field(default_factory=_default_parts)
    train: int = 200
    validation: int = 20
    test_good: int = 50
    test_logical: int = 50
    test_structural: int = 50
    min_displacement: int = 48
    patch_size: tuple[int, int] = (24, 40)
    patch_noise: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.parts or any(not p.positions for p in self.parts):
            raise ValueError("toy spec needs at least one part with at least one instance")
        if self.train < 2 or self.validation < 1:
            raise ValueError("toy spec needs at least 2 train and 1 validation image")
        if any(p.shape not in ("disk", "square") for p in self.parts):
            raise ValueError("part shape must be 'disk' or 'square'")

    @property
    def num_parts(self) -> int:
        return len(self.parts)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> ToySpec:
        d = dict(d)
        if "parts" in d:
            d["parts"] = tuple(
                PartSpec(p["name"], p["shape"], tuple(p["color"]), int(p["size"]),
                         tuple(tuple(xy) for xy in p["positions"]))
                for p in d["parts"]
            )
        for key in ("background", "patch_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class _Instance:
    cls: int
    x: int
    y: int


@lru_cache(maxsize=4)
def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[:size, :size]


def _shape_mask(spec: ToySpec, part: PartSpec, x: int, y: int) -> np.ndarray:
    yy, xx = _grid(spec.size)
    if part.shape == "disk":
        return (xx - x) ** 2 + (yy - y) ** 2 <= part.size**2
    return (np.abs(xx - x) <= part.size) & (np.abs(yy - y) <= part.size)


def _layout(spec: ToySpec, rng: np.random.Generator) -> list[_Instance]:
    return [
        _Instance(c, x + int(rng.integers(-spec.jitter, spec.jitter + 1)),
                  y + int(rng.integers(-spec.jitter, spec.jitter + 1)))
        for c, part in enumerate(spec.parts, start=1)
        for x, y in part.positions
    ]


def _free_spot(spec: ToySpec, part: PartSpec, occupied: np.ndarray, rng: np.random.Generator,
               avoid: tuple[int, int] | None = None) -> tuple[int, int]:
    margin = part.size + 6
    for _ in range(1000):
        x, y = (int(v) for v in rng.integers(margin, spec.size - margin, size=2))
        if avoid is not None and np.hypot(x - avoid[0], y - avoid[1]) < spec.min_displacement:
            continue
        m = _shape_mask(spec, part, x, y)
        if not (m & occupied).any():
            return x, y
    raise RuntimeError("no free location for a part; the toy canvas is too crowded")


def _render(spec: ToySpec, instances: list[_Instance], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    img = np.empty((spec.size, spec.size, 3))
    img[:] = spec.background
    classes = np.zeros((spec.size, spec.size), dtype=np.int64)
    for inst in instances:
        part = spec.parts[inst.cls - 1]
        m = _shape_mask(spec, part, inst.x, inst.y)
        color = np.asarray(part.color) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
        img[m] = color
        classes[m] = inst.cls
    img += rng.normal(0.0, spec.pixel_noise, img.shape)
    return np.clip(img, 0, 1), classes


def _occupancy(spec: ToySpec, instances: list[_Instance], pad: int = 8) -> np.ndarray:
    occ = np.zeros((spec.size, spec.size), dtype=bool)
    for inst in instances:
        part = spec.parts[inst.cls - 1]
        padded = PartSpec(part.name, part.shape, part.color, part.size + pad, part.positions)
        occ |= _shape_mask(spec, padded, inst.x, inst.y)
    return occ


def _logical(spec: ToySpec, instances: list[_Instance], kind: str, rng: np.random.Generator):
    """Apply a logical defect; returns the new layout and the defect regions (before rendering)."""
    instances = list(instances)
    if kind == "missing":
        victim = instances.pop(int(rng.integers(len(instances))))
        return instances, [_shape_mask(spec, spec.parts[victim.cls - 1], victim.x, victim.y)]
    if kind == "extra":
        cls = int(rng.integers(1, spec.num_parts + 1))
        x, y = _free_spot(spec, spec.parts[cls - 1], _occupancy(spec, instances), rng)
        instances.append(_Instance(cls, x, y))
        return instances, [_shape_mask(spec, spec.parts[cls - 1], x, y)]
    if kind == "misplaced":
        i = int(rng.integers(len(instances)))
        moved = instances.pop(i)
        part = spec.parts[moved.cls - 1]
        x, y = _free_spot(spec, part, _occupancy(spec, instances), rng, avoid=(moved.x, moved.y))
        instances.insert(i, _Instance(moved.cls, x, y))
        old = _shape_mask(spec, part, moved.x, moved.y)
        new = _shape_mask(spec, part, x, y)
        return instances, [old & ~new, new]
    raise ValueError(f"unknown logical defect {kind!r}")


def _noise_patch(spec: ToySpec, img: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    side = int(rng.integers(spec.patch_size[0], spec.patch_size[1] + 1))
    x, y = (int(v) for v in rng.integers(8, spec.size - side - 8, size=2))
    mask = np.zeros(img.shape[:2], dtype=bool)
    mask[y : y + side, x : x + side] = True
    out = img.copy()
    out[mask] = np.clip(out[mask] + rng.normal(0.0, spec.patch_noise, (int(mask.sum()), 3)), 0, 1)
    return out, mask


def _save_regions(folder: Path, regions: list[np.ndarray]) -> None:
    from PIL import Image

    folder.mkdir(parents=True, exist_ok=True)
    for j, r in enumerate(regions):
        Image.fromarray(r.astype(np.uint8) * 255, mode="L").save(folder / f"{j:03d}.png")


def generate_toy_dataset(spec: ToySpec, out_root: str | Path) -> DatasetIndex:
    """Write ``<out_root>/<category>/`` in the LOCO layout and return its index.

    Alongside images the generator stores constructed part maps under
    ``part_masks/<record key>.png``, per-region masks under
    ``ground_truth/`` and a ``defects_config.json`` whose saturation area is
    the full region area. Output is a pure function of ``spec``.
    """
    root = Path(out_root) / spec.category
    num_classes = spec.num_parts + 1
    jobs = [("train", "good", None, spec.train), ("validation", "good", None, spec.validation),
            ("test", "good", None, spec.test_good), ("test", "logical_anomalies", "logical", spec.test_logical),
            ("test", "structural_anomalies", "structural", spec.test_structural)]
    manifest = []
    for job_id, (split, defect, anomaly, count) in enumerate(jobs):
        (root / split).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, job_id, i]))
            instances = _layout(spec, rng)
            regions: list[np.ndarray] = []
            kind = "good"
            if anomaly == "logical":
                kind = LOGICAL_KINDS[i % len(LOGICAL_KINDS)]
                instances, regions = _logical(spec, instances, kind, rng)
            img, classes = _render(spec, instances, rng)
            if anomaly == "structural":
                kind = "noise_patch"
                img, patch = _noise_patch(spec, img, rng)
                regions = [patch]
            stem = f"{i:03d}"
            save_image(img, root / split / defect / f"{stem}.png")
            save_composition_map(CompositionMap(classes, num_classes), root / PARTS_DIR / f"{_key(split, defect, stem)}.png")
            if regions:
                _save_regions(root / "ground_truth" / defect / stem, [r for r in regions if r.any()])
            manifest.append({"split": split, "defect": defect, "stem": stem, "kind": kind})
    defects = [{"defect_name": name, "pixel_value": 255, "saturation_threshold": 1.0, "relative_saturation": True}
               for name in ("logical_anomalies", "structural_anomalies")]
    (root / "defects_config.json").write_text(json.dumps(defects, indent=2))
    (root / "toy_spec.json").write_text(json.dumps(spec.to_json(), indent=2))
    (root / "toy_manifest.json").write_text(json.dumps(manifest, indent=1))
    return load_dataset_index(root)


def _key(split: str, defect: str, stem: str) -> str:
    # same scheme as SampleRecord.key, so part_masks/ can serve as compmaps_dir
    return f"test/{defect}/{stem}" if split == "test" else f"{split}/{stem}"


def load_part_map(category_root: str | Path, split: str, defect: str, stem: str) -> CompositionMap:
    from .data import load_composition_map

    return load_composition_map(Path(category_root) / PARTS_DIR / f"{_key(split, defect, stem)}.png")


def toy_kinds(category_root: str | Path) -> dict[str, str]:
    """``record key -> defect kind`` from the generator manifest."""
    entries = json.loads((Path(category_root) / "toy_manifest.json").read_text())
    out = {}
    for e in entries:
        key = _key(e["split"], e["defect"], e["stem"])
        out[key] = e["kind"]
    return out
