"""Core value types, dataset indexing and composition-map persistence.

The dataset layout follows the MVTec LOCO convention::

    <root>/<category>/train/good/*.png
    <root>/<category>/validation/good/*.png
    <root>/<category>/test/{good,logical_anomalies,structural_anomalies}/*.png
    <root>/<category>/ground_truth/<defect>/<image stem>/*.png
    <root>/<category>/defects_config.json
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

RESOLUTION = 256
SPLITS = ("train", "validation", "test")
LABELS = ("good", "logical_anomaly", "structural_anomaly", "unknown")
TEST_FOLDERS = {
    "good": "good",
    "logical_anomalies": "logical_anomaly",
    "structural_anomalies": "structural_anomaly",
}
COMPMAP_PIPELINE_VERSION = "1"


class ConfigurationError(RuntimeError):
    """Raised when a dataset root, backend or run configuration is unusable."""


class SerializationError(ValueError):
    pass


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    source_path: str = ""
    split: str = "test"
    label: str = "unknown"

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("non-finite pixel values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")


@dataclass(frozen=True)
class CompositionMap:
    """Per-pixel component class indices; 0 is background, 1..K are parts."""

    classes: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        if self.classes.ndim != 2:
            raise ValueError(f"composition map must be 2-D, got {self.classes.shape}")
        if not np.issubdtype(self.classes.dtype, np.integer):
            raise ValueError("composition map must hold integers")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.classes.size and (self.classes.min() < 0 or self.classes.max() >= self.num_classes):
            raise ValueError(f"class values must lie in [0, {self.num_classes - 1}]")

    @property
    def K(self) -> int:
        return self.num_classes - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CompositionMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.classes, other.classes)


@dataclass(frozen=True)
class AnomalyMap:
    scores: np.ndarray
    value_range: tuple[float, float] = (0.0, math.inf)

    def __post_init__(self) -> None:
        if self.scores.ndim != 2:
            raise ValueError("anomaly map must be 2-D")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("anomaly map contains non-finite values")
        lo, hi = self.value_range
        if self.scores.size and (self.scores.min() < lo or self.scores.max() > hi):
            raise ValueError(f"anomaly map values outside declared range {self.value_range}")


@dataclass(frozen=True)
class SampleRecord:
    path: Path
    split: str
    label: str
    defect: str = "good"  # subfolder name under test/
    gt_dir: Path | None = None

    @property
    def stem(self) -> str:
        return self.path.stem

    @property
    def key(self) -> str:
        """Cache-relative key, unique within a category."""
        if self.split == "test":
            return f"test/{self.defect}/{self.stem}"
        return f"{self.split}/{self.stem}"


@dataclass(frozen=True)
class CategoryIndex:
    name: str
    root: Path
    samples: dict[str, tuple[SampleRecord, ...]]
    defects_config: tuple[dict, ...] | None = None

    def split(self, name: str) -> tuple[SampleRecord, ...]:
        return self.samples.get(name, ())

    @property
    def has_ground_truth(self) -> bool:
        return self.defects_config is not None and any(r.gt_dir is not None for r in self.split("test"))


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    categories: dict[str, CategoryIndex] = field(default_factory=dict)
    split_seed: int | None = None

    def __getitem__(self, category: str) -> CategoryIndex:
        return self.categories[category]


def _pngs(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() == ".png")


def _index_category(cat_root: Path, layout: str) -> CategoryIndex:
    samples: dict[str, list[SampleRecord]] = {s: [] for s in SPLITS}
    if layout == "flat":
        for split in SPLITS:
            folder = cat_root / split
            if folder.is_dir():
                label = "good" if split != "test" else "unknown"
                samples[split] = [SampleRecord(p, split, label) for p in _pngs(folder)]
    else:
        for split in ("train", "validation"):
            folder = cat_root / split / "good"
            if not folder.is_dir():
                raise ConfigurationError(f"missing split: {folder}")
            samples[split] = [SampleRecord(p, split, "good") for p in _pngs(folder)]
            extra = [d.name for d in (cat_root / split).iterdir() if d.is_dir() and d.name != "good"]
            if extra:
                raise ConfigurationError(f"{split} split must contain only good samples, found {extra}")
        test_root = cat_root / "test"
        if not test_root.is_dir():
            raise ConfigurationError(f"missing split: {test_root}")
        gt_root = cat_root / "ground_truth"
        for sub in sorted(d.name for d in test_root.iterdir() if d.is_dir()):
            label = TEST_FOLDERS.get(sub, "unknown")
            for p in _pngs(test_root / sub):
                gt_dir = gt_root / sub / p.stem
                samples["test"].append(
                    SampleRecord(p, "test", label, sub, gt_dir if gt_dir.is_dir() else None)
                )
    if not samples["train"]:
        raise ConfigurationError(f"empty train split in {cat_root}")
    defects = None
    cfg = cat_root / "defects_config.json"
    if cfg.is_file():
        defects = tuple(json.loads(cfg.read_text()))
    elif layout == "loco":
        logger.warning("%s: no defects_config.json, localization evaluation disabled", cat_root.name)
    return CategoryIndex(
        cat_root.name,
        cat_root,
        {k: tuple(sorted(v, key=lambda r: str(r.path))) for k, v in samples.items()},
        defects,
    )


def load_dataset_index(root: str | Path, layout: str = "loco", categories: list[str] | None = None) -> DatasetIndex:
    """Index every category directory under ``root``.

    A category directory is any child holding a ``train`` folder. ``layout``
    is ``"loco"`` (MVTec LOCO tree) or ``"flat"`` (``train/``, ``validation/``
    and ``test/`` holding PNGs directly).
    """
    root = Path(root)
    if layout not in ("loco", "flat"):
        raise ConfigurationError(f"unrecognized layout {layout!r}")
    if not root.is_dir():
        raise ConfigurationError(f"dataset root does not exist: {root}")
    if (root / "train").is_dir():
        cat_dirs = [root]
    else:
        cat_dirs = sorted(d for d in root.iterdir() if (d / "train").is_dir())
    if categories is not None:
        cat_dirs = [d for d in cat_dirs if d.name in categories]
        missing = set(categories) - {d.name for d in cat_dirs}
        if missing:
            raise ConfigurationError(f"categories not found under {root}: {sorted(missing)}")
    if not cat_dirs:
        raise ConfigurationError(f"no categories found under {root}")
    cats = {}
    for d in cat_dirs:
        cat = _index_category(d, layout)
        cats[cat.name] = cat
    return DatasetIndex(root, cats)


def carve_validation_split(
    index: CategoryIndex, fraction: float = 0.1, seed: int = 0
) -> tuple[CategoryIndex, CategoryIndex]:
    """Move ``ceil(fraction * N)`` train samples into the validation split.

    Returns ``(train_only, validation_only)`` indexes; the selection is a
    seeded uniform shuffle so identical seeds give identical partitions.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    train = index.split("train")
    if not train:
        raise ValueError("train split is empty")
    n_val = math.ceil(fraction * len(train))
    if n_val >= len(train):
        logger.warning("validation carve takes all %d train samples", len(train))
    order = np.random.default_rng(seed).permutation(len(train))
    val_ids = set(order[:n_val].tolist())
    keep = tuple(r for i, r in enumerate(train) if i not in val_ids)
    val = tuple(
        SampleRecord(r.path, "validation", r.label, r.defect, r.gt_dir)
        for i, r in enumerate(train)
        if i in val_ids
    )
    base = {k: v for k, v in index.samples.items() if k not in ("train", "validation")}
    return (
        CategoryIndex(index.name, index.root, {**base, "train": keep, "validation": ()}, index.defects_config),
        CategoryIndex(index.name, index.root, {"train": (), "validation": val}, index.defects_config),
    )


def with_carved_validation(index: CategoryIndex, fraction: float = 0.1, seed: int = 0) -> CategoryIndex:
    """Category index whose validation split is carved from train when absent."""
    if index.split("validation"):
        return index
    train, val = carve_validation_split(index, fraction, seed)
    return CategoryIndex(
        index.name, index.root, {**train.samples, "validation": val.split("validation")}, index.defects_config
    )


# images ---------------------------------------------------------------------


def resize_image(pixels: np.ndarray, size: int = RESOLUTION) -> np.ndarray:
    if pixels.shape[:2] == (size, size):
        return pixels
    img = Image.fromarray((np.clip(pixels, 0, 1) * 255).round().astype(np.uint8))
    out = img.resize((size, size), Image.BILINEAR)
    return np.asarray(out, dtype=np.float32) / 255.0


def resize_classes(classes: np.ndarray, size: int = RESOLUTION) -> np.ndarray:
    """Nearest-neighbour resize; class maps are never interpolated."""
    if classes.shape == (size, size):
        return classes
    img = Image.fromarray(classes.astype(np.uint8))
    return np.asarray(img.resize((size, size), Image.NEAREST)).astype(classes.dtype)


def load_image(path: str | Path, split: str = "test", label: str = "unknown", size: int = RESOLUTION) -> ImageSample:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
        if img.size == (size, size):
            pixels = arr.astype(np.float32) / 255.0
        else:
            pixels = np.asarray(img.convert("RGB").resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
    return ImageSample(pixels, str(path), split, label)


def load_record(record: SampleRecord, size: int = RESOLUTION) -> ImageSample:
    return load_image(record.path, record.split, record.label, size)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(pixels, 0, 1) * 255).round().astype(np.uint8)).save(path)


def load_region_masks(record: SampleRecord, size: int = RESOLUTION) -> list[tuple[np.ndarray, int]]:
    """Ground-truth regions of a test image as ``(mask, pixel_value)`` pairs."""
    if record.gt_dir is None:
        return []
    out = []
    for p in _pngs(record.gt_dir):
        with Image.open(p) as img:
            arr = np.asarray(img.convert("L"))
        value = int(arr.max())
        mask = arr > 0
        if mask.shape != (size, size):
            mask = resize_classes(mask.astype(np.uint8), size).astype(bool)
        if mask.any():
            out.append((mask, value))
    return out


def saturation_area(defects_config, pixel_value: int, region_area: int) -> float:
    """Saturation threshold for a region, following ``defects_config.json``."""
    for entry in defects_config:
        if int(entry["pixel_value"]) == pixel_value:
            thr = float(entry["saturation_threshold"])
            if entry.get("relative_saturation", False):
                return thr * region_area
            return thr
    raise ConfigurationError(f"no saturation config for pixel value {pixel_value}")


# composition maps ------------------------------------------------------------


def _palette(n: int = 256) -> list[int]:
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 256, size=(n, 3))
    pal[0] = 0
    base = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25), (245, 130, 48), (145, 30, 180),
            (70, 240, 240), (240, 50, 230)]
    for i, c in enumerate(base, start=1):
        pal[i] = c
    return pal.astype(int).ravel().tolist()


PALETTE = _palette()


def _read_meta(folder: Path) -> dict:
    meta = folder / "meta.json"
    return json.loads(meta.read_text()) if meta.is_file() else {}


def write_compmap_meta(folder: str | Path, num_classes: int, seed: int | None = None, **extra) -> None:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    meta = _read_meta(folder)
    if meta and meta.get("num_classes") != num_classes:
        raise SerializationError(
            f"{folder}/meta.json records num_classes={meta.get('num_classes')}, refusing to store {num_classes}"
        )
    meta.update({"num_classes": num_classes, "pipeline_version": COMPMAP_PIPELINE_VERSION})
    if seed is not None:
        meta["seed"] = seed
    meta.update(extra)
    (folder / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def save_composition_map(cmap: CompositionMap, path: str | Path, seed: int | None = None) -> None:
    """Store as a single-channel 8-bit palette PNG plus ``meta.json`` in the same folder."""
    path = Path(path)
    if cmap.classes.size and (cmap.classes.max() > 255 or cmap.num_classes > 256):
        raise SerializationError(f"class value {int(cmap.classes.max())} does not fit in 8 bits")
    img = Image.fromarray(cmap.classes.astype(np.uint8), mode="P")
    img.putpalette(PALETTE)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, optimize=False)
    write_compmap_meta(path.parent, cmap.num_classes, seed)


def load_composition_map(path: str | Path) -> CompositionMap:
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode not in ("P", "L"):
                raise SerializationError(f"{path}: expected an indexed image, got mode {img.mode}")
            classes = np.asarray(img).astype(np.int64)
    except SerializationError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types on corrupt data
        raise SerializationError(f"cannot load composition map {path}: {exc}") from exc
    meta = _read_meta(path.parent)
    if "num_classes" not in meta:
        raise SerializationError(f"{path}: missing meta.json with num_classes")
    return CompositionMap(classes, int(meta["num_classes"]))
