"""Dense feature extraction and class-agnostic mask proposal backends.

Two families live here: deterministic stub backends, which derive features
and regions from local colour statistics so the whole pipeline runs without
pretrained weights, and adapters around real pretrained models (a DINO ViT
exported to TorchScript, SAM-HQ). Adapters never fall back silently: a
missing weights file raises :class:`AssetUnavailableError`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import ConfigurationError, ImageSample


class AssetUnavailableError(ConfigurationError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray  # (Hf, Wf, D)
    source_resolution: tuple[int, int]
    backend_id: str

    def __post_init__(self) -> None:
        if self.values.ndim != 3 or min(self.values.shape) == 0:
            raise ValueError(f"feature map must be (Hf, Wf, D) with positive sizes, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map contains non-finite values")

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class MaskProposal:
    mask: np.ndarray
    quality: float
    origin: str = "grid_point"

    def __post_init__(self) -> None:
        if self.mask.dtype != bool or self.mask.ndim != 2:
            raise ValueError("proposal mask must be a 2-D boolean array")
        if not self.mask.any():
            raise ValueError("proposal mask is empty")
        if not np.isfinite(self.quality):
            raise ValueError("proposal quality must be finite")
        if self.origin not in ("grid_point", "corner_query"):
            raise ValueError(f"unknown origin {self.origin!r}")

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class BackendConfig:
    feature_backend: str = "stub"
    mask_backend: str = "stub"
    feature_params: dict = field(default_factory=dict)
    mask_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.feature_backend not in FEATURE_BACKENDS:
            raise ConfigurationError(f"unknown feature backend {self.feature_backend!r}")
        if self.mask_backend not in MASK_BACKENDS:
            raise ConfigurationError(f"unknown mask backend {self.mask_backend!r}")

    def __hash__(self) -> int:
        return hash(self.key)

    @property
    def key(self) -> str:
        return json.dumps(
            [self.feature_backend, self.feature_params, self.mask_backend, self.mask_params, self.seed],
            sort_keys=True,
        )


# stub backends ---------------------------------------------------------------


class StubFeatureBackend:
    """Features from local colour statistics.

    Channels: per-cell mean colour (3), mean gradient magnitude (1, scaled
    by ``grad_weight``), optionally per-channel colour spread (3) and
    normalised cell position (2, scaled by ``pos_weight``).
    """

    version = "stub-features/1"

    def __init__(
        self,
        cell: int = 1,
        grad_weight: float = 0.25,
        pos_weight: float = 0.1,
        position: bool = True,
        texture: bool = False,
    ):
        if cell < 1:
            raise ConfigurationError("cell must be >= 1")
        self.cell = cell
        self.grad_weight = grad_weight
        self.pos_weight = pos_weight
        self.position = position
        self.texture = texture

    @property
    def dim(self) -> int:
        return 4 + 3 * self.texture + 2 * self.position

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        h, w, _ = pixels.shape
        c = self.cell
        if h % c or w % c:
            raise ValueError(f"image size {h}x{w} not divisible by cell {c}")
        x = pixels.astype(np.float64)
        gy, gx = np.gradient(x, axis=(0, 1))
        grad = np.sqrt((gx**2 + gy**2).sum(axis=2))

        def pool(a):
            return a.reshape(h // c, c, w // c, c, -1).mean(axis=(1, 3))

        chans = [pool(x), self.grad_weight * pool(grad[..., None])]
        if self.texture:
            if c > 1:
                spread = x.reshape(h // c, c, w // c, c, 3).std(axis=(1, 3))
            else:
                mean = ndimage.uniform_filter(x, size=(3, 3, 1), mode="nearest")
                sq = ndimage.uniform_filter(x**2, size=(3, 3, 1), mode="nearest")
                spread = np.sqrt(np.clip(sq - mean**2, 0, None))
            chans.append(spread)
        if self.position:
            ys = (np.arange(h // c) + 0.5) / (h // c)
            xs = (np.arange(w // c) + 0.5) / (w // c)
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            chans.append(self.pos_weight * np.stack([xx, yy], axis=2))
        return np.concatenate(chans, axis=2).astype(np.float32)


class StubMaskBackend:
    """Region growing on a lightly smoothed image.

    The region of a query point is the 4-connected set of pixels containing
    the point whose colour differs from the point's colour by at most
    ``tolerance`` in every channel. Grid points already covered by a region
    found earlier in the sweep do not spawn a new query.
    """

    version = "stub-masks/1"

    def __init__(self, tolerance: float = 0.12, smooth: int = 3):
        self.tolerance = tolerance
        self.smooth = smooth

    def _prepare(self, pixels: np.ndarray) -> np.ndarray:
        x = pixels.astype(np.float64)
        if self.smooth > 1:
            x = ndimage.uniform_filter(x, size=(self.smooth, self.smooth, 1), mode="nearest")
        return x

    def _region(self, smoothed: np.ndarray, x: int, y: int) -> tuple[np.ndarray, float]:
        seed = smoothed[y, x]
        close = np.abs(smoothed - seed).max(axis=2) <= self.tolerance
        labels, _ = ndimage.label(close)
        mask = labels == labels[y, x]
        spread = float(np.abs(smoothed[mask] - seed).mean())
        return mask, 1.0 / (1.0 + 10.0 * spread)

    def grid(self, pixels: np.ndarray, grid_n: int) -> list[MaskProposal]:
        smoothed = self._prepare(pixels)
        h, w = smoothed.shape[:2]
        covered = np.zeros((h, w), dtype=bool)
        out = []
        for y, x in _grid_points(h, w, grid_n):
            if covered[y, x]:
                continue
            mask, quality = self._region(smoothed, x, y)
            covered |= mask
            out.append(MaskProposal(mask, quality, "grid_point"))
        return out

    def query(self, pixels: np.ndarray, points: list[tuple[int, int]]) -> list[tuple[np.ndarray, float]]:
        smoothed = self._prepare(pixels)
        return [self._region(smoothed, x, y) for x, y in points]


def _grid_points(h: int, w: int, n: int) -> list[tuple[int, int]]:
    ys = ((np.arange(n) + 0.5) * h / n).astype(int)
    xs = ((np.arange(n) + 0.5) * w / n).astype(int)
    return [(int(y), int(x)) for y in ys for x in xs]


# pretrained adapters -----------------------------------------------------------


def _require_weights(weights: str | None, backend: str) -> Path:
    if not weights:
        raise AssetUnavailableError(f"asset unavailable: {backend} requires a weights path")
    path = Path(weights)
    if not path.is_file():
        raise AssetUnavailableError(f"asset unavailable: {backend} weights not found at {path}")
    return path


class TorchScriptFeatureBackend:
    """Dense features from a TorchScript export (DINO ViT, EfficientAD teacher, ...).

    The scripted module must map an ImageNet-normalised ``(1, 3, H, W)``
    tensor to either patch tokens ``(1, N, D)`` (leading class/register
    tokens are dropped) or a dense map ``(1, D, h, w)``.
    """

    version = "torchscript-features/1"

    def __init__(self, weights: str | None = None, patch: int = 8, input_size: int = 224, device: str = "cpu"):
        import torch

        self._torch = torch
        self.model = torch.jit.load(str(_require_weights(weights, "torchscript feature")), map_location=device).eval()
        self.patch = patch
        self.input_size = input_size
        self.device = device

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        torch = self._torch
        x = torch.from_numpy(pixels.astype(np.float32)).permute(2, 0, 1)[None]
        x = torch.nn.functional.interpolate(x, size=(self.input_size,) * 2, mode="bilinear", align_corners=False)
        mean = torch.tensor([0.485, 0.456, 0.406])[None, :, None, None]
        std = torch.tensor([0.229, 0.224, 0.225])[None, :, None, None]
        with torch.inference_mode():
            out = self.model(((x - mean) / std).to(self.device)).float().cpu()
        if out.ndim == 3:
            side = self.input_size // self.patch
            out = out[:, -side * side :, :].reshape(1, side, side, -1)
        else:
            out = out.permute(0, 2, 3, 1)
        return out[0].numpy()


class SamHQMaskBackend:
    version = "sam-hq/1"

    def __init__(self, weights: str | None = None, model_type: str = "vit_h", device: str = "cpu"):
        path = _require_weights(weights, "sam-hq")
        try:
            from segment_anything_hq import SamPredictor, sam_model_registry
        except ImportError as exc:
            raise AssetUnavailableError("asset unavailable: the segment_anything_hq package is not installed") from exc
        sam = sam_model_registry[model_type](checkpoint=str(path)).to(device).eval()
        self.predictor = SamPredictor(sam)
        self._image_key = None

    def _set(self, pixels: np.ndarray) -> None:
        key = hash(pixels.tobytes())
        if key != self._image_key:
            self.predictor.set_image((np.clip(pixels, 0, 1) * 255).round().astype(np.uint8))
            self._image_key = key

    def _predict(self, x: int, y: int) -> tuple[np.ndarray, float]:
        masks, scores, _ = self.predictor.predict(
            point_coords=np.array([[x, y]]), point_labels=np.array([1]), multimask_output=True
        )
        best = int(np.argmax(scores))
        return masks[best].astype(bool), float(scores[best])

    def grid(self, pixels: np.ndarray, grid_n: int) -> list[MaskProposal]:
        self._set(pixels)
        h, w = pixels.shape[:2]
        out = []
        for y, x in _grid_points(h, w, grid_n):
            mask, quality = self._predict(x, y)
            if mask.any():
                out.append(MaskProposal(mask, quality, "grid_point"))
        return out

    def query(self, pixels: np.ndarray, points: list[tuple[int, int]]) -> list[tuple[np.ndarray, float]]:
        self._set(pixels)
        return [self._predict(x, y) for x, y in points]


FEATURE_BACKENDS = {"stub": StubFeatureBackend, "dino": TorchScriptFeatureBackend, "torchscript": TorchScriptFeatureBackend}
MASK_BACKENDS = {"stub": StubMaskBackend, "sam-hq": SamHQMaskBackend}


@lru_cache(maxsize=8)
def _feature_backend(config: BackendConfig):
    return FEATURE_BACKENDS[config.feature_backend](**config.feature_params)


@lru_cache(maxsize=8)
def _mask_backend(config: BackendConfig):
    return MASK_BACKENDS[config.mask_backend](**config.mask_params)


def feature_backend(config: BackendConfig):
    return _feature_backend(config)


def extract_features(image: ImageSample, config: BackendConfig) -> FeatureMap:
    values = _feature_backend(config)(image.pixels)
    return FeatureMap(np.ascontiguousarray(values), image.pixels.shape[:2], config.feature_backend)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def deduplicate(proposals: list[MaskProposal], threshold: float = 0.9) -> list[MaskProposal]:
    """Drop proposals overlapping a higher-quality kept proposal with IoU > threshold."""
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].quality, -proposals[i].area, i))
    kept: list[MaskProposal] = []
    for i in order:
        p = proposals[i]
        if all(iou(p.mask, k.mask) <= threshold for k in kept):
            kept.append(p)
    return kept


def propose_masks_grid(image: ImageSample, grid_n: int = 32, config: BackendConfig | None = None) -> list[MaskProposal]:
    if grid_n < 1:
        raise ValueError("grid_n must be >= 1")
    config = config or BackendConfig()
    return deduplicate(_mask_backend(config).grid(image.pixels, grid_n))


def query_mask_at_points(
    image: ImageSample, points: list[tuple[int, int]], config: BackendConfig | None = None
) -> MaskProposal:
    """Union of the regions found at each ``(x, y)`` point."""
    if not points:
        raise ValueError("at least one query point is required")
    h, w = image.pixels.shape[:2]
    for x, y in points:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"query point ({x}, {y}) outside {w}x{h} image")
    config = config or BackendConfig()
    results = _mask_backend(config).query(image.pixels, [(int(x), int(y)) for x, y in points])
    mask = np.zeros((h, w), dtype=bool)
    for m, _ in results:
        mask |= m
    return MaskProposal(mask, float(np.mean([q for _, q in results])), "corner_query")
