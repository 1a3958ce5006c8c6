"""Unsupervised composition-map generation.

Pseudo-labels come from clustering dense features on the foreground and
then relabelling class-agnostic mask proposals with their majority
cluster. A small UNet distilled on the pseudo-labels produces the final
composition maps, which averages out per-image labelling mistakes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import KMeans

from .backends import BackendConfig, FeatureMap, MaskProposal, extract_features, propose_masks_grid, query_mask_at_points
from .data import RESOLUTION, CompositionMap, ImageSample
from .unet import UNet, seed_everything

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ForegroundMask:
    mask: np.ndarray


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray
    K: int
    feature_backend_id: str
    seed: int

    def __post_init__(self) -> None:
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.centroids.shape[0] != self.K or not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be K finite rows")
        if len(np.unique(self.centroids, axis=0)) != self.K:
            raise ValueError("cluster centroids are not pairwise distinct")

    def to_json(self) -> dict:
        return {"centroids": self.centroids.tolist(), "K": self.K, "feature_backend_id": self.feature_backend_id,
                "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> ClusterModel:
        return cls(np.asarray(d["centroids"], dtype=np.float64), d["K"], d["feature_backend_id"], d["seed"])


def corner_points(h: int = RESOLUTION, w: int = RESOLUTION) -> list[tuple[int, int]]:
    return [(0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)]


def compute_foreground_mask(image: ImageSample, config: BackendConfig | None = None) -> ForegroundMask:
    h, w = image.pixels.shape[:2]
    background = query_mask_at_points(image, corner_points(h, w), config).mask
    fg = ~background
    if not fg.any():
        logger.warning("%s: corner queries cover the whole frame; treating image as all background",
                       image.source_path or "<image>")
    return ForegroundMask(fg)


def resize_features(features: FeatureMap, size: int = RESOLUTION) -> np.ndarray:
    v = features.values
    if v.shape[:2] == (size, size):
        return v
    t = torch.from_numpy(np.ascontiguousarray(v, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def fit_cluster_model(
    train_features: list[FeatureMap],
    fg_masks: list[ForegroundMask],
    K: int = 6,
    seed: int = 0,
    max_samples: int = 100_000,
) -> ClusterModel:
    """K-means (k-means++) over foreground feature vectors of the training corpus."""
    if len(train_features) != len(fg_masks):
        raise ValueError("one foreground mask per feature map is required")
    if not train_features:
        raise ValueError("empty feature corpus")
    backend_ids = {f.backend_id for f in train_features}
    if len(backend_ids) != 1:
        raise ValueError(f"mixed feature backends {sorted(backend_ids)}")
    counts = np.array([m.mask.sum() for m in fg_masks])
    total = int(counts.sum())
    if total < K:
        raise ValueError(f"only {total} foreground vectors for K={K}; use a smaller K")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=min(total, max_samples), replace=False))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    chunks = []
    for i, (feat, fg) in enumerate(zip(train_features, fg_masks)):
        lo, hi = np.searchsorted(picks, [offsets[i], offsets[i + 1]])
        if hi == lo:
            continue
        vecs = resize_features(feat, fg.mask.shape[0])[fg.mask]
        chunks.append(vecs[picks[lo:hi] - offsets[i]])
    X = np.concatenate(chunks).astype(np.float64)
    n_distinct = len(np.unique(X.round(6), axis=0))
    if n_distinct < K:
        raise ValueError(f"only {n_distinct} distinct foreground vectors for K={K}; use a smaller K")
    km = KMeans(n_clusters=K, init="k-means++", n_init=4, random_state=seed).fit(X)
    return ClusterModel(km.cluster_centers_.astype(np.float64), K, backend_ids.pop(), seed)


def assign_feature_clusters(features: FeatureMap, fg: ForegroundMask, model: ClusterModel) -> CompositionMap:
    """Rough composition map: background 0, foreground 1 + nearest centroid (lowest index on ties)."""
    if features.backend_id != model.feature_backend_id:
        raise ValueError(f"features from {features.backend_id!r}, cluster model fit on {model.feature_backend_id!r}")
    if features.dim != model.centroids.shape[1]:
        raise ValueError(f"feature dim {features.dim} != centroid dim {model.centroids.shape[1]}")
    vals = resize_features(features, fg.mask.shape[0]).astype(np.float64)
    d2 = ((vals[:, :, None, :] - model.centroids[None, None]) ** 2).sum(axis=-1)
    classes = np.argmin(d2, axis=-1) + 1
    classes[~fg.mask] = 0
    return CompositionMap(classes.astype(np.int64), model.K + 1)


def classify_mask_proposals(c_feat: CompositionMap, proposals: list[MaskProposal]) -> CompositionMap:
    """Paint proposals (largest first) with their majority cluster to form pseudo-labels."""
    out = c_feat.classes.copy()
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].area, i))
    for i in order:
        mask = proposals[i].mask
        if mask.shape != out.shape:
            raise ValueError("proposal shape does not match the composition map")
        votes = np.bincount(c_feat.classes[mask], minlength=c_feat.num_classes)
        if votes[0] > 0.5 * votes.sum():
            label = 0
        else:
            label = 1 + int(np.argmax(votes[1:]))
        out[mask] = label
    return CompositionMap(out, c_feat.num_classes)


def pseudo_label(
    image: ImageSample, model: ClusterModel, config: BackendConfig, grid_n: int = 32,
    features: FeatureMap | None = None, fg: ForegroundMask | None = None,
) -> tuple[CompositionMap, CompositionMap]:
    """``(C_feat, C_pseudo)`` for one image."""
    features = features if features is not None else extract_features(image, config)
    fg = fg if fg is not None else compute_foreground_mask(image, config)
    c_feat = assign_feature_clusters(features, fg, model)
    return c_feat, classify_mask_proposals(c_feat, propose_masks_grid(image, grid_n, config))


# component segmenter ---------------------------------------------------------


@dataclass
class SegmenterConfig:
    epochs: int = 15
    lr: float = 5e-4
    batch_size: int = 8
    weight_decay: float = 1e-2
    width: int = 32
    levels: int = 4
    scale: int = 1
    seed: int = 0
    deterministic: bool = True


@dataclass
class SegmenterModel:
    net: UNet
    num_classes: int
    config: SegmenterConfig
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def manifest(self) -> dict:
        return {"optimizer": "AdamW", "loss": "cross_entropy", "num_classes": self.num_classes,
                **asdict(self.config), "epoch_losses": self.epoch_losses}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.net.state_dict(), path)
        path.with_suffix(".json").write_text(json.dumps(self.manifest, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> SegmenterModel:
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        cfg = SegmenterConfig(**{k: manifest[k] for k in SegmenterConfig.__dataclass_fields__})
        net = UNet(3, manifest["num_classes"], cfg.width, cfg.levels, cfg.scale)
        net.load_state_dict(torch.load(path, weights_only=True))
        net.eval()
        return cls(net, manifest["num_classes"], cfg, manifest["epoch_losses"])


def images_to_tensor(images) -> torch.Tensor:
    arrs = [im.pixels if isinstance(im, ImageSample) else im for im in images]
    x = torch.from_numpy(np.stack(arrs).astype(np.float32)).permute(0, 3, 1, 2)
    return x * 2.0 - 1.0


def train_component_segmenter(images, pseudo_labels: list[CompositionMap], config: SegmenterConfig | None = None) -> SegmenterModel:
    """Train a UNet for per-pixel ``(K + 1)``-way classification with AdamW + cross-entropy."""
    config = config or SegmenterConfig()
    if not images or len(images) != len(pseudo_labels):
        raise ValueError("need a non-empty, paired corpus of images and pseudo-labels")
    ks = {c.num_classes for c in pseudo_labels}
    if len(ks) != 1:
        raise ValueError(f"inconsistent num_classes across pseudo-labels: {sorted(ks)}")
    num_classes = ks.pop()
    gen = seed_everything(config.seed, config.deterministic)
    net = UNet(3, num_classes, config.width, config.levels, config.scale)
    opt = torch.optim.AdamW(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    x_all = images_to_tensor(images)
    y_all = torch.from_numpy(np.stack([c.classes for c in pseudo_labels]).astype(np.int64))
    n = len(images)
    losses = []
    net.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for s in range(0, n, config.batch_size):
            idx = perm[s : s + config.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # BatchNorm needs >1 sample
            loss = F.cross_entropy(net(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"segmenter loss became {loss.item()} at epoch {epoch}, batch {s}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        losses.append(total / max(seen, 1))
        logger.info("segmenter epoch %d/%d loss %.4f", epoch + 1, config.epochs, losses[-1])
    net.eval()
    return SegmenterModel(net, num_classes, config, losses)


@torch.no_grad()
def segmenter_logits(model: SegmenterModel, images) -> torch.Tensor:
    model.net.eval()
    return model.net(images_to_tensor(images))


def infer_composition_maps(model: SegmenterModel, images, batch_size: int = 8) -> list[CompositionMap]:
    out = []
    for s in range(0, len(images), batch_size):
        pred = segmenter_logits(model, images[s : s + batch_size]).argmax(dim=1).numpy()
        out.extend(CompositionMap(p.astype(np.int64), model.num_classes) for p in pred)
    return out


def infer_composition_map(model: SegmenterModel, image: ImageSample) -> CompositionMap:
    return infer_composition_maps(model, [image])[0]


# evaluation helpers ------------------------------------------------------------


def match_classes(pred: list[np.ndarray], truth: list[np.ndarray], num_classes: int) -> np.ndarray:
    """Map predicted part classes onto ground-truth classes (Hungarian on the corpus confusion matrix).

    Background stays background. Returns a lookup array ``lut[pred] -> truth``.
    """
    from scipy.optimize import linear_sum_assignment

    n_true = int(max(t.max() for t in truth)) + 1
    conf = np.zeros((num_classes, n_true), dtype=np.int64)
    for p, t in zip(pred, truth):
        np.add.at(conf, (p.ravel(), t.ravel()), 1)
    rows, cols = linear_sum_assignment(-conf[1:, 1:])
    lut = np.zeros(num_classes, dtype=np.int64)
    lut[rows + 1] = cols + 1
    return lut


def per_class_iou(pred: list[np.ndarray], truth: list[np.ndarray], num_classes: int) -> np.ndarray:
    """IoU of each ground-truth part class after optimal class matching."""
    lut = match_classes(pred, truth, num_classes)
    n_true = int(max(t.max() for t in truth)) + 1
    inter = np.zeros(n_true)
    union = np.zeros(n_true)
    for p, t in zip(pred, truth):
        mp = lut[p]
        for c in range(1, n_true):
            a, b = mp == c, t == c
            inter[c] += np.logical_and(a, b).sum()
            union[c] += np.logical_or(a, b).sum()
    return inter[1:] / np.maximum(union[1:], 1)
