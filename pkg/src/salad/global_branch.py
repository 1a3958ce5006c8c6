"""Class-conditional global appearance model.

Each image is summarised by the mean teacher feature of every part class in
its composition map. One Gaussian per class is fitted over the training
images, and an image is scored by the Mahalanobis distance of its class
means, averaged over classes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backends import FeatureMap
from .data import CompositionMap, resize_classes

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class GlobalDescriptor:
    vectors: np.ndarray  # (K, D); rows of absent classes are zero
    present: np.ndarray  # (K,) bool


@dataclass(frozen=True)
class ClassGaussian:
    mu: np.ndarray
    sigma: np.ndarray
    sigma_inv: np.ndarray
    d_max: float
    n_support: int
    eps: float = 0.0

    def distance(self, g: np.ndarray) -> float:
        diff = g - self.mu
        return float(np.sqrt(max(diff @ self.sigma_inv @ diff, 0.0)))


def compute_descriptor(f_t: FeatureMap, c: CompositionMap) -> GlobalDescriptor:
    """Mean feature per part class; the map is resized to feature resolution by nearest neighbour."""
    hf, wf, d = f_t.values.shape
    classes = c.classes
    if classes.shape != (hf, wf):
        if hf != wf:
            raise ValueError(f"non-square feature map {hf}x{wf}")
        classes = resize_classes(classes, hf)
    if classes.shape != (hf, wf):
        raise ValueError("composition map and feature map resolutions disagree")
    k = c.num_classes - 1
    flat = classes.ravel()
    feats = f_t.values.reshape(-1, d).astype(np.float64)
    counts = np.bincount(flat, minlength=k + 1)[1:]
    sums = np.zeros((k + 1, d))
    np.add.at(sums, flat, feats)
    present = counts > 0
    vectors = np.zeros((k, d))
    vectors[present] = sums[1:][present] / counts[present, None]
    return GlobalDescriptor(vectors, present)


def fit_gaussians(descriptors: list[GlobalDescriptor], reg: float = 1e-3) -> list[ClassGaussian]:
    """One Gaussian per part class over the training descriptors where the class is present.

    The covariance is the unbiased estimate; its inverse is taken after adding
    ``eps * I`` with ``eps = reg * mean(diag)`` (floored at 1e-8 when ``reg > 0``).
    """
    if not descriptors:
        raise ValueError("no descriptors to fit")
    V = np.stack([d.vectors for d in descriptors])
    P = np.stack([d.present for d in descriptors])
    out = []
    for c in range(V.shape[1]):
        X = V[P[:, c], c]
        if len(X) < 2:
            raise ValueError(f"class {c + 1} is present in {len(X)} training samples; at least 2 are required")
        mu = X.mean(axis=0)
        sigma = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
        eps = max(reg * float(np.mean(np.diag(sigma))), 1e-8) if reg > 0 else 0.0
        reg_sigma = sigma + eps * np.eye(len(mu))
        try:
            inv = np.linalg.inv(reg_sigma)
            if not np.all(np.isfinite(inv)) or np.linalg.cond(reg_sigma) > 1e15:
                raise np.linalg.LinAlgError("ill-conditioned")
        except np.linalg.LinAlgError:
            logger.warning("class %d covariance singular after regularisation; using pseudo-inverse", c + 1)
            inv = np.linalg.pinv(reg_sigma)
        inv = (inv + inv.T) / 2
        g = ClassGaussian(mu, sigma, inv, 0.0, len(X), eps)
        d_max = max(g.distance(x) for x in X)
        out.append(ClassGaussian(mu, sigma, inv, d_max, len(X), eps))
    return out


def class_distances(g: GlobalDescriptor, gaussians: list[ClassGaussian]) -> np.ndarray:
    if len(gaussians) != len(g.present) or g.vectors.shape[1] != len(gaussians[0].mu):
        raise ValueError("descriptor and Gaussian dimensions disagree")
    return np.array([
        gauss.distance(v) if present else gauss.d_max
        for v, present, gauss in zip(g.vectors, g.present, gaussians)
    ])


def mahalanobis_score(g: GlobalDescriptor, gaussians: list[ClassGaussian]) -> float:
    """Average per-class Mahalanobis distance; an absent class scores its training maximum."""
    s = float(class_distances(g, gaussians).mean())
    if not np.isfinite(s):
        raise FloatingPointError("non-finite global score")
    return s


def save_gaussians(gaussians: list[ClassGaussian], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": FORMAT_VERSION,
        "classes": [
            {"mu": g.mu.tolist(), "sigma": g.sigma.tolist(), "sigma_inv": g.sigma_inv.tolist(),
             "d_max": g.d_max, "n_support": g.n_support, "eps": g.eps}
            for g in gaussians
        ],
    }
    path.write_text(json.dumps(payload))


def load_gaussians(path: str | Path) -> list[ClassGaussian]:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported Gaussian file version {payload.get('version')}")
    return [
        ClassGaussian(np.asarray(c["mu"]), np.asarray(c["sigma"]), np.asarray(c["sigma_inv"]), c["d_max"],
                      c["n_support"], c["eps"])
        for c in payload["classes"]
    ]
