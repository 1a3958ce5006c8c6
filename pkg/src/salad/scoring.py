"""Branch score extraction, validation calibration, fusion and evaluation metrics."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import AnomalyMap

logger = logging.getLogger(__name__)

BRANCHES = ("a", "c", "g")
SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class ScoreStats:
    mu: dict[str, float]
    sigma: dict[str, float]
    map_min: dict[str, float] = field(default_factory=dict)
    map_max: dict[str, float] = field(default_factory=dict)
    source: str = ""
    convention: str = "population"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> ScoreStats:
        return cls(**d)


@dataclass(frozen=True)
class FusionResult:
    as_a: float
    as_c: float
    as_g: float
    z_a: float
    z_c: float
    z_g: float
    total: float

    def subset_total(self, branches: tuple[str, ...]) -> float:
        """Fused score using only ``branches`` (for ablations)."""
        return float(sum(getattr(self, f"z_{b}") for b in branches))


def branch_scores(a_a: AnomalyMap | np.ndarray, a_c: AnomalyMap | np.ndarray, s_g: float) -> tuple[float, float, float]:
    """``(max(A_a), max(A_c), S_g)``."""
    out = []
    for m in (a_a, a_c):
        arr = m.scores if isinstance(m, AnomalyMap) else np.asarray(m)
        if arr.size == 0:
            raise ValueError("empty anomaly map")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite anomaly map")
        out.append(float(arr.max()))
    return out[0], out[1], float(s_g)


def calibrate(validation_scores, map_extrema: dict | None = None, source: str = "") -> ScoreStats:
    """Per-branch mean and population standard deviation over validation scores.

    ``validation_scores`` is an ``(N, 3)`` array of ``(AS_a, AS_c, AS_g)``.
    ``map_extrema`` optionally carries ``{"a": (min, max), "c": (min, max)}``
    pixel extrema for the localisation map normalisation.
    """
    s = np.asarray(validation_scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 3:
        raise ValueError("validation scores must be an (N, 3) array")
    if len(s) < 2:
        raise ValueError(f"calibration needs at least 2 validation samples, got {len(s)}")
    mu, sigma = {}, {}
    for i, b in enumerate(BRANCHES):
        mu[b] = float(s[:, i].mean())
        sd = float(s[:, i].std(ddof=0))
        if sd < SIGMA_FLOOR:
            logger.warning("branch %s: validation scores have zero spread; sigma floored to %g", b, SIGMA_FLOOR)
            sd = SIGMA_FLOOR
        sigma[b] = sd
    lo = {k: float(v[0]) for k, v in (map_extrema or {}).items()}
    hi = {k: float(v[1]) for k, v in (map_extrema or {}).items()}
    return ScoreStats(mu, sigma, lo, hi, source)


def fuse(scores: tuple[float, float, float], stats: ScoreStats) -> FusionResult:
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (3,) or not np.all(np.isfinite(s)):
        raise ValueError("expected three finite branch scores")
    z = [(s[i] - stats.mu[b]) / stats.sigma[b] for i, b in enumerate(BRANCHES)]
    return FusionResult(*map(float, s), *map(float, z), float(z[0] + z[1] + z[2]))


def combined_localization_map(a_a: AnomalyMap, a_c: AnomalyMap, stats: ScoreStats | None = None) -> AnomalyMap:
    """Sum of the two maps after min-max normalisation with validation extrema, each clipped to [0, 1].

    Without extrema in ``stats`` the appearance map is normalised by its own
    range and the composition map is used as is (it already lies in [0, 1]).
    """
    if a_a.scores.shape != a_c.scores.shape:
        raise ValueError("appearance and composition maps differ in shape")
    out = np.zeros_like(a_a.scores, dtype=np.float64)
    for key, m in (("a", a_a.scores), ("c", a_c.scores)):
        if stats is not None and key in stats.map_min:
            lo, hi = stats.map_min[key], stats.map_max[key]
        elif key == "c":
            lo, hi = 0.0, 1.0
        else:
            lo, hi = float(m.min()), float(m.max())
        span = hi - lo
        out += np.clip((m - lo) / span, 0.0, 1.0) if span > 0 else np.zeros_like(m)
    return AnomalyMap(out, (0.0, 2.0))


# metrics ---------------------------------------------------------------------


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != len(y):
        raise ValueError("AUROC needs binary labels with both classes present")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    thr = np.unique(s)[::-1]
    tpr = np.array([0.0] + [((s >= t) & (y == 1)).sum() / max((y == 1).sum(), 1) for t in thr])
    fpr = np.array([0.0] + [((s >= t) & (y == 0)).sum() / max((y == 0).sum(), 1) for t in thr])
    return fpr, tpr


def spro_curve(anomaly_maps, regions, max_thresholds: int = 5000) -> tuple[np.ndarray, np.ndarray]:
    """Operating points ``(fpr, mean sPRO)`` ordered by decreasing threshold.

    ``regions[i]`` lists ``(mask, saturation_area)`` pairs for image ``i``;
    images without regions are anomaly-free and define the false-positive
    rate. The first point is the empty prediction ``(0, 0)``.
    """
    maps = [np.asarray(m.scores if isinstance(m, AnomalyMap) else m, dtype=np.float64) for m in anomaly_maps]
    if len(maps) != len(regions):
        raise ValueError("one region list per anomaly map is required")
    good = [m.ravel() for m, r in zip(maps, regions) if not r]
    region_scores, saturation = [], []
    for m, rs in zip(maps, regions):
        for mask, sat in rs:
            if sat is None or not np.isfinite(sat) or sat <= 0:
                raise ValueError("every ground-truth region needs a positive saturation area")
            region_scores.append(np.sort(m[mask]))
            saturation.append(float(sat))
    if not region_scores:
        raise ValueError("no anomalous regions to evaluate")
    if not good:
        raise ValueError("no anomaly-free images to measure the false-positive rate")
    good_sorted = np.sort(np.concatenate(good))
    thresholds = np.unique(np.concatenate([good_sorted] + region_scores))[::-1]
    if len(thresholds) > max_thresholds:
        pick = np.unique(np.linspace(0, len(thresholds) - 1, max_thresholds).round().astype(int))
        thresholds = thresholds[pick]
    fpr = (len(good_sorted) - np.searchsorted(good_sorted, thresholds, side="left")) / len(good_sorted)
    spro = np.zeros(len(thresholds))
    for rs, sat in zip(region_scores, saturation):
        hit = len(rs) - np.searchsorted(rs, thresholds, side="left")
        spro += np.minimum(1.0, hit / sat)
    spro /= len(region_scores)
    return np.concatenate([[0.0], fpr]), np.concatenate([[0.0], spro])


def integrate_step(fpr: np.ndarray, spro: np.ndarray, fpr_limit: float) -> float:
    """Area under the right-continuous step curve on ``[0, fpr_limit]``, divided by ``fpr_limit``.

    At false-positive rate ``f`` the curve takes the sPRO of the last
    operating point whose rate does not exceed ``f``.
    """
    area = 0.0
    for i in range(len(fpr)):
        start = fpr[i]
        end = fpr[i + 1] if i + 1 < len(fpr) else np.inf
        lo, hi = start, min(end, fpr_limit)
        if hi > lo:
            area += (hi - lo) * spro[i]
    return float(area / fpr_limit)


def auspro(anomaly_maps, regions, fpr_limit: float = 0.05, max_thresholds: int = 5000) -> float:
    """Normalised area under the saturated per-region overlap curve up to ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, spro = spro_curve(anomaly_maps, regions, max_thresholds)
    return integrate_step(fpr, spro, fpr_limit)
