"""Report figures rendered next to the evaluation JSON/CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .data import PALETTE, AnomalyMap, CompositionMap, ImageSample  # noqa: E402
from .scoring import combined_localization_map, roc_curve  # noqa: E402

LABEL_COLORS = {"good": "tab:green", "logical_anomaly": "tab:red", "structural_anomaly": "tab:blue"}
_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def _class_cmap(num_classes: int) -> ListedColormap:
    pal = np.asarray(PALETTE[: 3 * num_classes]).reshape(-1, 3) / 255.0
    return ListedColormap(pal)


def render_report_figures(report_path: Path, records, labels, fused, results, images, compmaps, stats,
                          n_examples: int = 6) -> list[Path]:
    """ROC curves, score histograms and example maps; returns the written paths."""
    stem = report_path.with_suffix("")
    paths = [Path(f"{stem}_roc.png"), Path(f"{stem}_scores.png"), Path(f"{stem}_examples.png")]
    total = np.array([f.total for f in fused])
    y = np.array([l != "good" for l in labels])

    fig, ax = plt.subplots(figsize=(5, 5))
    for name, keep in (("overall", np.ones(len(labels), bool)),
                       ("logical", np.isin(labels, ["good", "logical_anomaly"])),
                       ("structural", np.isin(labels, ["good", "structural_anomaly"]))):
        if y[keep].any() and not y[keep].all():
            fpr, tpr = roc_curve(total[keep], y[keep])
            ax.plot(fpr, tpr, label=name, drawstyle="steps-post")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.5, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(paths[0], **_SAVE)
    plt.close(fig)

    fig, axes = plt.subplots(1, 4, figsize=(16, 3.5))
    for ax, (title, attr) in zip(axes, (("appearance z", "z_a"), ("composition z", "z_c"), ("global z", "z_g"),
                                        ("fused", "total"))):
        vals = np.array([getattr(f, attr) for f in fused])
        bins = np.linspace(vals.min(), vals.max() + 1e-9, 25)
        for lab in sorted(set(labels)):
            ax.hist(vals[np.array(labels) == lab], bins=bins, alpha=0.5, label=lab,
                    color=LABEL_COLORS.get(lab, "grey"))
        ax.set_title(title)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(paths[1], **_SAVE)
    plt.close(fig)

    picks = []
    for lab in ("good", "logical_anomaly", "structural_anomaly"):
        picks += [i for i, l in enumerate(labels) if l == lab][: max(1, n_examples // 3)]
    fig, axes = plt.subplots(len(picks), 4, figsize=(10, 2.6 * len(picks)), squeeze=False)
    for row, i in zip(axes, picks):
        loc = combined_localization_map(results[i]["a_a"], results[i]["a_c"], stats)
        _map_row(row, images[i], compmaps[i], results[i]["a_a"], results[i]["a_c"], loc)
        row[0].set_ylabel(f"{records[i].key}\nAS={fused[i].total:.2f}", fontsize=7)
    fig.tight_layout()
    fig.savefig(paths[2], **_SAVE)
    plt.close(fig)
    return paths


def _map_row(row, image: ImageSample, c: CompositionMap, a_a: AnomalyMap, a_c: AnomalyMap, loc: AnomalyMap):
    row[0].imshow(image.pixels)
    row[1].imshow(c.classes, cmap=_class_cmap(c.num_classes), vmin=0, vmax=c.num_classes - 1,
                  interpolation="nearest")
    row[2].imshow(a_c.scores, vmin=0, vmax=1, cmap="inferno")
    row[3].imshow(loc.scores, vmin=0, vmax=2, cmap="inferno")
    for ax, t in zip(row, ("image", "composition map", "A_c", "combined")):
        ax.set_title(t, fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])


def render_inference_figure(path: Path, image: ImageSample, c: CompositionMap, a_a: AnomalyMap, a_c: AnomalyMap,
                            loc: AnomalyMap) -> Path:
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.8), squeeze=False)
    _map_row(axes[0], image, c, a_a, a_c, loc)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path
