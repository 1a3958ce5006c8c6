"""Acceptance criteria 1-7.

Each test records a one-line verdict that is printed in the terminal summary
under "acceptance criteria". Criteria 4-7 share two full toy runs (same
seeds, separate directories) built once per session.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from salad.backends import FeatureMap
from salad.cli import main as cli_main
from salad.compmaps import infer_composition_maps, match_classes, per_class_iou, train_component_segmenter
from salad.data import CompositionMap, load_composition_map, load_dataset_index, load_record
from salad.global_branch import GlobalDescriptor, compute_descriptor, fit_gaussians, mahalanobis_score
from salad.losses import dice_loss, disc_loss, focal_loss, one_hot, recon_loss
from salad.pipeline import TOY_PRESET, load_run_config
from salad.scoring import auroc, auspro, branch_scores, calibrate, fuse
from salad.simulator import (
    check_invariants,
    connected_components,
    sample_training_example,
    simulate_inpaint,
    simulate_removal,
    simulate_structural,
)
from salad.toy import load_part_map

from . import oracles
from .conftest import record
from .helpers import random_composition_map
from .test_losses import gradient_rel_error

N_INSTANCES = 100


# criterion 1 ------------------------------------------------------------------


def _oracle_suite(rng) -> dict[str, float]:
    """Worst relative error per quantity over N_INSTANCES random instances."""
    worst: dict[str, float] = {}

    def note(name, got, want):
        worst[name] = max(worst.get(name, 0.0), oracles.rel_err(got, want))

    for _ in range(N_INSTANCES):
        # Mahalanobis (involves an inverse)
        k, d = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        descs = [GlobalDescriptor(rng.normal(size=(k, d)), np.ones(k, bool)) for _ in range(int(rng.integers(8, 20)))]
        gs = fit_gaussians(descs)
        q = GlobalDescriptor(rng.normal(size=(k, d)) * 2, np.ones(k, bool))
        want = np.mean([oracles.mahalanobis(q.vectors[c], g.mu, g.sigma, g.eps) for c, g in enumerate(gs)])
        note("mahalanobis", mahalanobis_score(q, gs), want)

        # descriptor means
        feats = rng.normal(size=(8, 8, 3))
        classes = rng.integers(0, 4, (8, 8))
        got = compute_descriptor(FeatureMap(feats.astype(np.float32), (8, 8), "t"), CompositionMap(classes, 4))
        want_v, present = oracles.descriptor_means(feats.astype(np.float32).astype(np.float64), classes, 3)
        note("descriptor_mean", got.vectors[present], want_v[present])

        # AUROC
        n = int(rng.integers(4, 60))
        s = np.round(rng.normal(size=n), 1)
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        note("auroc", auroc(s, y), oracles.auroc(s, y))

        # AUsPRO on tiny fixtures
        maps = [np.round(rng.random((8, 8)), 1) for _ in range(3)]
        r1 = rng.random((8, 8)) > 0.7
        r2 = rng.random((8, 8)) > 0.8
        regions = [[(r1, float(max(1, r1.sum() // 2)))], [(r2, float(max(1, r2.sum())))], []]
        if r1.any() and r2.any():
            lim = float(rng.uniform(0.05, 1.0))
            note("auspro", auspro(maps, regions, lim), oracles.auspro(maps, regions, lim))

        # losses
        logits = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)) * 2)
        target = torch.from_numpy(rng.integers(0, 3, (1, 4, 4)))
        probs = torch.softmax(logits, 1)
        gamma = float(rng.uniform(0, 3))
        note("focal", focal_loss(probs, target, gamma).item(),
             oracles.focal_multiclass(probs.numpy(), target.numpy(), gamma))
        note("dice", dice_loss(probs, one_hot(target, 3, probs.dtype)).item(),
             oracles.dice(probs.numpy(), target.numpy()))
        pred = torch.from_numpy(rng.random((1, 4, 4)))
        gt = torch.from_numpy(rng.random((1, 4, 4)) > 0.5)
        note("focal_binary", focal_loss(pred, gt, gamma, "binary").item(),
             oracles.focal_binary(pred.numpy(), gt.numpy(), gamma))
        note("l1", disc_loss(gt, pred, alpha=0.0).item(), oracles.l1(pred.numpy(), gt.numpy()))

        # branch scores + fusion
        val = rng.normal(size=(int(rng.integers(2, 12)), 3)) * rng.uniform(0.1, 10, 3)
        stats = calibrate(val)
        a_a, a_c = rng.random((6, 6)) * 3, rng.random((6, 6))
        sc = branch_scores(a_a, a_c, float(rng.normal()))
        note("branch_scores", sc[:2], (oracles.scan_max(a_a), oracles.scan_max(a_c)))
        note("fusion", fuse(sc, stats).total,
             oracles.fusion(sc, [stats.mu[b] for b in "acg"], [stats.sigma[b] for b in "acg"]))
    return worst


def test_criterion_1_math_oracles():
    t0 = time.perf_counter()
    worst = _oracle_suite(np.random.default_rng(2024))
    elapsed = time.perf_counter() - t0
    ok = all(v <= (1e-6 if name == "mahalanobis" else 1e-8) for name, v in worst.items())
    ok = ok and elapsed < 60 and len(worst) == 10
    detail = ", ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items()))
    record(1, ok, f"{N_INSTANCES} instances each, {elapsed:.1f}s; worst rel err: {detail}")
    assert ok, detail


# criterion 2 ------------------------------------------------------------------


def test_criterion_2_simulator_sweep():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    corpus = [random_composition_map(rng) for _ in range(40)]
    cache = {i: connected_components(c) for i, c in enumerate(corpus)}
    violations: dict[str, int] = {}
    produced: dict[str, int] = {}
    for kind in ("perlin_paste", "component_removal", "component_inpaint"):
        bad = made = 0
        for i in range(1000):
            src = i % len(corpus)
            c = corpus[src]
            if kind == "perlin_paste":
                s = simulate_structural(c, i)
            elif kind == "component_removal":
                s = simulate_removal(c, i, components=cache[src])
            else:
                other = (src + 1 + i % (len(corpus) - 1)) % len(corpus)
                s = simulate_inpaint(c, corpus[other], i, components=cache[other])
            made += s.kind == kind
            bad += bool(check_invariants(c, s))
        violations[kind] = bad
        produced[kind] = made
    kinds = []
    for i in range(10_000):
        src = i % len(corpus)
        s = sample_training_example(corpus[src], corpus, 10_000 + i, exclude=src, component_cache=cache)
        if check_invariants(corpus[src], s):
            violations["mixed"] = violations.get("mixed", 0) + 1
        kinds.append(s.kind)
    elapsed = time.perf_counter() - t0
    clean = kinds.count("none") / len(kinds)
    anomalous = [k for k in kinds if k != "none"]
    frac = {k: anomalous.count(k) / len(anomalous) for k in ("perlin_paste", "component_removal", "component_inpaint")}
    ok = (sum(violations.values()) == 0 and abs(clean - 0.5) <= 0.03
          and all(abs(f - 1 / 3) <= 0.05 for f in frac.values()) and elapsed < 300
          and all(v == 1000 for v in produced.values()))
    record(2, ok, f"violations={violations or 0}, produced={produced}, clean={clean:.3f}, "
                  f"strategy fractions={ {k: round(v, 3) for k, v in frac.items()} }, {elapsed:.0f}s")
    assert ok


# criterion 3 ------------------------------------------------------------------


def test_criterion_3_gradient_checks():
    rng = np.random.default_rng(3)
    errs = {"recon_loss": 0.0, "disc_loss": 0.0}
    for _ in range(5):
        logits = torch.from_numpy(rng.normal(size=(1, 3, 8, 8)))
        target = torch.from_numpy(rng.integers(0, 3, (1, 8, 8)))
        errs["recon_loss"] = max(errs["recon_loss"], gradient_rel_error(lambda z: recon_loss(target, z), logits))
        pred = torch.from_numpy(rng.uniform(0.02, 0.98, (1, 8, 8)))
        gt = torch.from_numpy(rng.random((1, 8, 8)) > 0.5)
        errs["disc_loss"] = max(errs["disc_loss"], gradient_rel_error(lambda p: disc_loss(gt, p), pred))
    ok = all(v <= 1e-3 for v in errs.values())
    record(3, ok, "max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in errs.items()) + " on 8x8, 5 instances")
    assert ok


# shared toy runs ----------------------------------------------------------------


def _toy_run(base: Path) -> dict:
    t0 = time.perf_counter()
    assert cli_main(["gen-toy", "--out", str(base / "data")]) == 0
    assert cli_main(["run", "--preset", "toy", "--data-root", str(base / "data"), "--workdir", str(base / "work")]) == 0
    return {"data": base / "data" / "toy", "work": base / "work", "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    return [_toy_run(tmp_path_factory.mktemp(f"toy_run_{i}")) for i in range(2)]


# criterion 4 ------------------------------------------------------------------


def _mislabeled(labels: list[np.ndarray], truth: list[np.ndarray], lut: np.ndarray) -> int:
    return int(sum((lut[l] != t).sum() for l, t in zip(labels, truth)))


@pytest.mark.slow
def test_criterion_4_composition_maps(toy_runs):
    run = toy_runs[0]
    index = load_dataset_index(run["data"].parent)["toy"]
    k1 = TOY_PRESET["K"] + 1
    pred, truth = [], []
    for split in ("train", "validation", "test"):
        for r in index.split(split):
            pred.append(load_composition_map(run["work"] / "compmaps" / "toy" / f"{r.key}.png").classes)
            truth.append(load_part_map(run["data"], split, r.defect, r.stem).classes)
    ious = per_class_iou(pred, truth, k1)

    # distillation: train the segmenter on deliberately corrupted pseudo-labels
    train = index.split("train")
    images = [load_record(r) for r in train]
    pseudo = [load_composition_map(run["work"] / "compmaps" / "toy" / "pseudo" / f"{r.key}.png") for r in train]
    part_truth = [load_part_map(run["data"], "train", "good", r.stem).classes for r in train]
    lut = match_classes([p.classes for p in pseudo], part_truth, k1)
    rng = np.random.default_rng(11)
    corrupted = []
    for p in pseudo:
        c = p.classes.copy()
        if rng.random() < 0.5:
            y, x = rng.integers(0, 256 - 48, 2)
            c[y : y + 48, x : x + 48] = rng.integers(0, k1)
        flip = rng.random(c.shape) < 0.05
        c[flip] = rng.integers(0, k1, int(flip.sum()))
        corrupted.append(CompositionMap(c, k1))
    cfg = load_run_config(preset="toy", overrides={"data_root": str(run["data"]), "workdir": str(run["work"])})
    seg = train_component_segmenter(images, corrupted, cfg.segmenter)
    distilled = [m.classes for m in infer_composition_maps(seg, images)]
    wrong_pseudo = _mislabeled([c.classes for c in corrupted], part_truth, lut)
    wrong_final = _mislabeled(distilled, part_truth, lut)
    ok = float(ious.mean()) >= 0.8 and wrong_final < wrong_pseudo
    record(4, ok, f"per-class IoU {np.round(ious, 3).tolist()} (mean {ious.mean():.3f}); mislabeled pixels "
                  f"corrupted pseudo-labels={wrong_pseudo}, distilled maps={wrong_final}")
    assert ok


# criterion 5 ------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_end_to_end(toy_runs):
    run = toy_runs[0]
    rep = json.loads((run["work"] / "reports" / "toy" / "report.json").read_text())
    counts = rep["label_counts"]
    index = load_dataset_index(run["data"].parent)["toy"]
    splits_ok = (len(index.split("train")) == 200 and len(index.split("validation")) == 20
                 and counts.get("logical_anomaly") == 50 and counts.get("structural_anomaly") == 50)
    iters_ok = max(TOY_PRESET["comp_iterations"], TOY_PRESET["app_iterations"]) <= 5000
    overall, logical = rep["auroc"]["overall"], rep["auroc"]["logical"]
    ablated = rep["ablation"]["without_composition"]["logical"]
    ok = (splits_ok and iters_ok and overall >= 0.90 and logical >= 0.85 and ablated < logical
          and run["seconds"] <= 1800)
    record(5, ok, f"AUROC overall={overall:.4f} logical={logical:.4f} structural={rep['auroc']['structural']:.4f}; "
                  f"without composition logical={ablated:.4f}; run {run['seconds']:.0f}s")
    assert ok


# criterion 6 ------------------------------------------------------------------


def _csv_scores(path: Path) -> np.ndarray:
    with open(path) as f:
        return np.array([[float(r["as_a"]), float(r["as_c"]), float(r["as_g"])] for r in csv.DictReader(f)])


@pytest.mark.slow
def test_criterion_6_calibration_identities(toy_runs):
    run = toy_runs[0]
    cal = json.loads((run["work"] / "calibration" / "toy.json").read_text())
    val = np.array(cal["validation_scores"])
    stats = calibrate(val)
    worst_mean = worst_std = 0.0
    for i, b in enumerate("acg"):
        z = (val[:, i] - stats.mu[b]) / stats.sigma[b]
        worst_mean = max(worst_mean, abs(z.mean()))
        worst_std = max(worst_std, abs(z.std(ddof=0) - 1))
    test = _csv_scores(run["work"] / "reports" / "toy" / "report.csv")
    base = [fuse(tuple(s), stats).total for s in test]
    worst_equi = 0.0
    for branch in range(3):
        for shift, scale in ((17.5, 1.0), (0.0, 3.25), (-4.0, 0.125)):
            v2, t2 = val.copy(), test.copy()
            v2[:, branch] = v2[:, branch] * scale + shift
            t2[:, branch] = t2[:, branch] * scale + shift
            st2 = calibrate(v2)
            for a, s in zip(base, t2):
                worst_equi = max(worst_equi, abs(fuse(tuple(s), st2).total - a) / max(1.0, abs(a)))
    ok = worst_mean <= 1e-9 and worst_std <= 1e-9 and worst_equi <= 1e-9
    record(6, ok, f"max |mean z|={worst_mean:.1e}, max |std z - 1|={worst_std:.1e}, "
                  f"fusion shift/scale max rel change={worst_equi:.1e}")
    assert ok


# criterion 7 ------------------------------------------------------------------


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_7_determinism(toy_runs):
    a, b = toy_runs
    groups = {
        "dataset": (a["data"], b["data"]),
        "composition maps": (a["work"] / "compmaps", b["work"] / "compmaps"),
        "synthetic samples": (a["work"] / "synthetic", b["work"] / "synthetic"),
    }
    diffs = {}
    for name, (x, y) in groups.items():
        bx, by = _tree_bytes(x), _tree_bytes(y)
        diffs[name] = len(bx) if bx == by else -1
    for f in ("report.json", "report.csv"):
        same = (a["work"] / "reports" / "toy" / f).read_bytes() == (b["work"] / "reports" / "toy" / f).read_bytes()
        diffs[f"eval {f}"] = 1 if same else -1
    ok = all(v > 0 for v in diffs.values())
    record(7, ok, "identical file counts per group: " + ", ".join(f"{k}={v if v > 0 else 'DIFFERS'}"
                                                                   for k, v in diffs.items()))
    assert ok
