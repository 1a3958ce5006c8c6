"""Stage orchestration: configuration, artifact layout, manifests and evaluation.

Stages run in the order ``gen-maps -> train-appearance -> train-composition ->
train-global -> calibrate -> eval``. Each stage records a manifest holding
the hash of its inputs (configuration subset, upstream outputs, dataset
files) and of its outputs; rerunning a stage whose inputs and outputs are
unchanged is a no-op reported as ``up-to-date``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .appearance import STUB_TEACHER, AppearanceConfig, AppearanceModelState, train_appearance
from .backends import BackendConfig, extract_features
from .compmaps import (
    SegmenterConfig,
    SegmenterModel,
    compute_foreground_mask,
    fit_cluster_model,
    infer_composition_maps,
    pseudo_label,
    train_component_segmenter,
)
from .composition import CompositionBranch, CompositionConfig, train_composition_branch
from .data import (
    CategoryIndex,
    CompositionMap,
    ConfigurationError,
    ImageSample,
    SampleRecord,
    load_composition_map,
    load_dataset_index,
    load_image,
    load_record,
    load_region_masks,
    save_composition_map,
    saturation_area,
    with_carved_validation,
)
from .global_branch import compute_descriptor, fit_gaussians, load_gaussians, mahalanobis_score, save_gaussians
from .scoring import ScoreStats, auroc, auspro, branch_scores, calibrate, combined_localization_map, fuse

logger = logging.getLogger(__name__)

STAGES = ("gen-maps", "train-appearance", "train-composition", "train-global", "calibrate", "eval")
ABLATIONS = {"without_appearance": ("c", "g"), "without_composition": ("a", "g"), "without_global": ("a", "c")}


class MissingArtifactError(ConfigurationError):
    pass


@dataclass
class RunConfig:
    """Flat run configuration; defaults are the full-scale settings."""

    category: str = ""
    data_root: str = ""
    layout: str = "loco"
    workdir: str = ""
    feature_backend: str = "stub"
    feature_params: dict = field(default_factory=dict)
    mask_backend: str = "stub"
    mask_params: dict = field(default_factory=dict)
    K: int = 6
    seed: int = 0
    grid_n: int = 32
    split_fraction: float = 0.1
    cluster_max_samples: int = 100_000
    compmaps_dir: str = ""  # externally supplied composition maps (<dir>/<split>/.../<stem>.png)
    seg_epochs: int = 15
    seg_lr: float = 5e-4
    seg_batch_size: int = 8
    seg_weight_decay: float = 1e-2
    seg_width: int = 32
    seg_levels: int = 4
    seg_scale: int = 1
    comp_iterations: int = 70_000
    comp_lr: float = 1e-5
    comp_decay_fraction: float = 0.9
    comp_batch_size: int = 8
    comp_width: int = 64
    comp_levels: int = 4
    comp_scale: int = 1
    comp_alpha: float = 5.0
    comp_gamma: float = 2.0
    comp_p_anomaly: float = 0.5
    comp_min_area: int = 50
    app_iterations: int = 70_000
    app_lr: float = 1e-4
    app_decay_fraction: float = 0.9
    app_batch_size: int = 1
    app_p_hard: float = 0.999
    app_student_width: int = 64
    app_ae_width: int = 32
    app_ae_bottleneck: int = 64
    app_teacher_backend: str = "stub"
    app_teacher_params: dict = field(default_factory=lambda: dict(STUB_TEACHER))
    global_reg: float = 1e-3
    auspro_fpr_limit: float = 0.05
    synthetic_preview: int = 16
    deterministic: bool = True
    figures: bool = True
    stages: str = ",".join(STAGES)

    def __post_init__(self) -> None:
        if not self.workdir:
            self.workdir = os.environ.get("SALAD_WORKDIR", "")
        if self.layout not in ("loco", "flat"):
            raise ConfigurationError(f"unknown layout {self.layout!r}")
        if self.K < 1:
            raise ConfigurationError("K must be positive")
        BackendConfig(self.feature_backend, self.mask_backend)  # validates the ids
        unknown = set(self.stage_list) - set(STAGES)
        if unknown:
            raise ConfigurationError(f"unknown stages {sorted(unknown)}")

    @property
    def stage_list(self) -> list[str]:
        return [s.strip() for s in self.stages.split(",") if s.strip()]

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    @property
    def backend(self) -> BackendConfig:
        return BackendConfig(self.feature_backend, self.mask_backend, self.feature_params, self.mask_params, self.seed)

    @property
    def segmenter(self) -> SegmenterConfig:
        return SegmenterConfig(self.seg_epochs, self.seg_lr, self.seg_batch_size, self.seg_weight_decay,
                               self.seg_width, self.seg_levels, self.seg_scale, self.seed, self.deterministic)

    @property
    def composition(self) -> CompositionConfig:
        return CompositionConfig(
            iterations=self.comp_iterations, lr=self.comp_lr, decay_fraction=self.comp_decay_fraction,
            batch_size=self.comp_batch_size, width=self.comp_width, levels=self.comp_levels, scale=self.comp_scale,
            alpha=self.comp_alpha, gamma=self.comp_gamma, p_anomaly=self.comp_p_anomaly,
            min_area=self.comp_min_area, seed=self.seed, deterministic=self.deterministic,
        )

    @property
    def appearance(self) -> AppearanceConfig:
        return AppearanceConfig(
            iterations=self.app_iterations, lr=self.app_lr, decay_fraction=self.app_decay_fraction,
            batch_size=self.app_batch_size, p_hard=self.app_p_hard, student_width=self.app_student_width,
            ae_width=self.app_ae_width, ae_bottleneck=self.app_ae_bottleneck,
            teacher_backend=self.app_teacher_backend, teacher_params=dict(self.app_teacher_params),
            seed=self.seed, deterministic=self.deterministic,
        )


# Settings for the desk-scale toy benchmark; everything else keeps its default.
TOY_PRESET = {
    "K": 3,
    "feature_params": {"position": False},
    "seg_epochs": 8,
    "seg_batch_size": 4,
    "seg_lr": 3e-3,
    "seg_width": 8,
    "seg_levels": 3,
    "seg_scale": 2,
    "comp_iterations": 2000,
    "comp_lr": 1e-3,
    "comp_batch_size": 4,
    "comp_width": 8,
    "comp_levels": 3,
    "comp_scale": 4,
    "app_iterations": 1000,
    "app_lr": 1e-3,
    "app_batch_size": 4,
    "app_student_width": 16,
    "app_ae_width": 8,
    "app_ae_bottleneck": 16,
}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, dict):
        value = json.loads(raw) if raw else {}
        if not isinstance(value, dict):
            raise ConfigurationError(f"expected a JSON object, got {raw!r}")
        return value
    return raw


def parse_overrides(pairs: dict[str, str] | list[str]) -> dict:
    """Typed overrides from ``key=value`` strings (or a dict of raw strings)."""
    if isinstance(pairs, list):
        items = {}
        for p in pairs:
            if "=" not in p:
                raise ConfigurationError(f"override {p!r} is not of the form key=value")
            k, v = p.split("=", 1)
            items[k.strip()] = v
        pairs = items
    defaults = RunConfig.__dataclass_fields__
    out = {}
    for k, v in pairs.items():
        if k not in defaults:
            raise ConfigurationError(f"unknown configuration key {k!r}")
        f = defaults[k]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[k] = v if not isinstance(v, str) else _parse_value(v, default)
    return out


def load_run_config(path: str | Path | None = None, overrides: dict | None = None, preset: str | None = None) -> RunConfig:
    """Read a flat ``key = value`` file and apply ``preset`` then ``overrides``.

    Lines starting with ``#`` and trailing `` # ...`` are comments; dict-valued
    keys take a JSON object. A file holding one JSON object is also accepted.
    """
    values: dict = dict(TOY_PRESET) if preset == "toy" else {}
    if preset not in (None, "toy"):
        raise ConfigurationError(f"unknown preset {preset!r}")
    if path is not None:
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            values.update(parse_overrides(json.loads(text)))
        else:
            raw = {}
            for n, line in enumerate(text.splitlines(), 1):
                line = line.split(" #", 1)[0].strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigurationError(f"{path}:{n}: expected key = value")
                k, v = line.split("=", 1)
                raw[k.strip()] = v
            values.update(parse_overrides(raw))
    values.update(overrides or {})
    return RunConfig(**values)


# hashing and manifests ---------------------------------------------------------


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


STAGE_KEYS = {
    "gen-maps": ("data_root", "layout", "category", "feature_backend", "feature_params", "mask_backend", "mask_params",
                 "K", "seed", "grid_n", "split_fraction", "cluster_max_samples", "compmaps_dir", "seg_", "deterministic"),
    "train-appearance": ("data_root", "layout", "category", "split_fraction", "seed", "app_", "deterministic"),
    "train-composition": ("seed", "comp_", "synthetic_preview", "deterministic"),
    "train-global": ("global_reg",),
    "calibrate": (),
    "eval": ("auspro_fpr_limit", "figures"),
}
UPSTREAM = {
    "gen-maps": (),
    "train-appearance": (),
    "train-composition": ("gen-maps",),
    "train-global": ("gen-maps", "train-appearance"),
    "calibrate": ("train-appearance", "train-composition", "train-global"),
    "eval": ("calibrate",),
}
ARTIFACT_NAMES = {
    "gen-maps": "composition maps",
    "train-appearance": "appearance checkpoint",
    "train-composition": "composition branch checkpoint",
    "train-global": "global Gaussians",
    "calibrate": "calibration statistics",
}
STAGE_COMMANDS = {
    "gen-maps": "salad gen-maps",
    "train-appearance": "salad train --branch appearance",
    "train-composition": "salad train --branch composition",
    "train-global": "salad train --branch global",
    "calibrate": "salad calibrate",
    "eval": "salad eval",
}


@dataclass
class StageReport:
    stage: str
    status: str  # "ran" or "up-to-date"
    outputs: dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0
    details: dict = field(default_factory=dict)


@contextmanager
def workdir_lock(workdir: Path):
    """Exclusive lock file; a stale lock left by a dead process is replaced."""
    workdir.mkdir(parents=True, exist_ok=True)
    lock = workdir / ".salad.lock"
    for attempt in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            alive = False
            if pid > 0:
                try:
                    os.kill(pid, 0)
                    alive = True
                except ProcessLookupError:
                    alive = False
                except PermissionError:
                    alive = True
            if alive or attempt:
                raise ConfigurationError(f"workdir {workdir} is locked by process {pid}")
            logger.warning("removing stale lock %s (pid %d)", lock, pid)
            lock.unlink(missing_ok=True)
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class Pipeline:
    """Artifacts for one category in one workdir."""

    def __init__(self, config: RunConfig):
        if not config.workdir:
            raise ConfigurationError("no workdir given (set workdir or SALAD_WORKDIR)")
        if not config.data_root:
            raise ConfigurationError("no data_root given")
        self.config = config
        self.workdir = Path(config.workdir)
        index = load_dataset_index(config.data_root, config.layout,
                                   [config.category] if config.category else None)
        if not config.category:
            if len(index.categories) != 1:
                raise ConfigurationError(f"several categories found, pick one: {sorted(index.categories)}")
            config.category = next(iter(index.categories))
        self.index: CategoryIndex = with_carved_validation(index[config.category], config.split_fraction, config.seed)
        self._images: dict[str, ImageSample] = {}

    # paths

    @property
    def cat(self) -> str:
        return self.config.category

    def path(self, kind: str) -> Path:
        w, c = self.workdir, self.cat
        return {
            "compmaps": w / "compmaps" / c,
            "pseudo": w / "compmaps" / c / "pseudo",
            "cluster": w / "compmaps" / c / "cluster.json",
            "segmenter": w / "segmenter" / f"{c}.ckpt",
            "compbranch": w / "compbranch" / c,
            "synthetic": w / "synthetic" / c,
            "appearance": w / "appearance" / f"{c}.ckpt",
            "global": w / "global" / f"{c}.gauss",
            "calibration": w / "calibration" / f"{c}.json",
            "report": w / "reports" / c / "report.json",
            "manifests": w / "manifests" / c,
        }[kind]

    def compmap_path(self, record: SampleRecord) -> Path:
        return self.path("compmaps") / f"{record.key}.png"

    def manifest_path(self, stage: str) -> Path:
        return self.path("manifests") / f"{stage}.json"

    # data access

    def records(self, split: str) -> tuple[SampleRecord, ...]:
        return self.index.split(split)

    def image(self, record: SampleRecord) -> ImageSample:
        key = record.key
        if key not in self._images:
            self._images[key] = load_record(record)
        return self._images[key]

    def images(self, split: str) -> list[ImageSample]:
        return [self.image(r) for r in self.records(split)]

    def compmaps(self, split: str) -> list[CompositionMap]:
        return [load_composition_map(self.compmap_path(r)) for r in self.records(split)]

    def dataset_fingerprint(self, splits=("train", "validation", "test")) -> str:
        h = hashlib.sha256()
        for split in splits:
            for r in self.records(split):
                h.update(f"{split}:{r.key}:{file_hash(r.path)}\n".encode())
        return h.hexdigest()

    # manifests

    def _config_subset(self, stage: str) -> dict:
        keys = STAGE_KEYS[stage]
        cfg = self.config.to_json()
        return {k: v for k, v in cfg.items() if any(k == p or (p.endswith("_") and k.startswith(p)) for p in keys)}

    def read_manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        return json.loads(p.read_text()) if p.is_file() else None

    def _upstream_hashes(self, stage: str) -> dict[str, str]:
        out = {}
        for up in UPSTREAM[stage]:
            m = self.read_manifest(up)
            if m is None or not self._outputs_intact(m):
                raise MissingArtifactError(
                    f"missing artifact: {ARTIFACT_NAMES[up]} (run `{STAGE_COMMANDS[up]}` first)"
                )
            out[up] = m["output_hash"]
        return out

    def input_hash(self, stage: str, extra: dict | None = None) -> str:
        payload = {"stage": stage, "version": __version__, "config": self._config_subset(stage),
                   "upstream": self._upstream_hashes(stage), "extra": extra or {}}
        if stage in ("gen-maps", "train-appearance"):
            payload["dataset"] = self.dataset_fingerprint()
        return _json_hash(payload)

    def _outputs_intact(self, manifest: dict) -> bool:
        for rel, digest in manifest.get("outputs", {}).items():
            p = self.workdir / rel
            if not p.is_file() or file_hash(p) != digest:
                return False
        return True

    def _hash_outputs(self, paths: list[Path]) -> dict[str, str]:
        out = {}
        for p in sorted(set(paths)):
            out[str(p.relative_to(self.workdir))] = file_hash(p)
        return out

    def _write_manifest(self, stage: str, in_hash: str, outputs: dict[str, str], wall: float, details: dict) -> None:
        m = {
            "stage": stage,
            "category": self.cat,
            "code_version": __version__,
            "input_hash": in_hash,
            "output_hash": _json_hash(outputs),
            "outputs": outputs,
            "config": self.config.to_json(),
            "seed": self.config.seed,
            "wall_time_s": round(wall, 3),
            "details": details,
        }
        p = self.manifest_path(stage)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(m, indent=2, sort_keys=True, default=str))

    def run_stage(self, stage: str, force: bool = False, **kwargs) -> StageReport:
        if stage not in STAGES:
            raise ConfigurationError(f"unknown stage {stage!r}; expected one of {STAGES}")
        extra = {k: str(v) for k, v in kwargs.items() if v is not None}
        in_hash = self.input_hash(stage, extra)
        old = self.read_manifest(stage)
        if not force and old and old["input_hash"] == in_hash and self._outputs_intact(old):
            logger.info("%s: up-to-date", stage)
            return StageReport(stage, "up-to-date", old["outputs"], 0.0, old.get("details", {}))
        with workdir_lock(self.workdir):
            t0 = time.perf_counter()
            fn = getattr(self, "_stage_" + stage.replace("-", "_"))
            paths, details = fn(**kwargs)
            wall = time.perf_counter() - t0
            outputs = self._hash_outputs(paths)
            self._write_manifest(stage, in_hash, outputs, wall, details)
        logger.info("%s: done in %.1fs", stage, wall)
        return StageReport(stage, "ran", outputs, wall, details)

    def run(self, stages: list[str] | None = None, **kwargs) -> list[StageReport]:
        return [self.run_stage(s, **(kwargs if s == "eval" else {})) for s in (stages or self.config.stage_list)]

    # stages

    def _stage_gen_maps(self) -> tuple[list[Path], dict]:
        cfg = self.config
        out_dir = self.path("compmaps")
        paths: list[Path] = []
        splits = ("train", "validation", "test")
        if cfg.compmaps_dir:
            return self._import_compmaps(Path(cfg.compmaps_dir), splits)
        bcfg = cfg.backend
        train = self.images("train")
        feats = [extract_features(im, bcfg) for im in train]
        fgs = [compute_foreground_mask(im, bcfg) for im in train]
        model = fit_cluster_model(feats, fgs, cfg.K, cfg.seed, cfg.cluster_max_samples)
        self.path("cluster").parent.mkdir(parents=True, exist_ok=True)
        self.path("cluster").write_text(json.dumps(model.to_json()))
        paths.append(self.path("cluster"))
        pseudo = []
        for r, im, f, fg in zip(self.records("train"), train, feats, fgs):
            _, c_pseudo = pseudo_label(im, model, bcfg, cfg.grid_n, features=f, fg=fg)
            pseudo.append(c_pseudo)
            p = self.path("pseudo") / f"{r.key}.png"
            save_composition_map(c_pseudo, p, cfg.seed)
            paths.append(p)
        seg = train_component_segmenter(train, pseudo, cfg.segmenter)
        seg.save(self.path("segmenter"))
        paths += [self.path("segmenter"), self.path("segmenter").with_suffix(".json")]
        for split in splits:
            maps = infer_composition_maps(seg, self.images(split))
            for r, c in zip(self.records(split), maps):
                p = out_dir / f"{r.key}.png"
                save_composition_map(c, p, cfg.seed)
                paths.append(p)
        paths += sorted(out_dir.rglob("meta.json"))
        return paths, {"num_classes": cfg.K + 1, "segmenter_epoch_losses": seg.epoch_losses}

    def _import_compmaps(self, src: Path, splits) -> tuple[list[Path], dict]:
        paths = []
        ks = set()
        for split in splits:
            for r in self.records(split):
                c = load_composition_map(src / f"{r.key}.png")
                ks.add(c.num_classes)
                p = self.compmap_path(r)
                save_composition_map(c, p, self.config.seed)
                paths.append(p)
        if len(ks) != 1:
            raise ConfigurationError(f"external composition maps disagree on num_classes: {sorted(ks)}")
        paths += sorted(self.path("compmaps").rglob("meta.json"))
        return paths, {"num_classes": ks.pop(), "source": str(src)}

    def _stage_train_appearance(self) -> tuple[list[Path], dict]:
        state = train_appearance(self.images("train"), self.config.appearance)
        state.save(self.path("appearance"))
        return [self.path("appearance"), self.path("appearance").with_suffix(".json")], {
            "final_loss": state.history[-1]["loss"] if state.history else None}

    def _stage_train_composition(self) -> tuple[list[Path], dict]:
        preview: list = []
        branch = train_composition_branch(self.compmaps("train"), self.config.composition, preview,
                                          self.config.synthetic_preview)
        prefix = self.path("compbranch")
        branch.save(prefix)
        paths = [Path(f"{prefix}.recon.ckpt"), Path(f"{prefix}.disc.ckpt"), Path(f"{prefix}.json")]
        paths += self._write_synthetic(preview)
        last = branch.history[-1] if branch.history else {}
        return paths, {"final_recon": last.get("recon"), "final_disc": last.get("disc")}

    def _write_synthetic(self, samples) -> list[Path]:
        from PIL import Image

        folder = self.path("synthetic")
        folder.mkdir(parents=True, exist_ok=True)
        paths = []
        kinds = []
        for i, s in enumerate(samples):
            p = folder / f"{i:03d}_map.png"
            save_composition_map(s.augmented, p, self.config.seed)
            g = folder / f"{i:03d}_gt.png"
            Image.fromarray(s.gt_mask.astype(np.uint8) * 255, mode="L").save(g)
            paths += [p, g]
            kinds.append(s.kind)
        (folder / "kinds.json").write_text(json.dumps(kinds))
        return paths + [folder / "kinds.json", folder / "meta.json"] if samples else paths

    def _stage_train_global(self) -> tuple[list[Path], dict]:
        app = AppearanceModelState.load(self.path("appearance"))
        descs = []
        for (_, f_t), c in zip(_batched_appearance(app, self.images("train")), self.compmaps("train")):
            descs.append(compute_descriptor(f_t, c))
        gaussians = fit_gaussians(descs, self.config.global_reg)
        save_gaussians(gaussians, self.path("global"))
        return [self.path("global")], {"d_max": [g.d_max for g in gaussians]}

    # scoring

    def load_models(self):
        return (
            AppearanceModelState.load(self.path("appearance")),
            CompositionBranch.load(self.path("compbranch")),
            load_gaussians(self.path("global")),
        )

    def score_images(self, images: list[ImageSample], maps: list[CompositionMap], models=None) -> list[dict]:
        """Raw branch outputs for each image: maps, scores and the global score."""
        app, comp, gaussians = models or self.load_models()
        app_out = _batched_appearance(app, images)
        comp_maps = comp.anomaly_maps(maps)
        out = []
        for (a_a, f_t), a_c, c in zip(app_out, comp_maps, maps):
            s_g = mahalanobis_score(compute_descriptor(f_t, c), gaussians)
            out.append({"a_a": a_a, "a_c": a_c, "scores": branch_scores(a_a, a_c, s_g)})
        return out

    def _stage_calibrate(self) -> tuple[list[Path], dict]:
        results = self.score_images(self.images("validation"), self.compmaps("validation"))
        scores = np.array([r["scores"] for r in results])
        extrema = {
            "a": (min(float(r["a_a"].scores.min()) for r in results), max(float(r["a_a"].scores.max()) for r in results)),
            "c": (min(float(r["a_c"].scores.min()) for r in results), max(float(r["a_c"].scores.max()) for r in results)),
        }
        source = _json_hash([r.key for r in self.records("validation")])
        stats = calibrate(scores, extrema, source)
        p = self.path("calibration")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps({**stats.to_json(), "validation_scores": scores.tolist()}, indent=2))
        return [p], {"mu": stats.mu, "sigma": stats.sigma}

    def load_stats(self) -> ScoreStats:
        d = json.loads(self.path("calibration").read_text())
        d.pop("validation_scores", None)
        return ScoreStats.from_json(d)

    def _stage_eval(self, report: str | Path | None = None) -> tuple[list[Path], dict]:
        report_path = Path(report) if report else self.path("report")
        stats = self.load_stats()
        records = self.records("test")
        results = self.score_images(self.images("test"), self.compmaps("test"))
        fused = [fuse(r["scores"], stats) for r in results]
        labels = [r.label for r in records]
        rep = build_report(self.cat, labels, fused)
        fpr_limit = self.config.auspro_fpr_limit
        if self.index.has_ground_truth:
            loc = [combined_localization_map(r["a_a"], r["a_c"], stats) for r in results]
            regions = [self._regions(r) for r in records]
            rep["auspro"] = {"fpr_limit": fpr_limit}
            for subset, keep in _subsets(labels).items():
                try:
                    rep["auspro"][subset] = auspro([loc[i] for i in keep], [regions[i] for i in keep], fpr_limit)
                except ValueError as exc:
                    rep["auspro"][subset] = None
                    logger.warning("AUsPRO %s not computed: %s", subset, exc)
        else:
            rep["auspro"] = None
        rep["calibration"] = stats.to_json()
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(json.dumps(rep, indent=2, sort_keys=True))
        csv_path = report_path.with_suffix(".csv")
        csv_path.write_text(per_image_csv(records, fused))
        paths = [report_path, csv_path]
        if self.config.figures:
            from .plotting import render_report_figures

            paths += render_report_figures(report_path, records, labels, fused, results,
                                           [self.image(r) for r in records], self.compmaps("test"), stats)
        return paths, {"report": str(report_path), "auroc": rep["auroc"]}

    def _regions(self, record: SampleRecord) -> list[tuple[np.ndarray, float]]:
        out = []
        for mask, value in load_region_masks(record):
            out.append((mask, saturation_area(self.index.defects_config, value, int(mask.sum()))))
        return out

    # inference

    def infer(self, image_path: str | Path, out_dir: str | Path) -> dict:
        """Maps and fused score for one image; writes ``<stem>_*.{png,npy}`` and ``<stem>_scores.json``."""
        for stage in ("gen-maps", "calibrate"):
            m = self.read_manifest(stage)
            if m is None or not self._outputs_intact(m):
                raise MissingArtifactError(
                    f"missing artifact: {ARTIFACT_NAMES[stage]} (run `{STAGE_COMMANDS[stage]}` first)")
        if not self.path("segmenter").is_file():
            raise MissingArtifactError("missing artifact: component segmenter (composition maps were imported; "
                                       "run `salad gen-maps` without compmaps_dir first)")
        image = load_image(image_path)
        seg = SegmenterModel.load(self.path("segmenter"))
        c = infer_composition_maps(seg, [image])[0]
        stats = self.load_stats()
        r = self.score_images([image], [c])[0]
        fr = fuse(r["scores"], stats)
        loc = combined_localization_map(r["a_a"], r["a_c"], stats)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = Path(image_path).stem
        save_composition_map(c, out_dir / f"{stem}_compmap.png")
        for name, m in (("appearance", r["a_a"]), ("composition", r["a_c"]), ("combined", loc)):
            np.save(out_dir / f"{stem}_{name}.npy", m.scores)
        result = dataclasses.asdict(fr)
        (out_dir / f"{stem}_scores.json").write_text(json.dumps(result, indent=2))
        if self.config.figures:
            from .plotting import render_inference_figure

            render_inference_figure(out_dir / f"{stem}_maps.png", image, c, r["a_a"], r["a_c"], loc)
        return result


def _batched_appearance(app: AppearanceModelState, images: list[ImageSample], batch_size: int = 16):
    out = []
    for s in range(0, len(images), batch_size):
        out.extend(app.anomaly_maps(images[s : s + batch_size]))
    return out


def _subsets(labels: list[str]) -> dict[str, list[int]]:
    good = [i for i, l in enumerate(labels) if l == "good"]
    logical = [i for i, l in enumerate(labels) if l == "logical_anomaly"]
    structural = [i for i, l in enumerate(labels) if l == "structural_anomaly"]
    return {"overall": good + logical + structural, "logical": good + logical, "structural": good + structural}


def _subset_auroc(labels, scores) -> dict[str, float | None]:
    out = {}
    for name, keep in _subsets(labels).items():
        y = [int(labels[i] != "good") for i in keep]
        out[name] = auroc([scores[i] for i in keep], y) if 0 < sum(y) < len(y) else None
    return out


def build_report(category: str, labels: list[str], fused) -> dict:
    """Image-level AUROC overall / logical / structural, per branch and with each branch removed."""
    total = [f.total for f in fused]
    counts = {l: labels.count(l) for l in sorted(set(labels))}
    rep = {"category": category, "num_test_images": len(labels), "label_counts": counts,
           "auroc": _subset_auroc(labels, total)}
    rep["ablation"] = {name: _subset_auroc(labels, [f.subset_total(b) for f in fused])
                       for name, b in ABLATIONS.items()}
    rep["branch_auroc"] = {name: _subset_auroc(labels, [getattr(f, f"z_{b}") for f in fused])
                           for name, b in (("appearance", "a"), ("composition", "c"), ("global", "g"))}
    return rep


def per_image_csv(records: list[SampleRecord], fused) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "label", "defect", "as_a", "as_c", "as_g", "z_a", "z_c", "z_g", "total"])
    for r, f in zip(records, fused):
        w.writerow([r.key, r.label, r.defect, *(repr(v) for v in (f.as_a, f.as_c, f.as_g, f.z_a, f.z_c, f.z_g, f.total))])
    return buf.getvalue()
