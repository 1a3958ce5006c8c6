"""Stage orchestration on a tiny toy dataset with minimal schedules."""

import json

import numpy as np
import pytest

from salad.cli import main as cli_main
from salad.compmaps import train_component_segmenter
from salad.data import ConfigurationError
from salad.pipeline import (
    STAGES,
    MissingArtifactError,
    Pipeline,
    RunConfig,
    load_run_config,
    parse_overrides,
    workdir_lock,
)
from salad.scoring import fuse
from salad.toy import ToySpec, generate_toy_dataset

TINY = {
    "K": 3, "feature_params": {"position": False}, "grid_n": 16,
    "seg_epochs": 1, "seg_batch_size": 2, "seg_width": 4, "seg_levels": 2, "seg_scale": 4,
    "comp_iterations": 3, "comp_batch_size": 2, "comp_width": 4, "comp_levels": 2, "comp_scale": 4,
    "app_iterations": 3, "app_batch_size": 2, "app_student_width": 4, "app_ae_width": 4, "app_ae_bottleneck": 4,
    "synthetic_preview": 4,
}


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_toy_dataset(ToySpec(train=6, validation=2, test_good=2, test_logical=3, test_structural=2), root)
    return root


@pytest.fixture(scope="module")
def done(data_root, tmp_path_factory):
    work = tmp_path_factory.mktemp("work")
    # ground-truth part maps stand in for gen-maps so the branches see clean classes
    cfg = RunConfig(data_root=str(data_root), workdir=str(work), compmaps_dir=str(data_root / "toy" / "part_masks"),
                    **TINY)
    pipe = Pipeline(cfg)
    reports = pipe.run()
    return pipe, reports


def test_full_run_writes_artifacts(done):
    pipe, reports = done
    assert [r.stage for r in reports] == list(STAGES) and all(r.status == "ran" for r in reports)
    report = pipe.path("report")
    for f in (report, report.with_suffix(".csv"), report.parent / "report_roc.png",
              report.parent / "report_scores.png", report.parent / "report_examples.png"):
        assert f.is_file(), f
    rep = json.loads(report.read_text())
    assert rep["num_test_images"] == 7 and set(rep["ablation"]) == {
        "without_appearance", "without_composition", "without_global"}
    assert len(list((pipe.path("synthetic")).glob("*_map.png"))) == 4
    assert all(pipe.compmap_path(r).is_file() for s in ("train", "validation", "test") for r in pipe.records(s))


def test_gen_maps_from_images(data_root, tmp_path):
    pipe = Pipeline(RunConfig(data_root=str(data_root), workdir=str(tmp_path), **TINY))
    rep = pipe.run_stage("gen-maps")
    assert rep.status == "ran" and rep.details["num_classes"] == 4
    assert pipe.path("cluster").is_file() and pipe.path("segmenter").is_file()
    assert len(list(pipe.path("pseudo").rglob("*.png"))) == 6
    assert all(m.num_classes == 4 for m in pipe.compmaps("test"))


def test_rerun_is_up_to_date(done):
    pipe, _ = done
    again = Pipeline(pipe.config).run()
    assert all(r.status == "up-to-date" for r in again)


def test_config_change_invalidates_downstream(done):
    pipe, _ = done
    p2 = Pipeline(pipe.config.replace(global_reg=2e-3))
    assert p2.run_stage("train-composition").status == "up-to-date"
    assert p2.run_stage("train-global").status == "ran"
    assert p2.run_stage("calibrate").status == "ran"
    p2.run_stage("eval")
    # restoring the old value reruns again because the output hash changed back
    assert Pipeline(pipe.config).run_stage("train-global").status == "ran"


def test_tampered_output_reruns(done):
    pipe, _ = done
    cal = pipe.path("calibration")
    cal.write_text(cal.read_text() + " ")
    assert Pipeline(pipe.config).run_stage("calibrate").status == "ran"


def test_missing_artifact_message(data_root, tmp_path):
    pipe = Pipeline(RunConfig(data_root=str(data_root), workdir=str(tmp_path), **TINY))
    with pytest.raises(MissingArtifactError, match=r"missing artifact: composition maps \(run `salad gen-maps` first\)"):
        pipe.run_stage("train-composition")
    assert cli_main(["calibrate", "--data-root", str(data_root), "--workdir", str(tmp_path)]) == 2


def test_infer_single_image(done, data_root, tmp_path):
    pipe, _ = done
    img = pipe.records("test")[-1].path
    with pytest.raises(MissingArtifactError, match="component segmenter"):
        pipe.infer(img, tmp_path)
    seg = train_component_segmenter(pipe.images("train"), pipe.compmaps("train"), pipe.config.segmenter)
    seg.save(pipe.path("segmenter"))
    out = pipe.infer(img, tmp_path)
    assert set(out) >= {"as_a", "as_c", "as_g", "total"}
    stem = img.stem
    for f in (f"{stem}_compmap.png", f"{stem}_scores.json", f"{stem}_maps.png"):
        assert (tmp_path / f).is_file()


def test_score_images_matches_report(done):
    pipe, _ = done
    Pipeline(pipe.config).run()  # earlier tests may have left the report stale
    recs = pipe.records("test")
    scored = pipe.score_images([pipe.image(r) for r in recs], pipe.compmaps("test"))
    rows = pipe.path("report").with_suffix(".csv").read_text().splitlines()[1:]
    totals = [float(r.split(",")[-1]) for r in rows]
    np.testing.assert_allclose([fuse(s["scores"], pipe.load_stats()).total for s in scored], totals, rtol=1e-9)


def test_lock_blocks_second_writer(tmp_path):
    with workdir_lock(tmp_path):
        with pytest.raises(ConfigurationError, match="locked"):
            with workdir_lock(tmp_path):
                pass
    assert not (tmp_path / ".salad.lock").exists()


def test_stale_lock_is_replaced(tmp_path):
    (tmp_path / ".salad.lock").write_text("999999999")
    with workdir_lock(tmp_path):
        pass


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nK = 4  # inline\nfeature_params = {\"cell\": 2}\ndeterministic = no\ncomp_lr = 2e-4\n")
    rc = load_run_config(cfg, {"seed": 9}, preset="toy")
    assert rc.K == 4 and rc.feature_params == {"cell": 2} and rc.deterministic is False
    assert rc.comp_lr == 2e-4 and rc.seed == 9 and rc.comp_iterations == 2000
    (tmp_path / "run.json").write_text(json.dumps({"K": 5}))
    assert load_run_config(tmp_path / "run.json").K == 5
    assert parse_overrides(["K=7", "figures=false"]) == {"K": 7, "figures": False}
    for bad in (["nokey"], ["bogus=1"], ["figures=maybe"]):
        with pytest.raises(ConfigurationError):
            parse_overrides(bad)
    with pytest.raises(ConfigurationError):
        load_run_config(preset="huge")


def test_full_scale_defaults():
    rc = RunConfig()
    assert (rc.K, rc.comp_iterations, rc.app_iterations, rc.comp_alpha, rc.split_fraction) == (6, 70_000, 70_000, 5.0, 0.1)
    assert rc.composition.lr == 1e-5 and rc.appearance.lr == 1e-4


def test_pipeline_requires_paths(data_root, monkeypatch):
    monkeypatch.delenv("SALAD_WORKDIR", raising=False)
    with pytest.raises(ConfigurationError, match="workdir"):
        Pipeline(RunConfig(data_root=str(data_root)))


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    assert load_run_config(root / "toy.cfg") == load_run_config(preset="toy")
    loco = load_run_config(root / "loco.cfg")
    assert loco.mask_backend == "sam-hq" and loco.K == 6 and loco.appearance.teacher_backend == "torchscript"
