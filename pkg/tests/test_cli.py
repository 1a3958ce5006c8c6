import json

import numpy as np
import pytest

from salad.cli import main
from salad.data import CompositionMap, load_composition_map, save_composition_map


def test_gen_toy_with_spec_file(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"category": "mini", "train": 2, "validation": 1, "test_good": 1,
                                "test_logical": 1, "test_structural": 1}))
    assert main(["gen-toy", "--spec", str(spec), "--out", str(tmp_path / "d"), "--seed", "3"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["train"] == 2 and summary["test"] == 3
    assert json.loads((tmp_path / "d" / "mini" / "toy_spec.json").read_text())["seed"] == 3


@pytest.mark.parametrize("kind", ["perlin_paste", "component_removal", "component_inpaint", "random"])
def test_simulate(tmp_path, kind, capsys):
    c = np.zeros((64, 64), np.int64)
    c[10:30, 10:30] = 1
    src = np.zeros((64, 64), np.int64)
    src[40:60, 40:60] = 2
    save_composition_map(CompositionMap(c, 3), tmp_path / "in" / "a.png")
    save_composition_map(CompositionMap(src, 3), tmp_path / "src" / "b.png")
    argv = ["simulate", "--in", str(tmp_path / "in" / "a.png"), "--kind", kind, "--seed", "4",
            "--source", str(tmp_path / "src" / "b.png"), "--out", str(tmp_path / "out")]
    assert main(argv) == 0
    meta = json.loads((tmp_path / "out" / "sample.json").read_text())
    if kind != "random":
        assert meta["kind"] == kind and meta["gt_area"] > 0
    assert load_composition_map(tmp_path / "out" / "augmented.png").num_classes == 3


def test_simulate_inpaint_needs_source(tmp_path, capsys):
    save_composition_map(CompositionMap(np.zeros((8, 8), np.int64), 2), tmp_path / "a.png")
    rc = main(["simulate", "--in", str(tmp_path / "a.png"), "--kind", "component_inpaint", "--out", str(tmp_path)])
    assert rc == 2 and "needs --source" in capsys.readouterr().err


def test_configuration_errors_exit_2(tmp_path, capsys):
    assert main(["gen-maps", "--data-root", str(tmp_path / "none"), "--workdir", str(tmp_path / "w")]) == 2
    assert main(["calibrate", "--set", "bogus=1", "--data-root", str(tmp_path), "--workdir", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert err.count("error:") == 2 and "unknown configuration key" in err


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen-toy", "gen-maps", "train", "calibrate", "eval", "run", "infer", "simulate"):
        assert cmd in out
