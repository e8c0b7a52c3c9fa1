import csv
import json

import pytest

from stacklab.cli import TRAIN_DEFAULTS, main
from stacklab.learning import EXPERIMENT_CONFIG
from stacklab.planning import scripted_scenes

FAST = ["--epochs", "1", "--min-steps", "0", "--batch-size", "8"]


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["dataset", "build", "--groups", "all", "--per-group", "2", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_build_writes_manifest_and_run_json(data):
    lines = (data / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 32
    run = json.loads((data / "run.json").read_text())
    assert run["command"] == "dataset build"
    assert run["options"]["per_group"] == 2 and run["options"]["seed"] == 7


def test_build_independent_of_jobs(tmp_path):
    args = ["dataset", "build", "--groups", "4B-2D-Uni,6B-3D-NonUni", "--per-group", "3", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a"), "--jobs", "1"]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()


def test_run_json_reproduces_build(data, tmp_path):
    assert main(["dataset", "build", "--config", str(data / "run.json"), "--groups", "4B-2D-Uni",
                 "--out", str(tmp_path)]) == 0
    first = (data / "manifest.jsonl").read_text().splitlines()
    again = (tmp_path / "manifest.jsonl").read_text().splitlines()
    mine = [json.loads(l) for l in again[1:]]
    theirs = [json.loads(l) for l in first[1:] if json.loads(l)["group_id"] == "4B-2D-Uni"]
    assert mine == theirs


def test_bad_group_lists_valid_ones(tmp_path, capsys):
    code = main(["dataset", "build", "--groups", "5B-2D-Uni", "--per-group", "1", "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "5B-2D-Uni" in err and "14B-3D-NonUni" in err


def test_missing_required_option(capsys):
    assert main(["dataset", "build", "--per-group", "1"]) == 2
    assert "--out" in capsys.readouterr().err


def test_unknown_subcommand():
    assert main(["frobnicate"]) == 2


def test_stats(data, tmp_path, capsys):
    assert main(["dataset", "stats", "--data", str(data), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 17 and out[0].startswith("group,")


def test_precedence_flag_over_config_over_env(data, tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "min_steps": 0, "batch_size": 4, "seed": 11}))
    monkeypatch.setenv("STACKLAB_SEED", "99")
    out = tmp_path / "t1"
    assert main(["train", "--data", str(data), "--groups", "4B-2D-Uni", "--config", str(cfg),
                 "--batch-size", "2", "--out", str(out)]) == 0
    opts = json.loads((out / "run.json").read_text())["options"]
    assert (opts["epochs"], opts["batch_size"], opts["seed"]) == (1, 2, 11)
    assert opts["learning_rate"] == TRAIN_DEFAULTS["learning_rate"]
    out2 = tmp_path / "t2"
    assert main(["train", "--data", str(data), "--groups", "4B-2D-Uni", "--out", str(out2)] + FAST) == 0
    assert json.loads((out2 / "run.json").read_text())["options"]["seed"] == 99
    assert (out2 / "model.ckpt").is_file()


def test_train_defaults_match_experiment_config():
    for key, value in TRAIN_DEFAULTS.items():
        assert getattr(EXPERIMENT_CONFIG, key) == value


def test_unknown_config_key_rejected(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epoch": 3}))
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


def test_cross_design_has_two_rows(data, tmp_path):
    out = tmp_path / "cross"
    assert main(["eval", "--data", str(data), "--design", "cross", "--out", str(out)] + FAST) == 0
    rows = rows_of(out / "cross.csv")
    assert [(r["train"], r["test"]) for r in rows] == [("simple", "complex"), ("complex", "simple")]


def test_generalization_has_sixteen_rows(data, tmp_path):
    out = tmp_path / "gen"
    assert main(["eval", "--data", str(data), "--design", "generalization", "--out", str(out)] + FAST) == 0
    rows = rows_of(out / "generalization.csv")
    assert len(rows) == 16 and all(r["train"] == "all" for r in rows)
    for r in rows:
        n = int(r["tp"]) + int(r["tn"]) + int(r["fp"]) + int(r["fn"])
        assert n == int(r["n"]) == 1
    # re-evaluating the saved checkpoint gives the same table
    out2 = tmp_path / "gen2"
    assert main(["eval", "--data", str(data), "--design", "generalization", "--model",
                 str(out / "model_all.ckpt"), "--out", str(out2)]) == 0
    assert rows_of(out2 / "generalization.csv") == rows


def test_eval_missing_checkpoint(data, tmp_path):
    assert main(["eval", "--data", str(data), "--design", "generalization", "--model",
                 str(tmp_path / "nope.ckpt"), "--out", str(tmp_path)]) == 2


def test_eval_unknown_design(data, tmp_path):
    assert main(["eval", "--data", str(data), "--design", "sideways", "--out", str(tmp_path)]) == 2


@pytest.fixture(scope="module")
def model(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    assert main(["train", "--data", str(data), "--groups", "4B-2D-Uni,6B-2D-Uni", "--out", str(out)] + FAST) == 0
    return out / "model.ckpt"


def test_cam_outputs(data, model, tmp_path):
    assert main(["cam", "--data", str(data), "--model", str(model), "--scene", "4B-2D-Uni/1",
                 "--out", str(tmp_path)]) == 0
    result = json.loads((tmp_path / "cam.json").read_text())
    assert set(result) >= {"logits", "p_stable", "pearson_unstable_vs_heat"}
    assert (tmp_path / "cam_unstable.pgm").is_file()
    assert main(["cam", "--data", str(data), "--model", str(model), "--scene", "4B-2D-Uni/99",
                 "--out", str(tmp_path)]) == 2
    assert main(["cam", "--data", str(data), "--model", str(model), "--scene", "garbage",
                 "--out", str(tmp_path)]) == 2


def test_plan_scene_file_is_deterministic(model, tmp_path):
    scene = tmp_path / "s.json"
    scene.write_text(json.dumps(scripted_scenes()[2].to_dict()))
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["plan", "--scene", str(scene), "--model", str(model), "--out", str(out)]) == 0
    assert (a / "candidates.csv").read_bytes() == (b / "candidates.csv").read_bytes()
    assert len(rows_of(a / "candidates.csv")) == 14
    summary = rows_of(a / "summary.csv")
    assert [r["orientation"] for r in summary] == ["Horizontal", "Vertical", "All"]
    assert json.loads((a / "run.json").read_text())["options"]["attempts"] == 3


def test_plan_empty_mask(model, tmp_path):
    from stacklab.imaging import Mask, write_mask_pgm
    import numpy as np

    write_mask_pgm(tmp_path / "empty.pbm", Mask(np.zeros((64, 64), np.uint8)))
    base = ["plan", "--scene", str(tmp_path / "empty.pbm"), "--model", str(model), "--units-per-pixel", "0.1"]
    assert main(base + ["--out", str(tmp_path / "o1")]) == 2
    assert main(base + ["--allow-empty", "--out", str(tmp_path / "o2")]) == 0


def test_oracle_check(data, tmp_path, capsys):
    assert main(["oracle", "check", "--data", str(data), "--groups", "4B-2D-Uni,6B-2D-Uni",
                 "--out", str(tmp_path)]) == 0
    assert len(rows_of(tmp_path / "oracle.csv")) == 4
    assert "agreement" in capsys.readouterr().out
