import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from canonpose import cli
from canonpose.fitting import DivergenceError
from canonpose.synth import read_scene

SMALL = {"scene": {"n_views": 2, "pixel_noise": 0.0}, "fit": {"orientation_restarts": 2}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.yaml"
    cfg.write_text(yaml.safe_dump(SMALL))
    assert cli.main(["gen", "--config", str(cfg), "--out", str(root / "gen"), "--count", "3", "--seed", "40"]) == 0
    scenes = sorted(str(p) for p in (root / "gen").glob("scene_*.json"))
    assert cli.main(["fit", "--config", str(cfg), "--out", str(root / "fit"), *scenes[:2]]) == 0
    return root, cfg, scenes


def manifest(path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def test_gen_writes_scenes_and_manifest(workspace):
    root, _, scenes = workspace
    assert [Path(s).name for s in scenes] == ["scene_000040.json", "scene_000041.json", "scene_000042.json"]
    m = manifest(root / "gen")
    assert m["seeds"] == [40, 41, 42] and m["command"] == "gen"
    assert m["config_hash"] == cli.config_hash(m["config"])
    assert m["args"]["overrides"] == {"seed": 40}
    assert m["config"]["fit"]["orientation_restarts"] == 2


def test_gen_is_deterministic(workspace, tmp_path):
    root, cfg, scenes = workspace
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path), "--count", "3", "--seed", "40"]) == 0
    for s in scenes:
        assert (tmp_path / Path(s).name).read_bytes() == Path(s).read_bytes()


def test_gen_count_zero_writes_manifest_only(tmp_path, capsys):
    assert cli.main(["gen", "--out", str(tmp_path), "--count", "0"]) == 0
    assert [p.name for p in tmp_path.iterdir()] == ["manifest.json"]
    assert "no scenes" in capsys.readouterr().err
    assert manifest(tmp_path)["notice"]


def test_gen_variant(tmp_path):
    assert cli.main(["gen", "--out", str(tmp_path), "--count", "1", "--variant", "min_2"]) == 0
    scene = read_scene(tmp_path / "scene_000000_min_2.json")
    assert scene.n_views == 2


def test_full_fit_result(workspace):
    root, _, scenes = workspace
    doc = json.loads((root / "fit" / "scene_000040.result.json").read_text())
    assert doc["schema_version"] == 1 and doc["manifest"] == "manifest.json"
    assert doc["total_loss"] < 1e-6 and doc["loss_2d"] < 1e-6
    assert {"canonical", "keypoints_body", "keypoints_camera", "stage1", "stage2_rounds"} <= set(doc)
    assert doc["config_hash"] == manifest(root / "fit")["config_hash"]


def test_stage1_mode_omits_canonical(workspace, tmp_path):
    root, cfg, scenes = workspace
    assert cli.main(["fit", "--config", str(cfg), "--out", str(tmp_path), "--mode", "stage1", scenes[2]]) == 0
    doc = json.loads((tmp_path / "scene_000042.result.json").read_text())
    assert "canonical" not in doc and doc["mode"] == "stage1"
    assert doc["screened_view"] in (0, 1)
    assert len(doc["stage1"]["views"]) == 2


def test_corrupt_scene_in_batch(workspace, tmp_path):
    root, cfg, scenes = workspace
    bad = tmp_path / "bad.json"
    bad.write_text(Path(scenes[0]).read_text()[:100])
    out = tmp_path / "out"
    code = cli.main(["fit", "--config", str(cfg), "--out", str(out), scenes[0], str(bad), scenes[1]])
    assert code == cli.EXIT_PARTIAL
    assert len(list(out.glob("*.result.json"))) == 2
    failures = manifest(out)["failures"]
    assert len(failures) == 1 and failures[0]["input"] == str(bad)


def test_divergence_exit_code(workspace, tmp_path, monkeypatch):
    _, cfg, scenes = workspace

    def diverge(*args, **kwargs):
        raise DivergenceError("non-finite residual")

    monkeypatch.setattr(cli, "run_pipeline", diverge)
    assert cli.main(["fit", "--config", str(cfg), "--out", str(tmp_path), scenes[0]]) == cli.EXIT_DIVERGENCE


def test_config_and_input_errors(tmp_path, workspace):
    _, _, scenes = workspace
    bad = tmp_path / "bad.yaml"
    bad.write_text("fit: {alpha: -1}\n")
    assert cli.main(["gen", "--config", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    bad.write_text("bogus: {}\n")
    assert cli.main(["gen", "--config", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert cli.main(["gen", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert cli.main(["gen", "--out", str(tmp_path / "x"), "--gamma", "-2"]) == cli.EXIT_CONFIG
    assert cli.main(["fit", "--out", str(tmp_path / "y"), "--model", str(tmp_path / "none.json"), scenes[0]]) == cli.EXIT_INPUT
    assert cli.main(["fit", "--out", str(tmp_path / "y"), str(tmp_path / "missing.json")]) == cli.EXIT_INPUT


def test_flag_overrides_beat_config(workspace, tmp_path):
    _, cfg, _ = workspace
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path), "--count", "0", "--lambda", "0.5", "--alpha", "2", "--gamma", "0"]) == 0
    m = manifest(tmp_path)
    assert m["config"]["fit"]["threshold"] == 0.5 and m["config"]["fit"]["alpha"] == 2.0 and m["config"]["fit"]["gamma"] == 0.0
    assert m["args"]["overrides"] == {"threshold": 0.5, "alpha": 2.0, "gamma": 0.0}


def ground_truth_result(scene_path, out_dir):
    scene = read_scene(scene_path)
    kp = scene.ground_truth.keypoints_camera
    doc = {
        "schema_version": 1,
        "kind": "fit_result",
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "mode": "full",
        "reference_view": 0,
        "keypoints_camera": kp.tolist(),
    }
    path = Path(out_dir) / f"{scene.scene_id}.result.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_eval_ground_truth_gives_perfect_row(workspace, tmp_path):
    _, _, scenes = workspace
    res = ground_truth_result(scenes[0], tmp_path)
    assert cli.main(["eval", "--results", res, "--scenes", *scenes, "--out", str(tmp_path / "ev")]) == 0
    rows = cli.read_metrics_csv(tmp_path / "ev" / "metrics.csv")
    assert len(rows) == 1
    r = rows[0]
    assert r["mpjpe"] == 0.0 and r["pa_mpjpe"] < 1e-9
    assert r["pck"] == r["auc"] == r["pa_pck"] == r["pa_auc"] == 100.0


def test_eval_columns_and_aggregate(workspace, tmp_path):
    root, _, scenes = workspace
    results = sorted(str(p) for p in (root / "fit").glob("*.result.json"))
    assert cli.main(["eval", "--results", *results, "--scenes", *scenes, "--out", str(tmp_path)]) == 0
    with open(tmp_path / "metrics.csv") as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == cli.CSV_COLUMNS
    rows = cli.read_metrics_csv(tmp_path / "metrics.csv")
    summary = json.loads((tmp_path / "summary.json").read_text())
    for col in cli.METRIC_COLUMNS:
        assert summary["mean"][col] == pytest.approx(sum(r[col] for r in rows) / len(rows), abs=1e-12)
    assert all(r["pa_mpjpe"] < 1.0 for r in rows)


def test_eval_skips_missing_ground_truth(workspace, tmp_path, capsys):
    root, _, scenes = workspace
    results = sorted(str(p) for p in (root / "fit").glob("*.result.json"))
    assert cli.main(["eval", "--results", *results, "--scenes", scenes[0], "--out", str(tmp_path)]) == 0
    assert len(cli.read_metrics_csv(tmp_path / "metrics.csv")) == 1
    assert "no ground truth" in capsys.readouterr().err


def write_metrics(path, values):
    rows = [
        {"scene_id": f"s{i}", "seed": i, **dict(zip(cli.METRIC_COLUMNS, v)), "config_hash": "h"} for i, v in enumerate(values)
    ]
    path.write_text(cli.metrics_csv_text(rows))
    return str(path)


def test_report_single_and_pair(tmp_path):
    a = write_metrics(tmp_path / "a.csv", [(10, 5, 90, 60, 95, 70), (20, 7, 80, 50, 85, 60)])
    b = write_metrics(tmp_path / "b.csv", [(12, 4, 70, 65, 90, 75)])
    assert cli.main(["report", a, "--out", str(tmp_path / "one")]) == 0
    one = list(csv.DictReader(open(tmp_path / "one" / "report.csv")))
    assert len(one) == 1
    assert cli.main(["report", a, b, "--labels", "A", "B", "--out", str(tmp_path / "two")]) == 0
    rows = {r["label"]: r for r in csv.DictReader(open(tmp_path / "two" / "report.csv"))}
    # means A: mpjpe 15, pa 6, pck 85, auc 55, pa_pck 90, pa_auc 65
    expected_best = {"mpjpe": "B", "pa_mpjpe": "B", "pck": "A", "auc": "B", "pa_pck": "A", "pa_auc": "B"}
    for col, lab in expected_best.items():
        assert rows[lab][f"best_{col}"] == "1"
    assert float(rows["A"]["mpjpe"]) == 15.0
    assert "*" in (tmp_path / "two" / "report.txt").read_text()


def test_report_csv_round_trips(tmp_path):
    a = write_metrics(tmp_path / "a.csv", [(1 / 3, 2 / 7, 50, 12.5, 100, 99.9)])
    cli.main(["report", a, "--labels", "x", "--out", str(tmp_path / "r")])
    row = next(csv.DictReader(open(tmp_path / "r" / "report.csv")))
    assert float(row["mpjpe"]) == 1 / 3 and float(row["pa_mpjpe"]) == 2 / 7


def test_report_rejects_inconsistent_columns(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("scene_id,mpjpe\ns,1\n")
    assert cli.main(["report", str(bad), "--out", str(tmp_path / "r")]) == cli.EXIT_INPUT
    a = write_metrics(tmp_path / "a.csv", [(1, 1, 1, 1, 1, 1)])
    assert cli.main(["report", a, "--labels", "x", "y", "--out", str(tmp_path / "r")]) == cli.EXIT_CONFIG


def test_manifests_are_written_last_and_referenced(workspace):
    root, _, _ = workspace
    m = manifest(root / "fit")
    mtime = (root / "fit" / "manifest.json").stat().st_mtime_ns
    for out in m["outputs"]:
        assert Path(out).stat().st_mtime_ns <= mtime
        assert json.loads(Path(out).read_text())["manifest"] == "manifest.json"
