import json
import os

import numpy as np
import pytest

from faceadv.cli import main
from faceadv.faces import eyeglass_mask, synth_face
from faceadv.imagecore import save_image, save_mask


SIZE = 32

GRID_CONFIG = {"master_seed": 0, "image_size": SIZE, "n_pairs": 1, "n_physical_pairs": 1,
               "iterations": 3, "cw_iterations": 3, "step_size": 0.02,
               "calib_identities": 2, "calib_photos": 2, "capture": {"n_angles": 1},
               "algorithms": ["ifgsm"], "blackbox": ["none"], "techniques": ["noreg", "tv"]}


@pytest.fixture()
def pair_files(tmp_path):
    save_image(synth_face(1, 0, size=SIZE), str(tmp_path / "source.png"))
    save_image(synth_face(2, 0, size=SIZE), str(tmp_path / "target.png"))
    save_mask(eyeglass_mask(SIZE), str(tmp_path / "patch.png"))
    return tmp_path


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


# ---------------------------------------------------------------------------
# exit codes


def test_version_exits_zero(capsys):
    assert main(["--version"]) == 0
    assert "faceadv" in capsys.readouterr().out


def test_missing_config_file_is_usage_error(tmp_path, capsys):
    code = main(["grid", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_invalid_json_config_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{oops")
    assert main(["grid", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_unknown_grid_field_is_usage_error(tmp_path):
    cfg = write_json(tmp_path / "grid.json", {**GRID_CONFIG, "gpu": True})
    assert main(["grid", "--config", cfg, "--out", str(tmp_path / "out")]) == 2


def test_no_output_directory_is_usage_error(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("FACEADV_OUT", raising=False)
    cfg = write_json(tmp_path / "grid.json", GRID_CONFIG)
    assert main(["grid", "--config", cfg]) == 2
    assert "FACEADV_OUT" in capsys.readouterr().err


def test_report_on_empty_directory_is_runtime_error(tmp_path, capsys):
    assert main(["report", "--results", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_attack_config_without_attack_section_is_usage_error(tmp_path, pair_files):
    cfg = write_json(tmp_path / "cfg.json", {"iterations": 3})
    code = main(["attack", "--config", cfg,
                 "--source", str(pair_files / "source.png"),
                 "--target", str(pair_files / "target.png"),
                 "--patch-mask", str(pair_files / "patch.png"),
                 "--out", str(tmp_path / "out")])
    assert code == 2


def test_corrupt_source_image_is_runtime_error(tmp_path, pair_files, capsys):
    bad = tmp_path / "junk.png"
    bad.write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    cfg = write_json(tmp_path / "cfg.json", {"attack": {"algorithm": "ifgsm", "iterations": 3}})
    code = main(["attack", "--config", cfg,
                 "--source", str(bad),
                 "--target", str(pair_files / "target.png"),
                 "--patch-mask", str(pair_files / "patch.png"),
                 "--out", str(tmp_path / "out")])
    assert code == 1


# ---------------------------------------------------------------------------
# attack


def test_attack_writes_image_trace_and_metadata(tmp_path, pair_files):
    cfg = write_json(tmp_path / "cfg.json",
                     {"attack": {"algorithm": "ifgsm", "iterations": 4, "step_size": 0.02},
                      "models": [{"architecture": "A", "seed": 7}]})
    out = tmp_path / "out"
    code = main(["attack", "--config", cfg,
                 "--source", str(pair_files / "source.png"),
                 "--target", str(pair_files / "target.png"),
                 "--patch-mask", str(pair_files / "patch.png"),
                 "--out", str(out)])
    assert code == 0
    assert (out / "adversarial.png").exists()
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == "iteration,loss,distance"
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["models"] == ["A-7"]
    assert meta["result"]["iterations_run"] == 4
    assert meta["config"]["algorithm"] == "ifgsm"


def test_attack_respects_out_env(tmp_path, pair_files, monkeypatch):
    monkeypatch.setenv("FACEADV_OUT", str(tmp_path / "envroot"))
    cfg = write_json(tmp_path / "cfg.json", {"attack": {"algorithm": "ifgsm", "iterations": 3}})
    code = main(["attack", "--config", cfg,
                 "--source", str(pair_files / "source.png"),
                 "--target", str(pair_files / "target.png"),
                 "--patch-mask", str(pair_files / "patch.png")])
    assert code == 0
    assert (tmp_path / "envroot" / "attack" / "adversarial.png").exists()


# ---------------------------------------------------------------------------
# grid and report


def test_grid_runs_and_report_rebuild_matches(tmp_path):
    cfg = write_json(tmp_path / "grid.json", GRID_CONFIG)
    out = tmp_path / "out"
    assert main(["grid", "--config", cfg, "--out", str(out), "--workers", "1"]) == 0

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["kind"] == "grid"
    assert manifest["config"]["image_size"] == SIZE
    report = json.loads((out / "report.json").read_text())
    assert sorted(report["cells"]) == ["ifgsm_none_noreg", "ifgsm_none_tv"]
    original = (out / "report.json").read_bytes()

    (out / "report.json").unlink()
    assert main(["report", "--results", str(out)]) == 0
    assert (out / "report.json").read_bytes() == original


def test_grid_subset_flags_override_config(tmp_path):
    cfg = write_json(tmp_path / "grid.json", {**GRID_CONFIG, "techniques": ["noreg", "tv", "masked"]})
    out = tmp_path / "out"
    code = main(["grid", "--config", cfg, "--out", str(out), "--workers", "1",
                 "--techniques", "noreg", "--seed", "5"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert sorted(report["cells"]) == ["ifgsm_none_noreg"]
    assert report["meta"]["master_seed"] == 5


def test_grid_resume_reuses_existing_cells(tmp_path):
    cfg = write_json(tmp_path / "grid.json", GRID_CONFIG)
    out = tmp_path / "out"
    assert main(["grid", "--config", cfg, "--out", str(out), "--workers", "1"]) == 0
    record = out / "cells" / "ifgsm_none_noreg" / "record.json"
    before = record.read_bytes()
    tagged = json.loads(before)
    tagged["resume_tag"] = 1
    record.write_text(json.dumps(tagged))
    assert main(["grid", "--config", cfg, "--out", str(out), "--workers", "1", "--resume"]) == 0
    assert json.loads(record.read_text()).get("resume_tag") == 1
    assert main(["grid", "--config", cfg, "--out", str(out), "--workers", "1", "--fresh"]) == 0
    assert record.read_bytes() == before


# ---------------------------------------------------------------------------
# sweep and simulate


def test_sweep_writes_curve(tmp_path, capsys):
    cfg = write_json(tmp_path / "sweep.json",
                     {"master_seed": 0, "image_size": SIZE, "epsilons": [0.1, 0.5],
                      "n_per_eps": 1, "iterations": 3, "step_size": 0.05,
                      "calib_identities": 2, "calib_photos": 2, "capture": {"n_angles": 1}})
    out = tmp_path / "out"
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("epsilon,")
    assert len(lines) == 3
    assert "sweep complete: 2 budgets" in capsys.readouterr().out


def test_simulate_writes_stage_images(tmp_path, pair_files):
    out = tmp_path / "sim"
    cfg = write_json(tmp_path / "cap.json", {"illuminance": 800.0, "blur_sigma": 0.5})
    code = main(["simulate", "--image", str(pair_files / "source.png"),
                 "--config", cfg, "--out", str(out)])
    assert code == 0
    for name in ("printed.png", "captured.png", "realigned.png"):
        assert (out / name).exists()
    params = json.loads((out / "params.json").read_text())
    assert params["illuminance"] == 800.0
