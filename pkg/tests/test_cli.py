import csv
import io
import json
import subprocess
import sys

import pytest

from mtadv.cli import main, parse_args
from mtadv.errors import ConfigError

FAST = ["--max-steps", "30", "--pairs", "3", "--no-timing"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--subjects", "24", "--images", "10", "--seed", "7", "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--seeds", "1,2", "--steps", "40", "--allow-weak",
                 "--out", str(root / "models")]) == 0
    return root


def models(root, *seeds):
    return ",".join(str(root / "models" / f"model-seed{s}.mdl") for s in seeds)


def read_rows(path):
    return list(csv.reader(io.StringIO(path.read_text())))


def test_gen_data_counts_and_determinism(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--subjects", "60", "--images", "10", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    files = sorted((tmp_path / "a").rglob("*.pgm"))
    assert len(files) == 600
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 7 and manifest["dataset"]["n_subjects"] == 60


def test_gen_data_errors(tmp_path, capsys):
    assert main(["gen-data", "--subjects", "1", "--out", str(tmp_path / "x")]) == 1
    assert "CONFIG_ERROR" in capsys.readouterr().err
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "junk").write_text("x")
    assert main(["gen-data", "--subjects", "2", "--out", str(tmp_path / "full")]) == 1
    assert main(["gen-data", "--subjects", "2", "--images", "2", "--out", str(tmp_path / "full"), "--force"]) == 0


def test_train_outputs_are_reproducible(workdir, tmp_path):
    assert main(["train", "--data", str(workdir / "data"), "--seeds", "1", "--steps", "40", "--allow-weak",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model-seed1.mdl").read_bytes() == (workdir / "models" / "model-seed1.mdl").read_bytes()
    summary = json.loads((workdir / "models" / "train.json").read_text())
    assert [m["seed"] for m in summary["models"]] == [1, 2]


def test_train_empty_seeds_is_usage_error(workdir, capsys):
    assert main(["train", "--data", str(workdir / "data"), "--seeds", "", "--out", "unused"]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: USAGE_ERROR:")


def test_train_gate_failure(workdir, tmp_path, capsys):
    code = main(["train", "--data", str(workdir / "data"), "--seeds", "3", "--steps", "1", "--eer-target", "0",
                 "--out", str(tmp_path)])
    assert code == 1
    assert "TRAINING_FAILURE" in capsys.readouterr().err
    assert not (tmp_path / "model-seed3.mdl").exists()


def test_calibrate(workdir, tmp_path):
    assert main(["calibrate", "--data", str(workdir / "data"), "--models", models(workdir, 1),
                 "--defense", "blur:1.0", "--roc-points", "11", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "calibration.json").read_text())
    assert len(doc["systems"]) == 2 and doc["systems"][1]["defense"]["kind"] == "gaussian_blur"
    assert len(read_rows(tmp_path / "roc.csv")) == 1 + 2 * 11


def test_attack_st_with_baselines(workdir, tmp_path):
    assert main(["attack", "--scenario", "st", "--data", str(workdir / "data"), "--models", models(workdir, 1),
                 "--baseline", "pgd,fgsm", *FAST, "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "st.csv")
    assert rows[0] == ["scenario", "system_id", "tau", "eer", "asr_white", "asr_gray", "mean_dissim", "mean_ssim",
                       "mean_steps", "mean_time_ms"]
    assert [r[0] for r in rows[1:]] == ["ST", "ST-pgd", "ST-fgsm"]
    doc = json.loads((tmp_path / "st.json").read_text())
    assert doc["config"]["epsilon"] == 0.03 and doc["config"]["seed"] == 7


def test_attack_scenario_model_mismatch(workdir, tmp_path, capsys):
    assert main(["attack", "--scenario", "ta", "--data", str(workdir / "data"), "--models", models(workdir, 1),
                 *FAST, "--out", str(tmp_path)]) == 1
    assert "CONFIG_ERROR" in capsys.readouterr().err
    assert main(["attack", "--scenario", "st", "--data", str(workdir / "data"), "--models", models(workdir, 1),
                 "--defense", "blur:1", *FAST, "--out", str(tmp_path)]) == 1


def test_rerun_from_embedded_config_is_bitwise(workdir, tmp_path):
    first = tmp_path / "first"
    assert main(["attack", "--scenario", "ta", "--data", str(workdir / "data"), "--models", models(workdir, 1, 2),
                 *FAST, "--out", str(first)]) == 0
    again = tmp_path / "again"
    assert main(["attack", "--config", str(first / "ta.json"), "--out", str(again)]) == 0
    assert (first / "ta.csv").read_bytes() == (again / "ta.csv").read_bytes()
    assert (first / "ta.json").read_bytes() == (again / "ta.json").read_bytes()


def test_threads_env_and_flag_match_sequential(workdir, tmp_path, monkeypatch):
    base = ["attack", "--scenario", "ca", "--data", str(workdir / "data"), "--models", models(workdir, 1), *FAST]
    assert main([*base, "--threads", "1", "--out", str(tmp_path / "seq")]) == 0
    monkeypatch.setenv("MTADV_THREADS", "2")
    assert main([*base, "--out", str(tmp_path / "env")]) == 0
    assert (tmp_path / "seq" / "ca.csv").read_bytes() == (tmp_path / "env" / "ca.csv").read_bytes()
    assert (tmp_path / "seq" / "ca.json").read_bytes() == (tmp_path / "env" / "ca.json").read_bytes()
    monkeypatch.setenv("MTADV_THREADS", "zero")
    assert main([*base, "--out", str(tmp_path / "bad")]) == 1


def test_config_file_rules(workdir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"max-steps": 12, "pairs": 2, "data": str(workdir / "data"),
                               "models": [str(workdir / "models" / "model-seed1.mdl")]}))
    args = parse_args(["attack", "--config", str(cfg), "--pairs", "5", "--out", "o"])
    assert args.max_steps == 12 and args.pairs == 5
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError):
        parse_args(["attack", "--config", str(cfg), "--out", "o"])


def test_sweeps(workdir, tmp_path):
    common = ["sweep", "--data", str(workdir / "data"), "--models", models(workdir, 1), *FAST]
    assert main([*common, "--axis", "epsilon", "--values", "0.01,0.1", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "sweep-epsilon.csv")
    assert rows[0] == ["axis", "axis_value", "metric", "value"]
    ssim = {float(r[1]): float(r[3]) for r in rows[1:] if r[2] == "mean_ssim"}
    assert ssim[0.1] <= ssim[0.01]
    assert main([*common, "--axis", "threshold", "--values", "0.2,0.4,0.6", "--out", str(tmp_path)]) == 0
    roc_rows = read_rows(tmp_path / "roc.csv")
    assert [float(r[0]) for r in roc_rows[1:]] == [0.2, 0.4, 0.6]
    assert main([*common, "--axis", "threshold", "--values", "0.4,0.2", "--out", str(tmp_path)]) == 1
    assert main([*common, "--axis", "gamma", "--values", "1", "--out", str(tmp_path)]) == 2


def test_geometry_check_writes_report(workdir, tmp_path):
    code = main(["geometry-check", "--data", str(workdir / "data"), "--models", models(workdir, 1),
                 "--target-users", "3", "--imgs-per-target", "2", *FAST, "--out", str(tmp_path)])
    doc = json.loads((tmp_path / "geometry.json").read_text())
    names = [c["name"] for c in doc["checks"]]
    assert "st_gray_planar" in names and "gray_ST_ge_MA" in names
    assert code == (1 if any(c["passed"] is False for c in doc["checks"]) else 0)


def test_console_error_is_one_line(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mtadv.cli", "attack", "--data", str(tmp_path / "missing"),
                           "--models", "m.mdl", "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode != 0
    lines = proc.stderr.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: ")
