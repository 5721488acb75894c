import json

import pytest

from unlearnlab.cli import main
from unlearnlab.config import RunConfig, load_config
from unlearnlab.data import ConfigurationError
from unlearnlab.pipeline import FILES

STAGES = ["gen-data", "train", "grad", "select", "unlearn", "eval"]
DETERMINISTIC = ["report.json", "delta.delta", "search.csv", "similarity.csv", "metrics.csv", "selection.json"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--out", str(out)]) == 0
    return out


def test_run_smoke(run_dir):
    for key in ("dataset", "checkpoint", "snapshot", "delta", "report", "summary", "similarity", "config"):
        assert (run_dir / FILES[key]).exists()
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["unlearned"]["fa1"] == 0.0
    assert summary["original"]["fa1"] > 0.9
    assert summary["train_accuracy"] > 0.95
    assert "seconds" not in summary["unlearned"]


def test_run_is_deterministic(run_dir, tmp_path):
    assert main(["run", "--out", str(tmp_path)]) == 0
    for name in DETERMINISTIC:
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_stages_compose_to_run(run_dir, tmp_path):
    for stage in STAGES:
        assert main([stage, "--out", str(tmp_path)]) == 0, stage
    for name in DETERMINISTIC:
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_sweep_baseline_gapratio(run_dir):
    # the grid lives outside every provenance-scoped section, so existing artifacts stay valid
    assert main(["sweep", "--out", str(run_dir), "--lambda-grid", "0,0.5,1"]) == 0
    lines = (run_dir / "sweep.csv").read_text().splitlines()
    assert lines[0] == "lambda,FA@1,FA@5,TA@1" and len(lines) == 4
    assert main(["baseline", "--out", str(run_dir)]) == 0
    rows = json.loads((run_dir / "baselines.json").read_text())["baselines"]
    assert [b["method"] for b in rows] == ["GA", "FT", "GAFT"]
    assert main(["gapratio", "--out", str(run_dir)]) == 0
    assert "SLUG" in json.loads((run_dir / "gapratio.json").read_text())["methods"]


def test_joint_cli(run_dir):
    assert main(["joint-unlearn", "--out", str(run_dir), "--concepts", "0,3"]) == 0
    joint = json.loads((run_dir / "joint.json").read_text())
    assert joint["concepts"] == [0, 3] and len(joint["edits"]) == 2
    assert (run_dir / "joint_3.delta").exists()


def test_provenance_mismatch(run_dir):
    # the snapshot on disk was taken for concept 0
    assert main(["unlearn", "--out", str(run_dir), "--concepts", "2"]) == 6
    assert main(["train", "--out", str(run_dir), "--seed", "1"]) == 6


def test_eval_rejects_foreign_delta(run_dir, tmp_path):
    assert main(["run", "--out", str(tmp_path), "--steps", "4"]) == 0
    (tmp_path / "delta.delta").write_bytes((run_dir / "delta.delta").read_bytes())
    assert main(["eval", "--out", str(tmp_path), "--steps", "4"]) == 6


def test_malformed_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    out = tmp_path / "never"
    assert main(["run", "--config", str(bad), "--out", str(out)]) == 3
    bad.write_text(json.dumps({"unlearn": {"steps": 0}}))
    assert main(["run", "--config", str(bad), "--out", str(out)]) == 3
    bad.write_text(json.dumps({"colour": "blue"}))
    assert main(["run", "--config", str(bad), "--out", str(out)]) == 3
    assert not out.exists()


def test_usage_errors(tmp_path):
    assert main(["teleport"]) == 2
    assert main(["run", "--frobnicate"]) == 2
    assert main(["run", "--concepts", "a,b"]) == 2
    assert main(["run", "--topk", "3"]) == 2


def test_missing_input(tmp_path):
    assert main(["train", "--out", str(tmp_path / "empty")]) == 4


def test_corrupt_input(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path)]) == 0
    blob = (tmp_path / "dataset.data").read_bytes()
    (tmp_path / "dataset.data").write_bytes(blob[: len(blob) // 2])
    assert main(["train", "--out", str(tmp_path)]) == 4


def test_config_round_trip_and_hash(tmp_path):
    cfg = RunConfig.from_dict({"seed": 3, "unlearn": {"concepts": [1, 2]}})
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = load_config(path)
    assert back == cfg and back.hash() == cfg.hash()
    assert cfg.with_overrides(out="elsewhere").hash() == cfg.hash()
    assert cfg.with_overrides(seed=4).hash() != cfg.hash()
    # stage hashes only see their own sections
    moved = cfg.with_overrides(**{"unlearn.steps": 3})
    assert moved.stage_hash("checkpoint") == cfg.stage_hash("checkpoint")
    assert moved.stage_hash("delta") != cfg.stage_hash("delta")
    assert len({cfg.stage_seed(s) for s in ("data", "init", "split", "strategy")}) == 4


@pytest.mark.parametrize("override", [
    {"seed": -1},
    {"unlearn": {"concepts": [9]}},
    {"unlearn": {"concepts": list(range(8))}},
    {"unlearn": {"strategy": "best"}},
    {"unlearn": {"val_fraction": 1.5}},
    {"architecture": {"vision_dims": [30, 16]}},
    {"sweep": {"lambda_grid": [2, 1]}},
    {"baselines": [{"method": "GA", "momentum": 0.9}]},
])
def test_config_validation(override):
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict(override)
