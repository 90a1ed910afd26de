import csv
import json

import numpy as np
import pytest
import yaml

from strlab.cli import main
from strlab.experiment import (
    TRACE_COLUMNS,
    StageError,
    config_from_dict,
    fmt,
    load_config,
    read_trace_csv,
    run_experiment,
)

SMALL = {
    "env": {"kind": "maze"},
    "dataset_size": 3000,
    "variants": ["str", "awr"],
    "update": {"form": "constrained", "epsilon": 0.05},
    "n_iterations": 30,
    "n_eval_rollouts": 200,
    "seed": 1,
}


def write_config(path, **overrides):
    cfg = {**SMALL, **overrides}
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_fmt_seventeen_digits():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(True) == "1" and fmt(np.int64(3)) == "3"
    assert float(fmt(1 / 3)) == 1 / 3


def test_config_parsing(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.yaml"))
    assert cfg.variants == ("str", "awr") and cfg.env.width == 10
    assert cfg.ood_filter.action == "right"
    with pytest.raises(ValueError, match="unknown config keys"):
        config_from_dict({**SMALL, "bogus": 1})
    rnd = config_from_dict({**SMALL, "env": {"kind": "random", "n_states": 5}, "ood_filter": None})
    assert rnd.env.n_states == 5 and rnd.ood_filter is None


def test_run_writes_outputs(tmp_path):
    out = tmp_path / "run"
    code = main(["--log-level", "WARNING", "run", "--config", str(write_config(tmp_path / "c.yaml")), "--out", str(out)])
    assert code == 0
    for name in ("dataset.csv", "dataset.csv.json", "config.json", "learning_curve.png", "ood_ratio.png", "kl_to_beta.png"):
        assert (out / name).exists(), name
    with open(out / "str" / "trace.csv") as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == TRACE_COLUMNS
    rows = read_trace_csv(out / "str" / "trace.csv")
    assert len(rows) == 31
    assert all(r["ood_ratio"] == 0.0 for r in rows)
    summary = json.loads((out / "str" / "summary.json").read_text())
    for key in ("final_eta_true", "final_eta_emp", "eta_opt_support", "converged", "n_strict_improvements", "metadata"):
        assert key in summary
    assert summary["metadata"]["state_metrics_over"] == "dataset-visited states"
    awr = read_trace_csv(out / "awr" / "trace.csv")
    assert len(awr) == 2
    reports = [json.loads(x) for x in (out / "awr" / "reports.jsonl").read_text().splitlines()]
    ceilings = [r for r in reports if r["name"] == "density_ceiling"]
    assert ceilings and all(r["passed"] for r in ceilings)


def test_seed_override_and_env_output(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.yaml", variants=["str"], n_iterations=2)
    monkeypatch.setenv("STRLAB_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert main(["run", "--config", str(cfg), "--seed", "5", "--no-plots"]) == 0
    meta = json.loads((tmp_path / "env_out" / "dataset.csv.json").read_text())
    assert meta["seed"] == 5
    assert not (tmp_path / "env_out" / "learning_curve.png").exists()


def test_invalid_maze_reports_stage(tmp_path, capsys):
    bad = write_config(tmp_path / "bad.yaml", env={"kind": "maze", "goal_cell": [4, 2]})
    assert main(["check", "--config", str(bad)]) == 2
    assert "build_maze" in capsys.readouterr().err
    with pytest.raises(StageError) as info:
        run_experiment(load_config(bad), str(tmp_path / "x"))
    assert info.value.stage == "build_env"


def test_check_and_oracle(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    assert main(["check", "--config", str(cfg)]) == 0
    assert main(["oracle", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    oracle = json.loads((tmp_path / "o" / "oracle.json").read_text())
    assert oracle["return_exact"] == pytest.approx(1.0)


def test_random_penalty_run(tmp_path):
    cfg = write_config(
        tmp_path / "r.yaml",
        env={"kind": "random", "n_states": 8, "n_actions": 3, "seed": 2},
        behavior={"kind": "random-support", "keep_prob": 0.6},
        ood_filter=None,
        variants=["str", "awac", "abm"],
        update={"form": "penalty", "alpha": 0.2},
        n_iterations=10,
    )
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--no-plots"]) == 0
    reports = [json.loads(x) for x in (tmp_path / "r" / "str" / "reports.jsonl").read_text().splitlines()]
    assert {"safe_improvement", "trust_region_tv", "support_invariance", "monotone_improvement"} <= {
        r["name"] for r in reports
    }
