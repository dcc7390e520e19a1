from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from coolgen import cli
from coolgen.makespan import STAGES, TOTAL

PIPELINE = ("evolve", "curate", "distill")


def run(out, *args, config=None):
    argv = [*args, "--out", str(out)]
    if config is not None:
        argv += ["--config", str(config)]
    return cli.main(argv)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory, smoke_config_path):
    out = tmp_path_factory.mktemp("smoke")
    for cmd in PIPELINE:
        assert run(out, cmd, config=smoke_config_path) == 0, cmd
    assert run(out, "run", "--mu", "118", "--t-high", "26.5", config=smoke_config_path) == 0
    assert run(out, "sweep", "--points", "2", config=smoke_config_path) == 0
    assert run(out, "scenario", config=smoke_config_path) == 0
    assert run(out, "report", "--canonical", config=smoke_config_path) == 0
    return out


# --- usage errors ---------------------------------------------------------------------------------

def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_required_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["generate", "--mu", "120"])
    assert exc.value.code == 2


def test_missing_artifact_exits_1(tmp_path, capsys):
    assert run(tmp_path, "distill") == 1
    err = capsys.readouterr().err
    assert err.startswith("error: [distill]") and "pool.jsonl" in err


def test_report_on_empty_dir_fails(tmp_path, capsys):
    assert run(tmp_path, "report") == 1
    assert "[report] ReportError" in capsys.readouterr().err


def test_bad_config_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"episodes": -3}}')
    assert run(tmp_path / "out", "curate", config=bad) == 1
    assert "error: [config]" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "coolgen.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("coolgen ")


# --- smoke pipeline ----------------------------------------------------------------------------------

def test_pipeline_artifacts(smoke_run):
    for name in ("config.json", "evolution/best.reward", "evolution/token_usage.json", "pool.jsonl",
                 "experts.ckpt", "hyper.ckpt", "cpn.ckpt", "distill_curves.csv", "episode.json", "sweep.csv",
                 "scenario.csv", "scenario.json", "summary.json", "run_report.json"):
        assert (smoke_run / name).is_file(), name
    assert list(smoke_run.glob("*.svg"))


def test_report_is_byte_identical(smoke_run, smoke_config_path):
    first = (smoke_run / "run_report.json").read_bytes()
    summary = (smoke_run / "summary.json").read_bytes()
    assert run(smoke_run, "report", "--canonical", config=smoke_config_path) == 0
    assert (smoke_run / "run_report.json").read_bytes() == first
    assert (smoke_run / "summary.json").read_bytes() == summary


def test_run_report_totals_match_csvs(smoke_run):
    doc = json.loads((smoke_run / "run_report.json").read_text())
    assert "makespan" not in doc  # canonical reports drop wall-clock fields
    full = cli.report.build_run_report(smoke_run)
    stage_sum = 0.0
    files = sorted(smoke_run.glob("makespan_*.csv")) + [smoke_run / "evolution" / "makespan.csv"]
    for p in files:
        stage_sum += sum(float(r["seconds"]) for r in csv.DictReader(p.open()) if r["stage"] != TOTAL)
    assert set(full["makespan"]) == {*STAGES, TOTAL}
    assert full["makespan"][TOTAL] == pytest.approx(stage_sum, abs=1e-5)
    usage = full["token_usage"]
    assert usage["total"]["total_tokens"] == sum(c["total_tokens"] for c in usage["calls"]) > 0


def test_generate_tags_extrapolation(smoke_run, smoke_config_path, capsys):
    capsys.readouterr()
    assert run(smoke_run, "generate", "--mu", "185", "--t-high", "25", config=smoke_config_path) == 1
    assert "EnvelopeError" in capsys.readouterr().err
    assert run(smoke_run, "generate", "--mu", "185", "--t-high", "25", "--allow-extrapolation",
               config=smoke_config_path) == 0
    assert json.loads(capsys.readouterr().out.strip())["extrapolated"] is True
    assert run(smoke_run, "generate", "--mu", "120", "--t-high", "25", config=smoke_config_path) == 0
    assert json.loads(capsys.readouterr().out.strip())["extrapolated"] is False


@pytest.mark.parametrize("controller", ["pid", "cpn", "dcopilot"])
def test_run_controllers(smoke_run, smoke_config_path, controller):
    assert run(smoke_run, "run", "--mu", "130", "--t-high", "24", "--controller", controller,
               config=smoke_config_path) == 0
    doc = json.loads((smoke_run / "episode.json").read_text())
    assert doc["controller"] == controller and doc["metrics"]["pue"] > 1.0


def test_sweep_rows(smoke_run):
    rows = list(csv.DictReader((smoke_run / "sweep.csv").open()))
    assert len(rows) == 4
    assert all(float(r["hyper_temp_mae"]) >= 0 for r in rows)
