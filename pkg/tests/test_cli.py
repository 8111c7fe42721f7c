from __future__ import annotations

import csv
import json

import pytest

from stagesched.catalog import models_from_json
from stagesched.cli import ITER_COLUMNS, main
from stagesched.costmodel import CostTable
from stagesched.formats import dumps, gpus_from_dict, gpus_to_dict, lengths_from_dict, lengths_to_dict, models_to_dict
from stagesched.graph import AppGraph, requests_from_dict, requests_to_dict
from stagesched.planner import AppPlan
from stagesched.sampler import ecdfs_from_dict, ecdfs_to_dict


def _inputs(d):
    return ["--models", str(d / "models.json"), "--gpus", str(d / "gpus.json"),
            "--cost-table", str(d / "cost_table.json"), "--ecdf", str(d / "ecdf.json"),
            "--app", str(d / "app.json"), "--requests", str(d / "requests.json")]


@pytest.fixture
def six_dir(tmp_path):
    assert main(["fixture", "six_models", "--out-dir", str(tmp_path / "in"), "--seed", "0"]) == 0
    return tmp_path / "in"


READERS = {
    "models.json": lambda d: models_to_dict(models_from_json(d)),
    "gpus.json": lambda d: gpus_to_dict(*gpus_from_dict(d)),
    "cost_table.json": lambda d: CostTable.from_dict(d).to_dict(),
    "ecdf.json": lambda d: ecdfs_to_dict(ecdfs_from_dict(d)),
    "app.json": lambda d: AppGraph.from_dict(d).to_dict(),
    "requests.json": lambda d: requests_to_dict(requests_from_dict(d)),
    "lengths.json": lambda d: lengths_to_dict(lengths_from_dict(d)),
}


@pytest.mark.parametrize("name", sorted(READERS))
def test_input_files_roundtrip(six_dir, name):
    text = (six_dir / name).read_text()
    data = json.loads(text)
    assert data["format_version"] == 1
    assert dumps(READERS[name](data)) == text


def test_plan_then_run(six_dir, tmp_path, capsys):
    out = tmp_path / "plan"
    assert main(["plan", *_inputs(six_dir), "--out-dir", str(out), "--trace-iterations"]) == 0
    text = (out / "plan.json").read_text()
    plan = AppPlan.from_dict(json.loads(text))
    assert plan.dumps() == text
    assert plan.extra["num_gpus"] == 4
    assert (out / "plan_gantt.svg").read_text().startswith("<svg")

    run = tmp_path / "run"
    assert main(["run", *_inputs(six_dir), "--plan", str(out / "plan.json"), "--out-dir", str(run),
                 "--trace-iterations", "--known-lengths", str(six_dir / "lengths.json")]) == 0
    trace_text = (run / "trace.json").read_text()
    trace = json.loads(trace_text)
    assert dumps(trace) == trace_text
    assert trace["format_version"] == 1
    assert trace["total_time"] == plan.total_latency
    assert trace["error_ratio"] == 0.0
    with open(run / "iterations.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == ITER_COLUMNS
    assert sum(int(r[4]) for r in rows[1:]) == 6 * 12 * 10
    assert "error ratio:   0.0000" in capsys.readouterr().out


def test_baseline_and_no_preemption(six_dir, tmp_path):
    for extra in (["baseline", "--algo", "max"], ["baseline", "--algo", "min", "--no-preemption"],
                  ["plan", "--algo", "greedy", "--no-preemption"]):
        out = tmp_path / extra[-1]
        assert main([*extra, *_inputs(six_dir), "--out-dir", str(out)]) == 0
        d = json.loads((out / "plan.json").read_text())
        assert d["algorithm"] == extra[extra.index("--algo") + 1]


def test_run_with_other_oracle_seed(six_dir, tmp_path):
    assert main(["run", *_inputs(six_dir), "--oracle-seed", "5", "--out-dir", str(tmp_path / "r")]) == 0


def test_input_error_exit_code(six_dir, tmp_path):
    args = _inputs(six_dir)
    args[1] = str(tmp_path / "missing.json")
    assert main(["plan", *args, "--out-dir", str(tmp_path / "x")]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    args[1] = str(tmp_path / "bad.json")
    assert main(["plan", *args, "--out-dir", str(tmp_path / "x")]) == 2
    d = json.loads((six_dir / "app.json").read_text())
    d["format_version"] = 2
    (tmp_path / "v2.json").write_text(json.dumps(d))
    args = _inputs(six_dir)
    args[args.index("--app") + 1] = str(tmp_path / "v2.json")
    assert main(["plan", *args, "--out-dir", str(tmp_path / "x")]) == 2


def test_infeasible_exit_code(six_dir, tmp_path):
    models = json.loads((six_dir / "models.json").read_text())
    for m in models["models"]:
        m["allowed_tp"] = [8]
    (tmp_path / "models.json").write_text(json.dumps(models))
    args = _inputs(six_dir)
    args[1] = str(tmp_path / "models.json")
    assert main(["plan", *args, "--out-dir", str(tmp_path / "x")]) == 3


def test_mismatch_exit_code(six_dir, tmp_path):
    other = tmp_path / "glm"
    assert main(["fixture", "chatglm", "--out-dir", str(other)]) == 0
    assert main(["plan", *_inputs(other), "--out-dir", str(tmp_path / "gp")]) == 0
    assert main(["run", *_inputs(six_dir), "--plan", str(tmp_path / "gp" / "plan.json"),
                 "--out-dir", str(tmp_path / "x")]) == 4


def test_fit_and_ecdf_commands(tmp_path):
    prof = tmp_path / "profile.csv"
    lines = ["model_id,tp,phase,B,x,latency_s"]
    for ph in ("comp", "prep", "samp"):
        for x in (10, 20, 40):
            lines.append(f"m,1,{ph},1,{x},{0.001 * x + 0.5}")
    prof.write_text("\n".join(lines) + "\n")
    load = tmp_path / "load.csv"
    load.write_text("model_id,dp,tp,seconds\nm,1,1,12.5\n")
    assert main(["fit", str(prof), "--loading", str(load), "--out-dir", str(tmp_path)]) == 0
    t = CostTable.from_dict(json.loads((tmp_path / "cost_table.json").read_text()))
    a, b = t.coefficients[("m", 1)]["comp"].entries[1]
    assert a == pytest.approx(0.001) and b == pytest.approx(0.5)
    trace = tmp_path / "trace.csv"
    trace.write_text("model_id,output_len\nm,4\nm,9\n")
    assert main(["ecdf", str(trace), "--out-dir", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "ecdf.json").read_text())["format_version"] == 1
    bad = tmp_path / "one.csv"
    bad.write_text("model_id,tp,phase,B,x,latency_s\nm,1,comp,1,10,1.0\n")
    assert main(["fit", str(bad), "--out-dir", str(tmp_path / "f")]) == 2
