import csv
import hashlib
import json

import numpy as np
import pytest

from mocop.analysis import analyze, published_consistency, load_expectations
from mocop.cli import main
from mocop.core import ConfigError, EvaluationRecord, read_jsonl
from mocop.pipeline import (
    CYCLES_FILE,
    FAILURES_FILE,
    MANIFEST_FILE,
    RECORDS_FILE,
    run,
)
from mocop.reporting import PLOTS, TABLES, UnwritablePath, fmt, report

from conftest import SMALL_RUN


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _records(out):
    return [EvaluationRecord.from_dict(d) for d in read_jsonl(out / RECORDS_FILE)]


# -- the loop ----------------------------------------------------------------------------

def test_repeat_runs_are_byte_identical(small_run, tmp_path):
    again = run(dict(SMALL_RUN), tmp_path)
    for name in (RECORDS_FILE, CYCLES_FILE, MANIFEST_FILE, FAILURES_FILE):
        assert _sha(small_run.out_dir / name) == _sha(tmp_path / name), name
    assert again.manifest.run_id == small_run.manifest.run_id


def test_run_outputs_are_consistent(small_run):
    out = small_run.out_dir
    recs = _records(out)
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    cycles = list(read_jsonl(out / CYCLES_FILE))
    assert manifest["cycles_completed"] == len(cycles) == 3
    assert manifest["status"] == "max_cycles"
    for model, counts in manifest["counts"].items():
        scored = sum(1 for r in recs if r.model_id == model)
        assert counts["successes"] == scored
        assert counts["attempts"] == counts["successes"] + counts["failures"]
    per_cycle = {c: sum(1 for r in recs if r.cycle == c) for c in range(3)}
    assert per_cycle == {0: 100, 1: 100, 2: 100}
    texts = {r.prompt_id: r.prompt_text for r in recs}
    assert len(set(texts.values())) == len(texts)


def test_theta_on_simplex_every_cycle(small_run):
    for s in small_run.summaries:
        t = np.array(s.theta.as_tuple())
        assert abs(t.sum() - 1) <= 1e-9 and t.min() >= 0.05 - 1e-12
        assert abs(sum(s.domain_weights.values()) - 1) <= 1e-9


def test_coupled_simulators_barely_diverge(tmp_path):
    prof = {"copula_rho": 1.0, "sigma_eps": 0.0}
    cfg = {"offline": True, "seed": 1, "n_prompts": 40, "n_cycles": 1,
           "endpoints": [{"model_id": "a", "profile": prof}, {"model_id": "b", "profile": prof}]}
    result = run(cfg, tmp_path)
    assert result.summaries[0].d_moral <= 0.01


def test_failures_are_logged_and_skipped(tmp_path):
    flaky = {"failure_rate": 0.3}
    cfg = {"offline": True, "seed": 2, "n_prompts": 40, "n_cycles": 1,
           "endpoints": [{"model_id": "a", "profile": flaky}, {"model_id": "b", "profile": {}}]}
    result = run(cfg, tmp_path)
    counts = result.manifest.counts
    assert counts["a"].failures > 0 and counts["b"].failures == 0
    assert counts["a"].failure_kinds == {"SimulatedFailure": counts["a"].failures}
    assert len(list(read_jsonl(tmp_path / FAILURES_FILE))) == counts["a"].failures
    assert result.summaries[0].unpaired == counts["a"].failures


def test_large_learning_rate_does_not_converge(tmp_path):
    result = run({"offline": True, "seed": 0, "n_prompts": 100, "n_cycles": 10, "eta": 0.01}, tmp_path)
    assert result.manifest.status == "max_cycles"
    assert not result.converged


def test_one_model_is_rejected(tmp_path):
    with pytest.raises(ConfigError):
        run({"offline": True, "endpoints": [{"model_id": "a", "profile": {}}]}, tmp_path)


def test_out_dir_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MOCOP_OUT_DIR", str(tmp_path / "env-out"))
    result = run({"offline": True, "n_prompts": 10, "n_cycles": 1})
    assert result.out_dir == tmp_path / "env-out"
    assert (tmp_path / "env-out" / RECORDS_FILE).exists()


# -- analysis -------------------------------------------------------------------------------

def test_analysis_of_a_run(small_run):
    rep = analyze(small_run.out_dir)
    assert rep["source"]["cycles_analyzed"] == [2]
    assert rep["source"]["incomplete_cycles"] == []
    safety = rep["safety"]
    for model, n in safety["n"].items():
        assert sum(safety["counts"][model].values()) == n == 50
    comp = rep["comparison"]
    assert comp["pooled_t"]["value"]["df"] == 98
    assert comp["cross_model_r"]["value"]["n"] == 50
    assert set(rep["cycles"]["temporal_stability"]) == set(rep["source"]["models"])
    assert analyze(small_run.out_dir, cycles="all")["source"]["cycles_analyzed"] == [0, 1, 2]


def test_truncated_log_uses_complete_cycles_only(small_run, tmp_path):
    lines = (small_run.out_dir / RECORDS_FILE).read_text().splitlines(keepends=True)
    cut = 100 + 100 + 37
    (tmp_path / RECORDS_FILE).write_text("".join(lines[:cut]) + lines[cut][:40])
    (tmp_path / CYCLES_FILE).write_text(
        "".join((small_run.out_dir / CYCLES_FILE).read_text().splitlines(keepends=True)[:2]))
    rep = analyze(tmp_path, cycles="all")
    assert rep["source"]["complete_cycles"] == [0, 1]
    assert rep["source"]["incomplete_cycles"] == [2]
    assert rep["source"]["cycles_analyzed"] == [0, 1]


def test_single_model_log_marks_comparison_not_applicable(small_run, tmp_path):
    recs = [r for r in _records(small_run.out_dir) if r.model_id == "deepseek"]
    (tmp_path / RECORDS_FILE).write_text("".join(json.dumps(r.to_dict()) + "\n" for r in recs))
    rep = analyze(tmp_path)
    assert rep["comparison"]["status"] == "not applicable"
    assert rep["descriptives"]["deepseek"]["ethics"]["value"]["n"] == 50


def test_failed_statistic_is_recorded_not_raised():
    recs = [EvaluationRecord.from_dict({
        "run_id": "r", "cycle": 0, "prompt_id": f"p{i}", "domain": "fairness", "model_id": m,
        "prompt_text": "q", "response_text": "a", "latency": 0.7,
        "scores": {"s_lex": 0.5, "s_sem": 0.5, "s_rea": 0.5, "tox": 0.0},
        "composite": 0.5, "category": "Borderline", "timestamp": "t"})
        for i in range(5) for m in ("a", "b")]
    rep = analyze(recs)
    entry = rep["comparison"]["pooled_t"]
    assert entry["value"] is None and "ZeroVariance" in entry["error"]


def test_published_figures_flagged():
    checks = {c["quantity"]: c for c in published_consistency(load_expectations())}
    for name in ("pooled t", "Welch t", "variance ratio p-value", "residual variance"):
        assert checks[name]["status"] == "inconsistent", name
    for name in ("chi2 (Unsafe, 2x2)", "Cramer's V", "risk ratio (Unsafe)", "variance ratio F"):
        assert checks[name]["status"] == "consistent", name
    assert checks["pooled t"]["reproduced"] == pytest.approx(-3.19, abs=0.005)
    assert checks["Welch t"]["reproduced"] == pytest.approx(4.21, abs=0.005)


# -- reporting --------------------------------------------------------------------------------

def test_report_writes_every_file(small_run, tmp_path):
    paths = report(analyze(small_run.out_dir), tmp_path)
    names = {p.name for p in paths}
    assert names == set(TABLES) | set(PLOTS) | {"summary.md"}
    summary = (tmp_path / "summary.md").read_text()
    assert "inconsistent" in summary


def test_csv_round_trip(small_run, tmp_path):
    rep = analyze(small_run.out_dir)
    report(rep, tmp_path)
    with open(tmp_path / "plot_scatter_pairs.csv") as fh:
        rows = list(csv.DictReader(fh))
    scatter = rep["plots"]["scatter"]
    assert len(rows) == len(scatter)
    for row, src in zip(rows, scatter):
        assert float(row["ethics"]) == src["ethics"]
        assert float(row["toxicity"]) == src["toxicity"]
    assert fmt(0.1 + 0.2) == repr(0.1 + 0.2) and fmt(None) == ""


def test_partial_report_lists_omissions(tmp_path):
    rep = analyze([])
    paths = report(rep, tmp_path)
    summary = (tmp_path / "summary.md").read_text()
    assert "## Omitted" in summary
    assert len(paths) < len(TABLES) + len(PLOTS) + 1


def test_unwritable_report_path(small_run, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(UnwritablePath):
        report(analyze(small_run.out_dir), blocker / "sub")


# -- command line -------------------------------------------------------------------------------

def test_cli_simulate_analyze_report(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["simulate", "--prompts", "20", "--cycles", "2", "--seed", "3",
                 "--out", str(out), "--set", "kappa=0.04"])
    assert code == 0
    assert (out / "analysis.json").exists() and (out / "report" / "summary.md").exists()
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    assert manifest["config"]["kappa"] == 0.04 and manifest["config"]["offline"] is True
    assert main(["analyze", str(out), "--cycles", "all", "--out", str(tmp_path / "a.json")]) == 0
    assert main(["report", str(tmp_path / "a.json"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "table1_safety.csv").exists()
    assert "written" in capsys.readouterr().out


def test_cli_config_error_exit_code(tmp_path, capsys):
    code = main(["simulate", "--out", str(tmp_path), "--set", "weights=[0.5,0.5,0.5]"])
    assert code == 2
    assert "weights must sum to 1" in capsys.readouterr().err


def test_cli_missing_log_exit_code(tmp_path):
    assert main(["analyze", str(tmp_path / "missing")]) == 3


def test_rescaled_run_recovers_target_ethics(tmp_path):
    result = run({"offline": True, "seed": 0, "n_prompts": 500, "n_cycles": 1, "rescale_sem": True},
                 tmp_path)
    assert result.summaries[0].eci["gpt-4-turbo"] == pytest.approx(0.793, abs=0.01)
    assert analyze(tmp_path)["source"]["rescale_sem"] is True


def test_literal_semantic_scale_caps_ethics(small_run):
    # literal s_sem lives in [0.299, 0.5], which holds the composite well below the targets
    for s in small_run.summaries:
        assert all(v < 0.793 - 0.01 for v in s.eci.values())
