import json

import pytest

from ordsim.errors import MissingColumns, UnknownKind
from ordsim.report import (
    TIDY_FOREST_COLUMNS,
    TIDY_METRIC_COLUMNS,
    emit_csv,
    forest_svg,
    metric_svg,
    parse_csv,
    render_report,
    tidy_metric_rows,
)
from ordsim.simstudy import AGGREGATE_HEADER


def _agg_rows():
    rows = []
    for model in ("sep-logistic", "po", "ppo-u"):
        for k in (2, 3, 4):
            rows.append({"scenario_id": "abc123", "model": model, "cutpoint": k,
                         "bias": 0.01 * k, "bias_mcse": 0.004, "relbias_pct": 1.5,
                         "relbias_mcse": 0.4, "coverage": 0.94 + 0.005 * k,
                         "coverage_mcse": 0.0154, "mse": 0.002, "mse_mcse": 0.0003,
                         "n_effective_reps": 200})
    return rows


def _case_doc():
    models = {}
    for m in ("sep-logistic", "po", "ppo-u", "cppo-linear", "cppo-last"):
        models[m] = {"status": "ok", "cutpoints": [
            {"cutpoint": k, "median": 0.1 * k, "ci_low": 0.1 * k - 0.3, "ci_high": 0.1 * k + 0.3,
             "prior_dominated": False} for k in (2, 3, 4, 5)]}
    models["ppo-u"] = {"status": "failed", "error": "x", "cutpoints": []}
    return {"name": "mmrc5", "models": models}


def test_csv_round_trip():
    rows = tidy_metric_rows(_agg_rows(), "coverage")
    assert parse_csv(emit_csv(rows, TIDY_METRIC_COLUMNS)) == rows


def test_forest_csv_round_trip(tmp_path):
    (tmp_path / "mmrc5.json").write_text(json.dumps(_case_doc()))
    p, = render_report(tmp_path, "forest", "csv", tmp_path / "out")
    rows = parse_csv(p.read_text())
    assert parse_csv(emit_csv(rows, TIDY_FOREST_COLUMNS)) == rows
    assert sum(r["status"] == "failed" for r in rows) == 1


def test_metric_svg_structure():
    svg = metric_svg(_agg_rows(), "coverage")
    assert svg.startswith("<?xml") and svg.rstrip().endswith("</svg>")
    assert svg.count('stroke="#c00"') == 3          # one 0.95 line per model panel
    assert svg.count('fill="#9ecae1"') == 3         # MCSE band per panel
    assert svg.count("<circle") == 9
    assert svg == metric_svg(_agg_rows(), "coverage")
    assert metric_svg(_agg_rows(), "bias").count('stroke="#c00"') == 3
    assert 'stroke="#c00"' not in metric_svg(_agg_rows(), "mse")


def test_forest_svg_tracks():
    svg = forest_svg(_case_doc())
    for m in ("sep-logistic", "po", "ppo-u", "cppo-linear", "cppo-last"):
        assert f">{m}</text>" in svg
    assert "fit failed" in svg
    assert svg.count("<circle") == 4 * 4


def test_render_report_files(tmp_path):
    agg = tmp_path / "aggregate.csv"
    lines = [",".join(AGGREGATE_HEADER)]
    for r in _agg_rows():
        lines.append(",".join(str(r[h]) for h in AGGREGATE_HEADER))
    agg.write_text("\n".join(lines) + "\n")
    out = render_report(tmp_path, "relbias", "svg", tmp_path / "o")
    assert [p.name for p in out] == ["relbias_abc123.svg"]
    out = render_report(agg, "mse", "csv", tmp_path / "o")
    assert len(parse_csv(out[0].read_text())) == 9
    (tmp_path / "case.json").write_text(json.dumps(_case_doc()))
    out = render_report(tmp_path / "case.json", "forest", "svg", tmp_path / "o")
    assert [p.name for p in out] == ["forest_mmrc5.svg"]


def test_report_errors(tmp_path):
    with pytest.raises(UnknownKind):
        render_report(tmp_path, "power", "svg", tmp_path)
    bad = tmp_path / "aggregate.csv"
    bad.write_text("scenario_id,model,cutpoint,bias\nx,po,2,0.1\n")
    with pytest.raises(MissingColumns, match="coverage"):
        render_report(bad, "coverage", "csv", tmp_path)
    (tmp_path / "x.json").write_text("{}")
    with pytest.raises(MissingColumns):
        render_report(tmp_path / "x.json", "forest", "svg", tmp_path)
