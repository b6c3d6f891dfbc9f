import json
import os

import pytest

from phgeo.report import dump_reports, load_reports
from phgeo.suite import EXPERIMENTS, TOLERANCES, ConfigError, load_config, run_paper_suite, write_reports

SMALL = {"charts": ["heisenberg1", "sphere3"], "sizes": {"flatness.samples": 20, "lemma-roundtrip.points": 5}}


@pytest.mark.parametrize(
    "bad",
    [
        "[1, 2]",
        {"colour": "blue"},
        {"charts": "heisenberg1"},
        {"charts": ["no-such-chart"]},
        {"experiments": ["flatness", "nonsense"]},
        {"tolerances": {"flatness.bogus": 1.0}},
        {"tolerances": {"flatness.max_curvature": -1.0}},
        {"sizes": {"flatness.samples": True}},
        {"seed": -3},
        {"seed": 1.5},
        {"tol_scale": 0},
        "{not json",
    ],
)
def test_malformed_config_rejected(bad):
    with pytest.raises(ConfigError):
        load_config(bad)


def test_config_defaults_and_file(tmp_path):
    cfg = load_config(None)
    assert cfg["experiments"] == list(EXPERIMENTS)
    assert cfg["seed"] == 0 and cfg["tol_scale"] == 1.0
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 5, "charts": ["heisenberg1"]}))
    cfg = load_config(str(path))
    assert cfg["seed"] == 5 and cfg["charts"] == ["heisenberg1"]


def test_unknown_filter_rejected():
    with pytest.raises(ConfigError):
        run_paper_suite(SMALL, filter="warp-drive")


def test_filter_and_chart_selection():
    reps = run_paper_suite(SMALL, filter=["flatness", "lemma-roundtrip"])
    assert [(r.experiment, r.chart) for r in reps] == [
        ("lemma-roundtrip", "heisenberg1"),
        ("lemma-roundtrip", "sphere3"),
        ("flatness", "heisenberg1"),
    ]
    assert all(r.passed for r in reps)
    assert reps[0].parameters["tolerances"] == {"lemma-roundtrip.residual": 1e-7}


def test_impossible_tolerance_gives_structured_failures():
    reps = run_paper_suite(SMALL, filter="flatness", tol_scale=1e-30)
    (r,) = reps
    assert not r.passed and r.error is None
    assert r.parameters["tolerances"]["flatness.max_curvature"] == pytest.approx(1e-36)
    assert "max_curvature" in r.summary_line()


def test_lower_bounds_are_not_scaled():
    from phgeo.suite import SuiteContext

    ctx = SuiteContext(("heisenberg1",), tol_scale=1e-30)
    assert ctx.tol("gauss-defect.min_slanted_defect") == TOLERANCES["gauss-defect.min_slanted_defect"]
    assert ctx.tol("gauss-defect.orthogonal") == pytest.approx(1e-36)


def test_experiment_without_applicable_chart_reports_error():
    reps = run_paper_suite({"charts": ["sphere3"]}, filter="flatness")
    assert len(reps) == 1 and reps[0].error and not reps[0].passed


def test_same_seed_same_bytes_and_seed_changes_samples():
    a = run_paper_suite(SMALL, filter="lemma-roundtrip", seed=3)
    b = run_paper_suite(SMALL, filter="lemma-roundtrip", seed=3, jobs=2)
    c = run_paper_suite(SMALL, filter="lemma-roundtrip", seed=4)
    assert dump_reports(a, timing=False) == dump_reports(b, timing=False)
    assert dump_reports(a, timing=False) != dump_reports(c, timing=False)


def test_write_reports_layout(tmp_path):
    reps = run_paper_suite(SMALL, filter=["flatness", "lemma-roundtrip"], out_dir=str(tmp_path / "run"))
    files = sorted(os.listdir(tmp_path / "run"))
    assert "report.json" in files
    assert "flatness__heisenberg1.csv" in files
    assert "lemma-roundtrip__sphere3.csv" in files
    back = load_reports((tmp_path / "run" / "report.json").read_text())
    assert dump_reports(back) == dump_reports(reps)
    # an explicit second write goes to a fresh directory without clobbering names
    write_reports(reps + reps, str(tmp_path / "twice"))
    assert "flatness__heisenberg1__1.csv" in os.listdir(tmp_path / "twice")
