"""Statistic files, gnuplot scripts and the markdown gate report"""
import pandas as pd
import pytest

from emr_closure.core.errors import DataError
from emr_closure.core.timeseries import TimeSeries, acf, pdf1d, pdf2d
from emr_closure.tools.reporting.plots import PlotGenerator, PlotKind, gate_report_markdown


@pytest.fixture
def pair(rng):
    reference = TimeSeries(rng.standard_normal((400, 2)), 0.1, ("x1", "x2"))
    candidate = TimeSeries(rng.standard_normal((400, 2)), 0.1, ("x1", "x2"))
    return reference, candidate


def test_acf_overlay_files(tmp_path, pair):
    reference, candidate = pair
    plots = PlotGenerator(tmp_path)
    spec = plots.acf_overlay("acf_x2", {"reference": acf(reference, 10), "candidate": acf(candidate, 10)},
                             channel=1)
    assert spec.kind == PlotKind.ACF
    assert spec.title == "ACF of x2"
    assert spec.columns == (1, 3)

    frame = pd.read_csv(tmp_path / "acf_x2_reference.csv")
    assert list(frame.columns) == ["lag_time", "x1", "x2"]
    assert len(frame) == 11
    assert frame["lag_time"].iloc[1] == pytest.approx(0.1)
    with pytest.raises(DataError):
        plots.acf_overlay("empty", {})


def test_pdf_files(tmp_path, pair):
    reference, candidate = pair
    plots = PlotGenerator(tmp_path)
    plots.pdf_overlay("pdf_x1", {"reference": pdf1d(reference, 0, 20), "candidate": pdf1d(candidate, 0, 20)})
    plots.pdf2d("joint", pdf2d(reference, 0, 1, 8))

    one = pd.read_csv(tmp_path / "pdf_x1_candidate.csv")
    assert list(one.columns) == ["center", "density"]
    assert len(one) == 20
    joint = pd.read_csv(tmp_path / "joint.csv")
    assert list(joint.columns) == ["x1", "x2", "density"]
    assert len(joint) == 64


def test_scripts_reference_their_data(tmp_path, pair):
    reference, candidate = pair
    plots = PlotGenerator(tmp_path)
    plots.attractor("attractor", {"reference": reference, "candidate": candidate}, max_points=100)
    plots.pdf2d("joint", pdf2d(reference, 0, 1, 8))
    scripts = plots.export_scripts()

    assert [p.name for p in scripts] == ["attractor.gp", "joint.gp"]
    attractor = scripts[0].read_text()
    assert "set output 'attractor.png'" in attractor
    assert "'attractor_reference.csv' using 1:2 skip 1 with dots title 'reference'" in attractor
    assert "splot 'joint.csv'" in scripts[1].read_text()
    # strided down to max_points
    assert len(pd.read_csv(tmp_path / "attractor_candidate.csv")) == 100


def test_gate_report_markdown():
    report = {
        "study": "lv",
        "scale": "desk",
        "passed": False,
        "gates": [
            {"name": "levels", "comparison": "between", "threshold": [1, 20], "value": 12, "passed": True,
             "reason": ""},
            {"name": "acf_rms", "comparison": "<=", "threshold": 0.25, "value": [0.3], "passed": False,
             "reason": "[0.3] fails <= 0.25"},
        ],
    }
    text = gate_report_markdown(report)
    assert text.startswith("# lv (desk scale)")
    assert "**Result:** FAIL" in text
    assert "| levels | between | [1, 20] | 12 | pass |" in text
    assert "FAIL ([0.3] fails <= 0.25)" in text
