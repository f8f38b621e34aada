import json
import xml.etree.ElementTree as ET

import pytest

from casplab.harness.experiment import run_fscil, write_run, write_summary
from casplab.report import (
    ConsistencyError,
    ReportError,
    Series,
    ablation_table,
    check_a_avg,
    load_run_summary,
    render_svg,
    sweep_series,
)

NS = "{http://www.w3.org/2000/svg}"


@pytest.fixture(scope="module")
def run_dir(small_setup, tmp_path_factory):
    ds, res, pre = small_setup
    out = tmp_path_factory.mktemp("runs")
    result = run_fscil(ds, res, pre.backbone)
    paths = write_run(result, out)
    return out, paths, result


def test_svg_structure():
    svg = render_svg([Series("a", [0, 1, 2], [0.9, 0.8, 0.7]), Series("b", [0, 1], [0.5, 0.4])], title="t")
    root = ET.fromstring(svg)
    assert root.get("viewBox") == "0 0 800 500"
    lines = root.findall(f"{NS}polyline")
    assert [ln.get("data-label") for ln in lines] == ["a", "b"]
    assert len(lines[0].get("points").split()) == 3
    assert len(root.findall(f"{NS}circle")) == 5
    assert render_svg([Series("a", [0, 1, 2], [0.9, 0.8, 0.7])]) == render_svg([Series("a", [0, 1, 2], [0.9, 0.8, 0.7])])


def test_svg_escapes_and_single_point():
    root = ET.fromstring(render_svg([Series("a<b", [3], [0.5])], title="x & y"))
    assert root.find(f"{NS}polyline").get("data-label") == "a<b"


def test_svg_empty():
    with pytest.raises(ReportError):
        render_svg([])


def test_ablation_table_marks():
    runs = [
        {"label": "baseline", "config": {"train": {"cagp": False}, "mtm": {"enabled": False}}, "a_b": 0.5, "a_n": None, "a_l": 0.4, "a_avg": 0.45},
        {"label": "all", "config": {"train": {"cagp": True, "pcap": True, "cdap": True}, "mtm": {"enabled": True}},
         "a_b": {"mean": 0.6, "std": 0.01}, "a_n": 0.3, "a_l": 0.5, "a_avg": 0.55},
    ]
    lines = ablation_table(runs).splitlines()
    assert lines[0].split("|")[1].strip() == "run"
    assert lines[2].count("✓") == 0 and "n/a" in lines[2]
    assert lines[3].count("✓") == 4 and "60.0 ± 1.0" in lines[3]


def test_check_a_avg(run_dir):
    out, paths, result = run_dir
    data = load_run_summary(paths["json"])
    assert check_a_avg(data, paths["json"]) == pytest.approx(result.metrics.a_avg, abs=0)


def test_check_a_avg_detects_tamper(run_dir, tmp_path):
    out, paths, _ = run_dir
    data = json.loads(paths["json"].read_text())
    data["a_avg"] += 0.01
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(data))
    (tmp_path / data["csv"]).write_text(paths["csv"].read_text())
    with pytest.raises(ConsistencyError):
        check_a_avg(data, bad)


def test_summary_has_no_csv(run_dir, small_setup):
    out, _, result = run_dir
    path = write_summary([result, result], out)
    data = load_run_summary(path)
    assert check_a_avg(data, path) is None


def test_load_run_summary_rejects(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{}")
    with pytest.raises(ReportError):
        load_run_summary(p)
    with pytest.raises(ReportError):
        load_run_summary(tmp_path / "missing.json")


def test_sweep_series(tmp_path):
    p = tmp_path / "sweep.csv"
    p.write_text(
        "# {}\n"
        "lambda_mix,split_layer,beta_alpha,dropout_rate,seed,control,a_b,a_n,a_l,a_avg\n"
        "0.0,0,1.0,0.1,0,,0.5,0.1,0.2,0.3\n"
        "0.0,0,1.0,0.1,1,,0.5,0.1,0.4,0.3\n"
        "0.5,0,1.0,0.1,0,,0.5,0.1,0.5,0.3\n"
        "0.0,2,1.0,0.1,0,,0.5,0.1,0.6,0.3\n"
        ",,,0.1,0,mtm_off,0.5,0.1,0.9,0.3\n"
    )
    series = sweep_series(p)
    assert len(series) == 2
    first = series[0]
    assert first.x == [0.0, 0.5] and first.y == pytest.approx([0.3, 0.5])
    assert sum(len(s.x) for s in series) == 3
    with pytest.raises(ReportError):
        sweep_series(p, y="nope")
