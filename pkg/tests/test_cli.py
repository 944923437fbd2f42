import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from cfachi import cli, datagen, simulation
from cfachi.datagen import RngStream, generate_sample
from cfachi.inference import indices_from_statistics
from cfachi.model import model_to_dict, population_model

SVG_NS = "{http://www.w3.org/2000/svg}"


@pytest.fixture
def population_files(tmp_path):
    model, *_ = population_model()
    mpath = tmp_path / "model.json"
    mpath.write_text(json.dumps(model_to_dict(model)))
    data = generate_sample(simulation.population_spec(), 1000, RngStream(42))
    dpath = tmp_path / "data.csv"
    datagen.write_csv(dpath, list(model.observed), data)
    return mpath, dpath


def one_factor_three(tmp_path):
    doc = {"observed": ["a", "b", "c"], "factors": ["f"],
           "loadings": [{"var": v, "factor": "f"} for v in "abc"]}
    path = tmp_path / "sat.json"
    path.write_text(json.dumps(doc))
    return path


def test_fit_population(population_files, tmp_path, capsys):
    mpath, dpath = population_files
    out = tmp_path / "fit.json"
    code = cli.main(["fit", "--model", str(mpath), "--data", str(dpath),
                     "--estimator", "ml", "--estimator", "rls", "--estimator", "sb",
                     "--json", str(out)])
    assert code == 0
    text = capsys.readouterr().out
    assert "alternate" in text and "modification candidates" in text
    doc = json.loads(out.read_text())
    assert doc["converged"] and doc["df"] == 87
    kinds = [s["estimator"] for s in doc["statistics"]]
    assert kinds == ["ML", "RLS", "SB"]
    ml = doc["statistics"][0]
    assert 60 <= ml["T"] <= 120
    assert len(doc["lm"]) == 10


def test_fit_json_reproduces_indices(population_files, tmp_path):
    mpath, dpath = population_files
    out = tmp_path / "fit.json"
    assert cli.main(["fit", "--model", str(mpath), "--data", str(dpath), "--json", str(out)]) == 0
    for st in json.loads(out.read_text())["statistics"]:
        idx = indices_from_statistics(st["T"], st["df"], st["baseline_T"], st["baseline_df"], st["n"])
        assert (idx.nfi, idx.cfi, idx.tli, idx.rmsea) == (st["nfi"], st["cfi"], st["tli"], st["rmsea"])


def test_fit_saturated(tmp_path, capsys):
    mpath = one_factor_three(tmp_path)
    rng = np.random.default_rng(0)
    f = rng.standard_normal(400)
    data = np.column_stack([0.8 * f + 0.6 * rng.standard_normal(400) for _ in range(3)])
    dpath = tmp_path / "d.csv"
    datagen.write_csv(dpath, ["a", "b", "c"], data)
    out = tmp_path / "fit.json"
    assert cli.main(["fit", "--model", str(mpath), "--data", str(dpath), "--json", str(out)]) == 0
    (st,) = json.loads(out.read_text())["statistics"]
    assert st["df"] == 0
    assert st["T"] == pytest.approx(0.0, abs=1e-6)
    assert st["p_value"] == 1.0
    assert st["cfi"] == pytest.approx(1.0) and st["rmsea"] == 0.0


def test_fit_name_mismatch(tmp_path, capsys):
    mpath = one_factor_three(tmp_path)
    dpath = tmp_path / "d.csv"
    datagen.write_csv(dpath, ["a", "b", "zz"], np.eye(3) + 1)
    assert cli.main(["fit", "--model", str(mpath), "--data", str(dpath)]) == 1
    assert "c" in capsys.readouterr().err.split("model:")[-1]


def test_fit_missing_file(tmp_path, capsys):
    mpath = one_factor_three(tmp_path)
    assert cli.main(["fit", "--model", str(mpath), "--data", str(tmp_path / "none.csv")]) == 1
    assert "none.csv" in capsys.readouterr().err


def test_bad_arguments_exit_one():
    with pytest.raises(SystemExit) as exc:
        cli.main(["fit", "--model", "x.json"])
    assert exc.value.code == 1


def test_simulate_and_rerun(tmp_path, capsys):
    args = ["simulate", "--scenario", "CorrectNormal", "--sizes", "100,200", "--reps", "2",
            "--seed", "7", "--estimators", "ML,RLS,SB"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    rows = (tmp_path / "a" / "rows.csv").read_text()
    agg = (tmp_path / "a" / "aggregate.csv").read_text()
    assert len(rows.splitlines()) == 1 + 2 * 2 * 3
    assert len(agg.splitlines()) == 1 + 2 * 3
    assert rows == (tmp_path / "b" / "rows.csv").read_text()
    assert agg == (tmp_path / "b" / "aggregate.csv").read_text()


def test_simulate_plan_file(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"scenario": "SmallSampleRls", "sample_sizes": [60],
                                "replications": 1, "seed": 1}))
    assert cli.main(["simulate", "--plan", str(plan), "--out", str(tmp_path / "o")]) == 0
    assert len((tmp_path / "o" / "rows.csv").read_text().splitlines()) == 3


def test_simulate_bad_plan(tmp_path, capsys):
    assert cli.main(["simulate", "--scenario", "CorrectNormal", "--estimators", "WLS",
                     "--out", str(tmp_path)]) == 1
    assert "WLS" in capsys.readouterr().err


@pytest.fixture(scope="module")
def misspecified_aggregate(tmp_path_factory):
    d = tmp_path_factory.mktemp("mis")
    plan = simulation.SimulationPlan("MisspecifiedNormal", sample_sizes=(200, 500), replications=2,
                                     estimators=("ML",), master_seed=5, lm_enabled=True)
    simulation.write_rows(d / "aggregate.csv", simulation.aggregate(simulation.run_plan(plan)))
    return d / "aggregate.csv"


def _polylines(svg_path, prefix):
    root = ET.parse(svg_path).getroot()
    return [g for g in root.iter(f"{SVG_NS}g") if g.get("id", "").startswith(prefix)]


def test_report_svg(misspecified_aggregate, tmp_path, capsys):
    out = tmp_path / "chart.svg"
    assert cli.main(["report", "--aggregate", str(misspecified_aggregate), "--out", str(out)]) == 0
    assert len(_polylines(out, "series-chisq-")) == 2
    assert {g.get("id") for g in _polylines(out, "ref-df-")} == {"ref-df-86", "ref-df-87"}
    assert len(_polylines(out, "series-cfi-")) == 2
    assert _polylines(out, "ref-rmsea")
    table = out.with_suffix(".txt").read_text()
    assert table == capsys.readouterr().out
    assert "lm_modified" in table


def test_report_deterministic(misspecified_aggregate, tmp_path):
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    for path in (a, b):
        assert cli.main(["report", "--aggregate", str(misspecified_aggregate), "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("panel,chisq,cfi", [("chisq", 2, 0), ("indices", 0, 2)])
def test_report_panels(misspecified_aggregate, tmp_path, panel, chisq, cfi):
    out = tmp_path / f"{panel}.svg"
    assert cli.main(["report", "--aggregate", str(misspecified_aggregate), "--out", str(out),
                     "--panel", panel]) == 0
    assert len(_polylines(out, "series-chisq-")) == chisq
    assert len(_polylines(out, "series-cfi-")) == cfi


def test_report_empty_body(tmp_path, capsys):
    path = tmp_path / "agg.csv"
    path.write_text(",".join(simulation.AGGREGATE_FIELDS) + "\n")
    assert cli.main(["report", "--aggregate", str(path), "--out", str(tmp_path / "x.svg")]) == 1
    assert not (tmp_path / "x.svg").exists()


def test_report_schema_mismatch(tmp_path, capsys):
    path = tmp_path / "agg.csv"
    path.write_text("scenario,N\nCorrectNormal,100\n")
    assert cli.main(["report", "--aggregate", str(path), "--out", str(tmp_path / "x.svg")]) == 1
    assert "header" in capsys.readouterr().err
