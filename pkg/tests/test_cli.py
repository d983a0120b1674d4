import csv
import json

import numpy as np
import pytest

from banlab.cli import main
from banlab.ingest import load_history
from banlab.metrics import MetricSeries
from banlab.banister import BanisterParams
from banlab.report import loads_csv, metrics_csv, read_fitted_csv, read_loads_csv
from banlab.synth import RawConfig, ScheduleRecipe, SynthConfig, config_to_dict, generate_metric_level
from banlab.tp_model import TpParams
from banlab.training_load import build_daily_loads

from conftest import metric_config


def sim_config(tmp, raw=True, seed=7):
    cfg = SynthConfig(
        TpParams(250.0, 15.0, 5.0, BanisterParams(2.0, 40.0, 12.0)),
        n_days=300,
        schedule=ScheduleRecipe(n_sessions=120),
        raw=RawConfig(duration_min=45) if raw else None,
        rng_seed=seed,
        rider_id="r1",
    )
    path = tmp / "sim.json"
    path.write_text(json.dumps(config_to_dict(cfg)))
    return path


@pytest.fixture(scope="module")
def rider_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("rider")
    assert main(["simulate", "--config", str(sim_config(tmp)), "--out", str(tmp / "data"), "--raw"]) == 0
    return tmp / "data"


@pytest.fixture(scope="module")
def full_report(rider_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("report")
    code = main(["report", "--dir", str(rider_dir), "--rider", "r1", "--kind", "all", "--seed", "3", "--out", str(out)])
    return code, out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_timing_output(capsys):
    assert main(["timing", "--kf", "2", "--taua", "8", "--tauf", "2"]) == 0
    assert capsys.readouterr().out.strip() == "t0=1.8 t*=5.5 t_half=13.3"
    assert main(["timing", "--kf", "2", "--taua", "8", "--tauf", "2", "--json"]) == 0
    blob = json.loads(capsys.readouterr().out)
    assert blob["t_star"] == pytest.approx(np.log(8) / 0.375)


def test_missing_history(tmp_path, capsys):
    code = main(["fit", "--dir", str(tmp_path), "--rider", "ghost", "--kind", "phq"])
    assert code == 1
    assert "no history found" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert main(["timing", "--kf", "2", "--taua", "8", "--tauf", "2", "--bogus"]) == 64
    assert main(["frobnicate"]) == 64
    assert main(["timing", "--kf", "2"]) == 64
    assert main(["fit", "--kind", "phq"]) == 64


def test_degenerate_timing_is_validation_error():
    assert main(["timing", "--kf", "2", "--taua", "5", "--tauf", "5"]) == 1


def test_ingest_summary(rider_dir, capsys):
    assert main(["ingest", "--dir", str(rider_dir), "--rider", "r1"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 121
    assert out[-1] == "rider=r1 sessions=120 training_period=" + str(load_history(rider_dir, "r1").training_period)


def test_trimp_roundtrip(rider_dir, tmp_path):
    out = tmp_path / "loads.csv"
    assert main(["trimp", "--dir", str(rider_dir), "--rider", "r1", "--out", str(out)]) == 0
    back = read_loads_csv(out)
    np.testing.assert_array_equal(back.loads, build_daily_loads(load_history(rider_dir, "r1")).loads)
    assert json.loads((tmp_path / "loads.csv.manifest.json").read_text())["command"] == "trimp"


def test_preparedness_csv(rider_dir, tmp_path):
    out = tmp_path / "W.csv"
    assert main(["preparedness", "--dir", str(rider_dir), "--rider", "r1", "--kf", "2", "--taua", "40", "--tauf", "12", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert list(rows[0]) == ["day", "W"]
    assert rows[0]["W"] == "0.0"


def test_metrics_roundtrip(rider_dir, tmp_path):
    out = tmp_path / "m.csv"
    assert main(["metrics", "--dir", str(rider_dir), "--rider", "r1", "--kind", "hpq", "--out", str(out)]) == 0
    m = MetricSeries.from_csv(out, "hpq")
    assert m.n == 120
    assert np.all(m.variances > 0)


def test_fit_from_csv_and_determinism(tmp_path):
    d = metric_config(seed=4)
    data = generate_metric_level(d)
    (tmp_path / "m.csv").write_text(metrics_csv(data.metrics))
    (tmp_path / "l.csv").write_text(loads_csv(data.loads))
    outs = []
    for name, workers in (("a", "1"), ("b", "1"), ("c", "2")):
        argv = ["fit", "--metrics-csv", str(tmp_path / "m.csv"), "--loads-csv", str(tmp_path / "l.csv"),
                "--kind", "phq", "--seed", "5", "--workers", workers, "--out", str(tmp_path / name)]
        assert main(argv) == 0
        outs.append(tmp_path / name)
    for f in ("fit.json", "preparedness.csv", "fitted_with_bands.csv"):
        blobs = {(o / f).read_bytes() for o in outs}
        assert len(blobs) == 1, f
    fitted = read_fitted_csv(outs[0] / "fitted_with_bands.csv")
    np.testing.assert_array_equal(fitted["observed"], data.metrics.values)
    assert np.all(fitted["lower"] <= fitted["upper"])
    manifest = json.loads((outs[0] / "manifest.json").read_text())
    assert manifest["seed"] == 5
    assert set(manifest["inputs"]) == {str(tmp_path / "m.csv"), str(tmp_path / "l.csv")}


def test_fit_seed_from_environment(tmp_path, monkeypatch):
    data = generate_metric_level(metric_config(seed=4, n_sessions=60, n_days=150))
    (tmp_path / "m.csv").write_text(metrics_csv(data.metrics))
    (tmp_path / "l.csv").write_text(loads_csv(data.loads))
    monkeypatch.setenv("BANLAB_SEED", "17")
    main(["fit", "--metrics-csv", str(tmp_path / "m.csv"), "--loads-csv", str(tmp_path / "l.csv"), "--kind", "phq", "--out", str(tmp_path / "o")])
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 17


def test_report_all(full_report):
    code, out = full_report
    assert code == 0
    rows = read_rows(out / "r1_table2.csv")
    assert [r["metric"] for r in rows] == ["phq", "hpq", "pd", "p0"]
    for r in rows:
        assert r["converged"] == "True"
        for name in ("alpha", "beta", "sigma", "k_f", "tau_a", "tau_f"):
            assert np.isfinite(float(r[name])) and float(r[name + "_se"]) > 0
    t3 = {r["metric"]: float(r["beta_x_delta_w_max"]) for r in read_rows(out / "r1_table3.csv")}
    assert t3["hpq"] < 0 < t3["phq"]
    for kind in ("phq", "hpq", "pd", "p0"):
        assert (out / f"r1_{kind}_fitted_with_bands.csv").exists()
        assert (out / f"r1_{kind}_fit.json").exists()
    report = json.loads((out / "r1_report.json").read_text())
    assert set(report["metrics"]) == {"phq", "hpq", "pd", "p0"}


def test_report_rerun_from_manifest(full_report):
    code, out = full_report
    before = {p.name: p.read_bytes() for p in out.iterdir() if "manifest" not in p.name}
    manifest = json.loads((out / "r1_manifest.json").read_text())
    assert manifest["seed"] == 3 and len(manifest["inputs"]) == 240
    assert main(manifest["argv"]) == code
    after = {p.name: p.read_bytes() for p in out.iterdir() if "manifest" not in p.name}
    assert before == after


def test_simulate_metric_level(tmp_path):
    cfg = sim_config(tmp_path, raw=False)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for f in ("metrics.csv", "loads.csv", "truth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    truth = json.loads((tmp_path / "a" / "truth.json").read_text())["truth"]
    assert truth["tau_a"] == 40.0
