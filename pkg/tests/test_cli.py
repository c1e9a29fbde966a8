import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from tramrcas.braking import BrakingParams, simulate_braking
from tramrcas.cli import EXIT_INVALID, EXIT_NO_FIT, EXIT_NUMERICAL, EXIT_OK, main

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"
RUN1 = SCENARIOS / "approach_28_8kmh.json"


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


def scenario_variant(tmp_path, **changes):
    doc = json.loads(RUN1.read_text())
    doc["map"] = str(SCENARIOS / "depot_map.json")
    doc.update(changes)
    return write_json(tmp_path / "scenario.json", doc)


# run


def test_run_writes_logs(tmp_path, capsys):
    assert main(["run", "--scenario", str(RUN1), "--out", str(tmp_path)]) == EXIT_OK
    printed = capsys.readouterr().out.split()
    assert sorted(Path(p).name for p in printed) == ["events.csv", "summary.json", "tram_1.csv", "tram_2.csv"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert all("d_w" in tram for tram in summary["trams"])
    assert summary["trams"][1]["d_w"] > 0


def test_run_summary_to_stdout(capsys):
    assert main(["run", "--scenario", str(RUN1)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["status"] == "ok"


def test_run_missing_map(tmp_path, capsys):
    path = scenario_variant(tmp_path, map=str(tmp_path / "nowhere.json"))
    assert main(["run", "--scenario", str(path)]) == EXIT_INVALID
    captured = capsys.readouterr()
    assert captured.out == ""
    assert "map" in captured.err


def test_run_missing_scenario(tmp_path):
    assert main(["run", "--scenario", str(tmp_path / "none.json")]) == EXIT_INVALID


def test_run_integrator_blowup(tmp_path, capsys):
    path = scenario_variant(tmp_path, dt_int=0.5)
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "out")]) == EXIT_NUMERICAL
    assert "stability" in capsys.readouterr().err
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["status"] == "numerical-failure"


def test_seed_override_matches_file_seed(tmp_path):
    doc = json.loads(RUN1.read_text())
    doc["map"] = str(SCENARIOS / "depot_map.json")
    doc["seed"] = 5
    in_file = write_json(tmp_path / "seed5.json", doc)
    assert main(["run", "--scenario", str(in_file), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["run", "--scenario", str(RUN1), "--seed", "5", "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("tram_1.csv", "tram_2.csv", "events.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# map-check


def test_map_check(capsys):
    assert main(["map-check", "--map", str(SCENARIOS / "depot_map.json")]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["segments"] == 3
    assert report["switches"] == [1]
    assert report["total_length_m"] == pytest.approx(954.7, abs=0.5)


def test_map_check_invalid(tmp_path):
    bad = write_json(tmp_path / "bad.json", {"segments": [{"id": 1, "points": [[0, 0]], "next": []}]})
    assert main(["map-check", "--map", str(bad)]) == EXIT_INVALID


# braking-curve


@pytest.fixture(scope="module")
def curve(tmp_path_factory):
    out = tmp_path_factory.mktemp("curve") / "curve.csv"
    assert main(["braking-curve", "--v-min", "0", "--v-max", "60", "--out", str(out)]) == EXIT_OK
    with open(out, newline="") as fh:
        return {float(r["v_kmh"]): r for r in csv.DictReader(fh)}


def test_curve_rows(curve):
    assert len(curve) == 61
    assert float(curve[0.0]["d_model"]) == 0.0


def test_curve_naive_at_50(curve):
    assert float(curve[50.0]["d_naive"]) == pytest.approx(43.84, abs=0.01)


def test_curve_model_at_49_8(curve):
    # linear interpolation between the neighbouring 1 km/h rows
    d = 0.2 * float(curve[49.0]["d_model"]) + 0.8 * float(curve[50.0]["d_model"])
    assert d == pytest.approx(46.9, rel=0.15)


def test_curve_invalid_range():
    assert main(["braking-curve", "--v-min", "30", "--v-max", "10"]) == EXIT_INVALID


def test_curve_to_stdout(capsys):
    assert main(["braking-curve", "--v-max", "3"]) == EXIT_OK
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["v_kmh", "d_model", "d_naive"]
    assert len(rows) == 5


# identify


@pytest.fixture(scope="module")
def run_logs(tmp_path_factory):
    logs = tmp_path_factory.mktemp("logs")
    for v0 in (8.0, 12.0):
        tr = simulate_braking(v0)
        with open(logs / f"run_{v0:g}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("t", "v"))
            w.writerows(zip(tr.t, tr.v))
    return logs


def test_identify_synthetic(tmp_path, run_logs, capsys):
    fixed = write_json(tmp_path / "fixed.json", BrakingParams(K_t=1800.0).to_dict())
    bounds = write_json(tmp_path / "bounds.json", {"K_t": [1000.0, 4000.0]})
    out = tmp_path / "fit"
    code = main(["identify", "--logs", str(run_logs), "--fixed", str(fixed), "--bounds", str(bounds), "--out", str(out)])
    assert code == EXIT_OK
    fitted = json.loads((out / "fitted_params.json").read_text())
    assert fitted["K_t"] == pytest.approx(2352.0, rel=0.02)
    report = json.loads((out / "fit_report.json").read_text())
    assert len(report["runs"]) == 2
    assert report["free"] == ["K_t"]


def test_identify_empty_dir(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["identify", "--logs", str(empty), "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_identify_bounds_exclude_truth(tmp_path, run_logs):
    bounds = write_json(tmp_path / "bounds.json", {"K_t": [300.0, 400.0]})
    code = main(["identify", "--logs", str(run_logs), "--bounds", str(bounds), "--out", str(tmp_path / "o")])
    assert code == EXIT_NO_FIT


def test_identify_from_tram_log(tmp_path):
    assert main(["run", "--scenario", str(RUN1), "--out", str(tmp_path / "run")]) == EXIT_OK
    logs = tmp_path / "logs"
    logs.mkdir()
    (logs / "tram_2.csv").write_bytes((tmp_path / "run" / "tram_2.csv").read_bytes())
    # known parameters reproduce the simulated braking phase
    code = main(["identify", "--logs", str(logs), "--out", str(tmp_path / "o"), "--max-mse", "0.05"])
    assert code == EXIT_OK
    assert json.loads((tmp_path / "o" / "fit_report.json").read_text())["mse"] < 0.05


# process boundary


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "tramrcas", "map-check", "--map", str(SCENARIOS / "depot_map.json")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["segments"] == 3


def test_missing_subcommand():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
