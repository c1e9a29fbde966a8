import csv
import io
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from tramrcas.braking import SERVICE_BRAKE_NOTCH
from tramrcas.track_map import TrackPosition, build_map, straight_map_document, track_to_geo
from tramrcas.sim import (
    DriverConfig,
    DriverModel,
    ScenarioConfig,
    ScenarioError,
    SensorConfig,
    SlipEvent,
    TramConfig,
    TruthSample,
    approach_scenario,
    driver_model,
    load_scenario,
    run_scenario,
    scenario_from_dict,
    synthesize_sensors,
)
from tramrcas.v2x import ChannelConfig

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"
QUIET = SensorConfig(0.0, 0.0, 0.0, 0.0)


@pytest.fixture(scope="module")
def straight():
    return build_map(straight_map_document(500.0))


def truth(track_map, t=0.0, s=100.0, v=10.0, a=0.0):
    return TruthSample(t, s, v, a, track_to_geo(TrackPosition(s, (1,)), track_map))


# sensors


def test_sensor_sampling_grids(straight):
    rng = np.random.default_rng(0)
    seen = Counter()
    for tick in range(10):
        m = synthesize_sensors(truth(straight, t=tick * 0.1), SensorConfig(), tick, 0.1, rng, straight)
        seen["gnss"] += m.gnss_pos is not None
        seen["tacho"] += m.tacho_speed is not None
        seen["imu"] += m.imu_accel is not None
    assert seen == {"gnss": 10, "tacho": 2, "imu": 10}


def test_zero_noise_reproduces_truth(straight):
    tr = truth(straight, v=7.5, a=-0.4)
    m = synthesize_sensors(tr, QUIET, 0, 0.1, np.random.default_rng(0), straight)
    assert m.gnss_pos == tr.geo
    assert (m.gnss_speed, m.tacho_speed, m.imu_accel) == (7.5, 7.5, -0.4)


def test_slip_offsets_tacho_only(straight):
    cfg = SensorConfig(0.0, 0.0, 0.0, 0.0, slip_events=(SlipEvent(1.0, 2.0, 3.0),))
    inside = synthesize_sensors(truth(straight, t=1.0), cfg, 10, 0.1, np.random.default_rng(0), straight)
    after = synthesize_sensors(truth(straight, t=3.0), cfg, 30, 0.1, np.random.default_rng(0), straight)
    assert inside.tacho_speed == 13.0
    assert inside.gnss_speed == 10.0
    assert after.tacho_speed == 10.0


def test_slip_targets_one_tram(straight):
    cfg = SensorConfig(0.0, 0.0, 0.0, 0.0, slip_events=(SlipEvent(0.0, 5.0, 3.0, tram=2),))
    other = synthesize_sensors(truth(straight), cfg, 0, 0.1, np.random.default_rng(0), straight, tram_id=1)
    assert other.tacho_speed == 10.0


# driver


def test_driver_reacts_after_delay():
    assert driver_model(10.0, 0, 1.0, 11.0) == SERVICE_BRAKE_NOTCH == -7
    assert driver_model(10.0, 1, 1.0, 10.9) == 1
    assert driver_model(10.0, 0, 0.7, 10.7) == -7
    assert driver_model(None, 1, 0.7, 100.0) == 1


def test_driver_holds_braking():
    d = DriverModel(DriverConfig(reaction_time=0.5, target_speed=8.0))
    assert d.command(0.0, 7.0) == 1
    assert d.command(0.1, 8.2) == 0
    assert d.command(0.2, 8.6) == -1
    d.on_warning(1.0)
    d.on_warning(1.2)  # first warning wins
    assert d.command(1.4, 8.0) == 0
    assert d.command(1.5, 8.0) == -7
    assert d.braking_since == 1.5
    assert d.command(9.0, 0.0) == -7


def test_profile_target_interpolates():
    cfg = DriverConfig(behavior="profile", profile=((0, 0), (10, 10), (20, 10)))
    assert [cfg.target_at(t) for t in (-1, 5, 15, 30)] == [0, 5, 10, 10]


# engine


def single_tram(**kw):
    base = dict(initial_s=100.0, initial_v=0.0, length=20.0, route=(1,), driver=DriverConfig(behavior="stationary"))
    base.update(kw)
    return TramConfig(1, **base)


def test_stationary_tram_converges_without_warnings():
    cfg = ScenarioConfig(None, (single_tram(),), sensors=QUIET, duration=10.0, map_document=straight_map_document(500.0))
    log = run_scenario(cfg)
    last = log.rows[1][-1]
    assert abs(last["est_s"] - 100.0) < 0.1
    assert last["truth_v"] == 0.0
    assert log.summary["trams"][0]["warnings"] == 0
    assert not any(e["event"] == "WARN" for e in log.events)


@pytest.fixture(scope="module")
def approach_log():
    return run_scenario(approach_scenario(38.9, reaction_time=0.5, seed=4))


def test_warning_precedes_braking_by_reaction(approach_log):
    follower = next(t for t in approach_log.summary["trams"] if t["id"] == 2)
    assert follower["d_w"] is not None
    assert follower["t_r_actual"] == pytest.approx(0.5, abs=1e-9)
    assert follower["final_speed"] == 0.0


def test_kinematics_consistent(approach_log):
    for tram in approach_log.summary["trams"]:
        assert tram["kinematic_residual_max"] < 1e-6


def test_every_message_accounted_for(approach_log):
    sent = {e["msg_id"] for e in approach_log.events if e["event"] == "sent"}
    outcomes = Counter(
        (e["msg_id"], e["receiver"]) for e in approach_log.events if e["event"] in ("received", "dropped")
    )
    assert {m for m, _ in outcomes} == sent
    assert set(outcomes.values()) == {1}
    senders = {e["msg_id"]: e["sender"] for e in approach_log.events if e["event"] == "sent"}
    for msg_id, sender in senders.items():
        assert {r for m, r in outcomes if m == msg_id} == {1, 2} - {sender}


def test_denm_follows_each_warning(approach_log):
    warns = [e for e in approach_log.events if e["event"] == "WARN"]
    denms = [e for e in approach_log.events if e["event"] == "sent" and e["detail"] == "DENM"]
    assert len(warns) == len(denms) >= 1
    assert [w["t"] for w in warns] == [d["t"] for d in denms]


def test_identical_seeds_identical_logs(tmp_path):
    cfg = approach_scenario(28.8, seed=9)
    a = run_scenario(cfg).write(tmp_path / "a")
    b = run_scenario(cfg).write(tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_different_seeds_differ():
    a = run_scenario(approach_scenario(28.8, seed=1)).tram_csv(2)
    b = run_scenario(approach_scenario(28.8, seed=2)).tram_csv(2)
    assert a != b


def test_log_files(tmp_path, approach_log):
    paths = approach_log.write(tmp_path)
    assert sorted(p.name for p in paths) == ["events.csv", "summary.json", "tram_1.csv", "tram_2.csv"]
    rows = list(csv.DictReader(io.StringIO(approach_log.tram_csv(2))))
    assert len(rows) == len(approach_log.rows[2])
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "ok"


def test_route_end_is_an_error():
    tram = single_tram(initial_s=450.0, initial_v=10.0, driver=DriverConfig(target_speed=10.0))
    cfg = ScenarioConfig(None, (tram,), sensors=QUIET, duration=20.0, map_document=straight_map_document(500.0))
    with pytest.raises(ScenarioError, match="end of its route"):
        run_scenario(cfg)


# config


def test_bundled_scenarios_load():
    for path in sorted(SCENARIOS.glob("*.json")):
        if path.name == "depot_map.json":
            continue
        cfg = load_scenario(path)
        assert cfg.map_path == SCENARIOS / "depot_map.json"


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda d: d.update(dt=0.3), "does not divide"),
        (lambda d: d["trams"][0].update(route=[1, 9]), "unknown segment"),
        (lambda d: d["trams"][1].update(id=1), "unique"),
        (lambda d: d["trams"][0].update(colour="red"), "unknown tram field"),
        (lambda d: d["trams"][0]["driver"].update(behavior="sleepy"), "behavior"),
        (lambda d: d.update(trams=[]), "at least one tram"),
        (lambda d: d.update(map="missing.json"), "cannot read map"),
    ],
)
def test_invalid_scenarios(mutate, message):
    doc = json.loads((SCENARIOS / "approach_28_8kmh.json").read_text())
    mutate(doc)
    with pytest.raises(ScenarioError, match=message):
        run_scenario(scenario_from_dict(doc, SCENARIOS))


def test_switch_scenario_route_must_follow_links():
    doc = json.loads((SCENARIOS / "switch_divergence.json").read_text())
    doc["trams"][0]["route"] = [2, 3]
    with pytest.raises(ScenarioError, match="successor"):
        run_scenario(scenario_from_dict(doc, SCENARIOS))


def test_channel_config_from_file():
    cfg = scenario_from_dict(
        {"map_document": straight_map_document(100.0), "trams": [], "channel": {"loss_probability": 0.2}}
        | {"trams": [{"id": 1, "initial_s": 0, "initial_v": 0, "length": 10, "route": [1]}]}
    )
    assert cfg.channel == ChannelConfig(loss_probability=0.2)
