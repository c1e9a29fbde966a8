"""Fixed-step multi-tram scenario engine.

Per tick, in tram-id order: advance ground truth, synthesise sensors, run
the estimator, generate and broadcast CAMs, deliver due messages, run the
collision monitor, and let the driver react.  The whole run is a pure
function of the scenario configuration and its seed.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..braking import BrakingSimulationError, DynState, derivatives, holding_brake_engaged, rk4_step
from ..collision import CollisionMonitor, TickResult
from ..estimator import KfState, MeasurementSet, TrackEstimator
from ..track_map import (
    MapError,
    TrackMap,
    TrackPosition,
    build_map,
    heading_at,
    load_map,
    path_gap,
    slope_at,
    track_to_geo,
)
from ..v2x import (
    BroadcastChannel,
    CamMessage,
    CamTriggers,
    Inbox,
    cam_due,
    decode_message,
    encode_cam,
    encode_denm,
)
from .config import ScenarioConfig, ScenarioError, TramConfig
from .driver import DriverModel
from .sensors import TruthSample, synthesize_sensors

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "t",
    "truth_s",
    "truth_v",
    "truth_a",
    "est_s",
    "est_v",
    "est_a",
    "P00",
    "P11",
    "P22",
    "path_head",
    "flags",
    "has_gnss",
    "has_tacho",
    "has_imu",
    "cam_sent",
    "rx",
    "notch",
    "braking",
    "warning",
    "warning_active",
    "target",
    "est_gap",
    "d_br",
    "true_gap",
)
EVENT_COLUMNS = ("t", "event", "msg_id", "sender", "receiver", "detail")


class SimulationFailure(RuntimeError):
    """Numerical failure mid-run; ``log`` holds everything up to the failing tick."""

    def __init__(self, message: str, log: "SimLog"):
        super().__init__(message)
        self.log = log


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return f"{value:.6f}"
    return str(value)


@dataclass
class SimLog:
    rows: dict[int, list[dict]] = field(default_factory=dict)
    events: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def tram_csv(self, tram_id: int) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.rows[tram_id]:
            writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
        return buf.getvalue()

    def events_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EVENT_COLUMNS)
        for ev in self.events:
            writer.writerow([_fmt(ev[c]) for c in EVENT_COLUMNS])
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for tram_id in sorted(self.rows):
            path = out / f"tram_{tram_id}.csv"
            path.write_text(self.tram_csv(tram_id), encoding="utf-8")
            written.append(path)
        for name, text in (("events.csv", self.events_csv()), ("summary.json", self.summary_json())):
            path = out / name
            path.write_text(text, encoding="utf-8")
            written.append(path)
        return written


class _Agent:
    def __init__(self, cfg: TramConfig, scenario: ScenarioConfig, track_map: TrackMap, seed_seq):
        self.cfg = cfg
        self.id = cfg.id
        self.map = track_map
        self.route = cfg.route
        self.route_length = track_map.path_length(cfg.route)
        if cfg.initial_s > self.route_length:
            raise ScenarioError(f"tram {cfg.id}: initial_s beyond its route")
        r = cfg.params.r
        self.truth = DynState(cfg.initial_v, cfg.initial_v / r, 0.0, cfg.initial_s, 0.0)
        self.truth_a = 0.0
        self.notch = 0
        self.rng = np.random.default_rng(seed_seq)
        self.estimator = TrackEstimator(track_map, scenario.estimator)
        self.monitor = CollisionMonitor(cfg.id, track_map, cfg.params, scenario.rcas, scenario.dt_int)
        self.driver = DriverModel(cfg.driver)
        self.inbox = Inbox()
        self.last_cam: CamMessage | None = None
        self.last_cam_time: float | None = None
        self.cam_seq = 0
        self.kin_residual = 0.0
        self.first_warning: dict | None = None
        self.brake_time: float | None = None
        self.cams_sent = 0
        self.warnings = 0

    @property
    def truth_position(self) -> TrackPosition:
        return TrackPosition(self.truth.s, self.route)

    def truth_geo(self):
        return track_to_geo(self.truth_position, self.map)

    def advance(self, dt: float, dt_int: float) -> None:
        """Integrate the plant over one tick, holding standstill under braking."""
        n = max(1, round(dt / dt_int))
        h = dt / n
        start = self.truth
        state = start
        integral = 0.0
        theta = slope_at(self.truth_position, self.map)
        params = self.cfg.params
        for _ in range(n):
            if state.v_t <= 0.0 and self.notch <= 0:
                state = DynState(0.0, 0.0, state.T_mot, state.s, state.t + h)
                continue
            new = rk4_step(state, self.notch, h, params, theta)
            if new.v_t < 0.0:
                # stop inside the substep: constant deceleration to the crossing
                tau = h * state.v_t / (state.v_t - new.v_t)
                new = DynState(0.0, 0.0, new.T_mot, state.s + 0.5 * state.v_t * tau, new.t)
                integral += 0.5 * state.v_t * tau
            else:
                a0 = derivatives(state.v_t, state.omega_wh, state.T_mot, self.notch, theta, params)[0]
                a1 = derivatives(new.v_t, new.omega_wh, new.T_mot, self.notch, theta, params)[0]
                integral += 0.5 * (state.v_t + new.v_t) * h + h * h / 12.0 * (a0 - a1)
                if holding_brake_engaged(new, self.notch, theta, params):
                    new = DynState(0.0, 0.0, new.T_mot, new.s, new.t)
            state = new
        if state.s > self.route_length:
            raise ScenarioError(f"tram {self.id} ran past the end of its route at t={state.t:.1f}s")
        self.truth = DynState(state.v_t, state.omega_wh, state.T_mot, state.s, start.t + dt)
        self.truth_a = (state.v_t - start.v_t) / dt
        self.kin_residual = max(self.kin_residual, abs((state.s - start.s) - integral) / dt)


def _load_track_map(cfg: ScenarioConfig) -> TrackMap:
    try:
        if cfg.map_document is not None:
            return build_map(cfg.map_document)
        return load_map(cfg.map_path)
    except MapError as exc:
        raise ScenarioError(str(exc)) from exc


def _true_gap(agent: _Agent, agents: list[_Agent]) -> tuple[float | None, int | None]:
    best, target = None, None
    for other in agents:
        if other is agent:
            continue
        along = path_gap(agent.truth_position, other.truth_position, agent.map)
        if along is None:
            continue
        gap = along - other.cfg.length
        if best is None or gap < best:
            best, target = gap, other.id
    return best, target


def run_scenario(cfg: ScenarioConfig) -> SimLog:
    """Run a scenario to completion and return its log with a per-tram warning summary."""
    track_map = _load_track_map(cfg)
    for tram in cfg.trams:
        for sid in tram.route:
            if sid not in track_map.segments:
                raise ScenarioError(f"tram {tram.id}: route references unknown segment {sid}")
        for a, b in zip(tram.route, tram.route[1:]):
            if b not in track_map.successors(a):
                raise ScenarioError(f"tram {tram.id}: route step {a}->{b} is not a successor link")

    tram_seeds = {t.id: np.random.SeedSequence([cfg.seed, t.id]) for t in cfg.trams}
    channel = BroadcastChannel(cfg.channel, np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.channel.seed, 0xC4])))

    simlog = SimLog()
    try:
        agents = [_Agent(t, cfg, track_map, tram_seeds[t.id]) for t in sorted(cfg.trams, key=lambda t: t.id)]
    except BrakingSimulationError as exc:
        raise SimulationFailure(f"braking model failed during setup: {exc}", simlog) from exc
    for agent in agents:
        simlog.rows[agent.id] = []
    triggers = CamTriggers()

    def event(t, kind, msg_id, sender, receiver, detail=""):
        simlog.events.append(
            {"t": round(t, 6), "event": kind, "msg_id": msg_id, "sender": sender, "receiver": receiver, "detail": detail}
        )

    def send(agent: _Agent, payload: bytes, now: float, kind: str) -> None:
        agent.cam_seq += 1
        msg_id = f"{agent.id}:{agent.cam_seq}"
        receivers = [(o.id, o.truth_geo()) for o in agents if o is not agent]
        event(now, "sent", msg_id, agent.id, None, kind)
        delivered, dropped = channel.broadcast(payload, agent.truth_geo(), receivers, now)
        for rid, t_deliver in delivered:
            by_id[rid].inbox.push(t_deliver, agent.id, agent.cam_seq, payload)
        for rid, reason in dropped:
            event(now, "dropped", msg_id, agent.id, rid, reason)

    by_id = {a.id: a for a in agents}
    try:
        for tick in range(cfg.n_ticks + 1):
            now = round(tick * cfg.dt, 9)
            measurements: dict[int, MeasurementSet] = {}
            for agent in agents:
                if tick > 0:
                    agent.advance(cfg.dt, cfg.dt_int)
                truth = TruthSample(now, agent.truth.s, agent.truth.v_t, agent.truth_a, agent.truth_geo())
                measurements[agent.id] = synthesize_sensors(
                    truth, cfg.sensors, tick, cfg.dt, agent.rng, track_map, agent.id
                )
                agent.estimator.step(measurements[agent.id])

            cam_flags = {}
            for agent in agents:
                est = agent.estimator.state
                cam_flags[agent.id] = False
                if est is None:
                    continue
                pos = TrackPosition(est.s, est.path)
                cam = CamMessage(
                    agent.id,
                    int(round(now * 1000)),
                    track_to_geo(pos, track_map),
                    max(est.v, 0.0),
                    heading_at(pos, track_map),
                    agent.cfg.length,
                )
                if cam_due(agent.last_cam, agent.last_cam_time, cam, now, triggers):
                    send(agent, encode_cam(cam), now, "CAM")
                    agent.last_cam, agent.last_cam_time = cam, now
                    agent.cams_sent += 1
                    cam_flags[agent.id] = True

            results: dict[int, TickResult] = {}
            rx_counts = {}
            for agent in agents:
                est = agent.estimator.state
                due = agent.inbox.pop_due(now)
                rx_counts[agent.id] = len(due)
                for _, sender, seq, payload in due:
                    msg = decode_message(payload)
                    event(now, "received", f"{sender}:{seq}", sender, agent.id, type(msg).__name__[:4].upper())
                    if isinstance(msg, CamMessage):
                        agent.monitor.on_cam(msg, est)
                if est is None:
                    results[agent.id] = TickResult()
                    continue
                res = agent.monitor.tick(est, now)
                results[agent.id] = res
                if res.warning is not None:
                    agent.warnings += 1
                    agent.driver.on_warning(now)
                    if agent.first_warning is None:
                        agent.first_warning = {
                            "t_warn": now,
                            "d_w": res.warning.est_gap,
                            "d_br_w": res.warning.braking_distance,
                            "v_est_w": res.warning.own_speed,
                            "v_true_w": agent.truth.v_t,
                            "target": res.warning.target_station,
                        }
                    w = res.warning
                    event(
                        now,
                        "WARN",
                        "",
                        agent.id,
                        w.target_station,
                        f"gap={w.est_gap:.3f};d_br={w.braking_distance:.3f};v={w.own_speed:.3f}",
                    )
                    send(agent, encode_denm(res.denm), now, "DENM")

            for agent in agents:
                agent.notch = agent.driver.command(now, agent.truth.v_t)
                if agent.driver.braking_since is not None and agent.brake_time is None:
                    agent.brake_time = agent.driver.braking_since
                est = agent.estimator.state
                meas = measurements[agent.id]
                res = results[agent.id]
                true_gap, _ = _true_gap(agent, agents)
                simlog.rows[agent.id].append(
                    {
                        "t": now,
                        "truth_s": agent.truth.s,
                        "truth_v": agent.truth.v_t,
                        "truth_a": agent.truth_a,
                        "est_s": est.s if est else None,
                        "est_v": est.v if est else None,
                        "est_a": est.a if est else None,
                        "P00": float(est.P[0, 0]) if est else None,
                        "P11": float(est.P[1, 1]) if est else None,
                        "P22": float(est.P[2, 2]) if est else None,
                        "path_head": est.path[-1] if est else None,
                        "flags": "|".join(sorted(est.flags)) if est else "",
                        "has_gnss": meas.gnss_pos is not None,
                        "has_tacho": meas.tacho_speed is not None,
                        "has_imu": meas.imu_accel is not None,
                        "cam_sent": cam_flags[agent.id],
                        "rx": rx_counts[agent.id],
                        "notch": agent.notch,
                        "braking": agent.driver.braking_since is not None,
                        "warning": res.warning is not None,
                        "warning_active": res.active,
                        "target": res.target,
                        "est_gap": res.gap,
                        "d_br": res.braking_distance,
                        "true_gap": true_gap,
                    }
                )
    except BrakingSimulationError as exc:
        simlog.summary = _summary(agents, cfg, status="numerical-failure")
        raise SimulationFailure(f"numerical failure at t={now:.1f}s: {exc}", simlog) from exc

    end = round(cfg.n_ticks * cfg.dt, 9)
    for agent in agents:
        for _, sender, seq, _payload in agent.inbox.drain():
            event(end, "dropped", f"{sender}:{seq}", sender, agent.id, "end-of-run")
    simlog.summary = _summary(agents, cfg, status="ok")
    log.info("scenario finished after %d ticks, %d events", cfg.n_ticks, len(simlog.events))
    return simlog


def _summary(agents: list[_Agent], cfg: ScenarioConfig, status: str) -> dict:
    trams = []
    for agent in agents:
        entry = {
            "id": agent.id,
            "v_appr": None,
            "d_w": None,
            "d_br_w": None,
            "v_est_w": None,
            "t_warn": None,
            "t_brake": agent.brake_time,
            "t_r_actual": None,
            "final_gap": _true_gap(agent, agents)[0],
            "final_speed": agent.truth.v_t,
            "warnings": agent.warnings,
            "cams_sent": agent.cams_sent,
            "resets": agent.estimator.resets,
            "kinematic_residual_max": agent.kin_residual,
        }
        fw = agent.first_warning
        if fw is not None:
            entry.update(
                v_appr=fw["v_true_w"] * 3.6,
                d_w=fw["d_w"],
                d_br_w=fw["d_br_w"],
                v_est_w=fw["v_est_w"],
                t_warn=fw["t_warn"],
                target=fw["target"],
            )
            if agent.brake_time is not None:
                entry["t_r_actual"] = round(agent.brake_time - fw["t_warn"], 9)
        trams.append(entry)
    return {"status": status, "seed": cfg.seed, "duration": cfg.duration, "trams": trams}
