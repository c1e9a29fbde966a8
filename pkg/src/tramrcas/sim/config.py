"""Scenario description: JSON file <-> :class:`ScenarioConfig`."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from ..braking import BrakingParams
from ..collision import RcasConfig
from ..estimator import KfParams
from ..v2x import ChannelConfig


class ScenarioError(ValueError):
    """Invalid scenario configuration."""


BEHAVIORS = ("stationary", "cruise", "profile")


@dataclass(frozen=True)
class DriverConfig:
    reaction_time: float = 1.0
    behavior: str = "cruise"
    target_speed: float = 0.0
    profile: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ScenarioError(f"unknown driver behavior {self.behavior!r}")
        if self.reaction_time < 0:
            raise ScenarioError("reaction_time must be >= 0")
        if self.behavior == "profile" and not self.profile:
            raise ScenarioError("profile behavior needs a non-empty profile")
        object.__setattr__(self, "profile", tuple((float(t), float(v)) for t, v in self.profile))

    def target_at(self, t: float) -> float:
        if self.behavior == "stationary":
            return 0.0
        if self.behavior == "cruise":
            return self.target_speed
        times = [p[0] for p in self.profile]
        if t <= times[0]:
            return self.profile[0][1]
        for (t0, v0), (t1, v1) in zip(self.profile, self.profile[1:]):
            if t <= t1:
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0)
        return self.profile[-1][1]


@dataclass(frozen=True)
class TramConfig:
    id: int
    initial_s: float
    initial_v: float
    length: float
    route: tuple[int, ...]
    params: BrakingParams = field(default_factory=BrakingParams)
    driver: DriverConfig = field(default_factory=DriverConfig)

    def __post_init__(self):
        if not 0 <= self.id <= 2**32 - 1:
            raise ScenarioError(f"tram id {self.id} is not a u32")
        if self.initial_s < 0 or self.initial_v < 0:
            raise ScenarioError(f"tram {self.id}: initial_s and initial_v must be >= 0")
        if self.length <= 0:
            raise ScenarioError(f"tram {self.id}: length must be positive")
        if not self.route:
            raise ScenarioError(f"tram {self.id}: route must list at least one segment")


@dataclass(frozen=True)
class SlipEvent:
    t_start: float
    duration: float
    speed_offset: float
    tram: int | None = None

    def active(self, t: float, tram: int) -> bool:
        if self.tram is not None and self.tram != tram:
            return False
        return self.t_start - 1e-9 <= t < self.t_start + self.duration - 1e-9


@dataclass(frozen=True)
class SensorConfig:
    gnss_pos_std: float = 5.0
    gnss_speed_std: float = 0.5
    tacho_std: float = 0.3
    imu_std: float = 0.3
    gnss_period: float = 0.1
    tacho_period: float = 0.5
    imu_period: float = 0.1
    slip_events: tuple[SlipEvent, ...] = ()

    def __post_init__(self):
        for name in ("gnss_pos_std", "gnss_speed_std", "tacho_std", "imu_std"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"{name} must be >= 0")
        for name in ("gnss_period", "tacho_period", "imu_period"):
            if getattr(self, name) <= 0:
                raise ScenarioError(f"{name} must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    map_path: Path | None
    trams: tuple[TramConfig, ...]
    sensors: SensorConfig = field(default_factory=SensorConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    rcas: RcasConfig = field(default_factory=RcasConfig)
    estimator: KfParams = field(default_factory=KfParams)
    dt: float = 0.1
    duration: float = 30.0
    seed: int = 0
    dt_int: float = 1e-3
    map_document: Mapping | None = None

    def __post_init__(self):
        if self.dt <= 0 or self.duration <= 0:
            raise ScenarioError("dt and duration must be positive")
        if self.dt_int <= 0:
            raise ScenarioError("dt_int must be positive")
        for name in ("gnss_period", "tacho_period", "imu_period"):
            ratio = getattr(self.sensors, name) / self.dt
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                raise ScenarioError(f"dt={self.dt} does not divide sensor period {name}")
        if abs(self.estimator.dt - self.dt) > 1e-12:
            raise ScenarioError("estimator dt must equal the simulation dt")
        ids = [t.id for t in self.trams]
        if not ids:
            raise ScenarioError("scenario needs at least one tram")
        if len(set(ids)) != len(ids):
            raise ScenarioError("tram ids must be unique")
        if self.map_path is None and self.map_document is None:
            raise ScenarioError("scenario needs a map file or an inline map document")

    @property
    def n_ticks(self) -> int:
        return int(math.floor(self.duration / self.dt + 1e-9))


def _build(cls, data: Mapping[str, Any] | None, what: str, **overrides):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ScenarioError(f"unknown {what} field(s): {sorted(unknown)}")
    data.update(overrides)
    try:
        return cls(**data)
    except ScenarioError:
        raise
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid {what}: {exc}") from exc


def scenario_from_dict(doc: Mapping[str, Any], base_dir: Path | None = None) -> ScenarioConfig:
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario must be a JSON object")
    doc = dict(doc)
    map_path = doc.pop("map", None)
    map_document = doc.pop("map_document", None)
    if map_path is not None:
        map_path = Path(map_path)
        if base_dir is not None and not map_path.is_absolute():
            map_path = base_dir / map_path
    trams = []
    for raw in doc.pop("trams", []):
        raw = dict(raw)
        params = raw.pop("params", None)
        params_file = raw.pop("params_file", None)
        if params_file is not None:
            path = Path(params_file)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            try:
                params = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ScenarioError(f"cannot read params file {path}: {exc}") from exc
        try:
            bp = BrakingParams.from_dict(params or {})
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"invalid braking params: {exc}") from exc
        driver = _build(DriverConfig, raw.pop("driver", None), "driver")
        route = tuple(int(r) for r in raw.pop("route", ()))
        trams.append(_build(TramConfig, raw, "tram", params=bp, driver=driver, route=route))
    sensors = dict(doc.pop("sensors", {}) or {})
    slips = tuple(_build(SlipEvent, s, "slip event") for s in sensors.pop("slip_events", []) or [])
    sensor_cfg = _build(SensorConfig, sensors, "sensors", slip_events=slips)
    channel = _build(ChannelConfig, doc.pop("channel", None), "channel")
    rcas = _build(RcasConfig, doc.pop("rcas", None), "rcas")
    est = dict(doc.pop("estimator", {}) or {})
    est.setdefault("dt", doc.get("dt", 0.1))
    for key in ("sigma", "P0"):
        if key in est:
            est[key] = tuple(est[key])
    estimator = _build(KfParams, est, "estimator")
    return _build(
        ScenarioConfig,
        doc,
        "scenario",
        map_path=map_path,
        map_document=map_document,
        trams=tuple(trams),
        sensors=sensor_cfg,
        channel=channel,
        rcas=rcas,
        estimator=estimator,
    )


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"malformed scenario {path}: {exc}") from exc
    return scenario_from_dict(doc, path.parent)


def approach_scenario(
    v_appr_kmh: float,
    reaction_time: float = 1.0,
    *,
    start_gap: float = 150.0,
    leader_length: float = 20.0,
    follower_length: float = 20.0,
    params: BrakingParams = BrakingParams(),
    sensors: SensorConfig = SensorConfig(),
    rcas: RcasConfig = RcasConfig(),
    channel: ChannelConfig = ChannelConfig(),
    seed: int = 0,
    dt_int: float = 1e-3,
) -> ScenarioConfig:
    """A cruising follower approaching a stationary leader on straight depot track."""
    from ..track_map import straight_map_document

    v = v_appr_kmh / 3.6
    follower_s = follower_length
    leader_s = follower_s + start_gap + leader_length
    doc = straight_map_document(leader_s + 100.0)
    trams = (
        TramConfig(1, leader_s, 0.0, leader_length, (1,), params, DriverConfig(behavior="stationary")),
        TramConfig(
            2,
            follower_s,
            v,
            follower_length,
            (1,),
            params,
            DriverConfig(reaction_time=reaction_time, behavior="cruise", target_speed=v),
        ),
    )
    duration = math.ceil(start_gap / max(v, 1.0)) + 15.0
    return ScenarioConfig(
        None,
        trams,
        sensors=sensors,
        channel=channel,
        rcas=rcas,
        duration=duration,
        seed=seed,
        dt_int=dt_int,
        map_document=doc,
    )
