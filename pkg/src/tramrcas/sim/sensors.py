"""Sensor synthesis from ground truth: GNSS, tachograph (with slip), IMU."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..estimator import MeasurementSet
from ..track_map import GeoPoint, TrackMap
from .config import SensorConfig


@dataclass(frozen=True)
class TruthSample:
    t: float
    s: float
    v: float
    a: float
    geo: GeoPoint


def _on_grid(tick: int, period: float, dt: float) -> bool:
    every = max(1, round(period / dt))
    return tick % every == 0


def synthesize_sensors(
    truth: TruthSample,
    cfg: SensorConfig,
    tick: int,
    dt: float,
    rng: np.random.Generator,
    track_map: TrackMap,
    tram_id: int | None = None,
) -> MeasurementSet:
    """Noisy measurements available at ``tick``.

    Each channel appears only on its own sampling grid.  Zero standard
    deviations reproduce the truth exactly (no random draw is consumed).
    """
    gnss_pos = gnss_speed = tacho = imu = None
    if _on_grid(tick, cfg.gnss_period, dt):
        if cfg.gnss_pos_std > 0:
            xy = track_map.to_local(truth.geo) + rng.normal(0.0, cfg.gnss_pos_std, 2)
            gnss_pos = track_map.to_geo(xy)
        else:
            gnss_pos = truth.geo
        noise = rng.normal(0.0, cfg.gnss_speed_std) if cfg.gnss_speed_std > 0 else 0.0
        gnss_speed = max(truth.v + noise, 0.0)
    if _on_grid(tick, cfg.tacho_period, dt):
        noise = rng.normal(0.0, cfg.tacho_std) if cfg.tacho_std > 0 else 0.0
        slip = sum(ev.speed_offset for ev in cfg.slip_events if ev.active(truth.t, tram_id))
        tacho = max(truth.v + slip + noise, 0.0)
    if _on_grid(tick, cfg.imu_period, dt):
        noise = rng.normal(0.0, cfg.imu_std) if cfg.imu_std > 0 else 0.0
        imu = truth.a + noise
    return MeasurementSet(truth.t, gnss_pos, gnss_speed, tacho, imu)
