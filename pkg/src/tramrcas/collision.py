"""Rear-end collision prediction from received CAMs and own braking distance.

The follower warns when its braking distance plus reaction distance and
safety margin reach the gap to the leader::

    d_br + d_s + v * t_r >= d_g

CAM positions are taken as the sender's front; the rear is ``length``
behind it along the track.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

from .braking import BrakingParams, BrakingTrajectory, braking_table
from .estimator import KfState
from .track_map import (
    OffTrackError,
    TrackMap,
    TrackPosition,
    path_gap,
    project_to_track,
    slope_at,
    track_to_geo,
)
from .v2x import CamMessage, DenmMessage

log = logging.getLogger(__name__)

# slope quantisation (radians) for cached braking tables
SLOPE_DECIMALS = 3


@dataclass(frozen=True)
class RcasConfig:
    t_r: float = 1.0
    d_s: float = 0.0
    horizon: float = 30.0
    step: float = 0.1
    stale_after: float = 2.0
    debounce: float = 1.0
    antenna_offset: float = 0.0
    search_margin: float = 200.0

    def __post_init__(self):
        if self.t_r < 0 or self.d_s < 0:
            raise ValueError("t_r and d_s must be non-negative")
        if self.horizon <= 0 or self.step <= 0:
            raise ValueError("horizon and step must be positive")


@dataclass(frozen=True)
class NeighborTrack:
    station_id: int
    track_pos: TrackPosition
    speed: float
    length: float
    last_update: float


@dataclass(frozen=True)
class Warning:
    target_station: int
    triggered_at: float
    est_gap: float
    braking_distance: float
    own_speed: float


class Gap(NamedTuple):
    distance: float
    overlap: bool


def own_front(own: KfState, cfg: RcasConfig = RcasConfig()) -> TrackPosition:
    return TrackPosition(max(own.s + cfg.antenna_offset, 0.0), own.path)


def screen_neighbor(
    cam: CamMessage,
    own: KfState,
    track_map: TrackMap,
    *,
    horizon_m: float | None = None,
    cfg: RcasConfig = RcasConfig(),
) -> NeighborTrack | None:
    """Keep a CAM sender only if it is ahead on a track reachable from ours."""
    try:
        tp = project_to_track(cam.position, track_map)
    except OffTrackError:
        log.debug("CAM from %d is off-track, ignored", cam.station_id)
        return None
    gap = path_gap(own_front(own, cfg), tp, track_map, horizon_m)
    if gap is None:
        return None
    return NeighborTrack(cam.station_id, tp, cam.speed, cam.vehicle_length, cam.time)


def gap_to_neighbor(
    own: KfState,
    nb: NeighborTrack,
    track_map: TrackMap,
    now: float | None = None,
    cfg: RcasConfig = RcasConfig(),
) -> Gap | None:
    """Front-of-own to rear-of-neighbour distance, clamped at zero.

    With ``now`` given the neighbour is propagated at its reported speed
    since its last update.  ``None`` if the neighbour is no longer ahead.
    """
    along = path_gap(own_front(own, cfg), nb.track_pos, track_map)
    if along is None:
        return None
    if now is not None:
        along += nb.speed * max(now - nb.last_update, 0.0)
    gap = along - nb.length
    if gap < 0:
        return Gap(0.0, True)
    return Gap(gap, False)


def check_warning(d_br: float, own_v: float, d_g: float, cfg: RcasConfig = RcasConfig()) -> bool:
    return d_br + cfg.d_s + own_v * cfg.t_r >= d_g


def predict_conflict(
    own_traj: BrakingTrajectory,
    nb: NeighborTrack,
    cfg: RcasConfig,
    gap: float,
) -> float | None:
    """Earliest time the braking follower reaches the constant-speed leader.

    The follower keeps its initial speed for ``t_r`` and then follows
    ``own_traj``; the leader's rear starts ``gap`` ahead and moves at
    ``nb.speed``.  Touching (including the safety margin) counts.
    """
    v0 = float(own_traj.v[0])
    n = int(round(cfg.horizon / cfg.step))
    for k in range(n + 1):
        t = k * cfg.step
        if t <= cfg.t_r:
            own_s = v0 * t
        else:
            own_s = v0 * cfg.t_r + own_traj.position_at(t - cfg.t_r)
        if own_s + cfg.d_s >= gap + nb.speed * t - 1e-9:
            return t
    return None


@dataclass
class TickResult:
    warning: Warning | None = None
    denm: DenmMessage | None = None
    active: bool = False
    target: int | None = None
    gap: float | None = None
    braking_distance: float | None = None


@dataclass
class CollisionMonitor:
    """Per-tram warning logic over a table of screened neighbours.

    A warning latches on its rising edge and stays active until the trigger
    condition has been false for ``cfg.debounce`` seconds; only rising edges
    emit a :class:`Warning` and a DENM.
    """

    station_id: int
    track_map: TrackMap
    params: BrakingParams = field(default_factory=BrakingParams)
    cfg: RcasConfig = field(default_factory=RcasConfig)
    dt_int: float = 1e-3
    braking_distance: Callable[[float], float] | None = None
    neighbors: dict[int, NeighborTrack] = field(default_factory=dict)
    latched: bool = False
    clear_since: float | None = None

    def stopping_distance(self, own: KfState) -> float:
        """Braking distance at the estimated speed, using the local slope unless overridden."""
        v = max(own.v, 0.0)
        if self.braking_distance is not None:
            return self.braking_distance(v)
        theta = round(slope_at(own_front(own, self.cfg), self.track_map), SLOPE_DECIMALS)
        return braking_table(self.params, theta + 0.0, self.dt_int)(v)

    def on_cam(self, cam: CamMessage, own: KfState | None) -> NeighborTrack | None:
        if cam.station_id == self.station_id or own is None:
            return None
        d_br = self.stopping_distance(own)
        horizon = d_br + max(own.v, 0.0) * self.cfg.t_r + self.cfg.d_s + self.cfg.search_margin
        nb = screen_neighbor(cam, own, self.track_map, horizon_m=horizon, cfg=self.cfg)
        if nb is None:
            self.neighbors.pop(cam.station_id, None)
        else:
            self.neighbors[cam.station_id] = nb
        return nb

    def evict(self, now: float) -> list[int]:
        stale = [sid for sid, nb in self.neighbors.items() if now - nb.last_update > self.cfg.stale_after]
        for sid in stale:
            del self.neighbors[sid]
        return stale

    def tick(self, own: KfState, now: float) -> TickResult:
        self.evict(now)
        v = max(own.v, 0.0)
        # tables are built on first use, so a tram with nobody around pays nothing
        d_br = self.stopping_distance(own) if self.neighbors or self.latched else None
        result = TickResult(braking_distance=d_br)
        violating = []
        for sid in sorted(self.neighbors):
            gap = gap_to_neighbor(own, self.neighbors[sid], self.track_map, now, self.cfg)
            if gap is None:
                continue
            if result.gap is None or gap.distance < result.gap:
                result.gap, result.target = gap.distance, sid
            if check_warning(d_br, v, gap.distance, self.cfg):
                violating.append((gap.distance, sid))
        if violating:
            gap, target = min(violating)
            result.gap, result.target = gap, target
            self.clear_since = None
            if not self.latched:
                self.latched = True
                result.warning = Warning(target, now, gap, d_br, v)
                result.denm = DenmMessage(
                    self.station_id, int(round(now * 1000)), track_to_geo(own_front(own, self.cfg), self.track_map)
                )
        elif self.latched:
            if self.clear_since is None:
                self.clear_since = now
            if now - self.clear_since >= self.cfg.debounce - 1e-9:
                self.latched = False
                self.clear_since = None
        result.active = self.latched
        return result


def rcas_tick(
    own: KfState,
    neighbors: Sequence[NeighborTrack],
    params: BrakingParams,
    cfg: RcasConfig,
    track_map: TrackMap,
    now: float,
    station_id: int = 0,
) -> tuple[Warning | None, DenmMessage | None]:
    """Stateless single evaluation (no debounce history)."""
    monitor = CollisionMonitor(station_id, track_map, params, cfg)
    monitor.neighbors = {nb.station_id: nb for nb in neighbors}
    result = monitor.tick(own, now)
    return result.warning, result.denm
