"""Map-aided linear Kalman filter for track position, speed and acceleration.

The state ``x = [s, v, a]`` follows a constant-acceleration model sampled
at ``dt``.  Measurements are assembled row by row from whichever channels
are present at a tick (GNSS position projected onto the track, GNSS speed,
tachograph speed, IMU acceleration); each row is gated on its innovation
before the joint update.  Branch ambiguity at switches is handled by
selecting the branch closest to the recent GNSS fixes and by resetting the
filter when fixes keep matching a different branch.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .track_map import (
    DEFAULT_MAX_OFFSET,
    DEFAULT_WINDOW,
    GeoPoint,
    OffTrackError,
    TrackMap,
    TrackPosition,
    project_to_track,
)

CHANNELS = ("gnss_pos", "gnss_speed", "tacho_speed", "imu_accel")
_ROWS = {"gnss_pos": 0, "gnss_speed": 1, "tacho_speed": 1, "imu_accel": 2}


@dataclass(frozen=True)
class KfParams:
    dt: float = 0.1
    q: float = 1.0
    sigma: tuple[float, float, float] = (25.0, 0.25, 0.1)
    tacho_var_factor: float = 4.0
    P0: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gate_threshold: float = 3.0
    reset_window: int = 5
    window: float = DEFAULT_WINDOW
    max_offset: float = DEFAULT_MAX_OFFSET

    def __post_init__(self):
        if self.dt <= 0 or self.q <= 0:
            raise ValueError("dt and q must be positive")
        if len(self.sigma) != 3 or min(self.sigma) <= 0:
            raise ValueError("sigma needs three positive variances")
        if self.tacho_var_factor <= 0 or self.gate_threshold <= 0:
            raise ValueError("tacho_var_factor and gate_threshold must be positive")
        if self.reset_window < 1:
            raise ValueError("reset_window must be >= 1")
        object.__setattr__(self, "sigma", tuple(float(x) for x in self.sigma))
        object.__setattr__(self, "P0", tuple(float(x) for x in self.P0))

    def variance(self, channel: str) -> float:
        if channel == "gnss_pos":
            return self.sigma[0]
        if channel == "gnss_speed":
            return self.sigma[1]
        if channel == "tacho_speed":
            return self.sigma[1] * self.tacho_var_factor
        return self.sigma[2]

    @property
    def P0_matrix(self) -> np.ndarray:
        return np.diag(self.P0)


@dataclass(frozen=True)
class MeasurementSet:
    t: float
    gnss_pos: GeoPoint | None = None
    gnss_speed: float | None = None
    tacho_speed: float | None = None
    imu_accel: float | None = None

    def __post_init__(self):
        for name in ("gnss_speed", "tacho_speed"):
            value = getattr(self, name)
            if value is not None and not value >= 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(c for c in CHANNELS if getattr(self, c) is not None)

    def without(self, *names: str) -> "MeasurementSet":
        return replace(self, **{n: None for n in names})


@dataclass(frozen=True, eq=False)
class KfState:
    x: np.ndarray
    P: np.ndarray
    t: float
    path: tuple[int, ...]
    mismatch_count: int = 0
    flags: frozenset[str] = field(default_factory=frozenset)

    @property
    def s(self) -> float:
        return float(self.x[0])

    @property
    def v(self) -> float:
        return float(self.x[1])

    @property
    def a(self) -> float:
        return float(self.x[2])

    @property
    def position(self) -> TrackPosition:
        return TrackPosition(max(self.s, 0.0), self.path)

    def with_flags(self, *flags: str) -> "KfState":
        return replace(self, flags=frozenset(flags))


@dataclass(frozen=True)
class ResetSignal:
    state: KfState
    previous_path: tuple[int, ...]


def transition_matrix(dt: float) -> np.ndarray:
    return np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])


def process_noise(dt: float, q: float) -> np.ndarray:
    return q * np.array(
        [
            [dt**5 / 20, dt**4 / 8, dt**3 / 6],
            [dt**4 / 8, dt**3 / 3, dt**2 / 2],
            [dt**3 / 6, dt**2 / 2, dt],
        ]
    )


def kf_init(
    meas: MeasurementSet,
    track_map: TrackMap,
    params: KfParams = KfParams(),
    hint: TrackPosition | None = None,
) -> KfState:
    """Start a filter from the first GNSS fix (``ValueError`` without one)."""
    if meas.gnss_pos is None:
        raise ValueError("initialisation needs a GNSS position")
    tp = project_to_track(meas.gnss_pos, track_map, hint, window=params.window, max_offset=params.max_offset)
    # inverse-variance mean of whichever speed channels came with the fix
    speeds = [(z, params.variance(ch)) for ch, z in (("gnss_speed", meas.gnss_speed), ("tacho_speed", meas.tacho_speed)) if z is not None]
    v = sum(z / var for z, var in speeds) / sum(1 / var for _, var in speeds) if speeds else 0.0
    return KfState(np.array([tp.s, v, 0.0]), params.P0_matrix.copy(), meas.t, tp.path)


def kf_predict(state: KfState, params: KfParams = KfParams()) -> KfState:
    F = transition_matrix(params.dt)
    P = F @ state.P @ F.T + process_noise(params.dt, params.q)
    return replace(state, x=F @ state.x, P=0.5 * (P + P.T), t=state.t + params.dt, flags=frozenset())


def kf_update(
    state: KfState,
    meas: MeasurementSet,
    track_map: TrackMap,
    params: KfParams = KfParams(),
) -> KfState:
    """Measurement update with per-channel innovation gating.

    Uses the Joseph form of the covariance update so ``P`` stays symmetric
    positive semi-definite over long runs.
    """
    flags = set(state.flags)
    rows: list[tuple[str, float]] = []
    if meas.gnss_pos is not None:
        try:
            tp = project_to_track(
                meas.gnss_pos,
                track_map,
                TrackPosition(max(state.s, 0.0), state.path),
                window=params.window,
                max_offset=params.max_offset,
            )
            rows.append(("gnss_pos", tp.s))
        except OffTrackError:
            flags.add("gnss-off-track")
    for name in CHANNELS[1:]:
        value = getattr(meas, name)
        if value is not None:
            rows.append((name, float(value)))
    if not rows:
        flags.add("all-rejected")
        return replace(state, flags=frozenset(flags))

    accepted = []
    for name, y in rows:
        i = _ROWS[name]
        innovation = y - state.x[i]
        S = state.P[i, i] + params.variance(name)
        if abs(innovation) > params.gate_threshold * math.sqrt(S):
            flags.add(f"rejected:{name}")
        else:
            accepted.append((name, y))
    if not accepted:
        flags.add("all-rejected")
        return replace(state, flags=frozenset(flags))

    H = np.zeros((len(accepted), 3))
    for k, (name, _) in enumerate(accepted):
        H[k, _ROWS[name]] = 1.0
    R = np.diag([params.variance(name) for name, _ in accepted])
    y = np.array([value for _, value in accepted])
    P = state.P
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    x = state.x + K @ (y - H @ state.x)
    I_KH = np.eye(3) - K @ H
    P = I_KH @ P @ I_KH.T + K @ R @ K.T
    return replace(state, x=x, P=0.5 * (P + P.T), flags=frozenset(flags))


def _switch_context(state: KfState, track_map: TrackMap) -> tuple[int, tuple[int, ...]] | None:
    """Index ``j`` in the path where the branch choice sits, and the alternatives.

    The choice belongs to the latest switch at or behind the current
    position; when the path ends in a switch the choice is the one to append.
    """
    try:
        idx, _, _ = track_map.locate(state.path, max(state.s, 0.0))
    except ValueError:
        idx = len(state.path) - 1
    if idx == len(state.path) - 1 and len(track_map.successors(state.path[-1])) >= 2:
        return len(state.path), track_map.successors(state.path[-1])
    for j in range(idx, 0, -1):
        alts = track_map.successors(state.path[j - 1])
        if len(alts) >= 2:
            return j, alts
    return None


def _branch_distance(fix: GeoPoint, branch: int, track_map: TrackMap, window: float) -> float:
    xy = track_map.to_local(fix)
    best = track_map.segments[branch].project(xy)[1]
    for chain in track_map.extensions((branch,), window - track_map.segments[branch].length):
        best = min(best, track_map.segments[chain[-1]].project(xy)[1])
    return best


def select_branch(
    state: KfState,
    recent_gnss: Sequence[GeoPoint],
    track_map: TrackMap,
    params: KfParams = KfParams(),
) -> KfState:
    """Pick the branch after the relevant switch that best fits recent fixes.

    Scores are summed distances of the fixes to each branch (and its
    downstream segments within the look-ahead window).  Ties keep the
    current hypothesis, or the first listed successor when there is none.
    """
    ctx = _switch_context(state, track_map)
    if ctx is None:
        return state
    j, alternatives = ctx
    current = state.path[j] if j < len(state.path) else None
    if not recent_gnss:
        path = state.path if current is not None else state.path + (alternatives[0],)
        return replace(state, path=path, flags=state.flags | {"blind-switch"})
    scores = {
        alt: sum(_branch_distance(fix, alt, track_map, params.window) for fix in recent_gnss) for alt in alternatives
    }
    default = current if current is not None else alternatives[0]
    best = min(alternatives, key=scores.__getitem__)
    if scores[best] >= scores[default] - 1e-6:
        best = default
    if best == current:
        return state
    return replace(state, path=state.path[:j] + (best,), mismatch_count=0)


def _compatible(a: Sequence[int], b: Sequence[int]) -> bool:
    n = min(len(a), len(b))
    return tuple(a[:n]) == tuple(b[:n])


def measured_branch(
    state: KfState, fix: GeoPoint, track_map: TrackMap, params: KfParams = KfParams()
) -> TrackPosition:
    """Project a fix onto every branch reachable around the current position.

    Candidates start ``window`` meters behind the estimate and reach up to
    ``window`` meters ahead of it, across every switch in that range.
    """
    back = max(state.s - params.window, 0.0)
    idx, _, _ = track_map.locate(state.path, min(back, track_map.path_length(state.path)))
    prefix = state.path[: idx + 1]
    hint = TrackPosition(back, prefix)
    return project_to_track(fix, track_map, hint, window=2 * params.window, max_offset=params.max_offset)


def check_reset(
    state: KfState,
    meas: MeasurementSet,
    track_map: TrackMap,
    params: KfParams = KfParams(),
) -> KfState | ResetSignal:
    """Count consecutive fixes that sit closer to another branch.

    After ``reset_window`` consecutive mismatches the filter restarts on the
    measured branch with ``P = P0`` (speed and acceleration are kept).
    """
    if meas.gnss_pos is None:
        return state
    try:
        tp = measured_branch(state, meas.gnss_pos, track_map, params)
    except OffTrackError:
        return state
    if _compatible(tp.path, state.path):
        return replace(state, mismatch_count=0) if state.mismatch_count else state
    count = state.mismatch_count + 1
    if count < params.reset_window:
        return replace(state, mismatch_count=count)
    x = np.array([tp.s, state.v, state.a])
    new = KfState(x, params.P0_matrix.copy(), state.t, tp.path, 0, frozenset({"reset"}))
    return ResetSignal(new, state.path)


class TrackEstimator:
    """Per-vehicle filter driver on a fixed ``dt`` grid.

    Owns the KF state, a short GNSS history for branch selection, and path
    extension as the estimate moves past segment ends.
    """

    def __init__(self, track_map: TrackMap, params: KfParams = KfParams(), hint: TrackPosition | None = None):
        self.map = track_map
        self.params = params
        self.hint = hint
        self.state: KfState | None = None
        self.history: deque[GeoPoint] = deque(maxlen=params.reset_window)
        self.resets = 0

    def _extend_path(self, state: KfState) -> KfState:
        length = self.map.path_length(state.path)
        while state.s >= length:
            nxt = self.map.successors(state.path[-1])
            if not nxt:
                x = state.x.copy()
                x[0] = length
                return replace(state, x=x, flags=state.flags | {"end-of-track"})
            if len(nxt) == 1:
                state = replace(state, path=state.path + nxt)
            else:
                state = select_branch(state, list(self.history), self.map, self.params)
            length = self.map.path_length(state.path)
        if state.s < 0:
            x = state.x.copy()
            x[0] = 0.0
            state = replace(state, x=x)
        return state

    def step(self, meas: MeasurementSet) -> KfState | None:
        if self.state is None:
            if meas.gnss_pos is None:
                return None
            try:
                self.state = kf_init(meas, self.map, self.params, self.hint)
            except OffTrackError:
                return None
            self.history.append(meas.gnss_pos)
            return self.state
        state = self._extend_path(kf_predict(self.state, self.params))
        if meas.gnss_pos is not None:
            self.history.append(meas.gnss_pos)
            checked = check_reset(state, meas, self.map, self.params)
            if isinstance(checked, ResetSignal):
                self.resets += 1
                checked = replace(checked.state, t=state.t)
            state = checked
        if meas.channels:
            flags = state.flags
            state = kf_update(state, meas, self.map, self.params)
            state = replace(state, flags=state.flags | flags)
        self.state = self._extend_path(state)
        return self.state


def state_row(state: KfState) -> dict:
    """CSV row ``t,s,v,a,P00,P11,P22,path_head,flags``."""
    return {
        "t": round(state.t, 6),
        "s": state.s,
        "v": state.v,
        "a": state.a,
        "P00": float(state.P[0, 0]),
        "P11": float(state.P[1, 1]),
        "P22": float(state.P[2, 2]),
        "path_head": state.path[-1],
        "flags": "|".join(sorted(state.flags)),
    }
