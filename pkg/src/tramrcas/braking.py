"""Longitudinal tram dynamics with wheel-rail adhesion and motor-torque lag.

State is ``(v_t, omega_wh, T_mot, s)``.  The wheel equation is stiff (the
inverse wheel inertia ``2 / (m_w r^2)`` is about 0.084 per N*m against
torques of order 1e4 N*m), so the fixed-step RK4 integrator needs
``dt_int`` around 1 ms; explicit RK4 loses stability above roughly 2-5 ms
once the creep slope of the adhesion curve steepens.
"""
from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

log = logging.getLogger(__name__)

SERVICE_BRAKE_NOTCH = -7
MU_LIMIT = 0.5
TORQUE_RATE = 3.0
NAIVE_DECELERATION = 2.2
# real-axis stability limit of classical RK4: |lambda * dt| <= 2.785
RK4_STABILITY_LIMIT = 2.785
# holding brake: takes over from a stalled locked-wheel creep
HOLD_SPEED = 0.5
HOLD_DECEL = 0.02


class BrakingSimulationError(RuntimeError):
    """Base class for integration failures."""


class BrakingDivergedError(BrakingSimulationError):
    """The vehicle did not come to rest within the time limit."""


class NumericalFailureError(BrakingSimulationError):
    """The integrated state became non-finite."""


class NoFitError(RuntimeError):
    """Parameter identification could not reach the required residual."""


@dataclass(frozen=True)
class BrakingParams:
    """Tram constants; defaults are the identified VarioLF values."""

    M: float = 21200.0
    m_w: float = 195.0
    r: float = 0.35
    K_t: float = 2352.0
    P_max: float = 4 * 90e3
    a_a: float = 0.54
    b_a: float = 1.2
    c_a: float = 0.2
    d_a: float = 0.2
    g: float = 9.81

    def __post_init__(self):
        for name in ("M", "m_w", "r", "K_t", "P_max", "g"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive, got {value}")
        for name in ("a_a", "b_a", "c_a", "d_a"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be non-negative, got {value}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "BrakingParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown braking parameter(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    @classmethod
    def load(cls, path: str | Path) -> "BrakingParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DynState:
    v_t: float
    omega_wh: float
    T_mot: float = 0.0
    s: float = 0.0
    t: float = 0.0


@dataclass(frozen=True, eq=False)
class BrakingTrajectory:
    t: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def total_distance(self) -> float:
        return float(self.s[-1])

    @property
    def total_time(self) -> float:
        return float(self.t[-1])

    @property
    def samples(self) -> list[tuple[float, float, float]]:
        return list(zip(self.t.tolist(), self.s.tolist(), self.v.tolist()))

    def position_at(self, t: float) -> float:
        """Travelled distance at time ``t``; constant after standstill."""
        if t >= self.t[-1]:
            return float(self.s[-1])
        return float(np.interp(t, self.t, self.s))


def adhesion_mu(v_s: float, params: BrakingParams) -> float:
    return params.c_a * math.exp(-params.a_a * v_s) - params.d_a * math.exp(-params.b_a * v_s)


def running_resistance(v_t: float, params: BrakingParams) -> float:
    return 0.0147 * params.M + 125.83 * v_t


def motor_torque_target(
    p: int, omega_wh: float, params: BrakingParams, T_mot: float | None = None
) -> float:
    """Commanded motor torque for notch ``p``.

    The power-limit case compares ``|T_mot * omega_wh|`` against ``P_max``
    using the current torque state (the unconstrained target when ``T_mot``
    is not given) and keeps the sign of the notch, so it also caps
    electric braking.
    """
    if not -7 <= p <= 7:
        raise ValueError(f"notch {p} outside [-7, 7]")
    target = params.K_t * p
    torque = target if T_mot is None else T_mot
    if p != 0 and omega_wh > 0 and abs(torque * omega_wh) >= params.P_max:
        return math.copysign(params.P_max / omega_wh, p)
    return target


def wheel_stiffness(v_s: float, params: BrakingParams) -> float:
    """Magnitude of the wheel-speed Jacobian entry ``d(omega_dot)/d(omega)``.

    Zero where the adhesion clamp is active.
    """
    mu = adhesion_mu(v_s, params)
    if abs(mu) >= MU_LIMIT:
        return 0.0
    dmu = -params.a_a * params.c_a * math.exp(-params.a_a * v_s) + params.b_a * params.d_a * math.exp(
        -params.b_a * v_s
    )
    return 2.0 / params.m_w * params.M * params.g * abs(dmu)


def derivatives(
    v: float, w: float, T: float, notch: int, theta: float, params: BrakingParams
) -> tuple[float, float, float, float]:
    """Right-hand side ``(dv, domega, dT, ds)`` of the tram dynamics."""
    w = max(w, 0.0)
    mu = adhesion_mu(params.r * w - v, params)
    if mu > MU_LIMIT:
        mu = MU_LIMIT
    elif mu < -MU_LIMIT:
        mu = -MU_LIMIT
    Mg = params.M * params.g
    f_res = running_resistance(v, params) if v > 0 else 0.0
    dv = (mu * Mg - f_res - Mg * math.sin(theta)) / params.M
    dw = 2.0 / (params.m_w * params.r**2) * (T - params.r * mu * Mg)
    # locked wheel: the floor at omega = 0 is a constraint, not a state reset
    if w <= 0.0 and dw < 0.0:
        dw = 0.0
    dT = TORQUE_RATE * (motor_torque_target(notch, w, params, T) - T)
    return dv, dw, dT, v


def rk4_step(
    state: DynState,
    notch: int,
    dt: float,
    params: BrakingParams,
    theta: float = 0.0,
) -> DynState:
    v, w, T, s = state.v_t, state.omega_wh, state.T_mot, state.s
    try:
        if w > 0 and wheel_stiffness(params.r * w - v, params) * dt > RK4_STABILITY_LIMIT:
            raise NumericalFailureError(
                f"dt_int={dt}s exceeds the RK4 stability limit of the wheel dynamics at t={state.t:.3f}s"
            )
        k1 = derivatives(v, w, T, notch, theta, params)
        h = 0.5 * dt
        k2 = derivatives(v + h * k1[0], w + h * k1[1], T + h * k1[2], notch, theta, params)
        k3 = derivatives(v + h * k2[0], w + h * k2[1], T + h * k2[2], notch, theta, params)
        k4 = derivatives(v + dt * k3[0], w + dt * k3[1], T + dt * k3[2], notch, theta, params)
    except OverflowError as exc:
        raise NumericalFailureError(f"overflow at t={state.t:.3f}s") from exc
    c = dt / 6.0
    v += c * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    w += c * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    T += c * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    s += c * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
    if not all(map(math.isfinite, (v, w, T, s))):
        raise NumericalFailureError(f"non-finite state at t={state.t + dt:.3f}s")
    return DynState(v, max(w, 0.0), T, s, state.t + dt)


def holding_brake_engaged(state: DynState, notch: int, theta: float, params: BrakingParams) -> bool:
    """True once a braking tram creeps on locked wheels without decelerating any more.

    The creep law gives no adhesion at zero slip, so on a downhill grade a
    locked wheel settles at a small sliding speed instead of stopping.
    """
    if notch >= 0 or state.omega_wh > 0.0 or state.v_t > HOLD_SPEED:
        return False
    dv = derivatives(state.v_t, 0.0, state.T_mot, notch, theta, params)[0]
    return dv > -HOLD_DECEL


def _theta_lookup(theta) -> Callable[[float], float]:
    if callable(theta):
        return theta
    value = float(theta)
    return lambda s: value


def simulate_braking(
    v0: float,
    params: BrakingParams = BrakingParams(),
    theta: float | Callable[[float], float] = 0.0,
    dt_int: float = 1e-3,
    *,
    notch: int = SERVICE_BRAKE_NOTCH,
    T0: float = 0.0,
    sample_dt: float = 0.1,
    max_time: float = 120.0,
    until: float | None = None,
) -> BrakingTrajectory:
    """Integrate a full-service brake application from speed ``v0`` to rest.

    ``theta`` is a constant slope or a callable of travelled distance.
    Samples are taken every ``sample_dt`` plus one final sample at the
    interpolated instant the speed reaches zero.  With ``until`` set the
    integration also stops at that time, possibly before standstill.
    """
    if v0 < 0 or not math.isfinite(v0):
        raise ValueError(f"initial speed must be >= 0, got {v0}")
    if dt_int <= 0:
        raise ValueError("dt_int must be positive")
    if v0 == 0:
        return BrakingTrajectory(np.zeros(1), np.zeros(1), np.zeros(1))
    slope = _theta_lookup(theta)
    state = DynState(v0, v0 / params.r, T0, 0.0, 0.0)
    ts, ss, vs = [0.0], [0.0], [v0]
    every = max(1, round(sample_dt / dt_int))
    n = clamped = 0
    while True:
        new = rk4_step(state, notch, dt_int, params, slope(state.s))
        n += 1
        if abs(adhesion_mu(params.r * new.omega_wh - new.v_t, params)) > MU_LIMIT:
            clamped += 1
        if new.v_t <= 0.0:
            frac = state.v_t / (state.v_t - new.v_t)
            t_stop = state.t + frac * dt_int
            s_stop = state.s + frac * (new.s - state.s)
            if t_stop <= ts[-1]:
                ts.pop(), ss.pop(), vs.pop()
            ts.append(t_stop), ss.append(s_stop), vs.append(0.0)
            break
        state = new
        if holding_brake_engaged(state, notch, slope(state.s), params):
            if state.t <= ts[-1]:
                ts.pop(), ss.pop(), vs.pop()
            ts.append(state.t), ss.append(state.s), vs.append(0.0)
            break
        if n % every == 0:
            ts.append(state.t), ss.append(state.s), vs.append(state.v_t)
        if until is not None and state.t >= until:
            if ts[-1] < state.t:
                ts.append(state.t), ss.append(state.s), vs.append(state.v_t)
            break
        if state.t > max_time:
            raise BrakingDivergedError(f"v={state.v_t:.3f} m/s still positive after {max_time}s")
    if clamped:
        log.debug("adhesion clamp active on %d of %d steps from v0=%.3f", clamped, n, v0)
    return BrakingTrajectory(np.array(ts), np.array(ss), np.array(vs))


def braking_distance_naive(v0: float, a_br: float = NAIVE_DECELERATION) -> float:
    if a_br == 0:
        raise ValueError("deceleration must be non-zero")
    if v0 < 0:
        raise ValueError("speed must be non-negative")
    return 0.5 * v0 * v0 / abs(a_br)


def simulate_braking_batch(
    v0: Sequence[float],
    params: BrakingParams = BrakingParams(),
    theta: float = 0.0,
    dt_int: float = 1e-3,
    *,
    notch: int = SERVICE_BRAKE_NOTCH,
    max_time: float = 120.0,
) -> np.ndarray:
    """Braking distances for many initial speeds at once (constant slope).

    Vectorised twin of :func:`simulate_braking`; the two are cross-checked
    in the test suite.
    """
    v = np.asarray(v0, dtype=float).copy()
    if np.any(v < 0):
        raise ValueError("initial speeds must be >= 0")
    w = v / params.r
    T = np.zeros_like(v)
    s = np.zeros_like(v)
    dist = np.zeros_like(v)
    active = v > 0
    Mg = params.M * params.g
    k_wheel = 2.0 / (params.m_w * params.r**2)
    sin_theta = math.sin(theta)
    target = params.K_t * notch

    def rhs(v, w, T):
        w = np.maximum(w, 0.0)
        vs = params.r * w - v
        mu = params.c_a * np.exp(-params.a_a * vs) - params.d_a * np.exp(-params.b_a * vs)
        mu = np.clip(mu, -MU_LIMIT, MU_LIMIT)
        f_res = np.where(v > 0, 0.0147 * params.M + 125.83 * v, 0.0)
        dv = (mu * Mg - f_res - Mg * sin_theta) / params.M
        dw = k_wheel * (T - params.r * mu * Mg)
        dw = np.where((w <= 0) & (dw < 0), 0.0, dw)
        limited = (w > 0) & (np.abs(T * w) >= params.P_max) & (notch != 0)
        tgt = np.where(limited, math.copysign(1.0, notch) * params.P_max / np.where(w > 0, w, 1.0), target)
        return dv, dw, TORQUE_RATE * (tgt - T), v

    t = 0.0
    with np.errstate(over="raise", invalid="raise"):
        try:
            while active.any():
                if t > max_time:
                    raise BrakingDivergedError(f"{int(active.sum())} runs still moving after {max_time}s")
                vs_now = params.r * w - v
                mu_now = params.c_a * np.exp(-params.a_a * vs_now) - params.d_a * np.exp(-params.b_a * vs_now)
                dmu = -params.a_a * params.c_a * np.exp(-params.a_a * vs_now) + params.b_a * params.d_a * np.exp(
                    -params.b_a * vs_now
                )
                stiff = np.where(active & (w > 0) & (np.abs(mu_now) < MU_LIMIT), np.abs(dmu), 0.0)
                if stiff.max() * 2.0 / params.m_w * Mg * dt_int > RK4_STABILITY_LIMIT:
                    raise NumericalFailureError(f"dt_int={dt_int}s exceeds the RK4 stability limit at t={t:.3f}s")
                k1 = rhs(v, w, T)
                h = 0.5 * dt_int
                k2 = rhs(v + h * k1[0], w + h * k1[1], T + h * k1[2])
                k3 = rhs(v + h * k2[0], w + h * k2[1], T + h * k2[2])
                k4 = rhs(v + dt_int * k3[0], w + dt_int * k3[1], T + dt_int * k3[2])
                c = dt_int / 6.0
                nv = v + c * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
                nw = np.maximum(w + c * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]), 0.0)
                nT = T + c * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
                ns = s + c * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
                stopped = active & (nv <= 0)
                if stopped.any():
                    frac = v[stopped] / (v[stopped] - nv[stopped])
                    dist[stopped] = s[stopped] + frac * (ns[stopped] - s[stopped])
                    active &= ~stopped
                creeping = active & (nw <= 0) & (nv <= HOLD_SPEED) & (notch < 0)
                if creeping.any():
                    held = creeping & (rhs(nv, nw, nT)[0] > -HOLD_DECEL)
                    dist[held] = ns[held]
                    active &= ~held
                v = np.where(active, nv, 0.0)
                w = np.where(active, nw, 0.0)
                T = np.where(active, nT, T)
                s = np.where(active, ns, s)
                t += dt_int
        except FloatingPointError as exc:
            raise NumericalFailureError(f"non-finite state at t={t:.3f}s") from exc
    if not np.all(np.isfinite(dist)):
        raise NumericalFailureError("non-finite braking distance")
    return dist


class BrakingTable:
    """Speed to braking-distance lookup on a 1 km/h grid.

    Linear interpolation between grid speeds; speeds above the grid fall back
    to a direct simulation.
    """

    def __init__(
        self,
        params: BrakingParams = BrakingParams(),
        theta: float = 0.0,
        dt_int: float = 1e-3,
        v_max_kmh: int = 80,
    ):
        self.params = params
        self.theta = theta
        self.dt_int = dt_int
        self.speeds = np.arange(v_max_kmh + 1, dtype=float) / 3.6
        self.distances = simulate_braking_batch(self.speeds, params, theta, dt_int)

    def __call__(self, v: float) -> float:
        if v <= 0:
            return 0.0
        if v > self.speeds[-1]:
            return simulate_braking(v, self.params, self.theta, self.dt_int).total_distance
        return float(np.interp(v, self.speeds, self.distances))


@functools.lru_cache(maxsize=32)
def braking_table(params: BrakingParams, theta: float = 0.0, dt_int: float = 1e-3) -> BrakingTable:
    return BrakingTable(params, theta, dt_int)


@dataclass(frozen=True)
class IdentificationResult:
    params: BrakingParams
    mse: float
    per_run_mse: tuple[float, ...]


Run = tuple[Sequence[float], Sequence[float]]

FREE_PARAMETERS = ("M", "K_t", "a_a", "b_a", "c_a", "d_a", "m_w", "r", "P_max")


def _run_errors(params: BrakingParams, runs: Sequence[Run], dt_int: float) -> list[float]:
    errors = []
    for t, v in runs:
        t = np.asarray(t, dtype=float)
        v = np.asarray(v, dtype=float)
        rel = t - t[0]
        traj = simulate_braking(float(v[0]), params, 0.0, dt_int, until=float(rel[-1]))
        v_sim = np.interp(rel, traj.t, traj.v, right=0.0)
        errors.append(float(np.mean((v_sim - v) ** 2)))
    return errors


def identify_params(
    runs: Sequence[Run],
    fixed: Mapping[str, float] | BrakingParams | None = None,
    search_space: Mapping[str, tuple[float, float]] | None = None,
    *,
    dt_int: float = 1e-3,
    cycles: int = 3,
    max_mse: float = 0.05,
    xatol: float = 1e-4,
) -> IdentificationResult:
    """Fit free model parameters to measured full-service braking runs.

    Each run is ``(t, v)`` starting at the brake application.  Parameters
    named in ``search_space`` are free within their bounds; the rest come
    from ``fixed`` (falling back to :class:`BrakingParams` defaults).  The
    search is cyclic coordinate descent with a bounded scalar minimiser per
    parameter, minimising the mean squared speed error over all runs.
    """
    if not runs:
        raise ValueError("at least one braking run is required")
    for t, v in runs:
        if len(t) != len(v) or len(t) < 2:
            raise ValueError("each run needs matching t and v series of length >= 2")
    base = fixed if isinstance(fixed, BrakingParams) else BrakingParams(**dict(fixed or {}))
    search_space = dict(search_space or {})
    for name, (lo, hi) in search_space.items():
        if name not in FREE_PARAMETERS:
            raise ValueError(f"parameter {name!r} cannot be identified")
        if not lo < hi:
            raise ValueError(f"empty search interval for {name}: [{lo}, {hi}]")

    current = base
    for name, (lo, hi) in search_space.items():
        value = getattr(current, name)
        if not lo <= value <= hi:
            current = replace(current, **{name: 0.5 * (lo + hi)})

    def cost(params: BrakingParams) -> float:
        try:
            return float(np.mean(_run_errors(params, runs, dt_int)))
        except BrakingSimulationError:
            return math.inf

    best = cost(current)
    for cycle in range(cycles if search_space else 0):
        previous = best
        for name, (lo, hi) in search_space.items():
            res = minimize_scalar(
                lambda x: cost(replace(current, **{name: x})),
                bounds=(lo, hi),
                method="bounded",
                options={"xatol": xatol * max(abs(lo), abs(hi))},
            )
            if res.fun <= best:
                current, best = replace(current, **{name: float(res.x)}), float(res.fun)
        log.debug("identification cycle %d: mse=%.6g", cycle, best)
        if previous - best < 1e-9:
            break

    per_run = tuple(_run_errors(current, runs, dt_int))
    if not best <= max_mse:
        raise NoFitError(f"best mean squared error {best:.4g} exceeds {max_mse}")
    return IdentificationResult(current, best, per_run)
