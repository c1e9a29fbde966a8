import json
import math

import numpy as np
import pytest

from tramrcas.braking import (
    MU_LIMIT,
    BrakingParams,
    NoFitError,
    NumericalFailureError,
    adhesion_mu,
    braking_distance_naive,
    braking_table,
    identify_params,
    motor_torque_target,
    running_resistance,
    simulate_braking,
    simulate_braking_batch,
)

P = BrakingParams()


def mu_oracle(vs, a=0.54, b=1.2, c=0.2, d=0.2):
    return c * math.exp(-a * vs) - d * math.exp(-b * vs)


# parameters


def test_identified_defaults():
    assert (P.M, P.m_w, P.r, P.K_t, P.P_max) == (21200, 195, 0.35, 2352, 360000)
    assert (P.a_a, P.b_a, P.c_a, P.d_a) == (0.54, 1.2, 0.2, 0.2)


def test_params_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        BrakingParams(M=0.0)
    with pytest.raises(ValueError):
        BrakingParams.from_dict({"mass": 1.0})
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"M": 25000.0}))
    assert BrakingParams.load(path).M == 25000.0
    assert BrakingParams.from_dict(P.to_dict()) == P


# adhesion_mu


def test_mu_zero_slip_cancels():
    assert adhesion_mu(0.0, P) == pytest.approx(0.0)


@pytest.mark.parametrize("vs", [-0.5, 0.5, -2.0, 1.21])
def test_mu_matches_oracle(vs):
    assert adhesion_mu(vs, P) == pytest.approx(mu_oracle(vs))


def test_mu_example_values():
    assert adhesion_mu(-0.5, P) == pytest.approx(-0.1024, abs=1e-4)
    assert adhesion_mu(0.5, P) == pytest.approx(0.0430, abs=1e-4)


# running_resistance


def test_running_resistance():
    assert running_resistance(0.0, P) == pytest.approx(311.64)
    assert running_resistance(13.89, P) == pytest.approx(311.64 + 125.83 * 13.89)
    assert running_resistance(13.89, P) == pytest.approx(2059.4, abs=0.1)


# motor_torque_target


def test_torque_service_brake():
    assert motor_torque_target(-7, 1.0, P) == pytest.approx(-16464.0)


def test_torque_zero_notch():
    assert motor_torque_target(0, 30.0, P) == 0.0


def test_torque_power_limit():
    # |T * omega| = 9500 * 40 > 360 kW -> P_max / omega with the notch sign
    assert motor_torque_target(-7, 40.0, P, T_mot=-9500.0) == pytest.approx(-9000.0)
    assert motor_torque_target(7, 40.0, P, T_mot=9500.0) == pytest.approx(9000.0)


def test_torque_limit_inactive_at_standstill():
    assert motor_torque_target(-7, 0.0, P, T_mot=-1e9) == pytest.approx(-16464.0)


def test_torque_notch_range():
    with pytest.raises(ValueError):
        motor_torque_target(-8, 1.0, P)


# simulate_braking


def test_braking_from_8_mps():
    d = simulate_braking(8.0).total_distance
    assert d == pytest.approx(12.8, rel=0.15)


def test_braking_from_13_83_mps():
    d = simulate_braking(13.83).total_distance
    assert d == pytest.approx(46.9, rel=0.15)


def test_braking_vanishing_speed():
    assert simulate_braking(0.0).total_distance == 0.0
    assert simulate_braking(1e-3).total_distance < 1e-3


def test_trajectory_invariants():
    tr = simulate_braking(12.0)
    assert np.all(np.diff(tr.t) > 0)
    assert np.all(np.diff(tr.v) <= 1e-12)
    assert tr.v[-1] == 0.0
    assert tr.total_distance == tr.s[-1]
    assert np.allclose(np.diff(tr.t[:-1]), 0.1)


def test_deceleration_adhesion_limited():
    tr = simulate_braking(15.0, sample_dt=1e-3)
    decel = -np.diff(tr.v[:-1]) / np.diff(tr.t[:-1])
    bound = MU_LIMIT * P.g + running_resistance(15.0, P) / P.M
    assert decel.max() <= 1.05 * bound


def test_distance_monotone_in_speed():
    d = [simulate_braking(v).total_distance for v in range(2, 20, 2)]
    assert np.all(np.diff(d) > 0)


def test_slope_ordering():
    down = simulate_braking(10.0, theta=-0.02).total_distance
    flat = simulate_braking(10.0).total_distance
    up = simulate_braking(10.0, theta=0.02).total_distance
    assert down > flat > up


def test_slope_profile_callable():
    const = simulate_braking(10.0, theta=0.02).total_distance
    assert simulate_braking(10.0, theta=lambda s: 0.02).total_distance == pytest.approx(const)


@pytest.mark.parametrize("v0", [2.0, 10.0, 18.0])
def test_step_size_convergence(v0):
    d1 = simulate_braking(v0, dt_int=1e-3).total_distance
    d2 = simulate_braking(v0, dt_int=5e-4).total_distance
    assert abs(d1 - d2) / d1 < 0.005


def test_unstable_step_raises():
    with pytest.raises(NumericalFailureError):
        simulate_braking(10.0, dt_int=0.5)
    with pytest.raises(NumericalFailureError):
        simulate_braking_batch([10.0], P, 0.0, 0.5)


def test_model_above_naive_at_60_kmh():
    v = 60 / 3.6
    assert simulate_braking(v).total_distance > braking_distance_naive(v)


# batch and table


def test_batch_matches_scalar():
    speeds = [0.0, 1.0, 5.5, 8.0, 13.83, 20.0]
    batch = simulate_braking_batch(speeds, P)
    scalar = [simulate_braking(v).total_distance for v in speeds]
    assert batch == pytest.approx(scalar, rel=1e-9, abs=1e-9)


def test_batch_matches_scalar_on_slopes():
    for theta in (-0.02, 0.03):
        batch = simulate_braking_batch([6.0, 12.0], P, theta)
        scalar = [simulate_braking(v, theta=theta).total_distance for v in (6.0, 12.0)]
        assert batch == pytest.approx(scalar, rel=1e-9)


def test_table_error_below_half_percent():
    table = braking_table(P)
    speeds = np.arange(0.5, 22.0, 0.37)
    # the batch integrator is checked against the scalar one above
    direct = simulate_braking_batch(speeds, P)
    errors = np.abs(np.array([table(v) for v in speeds]) - direct) / direct
    assert errors.max() < 0.005
    assert table(0.0) == 0.0
    assert table(25.0) == pytest.approx(simulate_braking(25.0).total_distance)


# braking_distance_naive


def test_naive_closed_form():
    assert braking_distance_naive(50 / 3.6, 2.2) == pytest.approx(0.5 * (50 / 3.6) ** 2 / 2.2)
    assert braking_distance_naive(13.889, 2.2) == pytest.approx(43.84, abs=0.01)
    assert braking_distance_naive(0.0) == 0.0
    assert braking_distance_naive(10.0, 2.0) == pytest.approx(25.0)
    assert braking_distance_naive(10.0, -2.0) == pytest.approx(25.0)
    with pytest.raises(ValueError):
        braking_distance_naive(10.0, 0.0)


# identify_params


def synthetic_runs(params, speeds=(8.0, 12.0)):
    runs = []
    for v0 in speeds:
        tr = simulate_braking(v0, params)
        runs.append((tr.t, tr.v))
    return runs


@pytest.fixture(scope="module")
def truth_runs():
    return synthetic_runs(P)


def test_identify_recovers_kt(truth_runs):
    res = identify_params(truth_runs, P.to_dict() | {"K_t": 1800.0}, {"K_t": (1000.0, 4000.0)})
    assert res.params.K_t == pytest.approx(2352.0, rel=0.02)
    assert res.mse < 1e-3


def test_identify_recovers_mass(truth_runs):
    res = identify_params(truth_runs, P, {"M": (15000.0, 30000.0)})
    assert res.params.M == pytest.approx(21200.0, rel=0.05)


def test_identify_empty_space_is_noop(truth_runs):
    fixed = BrakingParams(K_t=2000.0)
    res = identify_params(truth_runs, fixed, {}, max_mse=10.0)
    assert res.params == fixed
    assert res.mse > 0
    assert len(res.per_run_mse) == len(truth_runs)


def test_identify_no_fit(truth_runs):
    with pytest.raises(NoFitError):
        identify_params(truth_runs, P, {"K_t": (300.0, 400.0)}, max_mse=0.01)


def test_identify_rejects_bad_inputs(truth_runs):
    with pytest.raises(ValueError):
        identify_params([], P, {"K_t": (1.0, 2.0)})
    with pytest.raises(ValueError):
        identify_params(truth_runs, P, {"g": (9.0, 10.0)})
