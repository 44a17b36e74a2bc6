"""Truth-plant dynamics and the fixed-step integrator."""

import dataclasses
import math

import numpy as np
import pytest

from auvnode.plant import (
    IX_PSI,
    IX_Q,
    IX_THETA,
    IX_U,
    MU_NAMES,
    N_OUTPUTS,
    N_STATES,
    OUTPUT_STATE_INDEX,
    SingularityError,
    TruthParams,
    integrate_truth,
    lift_output,
    make_state,
    output_map,
    truth_rhs,
    wrap_angle,
    wrap_angles,
)


def test_zero_state_zero_input_is_stationary(truth):
    # neutrally buoyant default: every derivative vanishes at rest
    f = truth_rhs(make_state(), np.zeros(3), truth)
    assert np.all(f == 0.0)


def test_rhs_direct_substitution(truth, rng):
    """Each row equals its formula written out longhand."""
    p = truth
    for _ in range(50):
        x = rng.normal(0.0, 0.5, size=N_STATES)
        u = rng.uniform(-1.0, 1.0, size=3)
        theta, psi = x[3], x[4]
        uu, w, q, r = x[5], x[6], x[7], x[8]
        duc, dqc, drc = x[9], x[10], x[11]
        f = truth_rhs(x, u, p)
        assert f[0] == pytest.approx((uu * math.cos(theta) + w * math.sin(theta)) * math.cos(psi), rel=1e-14)
        assert f[1] == pytest.approx((uu * math.cos(theta) + w * math.sin(theta)) * math.sin(psi), rel=1e-14)
        assert f[2] == pytest.approx(-uu * math.sin(theta) + w * math.cos(theta), rel=1e-14)
        assert f[3] == q
        assert f[4] == pytest.approx(r / math.cos(theta), rel=1e-14)
        assert f[5] == pytest.approx(p.X_uu * uu * uu + p.k * duc, rel=1e-14)
        assert f[6] == pytest.approx(p.Z_wabsw * w * abs(w) + p.WB * math.cos(theta), rel=1e-14)
        assert f[7] == pytest.approx(
            p.M_uq * uu * q + p.M_q * q - p.B_zB * math.sin(theta) + p.b * uu * uu * dqc, rel=1e-14
        )
        assert f[8] == pytest.approx(p.N_ur * uu * r + p.c * uu * uu * drc, rel=1e-14)
        assert f[9] == pytest.approx(p.K_du * (u[0] - duc), rel=1e-14)
        assert f[10] == pytest.approx(p.K_dq * (u[1] - dqc), rel=1e-14)
        assert f[11] == pytest.approx(p.K_dr * (u[2] - drc), rel=1e-14)


def test_rhs_raises_at_pitch_pole(truth):
    with pytest.raises(SingularityError):
        truth_rhs(make_state(theta=0.5 * math.pi), np.zeros(3), truth)


def test_integrator_aborts_on_pitch_excursion(truth):
    # start near the pole with a strong pitch-up rate
    x0 = make_state(theta=0.44 * math.pi, q=2.0, u=1.0)
    u = np.zeros((200, 3))
    with pytest.raises(SingularityError):
        integrate_truth(x0, u, truth, 0.01, 200)


def test_wrap_angle_range_and_branch():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3.0 * math.pi) == pytest.approx(math.pi)
    assert wrap_angle(0.25) == pytest.approx(0.25)
    a = np.linspace(-20.0, 20.0, 4001)
    w = wrap_angles(a)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    # scalar and vector versions agree
    for v in (-7.0, -math.pi, 0.0, 2.9, 11.0):
        assert wrap_angles(np.array([v]))[0] == pytest.approx(wrap_angle(v), abs=1e-12)


def test_output_map_and_lift_roundtrip(rng):
    y = rng.normal(size=N_OUTPUTS)
    assert np.array_equal(output_map(lift_output(y)), y)
    xs = rng.normal(size=(7, N_STATES))
    ys = output_map(xs)
    assert ys.shape == (7, N_OUTPUTS)
    assert np.array_equal(ys, xs[:, OUTPUT_STATE_INDEX])


def test_zoh_matches_constant_callable(truth):
    x0 = make_state(theta=0.05, u=1.0)
    const = np.array([0.6, 0.1, -0.2])
    zoh = np.tile(const, (40, 1))
    a = integrate_truth(x0, zoh, truth, 0.01, 40)
    b = integrate_truth(x0, lambda t: const, truth, 0.01, 40)
    assert np.array_equal(a, b)


def test_integrator_determinism(truth, rng):
    x0 = make_state(theta=0.1, u=1.2, q=0.05)
    u = rng.uniform(0.0, 1.0, size=(60, 3))
    u[:, 1:] -= 0.5
    a = integrate_truth(x0, u, truth, 0.01, 60)
    b = integrate_truth(x0, u, truth, 0.01, 60)
    assert np.array_equal(a, b)


def test_integrator_input_validation(truth):
    x0 = make_state(u=1.0)
    u = np.zeros((10, 3))
    with pytest.raises(ValueError):
        integrate_truth(x0, u, truth, 0.0, 10)
    with pytest.raises(ValueError):
        integrate_truth(x0, u, truth, 0.01, 0)
    with pytest.raises(ValueError):
        integrate_truth(x0, u, truth, 0.01, 11)  # too few input samples
    with pytest.raises(ValueError):
        integrate_truth(np.zeros(5), u, truth, 0.01, 5)


def test_psi_stays_wrapped(truth):
    # persistent rudder drives psi through a full circle
    x0 = make_state(u=2.0)
    u = np.tile(np.array([0.8, 0.0, 0.9]), (3000, 1))
    xs = integrate_truth(x0, u, truth, 0.01, 3000)
    assert np.all(xs[:, IX_PSI] > -math.pi)
    assert np.all(xs[:, IX_PSI] <= math.pi)
    # and the heading actually moved, so the wrap was exercised
    assert np.ptp(xs[:, IX_PSI]) > 3.0


def test_truth_params_surface():
    vals = {n: v for n, v in zip(
        ("X_uu", "k", "M_uq", "M_q", "B_zB", "b", "N_ur", "c",
         "Z_wabsw", "WB", "K_du", "K_dq", "K_dr"),
        (-0.3, 2.0, -1.0, -1.5, 5.0, 0.2, -1.0, 0.4, -2.0, 0.0, 5.0, 5.0, 5.0),
    )}
    p = TruthParams.from_mapping(vals)
    assert p.validate_physical() is p
    assert list(p.mu) == [vals[n] for n in MU_NAMES]
    assert list(p.k_delay) == [5.0, 5.0, 5.0]
    assert p.to_mapping() == vals

    with pytest.raises(ValueError, match="X_uu"):
        dataclasses.replace(p, X_uu=0.1).validate_physical()
    with pytest.raises(ValueError, match="K_dq"):
        dataclasses.replace(p, K_dq=0.0).validate_physical()
    with pytest.raises(ValueError, match="missing"):
        TruthParams.from_mapping({k: v for k, v in vals.items() if k != "b"})
    with pytest.raises(ValueError, match="unknown"):
        TruthParams.from_mapping(dict(vals, bogus=1.0))
    with pytest.raises(ValueError, match="finite"):
        dataclasses.replace(p, k=math.inf)


def test_make_state_rejects_unknown_component():
    with pytest.raises(ValueError):
        make_state(roll=0.1)
