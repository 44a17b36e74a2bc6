"""Output-box hinge constraints and their penalty subgradient."""

import itertools

import numpy as np
import pytest

from auvnode.constraints import (
    ConstraintSpec,
    constraint_penalty,
    constraint_violation,
    default_constraint_spec,
    penalty_grad,
)
from auvnode.plant import IY_DQC, IY_DRC, IY_DUC, IY_THETA, N_OUTPUTS


def test_default_box():
    spec = default_constraint_spec()
    assert spec.lower[IY_THETA] == -0.5 * np.pi
    assert spec.upper[IY_THETA] == 0.5 * np.pi
    assert spec.lower[IY_DUC] == 0.0 and spec.upper[IY_DUC] == 1.0
    for i in (IY_DQC, IY_DRC):
        assert spec.lower[i] == -1.0 and spec.upper[i] == 1.0
    free = [i for i in range(N_OUTPUTS) if i not in (IY_THETA, IY_DUC, IY_DQC, IY_DRC)]
    assert np.all(np.isinf(spec.lower[free])) and np.all(np.isinf(spec.upper[free]))


def test_violation_zero_inside_and_on_boundary():
    spec = default_constraint_spec()
    z = np.zeros(N_OUTPUTS)
    z[IY_DUC] = 0.5
    assert np.all(constraint_violation(z, spec) == 0.0)
    assert constraint_penalty(z, spec) == 0.0
    # hinge vanishes exactly at the box faces
    z[IY_DUC] = 1.0
    z[IY_THETA] = -0.5 * np.pi
    assert np.all(constraint_violation(z, spec) == 0.0)


def test_violation_linear_outside():
    spec = default_constraint_spec()
    z = np.zeros(N_OUTPUTS)
    z[IY_DUC] = 1.25
    c = constraint_violation(z, spec)
    assert c[IY_DUC] == pytest.approx(0.25)
    z[IY_DUC] = -0.5
    assert constraint_violation(z, spec)[IY_DUC] == pytest.approx(0.5)


def test_identities_on_signed_grid():
    """Violation and penalty match the two-sided hinge written out
    longhand, on every below/at/inside/at/above combination of the
    bounded channels."""
    spec = default_constraint_spec()
    bounded = [i for i in range(N_OUTPUTS) if np.isfinite(spec.lower[i])]
    offsets = (-0.3, 0.0, None, 0.0, 0.3)  # below lo, at lo, mid, at hi, above hi
    for combo in itertools.product(range(5), repeat=len(bounded)):
        z = np.zeros(N_OUTPUTS)
        z[2] = 1.0  # free channel, must never contribute
        for ch, sel in zip(bounded, combo):
            lo, hi = spec.lower[ch], spec.upper[ch]
            if sel == 0:
                z[ch] = lo - 0.3
            elif sel == 1:
                z[ch] = lo
            elif sel == 2:
                z[ch] = 0.5 * (lo + hi)
            elif sel == 3:
                z[ch] = hi
            else:
                z[ch] = hi + 0.3
        c = constraint_violation(z, spec)
        want = np.maximum(0.0, spec.lower - z) + np.maximum(0.0, z - spec.upper)
        assert np.array_equal(c, want)
        assert constraint_penalty(z, spec) == float(np.sqrt(np.sum(want**2)))


def test_penalty_grad_zero_inside():
    spec = default_constraint_spec()
    z = np.zeros(N_OUTPUTS)
    z[IY_DUC] = 0.5
    assert np.all(penalty_grad(z, spec) == 0.0)
    # the subgradient choice at a kink is zero too
    z[IY_DUC] = 1.0
    assert np.all(penalty_grad(z, spec) == 0.0)


def test_penalty_grad_matches_fd_outside():
    spec = default_constraint_spec()
    rng = np.random.default_rng(21)
    h = 1e-7
    for _ in range(20):
        z = rng.normal(scale=0.4, size=N_OUTPUTS)
        z[IY_THETA] = rng.choice([-1.0, 1.0]) * rng.uniform(1.8, 2.5)
        z[IY_DUC] = rng.uniform(1.2, 2.0)
        g = penalty_grad(z, spec)
        for i in range(N_OUTPUTS):
            z2 = z.copy()
            z2[i] += h
            up = constraint_penalty(z2, spec)
            z2[i] -= 2 * h
            dn = constraint_penalty(z2, spec)
            assert g[i] == pytest.approx((up - dn) / (2 * h), rel=1e-6, abs=1e-7)


def test_spec_validation():
    lo = np.zeros(N_OUTPUTS)
    hi = np.ones(N_OUTPUTS)
    ConstraintSpec(lo, hi)
    with pytest.raises(ValueError):
        ConstraintSpec(hi, lo)
    with pytest.raises(ValueError):
        ConstraintSpec(np.zeros(3), np.ones(3))
