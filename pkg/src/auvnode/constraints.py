"""Output-box constraints and their hinge penalty.

Each output channel i gets a two-sided hinge
    c_i(z) = max(0, lower_i - z_i) + max(0, z_i - upper_i),
zero inside the box, linear outside. The scalar training penalty is the
Euclidean norm ||c(z)||_2. Unbounded channels use +-inf and contribute
nothing. The default box: pitch within +-pi/2, lagged thrust in [0, 1],
lagged fin commands in [-1, 1], everything else free.
"""

from dataclasses import dataclass, field

import numpy as np

from .plant import IY_DQC, IY_DRC, IY_DUC, IY_THETA, N_OUTPUTS


@dataclass(frozen=True)
class ConstraintSpec:
    lower: np.ndarray  # (8,), -inf where unbounded
    upper: np.ndarray  # (8,), +inf where unbounded

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (N_OUTPUTS,) or hi.shape != (N_OUTPUTS,):
            raise ValueError(f"bounds must have shape ({N_OUTPUTS},)")
        if np.any(lo >= hi):
            raise ValueError("lower bounds must lie strictly below upper bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)


def default_constraint_spec() -> ConstraintSpec:
    lower = np.full(N_OUTPUTS, -np.inf)
    upper = np.full(N_OUTPUTS, np.inf)
    lower[IY_THETA] = -0.5 * np.pi
    upper[IY_THETA] = 0.5 * np.pi
    lower[IY_DUC] = 0.0
    upper[IY_DUC] = 1.0
    for i in (IY_DQC, IY_DRC):
        lower[i] = -1.0
        upper[i] = 1.0
    return ConstraintSpec(lower=lower, upper=upper)


def constraint_violation(z: np.ndarray, spec: ConstraintSpec) -> np.ndarray:
    """Per-channel hinge c(z) >= 0."""
    z = np.asarray(z, dtype=float)
    return np.maximum(0.0, spec.lower - z) + np.maximum(0.0, z - spec.upper)


def constraint_penalty(z: np.ndarray, spec: ConstraintSpec) -> float:
    """Scalar penalty ||c(z)||_2."""
    return float(np.linalg.norm(constraint_violation(z, spec)))


def penalty_grad(z: np.ndarray, spec: ConstraintSpec) -> np.ndarray:
    """Subgradient of ||c(z)||_2; zero at kinks and inside the box."""
    z = np.asarray(z, dtype=float)
    c = constraint_violation(z, spec)
    norm = float(np.linalg.norm(c))
    g = np.zeros(N_OUTPUTS)
    if norm == 0.0:
        return g
    # dc_i/dz_i is -1 below the box, +1 above, 0 inside (and at the kinks).
    side = np.where(z < spec.lower, -1.0, np.where(z > spec.upper, 1.0, 0.0))
    return (c / norm) * side
