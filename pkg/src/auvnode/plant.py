"""Ground-truth dynamics of a torpedo-style AUV.

Twelve-state model: inertial position (p_x, p_y, p_z), pitch/yaw attitude
(theta, psi), body-frame surge/heave velocity (u, w), pitch/yaw rate (q, r),
and three first-order actuator-lag states (delta_uc, delta_qc, delta_rc)
that track the commanded thrust/elevator/rudder inputs. Roll and sway are
neglected (slender, fin-stabilized hull), which leaves the classic
r / cos(theta) yaw kinematics and its singularity at theta = +-pi/2.

Conventions:
  * angles in rad; psi is wrapped to (-pi, pi]; theta must stay strictly
    inside (-pi/2, pi/2)
  * normalized inputs: thrust command delta_u in [0, 1], elevator and
    rudder commands delta_q, delta_r in [-1, 1]
  * sampled input sequences are held constant over each sampling interval
    (zero-order hold); a callable input is sampled at the RK4 stage times

The hydrodynamic coefficients shipped in the default configuration are
synthetic: sign-correct, magnitude-plausible values for a small survey
vehicle, chosen so the randomized excitation keeps the vehicle well inside
its admissible envelope. They are not measurements of any particular hull.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

# State layout. Positions integrate the body velocities through the
# attitude; the three trailing states are the lagged actuator commands.
IX_PX = 0
IX_PY = 1
IX_PZ = 2
IX_THETA = 3
IX_PSI = 4
IX_U = 5
IX_W = 6
IX_Q = 7
IX_R = 8
IX_DUC = 9
IX_DQC = 10
IX_DRC = 11
N_STATES = 12

STATE_NAMES = (
    "px", "py", "pz", "theta", "psi", "u", "w", "q", "r", "duc", "dqc", "drc",
)

# Measured-output layout: attitude, surge, rates, lagged commands. Heave w
# and the positions are not observed.
IY_THETA = 0
IY_PSI = 1
IY_U = 2
IY_Q = 3
IY_R = 4
IY_DUC = 5
IY_DQC = 6
IY_DRC = 7
N_OUTPUTS = 8

OUTPUT_NAMES = ("theta", "psi", "u", "q", "r", "duc", "dqc", "drc")
OUTPUT_STATE_INDEX = np.array(
    [IX_THETA, IX_PSI, IX_U, IX_Q, IX_R, IX_DUC, IX_DQC, IX_DRC]
)

INPUT_NAMES = ("du", "dq", "dr")
N_INPUTS = 3
INPUT_LOWER = np.array([0.0, -1.0, -1.0])
INPUT_UPPER = np.array([1.0, 1.0, 1.0])

# Guard for the r / cos(theta) division. Hitting it means the generator or
# a model rollout left the admissible envelope; the truth integrator treats
# that as a hard error rather than clamping, so bugs surface immediately.
THETA_COS_EPS = 1e-9


class SingularityError(RuntimeError):
    """Raised when |cos(theta)| falls at or below THETA_COS_EPS."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Vectorized wrap_angle."""
    w = np.fmod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi)
    w = np.where(w <= 0.0, w + 2.0 * np.pi, w)
    return w - np.pi


@dataclass(frozen=True)
class TruthParams:
    """Hydrodynamic and actuator coefficients of the truth plant.

    Surge:  u'  = X_uu u^2 + k delta_uc
    Pitch:  q'  = M_uq u q + M_q q - B_zB sin(theta) + b u^2 delta_qc
    Yaw:    r'  = N_ur u r + c u^2 delta_rc
    Heave:  w'  = Z_wabsw w|w| + WB cos(theta)
    Lags:   duc' = K_du (delta_u - duc), and likewise for dqc, drc.

    Construction only checks finiteness; `validate_physical` enforces the
    sign/stability conventions and is called wherever a parameter set is
    about to drive the pipeline (config load, dataset build).
    """

    X_uu: float   # surge quadratic drag, < 0          [1/m]
    k: float      # thrust gain, > 0                   [m/s^2]
    M_uq: float   # pitch damping via u q, <= 0        [1/m]
    M_q: float    # pitch linear damping, <= 0         [1/s]
    B_zB: float   # righting-moment scale, >= 0        [1/s^2]
    b: float      # elevator effectiveness             [1/m^2]
    N_ur: float   # yaw damping via u r, <= 0          [1/m]
    c: float      # rudder effectiveness               [1/m^2]
    Z_wabsw: float  # heave quadratic drag, < 0        [1/m]
    WB: float     # net buoyancy acceleration          [m/s^2]
    K_du: float   # thrust lag gain, > 0               [1/s]
    K_dq: float   # elevator lag gain, > 0             [1/s]
    K_dr: float   # rudder lag gain, > 0               [1/s]

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"truth_params.{f.name} must be finite, got {v!r}")

    def validate_physical(self) -> "TruthParams":
        """Enforce sign conventions; returns self so calls can chain."""
        def check(cond: bool, key: str, msg: str):
            if not cond:
                raise ValueError(f"truth_params.{key} {msg} (got {getattr(self, key)!r})")

        check(self.X_uu < 0.0, "X_uu", "must be negative (dissipative surge drag)")
        check(self.k > 0.0, "k", "must be positive")
        check(self.M_uq <= 0.0, "M_uq", "must be non-positive")
        check(self.M_q <= 0.0, "M_q", "must be non-positive")
        check(self.B_zB >= 0.0, "B_zB", "must be non-negative (restoring moment)")
        check(self.Z_wabsw < 0.0, "Z_wabsw", "must be negative (dissipative heave drag)")
        for key in ("K_du", "K_dq", "K_dr"):
            check(getattr(self, key) > 0.0, key, "must be positive (stable lag)")
        return self

    @property
    def mu(self) -> np.ndarray:
        """The eight identifiable coefficients, in canonical order."""
        return np.array(
            [self.X_uu, self.k, self.M_uq, self.M_q, self.B_zB, self.b, self.N_ur, self.c]
        )

    @property
    def k_delay(self) -> np.ndarray:
        """Actuator lag gains (K_du, K_dq, K_dr)."""
        return np.array([self.K_du, self.K_dq, self.K_dr])

    @classmethod
    def from_mapping(cls, mapping) -> "TruthParams":
        """Strict construction from a key/value mapping (all keys required)."""
        names = [f.name for f in fields(cls)]
        unknown = sorted(set(mapping) - set(names))
        if unknown:
            raise ValueError(f"truth_params: unknown key {unknown[0]!r}")
        missing = sorted(set(names) - set(mapping))
        if missing:
            raise ValueError(f"truth_params: missing key {missing[0]!r}")
        try:
            vals = {n: float(mapping[n]) for n in names}
        except (TypeError, ValueError) as e:
            raise ValueError(f"truth_params: non-numeric value ({e})") from e
        return cls(**vals)

    def to_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# Canonical order of the identifiable coefficients, shared with the gray-box
# model and the offset sampler.
MU_NAMES = ("X_uu", "k", "M_uq", "M_q", "B_zB", "b", "N_ur", "c")


def make_state(**kwargs) -> np.ndarray:
    """Zero state with named overrides, e.g. make_state(theta=0.1, u=1.0)."""
    x = np.zeros(N_STATES)
    for name, value in kwargs.items():
        if name not in STATE_NAMES:
            raise ValueError(f"unknown state component {name!r}")
        x[STATE_NAMES.index(name)] = float(value)
    return x


def truth_rhs(x: np.ndarray, u: np.ndarray, p: TruthParams) -> np.ndarray:
    """Time derivative of the full 12-state model.

    x: state (12,), u: commanded inputs (du, dq, dr), p: coefficients.
    Raises SingularityError when |cos(theta)| <= THETA_COS_EPS.
    """
    theta = float(x[IX_THETA])
    psi = float(x[IX_PSI])
    uu = float(x[IX_U])
    w = float(x[IX_W])
    q = float(x[IX_Q])
    r = float(x[IX_R])
    duc = float(x[IX_DUC])
    dqc = float(x[IX_DQC])
    drc = float(x[IX_DRC])
    du = float(u[0])
    dq = float(u[1])
    dr = float(u[2])

    ct = math.cos(theta)
    if abs(ct) <= THETA_COS_EPS:
        raise SingularityError(f"cos(theta) ~ 0 at theta = {theta!r}")
    st = math.sin(theta)
    cp = math.cos(psi)
    sp = math.sin(psi)

    out = np.empty(N_STATES)
    # Kinematics: body (u, w) mapped through pitch/yaw; z is positive down.
    out[IX_PX] = (uu * ct + w * st) * cp
    out[IX_PY] = (uu * ct + w * st) * sp
    out[IX_PZ] = -uu * st + w * ct
    out[IX_THETA] = q
    out[IX_PSI] = r / ct
    # Hydrodynamics.
    out[IX_U] = p.X_uu * uu * uu + p.k * duc
    out[IX_W] = p.Z_wabsw * w * abs(w) + p.WB * ct
    out[IX_Q] = p.M_uq * uu * q + p.M_q * q - p.B_zB * st + p.b * uu * uu * dqc
    out[IX_R] = p.N_ur * uu * r + p.c * uu * uu * drc
    # First-order actuator lags toward the commanded values.
    out[IX_DUC] = p.K_du * (du - duc)
    out[IX_DQC] = p.K_dq * (dq - dqc)
    out[IX_DRC] = p.K_dr * (dr - drc)
    return out


def output_map(x: np.ndarray) -> np.ndarray:
    """Measured outputs (theta, psi, u, q, r, duc, dqc, drc)."""
    x = np.asarray(x)
    return x[..., OUTPUT_STATE_INDEX].astype(float, copy=True)


def lift_output(y: np.ndarray) -> np.ndarray:
    """Embed an output vector into a full state, zeros elsewhere."""
    x = np.zeros(N_STATES)
    x[OUTPUT_STATE_INDEX] = np.asarray(y, dtype=float)
    return x


def integrate_truth(x0, u_traj, p: TruthParams, delta: float, n_steps: int) -> np.ndarray:
    """Integrate the truth plant with fixed-step classical RK4.

    x0: initial state (12,).
    u_traj: either an array of input samples with shape (>= n_steps, 3),
        held constant over each step (zero-order hold), or a callable
        t -> (3,) evaluated at the RK4 stage times.
    delta: step size [s], > 0. n_steps: number of steps, >= 1.

    Returns the (n_steps + 1, 12) sample array, psi wrapped to (-pi, pi]
    after every step. Raises SingularityError if theta leaves the open
    interval (-pi/2, pi/2); the truth trajectory must never do that, so an
    excursion means bad parameters or excitation, and aborting beats
    silently clamping.
    """
    if delta <= 0.0:
        raise ValueError(f"delta must be positive, got {delta!r}")
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps!r}")

    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (N_STATES,):
        raise ValueError(f"x0 must have shape ({N_STATES},), got {x0.shape}")

    if callable(u_traj):
        u_at = u_traj
        zoh = None
    else:
        zoh = np.asarray(u_traj, dtype=float)
        if zoh.ndim != 2 or zoh.shape[1] != N_INPUTS or zoh.shape[0] < n_steps:
            raise ValueError(
                f"u_traj must have shape (>= {n_steps}, {N_INPUTS}), got {zoh.shape}"
            )
        u_at = None

    out = np.empty((n_steps + 1, N_STATES))
    out[0] = x0
    x = x0.copy()
    half = 0.5 * delta
    for k in range(n_steps):
        t = k * delta
        if zoh is not None:
            u0 = u1 = u2 = zoh[k]
        else:
            u0 = np.asarray(u_at(t), dtype=float)
            u1 = np.asarray(u_at(t + half), dtype=float)
            u2 = np.asarray(u_at(t + delta), dtype=float)
        k1 = truth_rhs(x, u0, p)
        k2 = truth_rhs(x + half * k1, u1, p)
        k3 = truth_rhs(x + half * k2, u1, p)
        k4 = truth_rhs(x + delta * k3, u2, p)
        x = x + (delta / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        x[IX_PSI] = wrap_angle(x[IX_PSI])
        if abs(x[IX_THETA]) >= 0.5 * math.pi:
            raise SingularityError(
                f"theta left (-pi/2, pi/2) at step {k + 1}: theta = {x[IX_THETA]!r}"
            )
        out[k + 1] = x
    return out
