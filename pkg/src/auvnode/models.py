"""Trainable continuous-time models of the measured output dynamics.

Six variants share one rollout/training interface:

  * blackbox: an MLP vector field on (z, u), unconstrained;
  * cblackbox: the same MLP with every weight matrix's singular values
    projected into a band after each optimizer step, which with tanh
    activations caps the network's Lipschitz constant;
  * graybox: the physics rows with the eight identifiable coefficients
    mu as the only trainable parameters (actuator-lag gains fixed);
  * hybrid:<e>: a frozen graybox whose coefficients were drawn from the
    offset-e sampling box around the truth, plus a trainable MLP
    correction under the hybrid singular-value band.

The networks operate in normalized coordinates: a fixed diagonal map
(IoScales, measured on the training data) divides the inputs by their
per-channel spread and multiplies the outputs by the rate spread. The
spectral band and the Lipschitz property apply to the network in those
coordinates; without the scaling, a unit band caps the representable
physical gain below what the plant's stiff rows (righting moment,
actuator lags) need, and the banded variants cannot fit at all.

The state z is the 8-output vector; models never see heave or position.
Boundary-constraint helpers are re-exported here from `constraints` so
users of the model surface find them in one place.
"""

from dataclasses import dataclass

import numpy as np

from .constraints import (  # noqa: F401  (re-exported surface)
    ConstraintSpec,
    constraint_penalty,
    constraint_violation,
    default_constraint_spec,
    penalty_grad,
)
from .ndiff import Mlp, SpectralBounds, mlp_forward, project_spectrum
from .plant import (
    IY_DQC,
    IY_DRC,
    IY_DUC,
    IY_PSI,
    IY_Q,
    IY_R,
    IY_THETA,
    IY_U,
    MU_NAMES,
    N_INPUTS,
    N_OUTPUTS,
    THETA_COS_EPS,
    SingularityError,
    TruthParams,
)

VARIANTS = ("blackbox", "cblackbox", "graybox", "hybrid:1.0", "hybrid:0.5", "hybrid:0.3")

MLP_DIMS = (N_OUTPUTS + N_INPUTS, 128, 128, 128, 128, N_OUTPUTS)


def parse_variant(variant: str):
    """Split a variant tag into (family, offset_level_or_None)."""
    if variant in ("blackbox", "cblackbox", "graybox"):
        return variant, None
    if variant.startswith("hybrid:"):
        try:
            e = float(variant.split(":", 1)[1])
        except ValueError as exc:
            raise ValueError(f"bad hybrid offset in variant {variant!r}") from exc
        if not (0.0 <= e):
            raise ValueError(f"hybrid offset must be >= 0, got {e}")
        return "hybrid", e
    raise ValueError(f"unknown variant {variant!r} (expected one of {VARIANTS})")


def variant_dir(variant: str) -> str:
    """Filesystem-safe name (the colon in hybrid tags becomes an underscore)."""
    return variant.replace(":", "_")


def hybrid_variant_name(e_mu: float) -> str:
    """Canonical tag for an offset level; integral offsets keep a .0 so
    names round-trip through parse_variant (hybrid:1.0, not hybrid:1)."""
    text = f"{e_mu:g}"
    if "." not in text and "e" not in text:
        text += ".0"
    return f"hybrid:{text}"


@dataclass(frozen=True)
class IoScales:
    """Fixed diagonal coordinate maps wrapped around a network field.

    The network sees x / in_scale and its output is multiplied by
    out_scale. in_scale holds the per-channel spread of (z, u) and
    out_scale the spread of the output rates, both measured on the
    training batches and strictly positive. Not trained, not projected;
    they carry the units so the network itself can stay near
    unit-Lipschitz.
    """

    in_scale: np.ndarray   # (11,) z then u
    out_scale: np.ndarray  # (8,) rates

    def __post_init__(self):
        in_s = np.asarray(self.in_scale, dtype=float).copy()
        out_s = np.asarray(self.out_scale, dtype=float).copy()
        if in_s.shape != (N_OUTPUTS + N_INPUTS,):
            raise ValueError(f"in_scale must have shape ({N_OUTPUTS + N_INPUTS},), "
                             f"got {in_s.shape}")
        if out_s.shape != (N_OUTPUTS,):
            raise ValueError(f"out_scale must have shape ({N_OUTPUTS},), got {out_s.shape}")
        if not (np.all(np.isfinite(in_s)) and np.all(np.isfinite(out_s))):
            raise ValueError("scales must be finite")
        if np.any(in_s <= 0.0) or np.any(out_s <= 0.0):
            raise ValueError("scales must be strictly positive")
        object.__setattr__(self, "in_scale", in_s)
        object.__setattr__(self, "out_scale", out_s)


def unit_scales() -> IoScales:
    return IoScales(np.ones(N_OUTPUTS + N_INPUTS), np.ones(N_OUTPUTS))


@dataclass
class GrayboxParams:
    """Physics coefficients of the reduced 8-state model."""

    mu: np.ndarray       # (8,) trainable estimates, MU_NAMES order
    k_delay: np.ndarray  # (3,) actuator-lag gains, held fixed

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).copy()
        self.k_delay = np.asarray(self.k_delay, dtype=float).copy()
        if self.mu.shape != (len(MU_NAMES),):
            raise ValueError(f"mu must have shape ({len(MU_NAMES)},), got {self.mu.shape}")
        if self.k_delay.shape != (N_INPUTS,):
            raise ValueError(f"k_delay must have shape ({N_INPUTS},), got {self.k_delay.shape}")

    def copy(self) -> "GrayboxParams":
        return GrayboxParams(mu=self.mu, k_delay=self.k_delay)


def sample_offset_params(truth: TruthParams, e_mu: float,
                         rng: np.random.Generator) -> GrayboxParams:
    """Draw coefficient estimates from the offset box around the truth.

    Each coordinate is uniform on [min(mu(1-e), mu(1+e)),
    max(mu(1-e), mu(1+e))], which preserves the coefficient's sign for
    e <= 1 and collapses to the truth at e = 0. Lag gains are copied
    unperturbed.
    """
    if e_mu < 0.0:
        raise ValueError(f"e_mu must be >= 0, got {e_mu}")
    mu = truth.mu
    lo = np.minimum(mu * (1.0 - e_mu), mu * (1.0 + e_mu))
    hi = np.maximum(mu * (1.0 - e_mu), mu * (1.0 + e_mu))
    return GrayboxParams(mu=rng.uniform(lo, hi), k_delay=truth.k_delay)


def graybox_rhs(gp: GrayboxParams, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Physics vector field on the output state.

    Same rows as the truth plant restricted to the measured components;
    the lagged commands inside z drive the hydrodynamics, the external
    commands u only enter the lag rows. Raises SingularityError near the
    pitch poles, where the yaw kinematics divide by cos(theta).
    """
    theta = float(z[IY_THETA])
    uu = float(z[IY_U])
    q = float(z[IY_Q])
    r = float(z[IY_R])
    duc = float(z[IY_DUC])
    dqc = float(z[IY_DQC])
    drc = float(z[IY_DRC])
    ct = np.cos(theta)
    if abs(ct) <= THETA_COS_EPS:
        raise SingularityError(f"cos(theta) ~ 0 at theta = {theta!r}")
    x_uu, k, m_uq, m_q, b_zb, b, n_ur, c = gp.mu
    f = np.empty(N_OUTPUTS)
    f[IY_THETA] = q
    f[IY_PSI] = r / ct
    f[IY_U] = x_uu * uu * uu + k * duc
    f[IY_Q] = m_uq * uu * q + m_q * q - b_zb * np.sin(theta) + b * uu * uu * dqc
    f[IY_R] = n_ur * uu * r + c * uu * uu * drc
    f[IY_DUC] = gp.k_delay[0] * (float(u[0]) - duc)
    f[IY_DQC] = gp.k_delay[1] * (float(u[1]) - dqc)
    f[IY_DRC] = gp.k_delay[2] * (float(u[2]) - drc)
    return f


def graybox_backward(gp: GrayboxParams, z: np.ndarray, lam: np.ndarray):
    """Cotangents of <lam, graybox_rhs>: (d/dmu, d/dz), both analytic."""
    theta = float(z[IY_THETA])
    uu = float(z[IY_U])
    q = float(z[IY_Q])
    r = float(z[IY_R])
    duc = float(z[IY_DUC])
    dqc = float(z[IY_DQC])
    drc = float(z[IY_DRC])
    ct = np.cos(theta)
    st = np.sin(theta)
    x_uu, k, m_uq, m_q, b_zb, b, n_ur, c = gp.mu

    d_mu = np.array([
        lam[IY_U] * uu * uu,            # X_uu
        lam[IY_U] * duc,                # k
        lam[IY_Q] * uu * q,             # M_uq
        lam[IY_Q] * q,                  # M_q
        -lam[IY_Q] * st,                # B_zB
        lam[IY_Q] * uu * uu * dqc,      # b
        lam[IY_R] * uu * r,             # N_ur
        lam[IY_R] * uu * uu * drc,      # c
    ])

    d_z = np.zeros(N_OUTPUTS)
    d_z[IY_THETA] = lam[IY_PSI] * r * st / (ct * ct) - lam[IY_Q] * b_zb * ct
    d_z[IY_U] = (
        lam[IY_U] * 2.0 * x_uu * uu
        + lam[IY_Q] * (m_uq * q + 2.0 * b * uu * dqc)
        + lam[IY_R] * (n_ur * r + 2.0 * c * uu * drc)
    )
    d_z[IY_Q] = lam[IY_THETA] + lam[IY_Q] * (m_uq * uu + m_q)
    d_z[IY_R] = lam[IY_PSI] / ct + lam[IY_R] * n_ur * uu
    d_z[IY_DUC] = lam[IY_U] * k - lam[IY_DUC] * gp.k_delay[0]
    d_z[IY_DQC] = lam[IY_Q] * b * uu * uu - lam[IY_DQC] * gp.k_delay[1]
    d_z[IY_DRC] = lam[IY_R] * c * uu * uu - lam[IY_DRC] * gp.k_delay[2]
    return d_mu, d_z


class TrainableModel:
    """Shared rollout/training interface; see the concrete classes."""

    kind: str
    variant: str
    mlp: Mlp | None = None
    graybox: GrayboxParams | None = None
    bounds: SpectralBounds | None = None
    e_mu: float | None = None

    def rhs(self, z, u) -> np.ndarray:
        return self.rhs_cached(z, u)[0]

    def rhs_cached(self, z, u):
        raise NotImplementedError

    def rhs_backward(self, cache, lam):
        raise NotImplementedError

    def trainable_arrays(self) -> list:
        raise NotImplementedError

    def new_grads(self) -> list:
        return [np.zeros_like(a) for a in self.trainable_arrays()]

    def decay_mask(self) -> list:
        raise NotImplementedError

    def project(self):
        """Re-impose the spectral band, when the variant has one."""
        if self.mlp is not None and self.bounds is not None:
            project_spectrum(self.mlp, self.bounds)

    def copy(self) -> "TrainableModel":
        raise NotImplementedError


class BlackboxModel(TrainableModel):
    """Pure MLP vector field; `bounds` set makes it the constrained flavor."""

    def __init__(self, mlp: Mlp, bounds: SpectralBounds | None = None,
                 scales: IoScales | None = None):
        self.mlp = mlp
        self.bounds = bounds
        self.scales = scales if scales is not None else unit_scales()
        self.kind = "cblackbox" if bounds is not None else "blackbox"
        self.variant = self.kind

    def rhs_cached(self, z, u):
        x = np.concatenate([np.asarray(z, dtype=float), np.asarray(u, dtype=float)])
        f, acts = self.mlp.forward_cached(x / self.scales.in_scale)
        return f * self.scales.out_scale, acts

    def rhs_backward(self, cache, lam):
        grads, dx = self.mlp.backward(cache, lam * self.scales.out_scale)
        return grads, (dx / self.scales.in_scale)[:N_OUTPUTS]

    def trainable_arrays(self):
        return self.mlp.arrays()

    def decay_mask(self):
        return self.mlp.decay_mask()

    def copy(self):
        return BlackboxModel(self.mlp.copy(), self.bounds, self.scales)


class GrayboxModel(TrainableModel):
    """Physics rows only; the eight mu coefficients are the parameters."""

    kind = "graybox"
    variant = "graybox"

    def __init__(self, params: GrayboxParams):
        self.graybox = params

    def rhs_cached(self, z, u):
        z = np.asarray(z, dtype=float)
        f = graybox_rhs(self.graybox, z, u)
        return f, z.copy()

    def rhs_backward(self, cache, lam):
        d_mu, d_z = graybox_backward(self.graybox, cache, lam)
        return [d_mu], d_z

    def trainable_arrays(self):
        return [self.graybox.mu]

    def decay_mask(self):
        # Decay would bias the physical estimates toward zero.
        return [False]

    def copy(self):
        return GrayboxModel(self.graybox.copy())


class HybridModel(TrainableModel):
    """Frozen offset graybox plus a trainable MLP correction."""

    kind = "hybrid"

    def __init__(self, graybox: GrayboxParams, mlp: Mlp, e_mu: float,
                 bounds: SpectralBounds | None = None,
                 scales: IoScales | None = None):
        self.graybox = graybox
        self.mlp = mlp
        self.e_mu = float(e_mu)
        self.bounds = bounds
        self.scales = scales if scales is not None else unit_scales()
        self.variant = hybrid_variant_name(self.e_mu)

    def rhs_cached(self, z, u):
        z = np.asarray(z, dtype=float)
        f_phys = graybox_rhs(self.graybox, z, u)
        x = np.concatenate([z, np.asarray(u, dtype=float)])
        f_net, acts = self.mlp.forward_cached(x / self.scales.in_scale)
        return f_phys + f_net * self.scales.out_scale, (z.copy(), acts)

    def rhs_backward(self, cache, lam):
        z, acts = cache
        grads, dx = self.mlp.backward(acts, lam * self.scales.out_scale)
        _, d_z_phys = graybox_backward(self.graybox, z, lam)
        return grads, (dx / self.scales.in_scale)[:N_OUTPUTS] + d_z_phys

    def trainable_arrays(self):
        return self.mlp.arrays()

    def decay_mask(self):
        return self.mlp.decay_mask()

    def copy(self):
        return HybridModel(self.graybox.copy(), self.mlp.copy(), self.e_mu,
                           self.bounds, self.scales)


def build_model(variant: str, truth: TruthParams, rng: np.random.Generator,
                cbb_sigma=(0.5, 1.0), hybrid_sigma=(0.0, 1.0),
                mlp_dims=MLP_DIMS, io_scales: IoScales | None = None) -> TrainableModel:
    """Fresh model instance for one training run.

    Draw order is fixed: graybox coefficients first (when the variant has
    them), then the MLP initialization, then the immediate spectral
    projection for banded variants. The graybox variant starts from the
    maximum-offset box (e = 1). io_scales (unit when omitted) consume no
    randomness and apply to every network-bearing variant.
    """
    family, e_mu = parse_variant(variant)
    if family == "blackbox":
        return BlackboxModel(Mlp.init(mlp_dims, rng), scales=io_scales)
    if family == "cblackbox":
        bounds = SpectralBounds(*cbb_sigma)
        model = BlackboxModel(Mlp.init(mlp_dims, rng), bounds, io_scales)
        model.project()
        return model
    if family == "graybox":
        return GrayboxModel(sample_offset_params(truth, 1.0, rng))
    gb = sample_offset_params(truth, e_mu, rng)
    bounds = SpectralBounds(*hybrid_sigma)
    model = HybridModel(gb, Mlp.init(mlp_dims, rng), e_mu, bounds, io_scales)
    model.project()
    return model
