"""Numeric differentiation kernel: MLP forward/backward, Euler-rollout
BPTT, Adam-W, and singular-value projection.

Hand-written reverse mode over exactly the graphs this pipeline needs,
in plain float64 numpy. Rollouts are sequential and states are 1-D, so
there is no batching; gradient accumulation is an ordered in-place sum,
which keeps results bit-reproducible for a fixed seed regardless of how
many runs execute in parallel elsewhere.

Sign conventions: `backward` routines take the upstream cotangent and
return gradients in the same layout as the parameter arrays they refer
to. The BPTT adjoint runs the discrete chain rule of the Euler unroll
z_{k+1} = z_k + delta f(z_k, u_k), so its gradients are exact for the
discretized objective (finite differences agree to roundoff).
"""

import math
from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintSpec, constraint_violation, penalty_grad
from .plant import IY_PSI, SingularityError, wrap_angle


class DivergedRollout(RuntimeError):
    """A rollout left the trusted numeric range."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"rollout diverged at step {step}: {reason}")
        self.step = step
        self.reason = reason

    def __reduce__(self):
        # default Exception pickling replays .args, which is the message
        return (type(self), (self.step, self.reason))


@dataclass(frozen=True)
class SpectralBounds:
    """Closed interval the singular values of each weight matrix must occupy."""

    sigma_min: float
    sigma_max: float

    def __post_init__(self):
        if not (0.0 <= self.sigma_min <= self.sigma_max):
            raise ValueError(
                f"need 0 <= sigma_min <= sigma_max, got ({self.sigma_min}, {self.sigma_max})"
            )


class Mlp:
    """Dense tanh network, identity output layer.

    dims = (n_in, h_1, ..., h_L, n_out); weights[i] has shape
    (dims[i+1], dims[i]). Parameters are exposed as the interleaved list
    [W_0, b_0, W_1, b_1, ...] so optimizers can update them in place.
    """

    __slots__ = ("dims", "weights", "biases")

    def __init__(self, dims, weights, biases):
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) < 2:
            raise ValueError("need at least input and output dims")
        if len(weights) != len(self.dims) - 1 or len(biases) != len(weights):
            raise ValueError("layer count mismatch")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (self.dims[i + 1], self.dims[i]):
                raise ValueError(f"weights[{i}] shape {w.shape} != {(self.dims[i + 1], self.dims[i])}")
            if b.shape != (self.dims[i + 1],):
                raise ValueError(f"biases[{i}] shape {b.shape} != {(self.dims[i + 1],)}")
        self.weights = list(weights)
        self.biases = list(biases)

    @classmethod
    def init(cls, dims, rng: np.random.Generator) -> "Mlp":
        """Uniform fan-in initialization: entries in +-1/sqrt(fan_in)."""
        weights, biases = [], []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(rng.uniform(-bound, bound, size=n_out))
        return cls(dims, weights, biases)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = w @ h + b
            if i != last:
                h = np.tanh(h)
        return h

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping the per-layer activations for backward.

        The cache is the list [x, h_1, ..., h_{L-1}] of post-tanh hidden
        activations; tanh' is reconstructed as 1 - h^2.
        """
        h = np.asarray(x, dtype=float)
        acts = [h]
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = w @ h + b
            if i != last:
                h = np.tanh(h)
                acts.append(h)
        return h, acts

    def backward(self, acts, upstream: np.ndarray):
        """Gradients of <upstream, output> w.r.t. parameters and input.

        Returns (grads, dx) with grads matching `arrays()` order.
        """
        n = self.n_layers
        d_w = [None] * n
        d_b = [None] * n
        delta = np.asarray(upstream, dtype=float)
        for i in range(n - 1, -1, -1):
            d_w[i] = np.outer(delta, acts[i])
            d_b[i] = delta.copy()
            dh = self.weights[i].T @ delta
            if i > 0:
                delta = dh * (1.0 - acts[i] * acts[i])
        grads = []
        for w, b in zip(d_w, d_b):
            grads.append(w)
            grads.append(b)
        return grads, dh

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def zero_grads(self) -> list:
        return [np.zeros_like(a) for a in self.arrays()]

    def decay_mask(self) -> list:
        """Weight decay applies to matrices only, never biases."""
        out = []
        for _ in range(self.n_layers):
            out.append(True)
            out.append(False)
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.dims, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])


def mlp_forward(net: Mlp, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Network applied to the concatenated (z, u) vector."""
    return net.forward(np.concatenate([np.asarray(z, dtype=float),
                                       np.asarray(u, dtype=float)]))


class SpectralProjectionError(RuntimeError):
    """SVD failed, almost always because the weights went non-finite."""


def project_spectrum(net: Mlp, bounds: SpectralBounds) -> Mlp:
    """Clamp every weight matrix's singular values into the bounds.

    Matrices already inside the band are left bit-identical (no
    decompose/rebuild round-trip). The band check carries a few machine
    epsilons of slack so a just-projected matrix, whose recomputed
    spectrum sits at a band edge up to rounding, is recognized as done
    instead of being rebuilt on every subsequent call. Returns the same
    object.
    """
    slack = 32.0 * np.finfo(float).eps * max(bounds.sigma_max, 1.0)
    for i, w in enumerate(net.weights):
        if not np.all(np.isfinite(w)):
            raise SpectralProjectionError(f"layer {i}: non-finite weights")
        try:
            u, s, vt = np.linalg.svd(w, full_matrices=False)
        except np.linalg.LinAlgError as e:
            raise SpectralProjectionError(f"layer {i}: SVD failed ({e})") from e
        if s.size and s[0] <= bounds.sigma_max + slack and s[-1] >= bounds.sigma_min - slack:
            continue
        np.clip(s, bounds.sigma_min, bounds.sigma_max, out=s)
        net.weights[i] = (u * s) @ vt
    return net


@dataclass
class AdamWState:
    """Adam with decoupled weight decay; moments live alongside the params."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = None
    v: list = None
    decay_mask: list = None
    lr_scale: list = None             # per-array step multiplier (param groups)

    @classmethod
    def for_arrays(cls, arrays, lr, weight_decay=0.0, decay_mask=None,
                   beta1=0.9, beta2=0.999, eps=1e-8,
                   lr_scale=None) -> "AdamWState":
        if decay_mask is None:
            decay_mask = [True] * len(arrays)
        if len(decay_mask) != len(arrays):
            raise ValueError("decay_mask length mismatch")
        if lr_scale is None:
            lr_scale = [None] * len(arrays)
        if len(lr_scale) != len(arrays):
            raise ValueError("lr_scale length mismatch")
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   weight_decay=weight_decay, step=0,
                   m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays],
                   decay_mask=list(decay_mask), lr_scale=list(lr_scale))


def adamw_step(params: list, grads: list, st: AdamWState):
    """One in-place update. Decay is decoupled: it never enters the moments."""
    if not (len(params) == len(grads) == len(st.m)):
        raise ValueError("params/grads/state length mismatch")
    st.step += 1
    bc1 = 1.0 - st.beta1**st.step
    bc2 = 1.0 - st.beta2**st.step
    scales = st.lr_scale or [None] * len(params)
    for p, g, m, v, decayed, scale in zip(params, grads, st.m, st.v,
                                          st.decay_mask, scales):
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * (g * g)
        lr = st.lr if scale is None else st.lr * scale
        if decayed and st.weight_decay:
            p -= st.lr * st.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)


def clip_gradients(grads: list, max_norm: float) -> float:
    """Scale all gradients in place to a global L2 norm cap; returns the
    pre-clip norm."""
    total = 0.0
    for g in grads:
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@dataclass
class BpttResult:
    loss: float      # mse + penalty
    mse: float
    penalty: float   # weighted penalty contribution
    grads: list      # matches model.trainable_arrays()


def bptt_trajectory_grad(model, z0: np.ndarray, u_traj: np.ndarray,
                         y_traj: np.ndarray, delta: float,
                         constraint: ConstraintSpec | None = None,
                         penalty_weight: float = 0.0,
                         divergence_threshold: float = 1e6) -> BpttResult:
    """Loss and exact gradients of one Euler-unrolled rollout.

    Forward: z_{k+1} = z_k + delta f(z_k, u_k) for k < N, psi wrapped
    after every step. Loss: (1/N) sum_{k<N} (||y_k - z_k||^2 +
    penalty_weight ||c(z_k)||), with the psi residual wrapped to
    (-pi, pi]. Backward replays the same graph in reverse, so the
    gradients are exact for this discrete objective.

    `model` provides rhs_cached(z, u) -> (f, cache), rhs_backward(cache,
    lam) -> (param_grads, dz), and trainable_arrays(). Raises
    DivergedRollout when a state goes non-finite, exceeds the threshold,
    or the model hits its pitch singularity.
    """
    u_traj = np.asarray(u_traj, dtype=float)
    y_traj = np.asarray(y_traj, dtype=float)
    n = u_traj.shape[0]
    if n < 1:
        raise ValueError("need at least one step")
    if y_traj.shape[0] < n:
        raise ValueError(f"y_traj must supply {n} samples, got {y_traj.shape[0]}")
    w_pen = float(penalty_weight) if constraint is not None else 0.0

    z = np.asarray(z0, dtype=float).copy()
    zs = [z.copy()]
    caches = []
    mse_sum = 0.0
    pen_sum = 0.0
    for k in range(n):
        err = y_traj[k] - z
        err[IY_PSI] = wrap_angle(err[IY_PSI])
        mse_sum += float(np.dot(err, err))
        if w_pen:
            pen_sum += float(np.linalg.norm(constraint_violation(z, constraint)))
        try:
            f, cache = model.rhs_cached(z, u_traj[k])
        except SingularityError as e:
            raise DivergedRollout(k, str(e)) from e
        caches.append(cache)
        z = z + delta * f
        z[IY_PSI] = wrap_angle(z[IY_PSI])
        if not np.all(np.isfinite(z)):
            raise DivergedRollout(k + 1, "non-finite state")
        if np.max(np.abs(z)) > divergence_threshold:
            raise DivergedRollout(k + 1, f"|z| exceeded {divergence_threshold:g}")
        if k + 1 < n:
            zs.append(z.copy())

    mse = mse_sum / n
    penalty = w_pen * pen_sum / n
    grads = model.new_grads()
    lam = np.zeros_like(z)  # dL/dz_N: the horizon state carries no loss
    for k in range(n - 1, -1, -1):
        part, dz = model.rhs_backward(caches[k], lam)
        for g, p in zip(grads, part):
            g += delta * p
        lam = lam + delta * dz
        zk = zs[k]
        err = y_traj[k] - zk
        err[IY_PSI] = wrap_angle(err[IY_PSI])
        lam += (-2.0 / n) * err
        if w_pen:
            lam += (w_pen / n) * penalty_grad(zk, constraint)
    return BpttResult(loss=mse + penalty, mse=mse, penalty=penalty, grads=grads)
