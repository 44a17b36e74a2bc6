"""Randomized excitation, initial conditions, and dataset construction.

Every input trajectory is a concatenation of `n_segments` equal-duration
base segments. Each segment draws one of three kinds uniformly at random,
then draws per-channel parameters independently:

  * step: a constant level, uniform in the channel band;
  * periodic: offset + A sin(2 pi f t + phase) with offset uniform in the
    band, amplitude uniform in [0, half band width], frequency uniform in
    the configured range, phase uniform in [0, 2 pi), clipped to the
    channel box;
  * spline: a cubic through `spline_knots` equally spaced knots with
    uniformly drawn values, clipped to the channel box.

The draw order (kind, then thrust/elevator/rudder parameters) is part of
the format: identical seeds must reproduce identical trajectories.
"""

import os
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from . import ioutil
from .config import ConfigError, ExcitationConfig
from .plant import (
    INPUT_LOWER,
    INPUT_UPPER,
    IX_DQC,
    IX_DRC,
    IX_DUC,
    IX_PSI,
    IX_Q,
    IX_R,
    IX_THETA,
    IX_U,
    N_INPUTS,
    N_STATES,
    OUTPUT_NAMES,
    TruthParams,
    integrate_truth,
    output_map,
)
from .seeding import derive_seed

SEGMENT_KINDS = ("step", "periodic", "spline")


@dataclass
class InputTrajectory:
    """Sampled input sequence with its segment structure.

    samples: (total_n + 1, 3); sample k is the input at t = k * delta,
    held over [k delta, (k+1) delta). The terminal sample extends the last
    segment's formula by one instant so rollouts of total_n steps have a
    matching output sample at the horizon.
    boundaries: (n_segments + 1,) start index of each segment plus the
    terminal sample index.
    """

    samples: np.ndarray
    boundaries: np.ndarray
    delta: float
    seed: int | None = None

    @property
    def n_steps(self) -> int:
        return self.samples.shape[0] - 1


def _segment(kind: str, n_samples: int, duration: float, delta: float,
             rng: np.random.Generator, cfg: ExcitationConfig) -> np.ndarray:
    """Samples of one base segment at local times k * delta, k < n_samples."""
    bands = (cfg.thrust_band, cfg.elevator_band, cfg.rudder_band)
    t = np.arange(n_samples) * delta
    out = np.empty((n_samples, N_INPUTS))
    for ch in range(N_INPUTS):
        lo, hi = bands[ch]
        if kind == "step":
            out[:, ch] = rng.uniform(lo, hi)
        elif kind == "periodic":
            offset = rng.uniform(lo, hi)
            amp = rng.uniform(0.0, 0.5 * (hi - lo))
            freq = rng.uniform(*cfg.freq_band)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            out[:, ch] = offset + amp * np.sin(2.0 * np.pi * freq * t + phase)
        elif kind == "spline":
            knot_t = np.linspace(0.0, duration, cfg.spline_knots)
            knot_v = rng.uniform(lo, hi, size=cfg.spline_knots)
            out[:, ch] = CubicSpline(knot_t, knot_v)(t)
        else:
            raise ValueError(f"unknown segment kind {kind!r}")
        np.clip(out[:, ch], INPUT_LOWER[ch], INPUT_UPPER[ch], out=out[:, ch])
    return out


def gen_base_segment(kind: str, duration: float, delta: float,
                     rng: np.random.Generator,
                     cfg: ExcitationConfig | None = None) -> np.ndarray:
    """One base segment of round(duration / delta) samples."""
    cfg = cfg or ExcitationConfig()
    if delta <= 0.0:
        raise ValueError(f"delta must be positive, got {delta!r}")
    n = int(round(duration / delta))
    if n < 1:
        raise ValueError(f"duration {duration!r} shorter than one step of {delta!r}")
    return _segment(kind, n, n * delta, delta, rng, cfg)


def gen_input_trajectory(total_n: int, delta: float, rng: np.random.Generator,
                         cfg: ExcitationConfig | None = None,
                         seed: int | None = None) -> InputTrajectory:
    """Input sequence of total_n steps (total_n + 1 samples).

    total_n must be at least n_segments; when it is not divisible, the
    remainder steps pad the last segment.
    """
    cfg = cfg or ExcitationConfig()
    if total_n < cfg.n_segments:
        raise ValueError(
            f"total_n must be >= n_segments ({cfg.n_segments}), got {total_n}"
        )
    base = total_n // cfg.n_segments
    rem = total_n % cfg.n_segments
    steps = [base] * cfg.n_segments
    steps[-1] += rem

    boundaries = np.zeros(cfg.n_segments + 1, dtype=int)
    np.cumsum(steps, out=boundaries[1:])
    samples = np.empty((total_n + 1, N_INPUTS))
    for i, n in enumerate(steps):
        kind = SEGMENT_KINDS[rng.integers(len(SEGMENT_KINDS))]
        last = i == cfg.n_segments - 1
        seg = _segment(kind, n + (1 if last else 0), n * delta, delta, rng, cfg)
        samples[boundaries[i] : boundaries[i + 1] + (1 if last else 0)] = seg
    return InputTrajectory(samples=samples, boundaries=boundaries, delta=delta, seed=seed)


def sample_initial_condition(rng: np.random.Generator,
                             cfg: ExcitationConfig | None = None) -> np.ndarray:
    """Random admissible initial state.

    Pitch uniform in +-(ic_theta_frac * pi/2), heading uniform on the
    circle, surge in ic_u_band, rates in +-ic_rate_max, lagged commands
    uniform in their boxes. Heave and the positions start at zero.
    """
    cfg = cfg or ExcitationConfig()
    x = np.zeros(N_STATES)
    half = cfg.ic_theta_frac * 0.5 * np.pi
    x[IX_THETA] = rng.uniform(-half, half)
    x[IX_PSI] = rng.uniform(-np.pi, np.pi)
    x[IX_U] = rng.uniform(*cfg.ic_u_band)
    x[IX_Q] = rng.uniform(-cfg.ic_rate_max, cfg.ic_rate_max)
    x[IX_R] = rng.uniform(-cfg.ic_rate_max, cfg.ic_rate_max)
    x[IX_DUC] = rng.uniform(0.0, 1.0)
    x[IX_DQC] = rng.uniform(-1.0, 1.0)
    x[IX_DRC] = rng.uniform(-1.0, 1.0)
    return x


@dataclass
class Batch:
    """One training trajectory: inputs, outputs, and (optionally) states."""

    inputs: np.ndarray    # (n_steps + 1, 3)
    outputs: np.ndarray   # (n_steps + 1, 8)
    states: np.ndarray | None
    ic_seed: int
    input_seed: int

    @property
    def n_steps(self) -> int:
        return self.outputs.shape[0] - 1


@dataclass
class Dataset:
    """Curriculum training set plus its normalization statistics."""

    batches: list
    delta: float
    seed: int
    norm_mean: np.ndarray  # (8,) per-output mean over all samples
    norm_std: np.ndarray   # (8,) per-output std (ddof=0), strictly positive

    @property
    def schedule(self) -> tuple:
        return tuple(b.n_steps for b in self.batches)


def build_dataset(schedule, delta: float, truth: TruthParams, master_seed: int,
                  cfg: ExcitationConfig | None = None) -> Dataset:
    """Simulate one batch per schedule entry; fresh IC and input each.

    Per-batch streams are derived from the master seed, so batch i is
    reproducible in isolation. Raises with the batch index attached when
    the truth integration fails.
    """
    cfg = cfg or ExcitationConfig()
    truth.validate_physical()
    batches = []
    for i, n in enumerate(schedule):
        ic_seed = derive_seed(master_seed, "dataset", i, "ic")
        input_seed = derive_seed(master_seed, "dataset", i, "input")
        x0 = sample_initial_condition(np.random.default_rng(ic_seed), cfg)
        traj = gen_input_trajectory(int(n), delta, np.random.default_rng(input_seed),
                                    cfg, seed=input_seed)
        try:
            states = integrate_truth(x0, traj.samples, truth, delta, int(n))
        except Exception as e:
            raise RuntimeError(f"dataset batch {i} (n_steps={n}): {e}") from e
        batches.append(Batch(
            inputs=traj.samples,
            outputs=output_map(states),
            states=states,
            ic_seed=ic_seed,
            input_seed=input_seed,
        ))

    all_y = np.vstack([b.outputs for b in batches])
    mean = all_y.mean(axis=0)
    std = all_y.std(axis=0)
    for ch, s in zip(OUTPUT_NAMES, std):
        if s <= 0.0:
            raise ConfigError(
                f"dataset: zero standard deviation for output channel {ch!r}; "
                "the excitation does not move it"
            )
    return Dataset(batches=batches, delta=delta, seed=master_seed,
                   norm_mean=mean, norm_std=std)


def _times(n_samples: int, delta: float) -> np.ndarray:
    return np.arange(n_samples) * delta


def save_dataset(ds: Dataset, out_dir):
    """Write batch_<i>.csv files plus the meta file into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "seed": ds.seed,
        "delta": repr(ds.delta),
        "schedule": ",".join(str(n) for n in ds.schedule),
        "ic_policy": "fresh-per-batch",
    }
    for i, b in enumerate(ds.batches):
        ioutil.write_trajectory_csv(
            os.path.join(out_dir, f"batch_{i}.csv"),
            _times(b.outputs.shape[0], ds.delta), b.inputs, b.outputs, b.states,
        )
        meta[f"batch{i}_ic_seed"] = b.ic_seed
        meta[f"batch{i}_input_seed"] = b.input_seed
    for ch, m, s in zip(OUTPUT_NAMES, ds.norm_mean, ds.norm_std):
        meta[f"mean_{ch}"] = repr(float(m))
        meta[f"std_{ch}"] = repr(float(s))
    ioutil.write_meta(os.path.join(out_dir, "meta"), meta)


def load_dataset(in_dir) -> Dataset:
    """Inverse of save_dataset."""
    meta = ioutil.read_meta(os.path.join(in_dir, "meta"))
    schedule = tuple(int(v) for v in meta["schedule"].split(","))
    delta = float(meta["delta"])
    batches = []
    for i in range(len(schedule)):
        _, u, y, states = ioutil.read_trajectory_csv(os.path.join(in_dir, f"batch_{i}.csv"))
        if y.shape[0] != schedule[i] + 1:
            raise ValueError(
                f"batch_{i}.csv has {y.shape[0]} rows, expected {schedule[i] + 1}"
            )
        batches.append(Batch(
            inputs=u, outputs=y, states=states,
            ic_seed=int(meta[f"batch{i}_ic_seed"]),
            input_seed=int(meta[f"batch{i}_input_seed"]),
        ))
    mean = np.array([float(meta[f"mean_{ch}"]) for ch in OUTPUT_NAMES])
    std = np.array([float(meta[f"std_{ch}"]) for ch in OUTPUT_NAMES])
    return Dataset(batches=batches, delta=delta, seed=int(meta["seed"]),
                   norm_mean=mean, norm_std=std)
