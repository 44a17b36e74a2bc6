"""Fixed evaluation protocol and report generation.

The test set crosses fresh initial conditions with fresh input
trajectories (default 5 x 5, 5000 steps at 10 ms). Every trained instance
is rolled out open loop from z0 = y0 on all trajectories and scored with
the normalized MSE: residuals are standardized per channel by the
training-set statistics (the psi residual is wrapped to (-pi, pi] first)
and the squared-norm is averaged over all samples of the trajectory.

Instance means are aggregated per variant behind a Tukey fence: instances
whose mean lies outside [Q1 - 1.5 IQR, Q3 + 1.5 IQR] of the variant's
non-diverged pool are dropped, the rest give the reported mean/std, and
the retained instance with the lowest mean is the variant's best model.
Diverged rollouts are truncated where they left the trusted range, scored
on the valid prefix, and flag the whole instance as diverged (excluded
from the fence pool, reported in its own column).
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import ioutil
from .config import EvalSettings, ExcitationConfig
from .constraints import ConstraintSpec, default_constraint_spec
from .excitation import Dataset, gen_input_trajectory, sample_initial_condition
from .models import VARIANTS, variant_dir
from .ndiff import DivergedRollout
from .plant import (
    IY_PSI,
    N_OUTPUTS,
    OUTPUT_NAMES,
    SingularityError,
    TruthParams,
    integrate_truth,
    output_map,
    wrap_angle,
    wrap_angles,
)
from .seeding import derive_seed
from .train import load_checkpoint

# Channels whose residual-vs-time series get exported for plotting.
RESIDUAL_CHANNELS = ("theta", "u")

SUMMARY_HEADER = "variant,mean_mse,std_mse,retained,diverged,best_seed"


@dataclass
class TestSet:
    """Cross product of initial conditions and input trajectories."""

    inputs: list            # per trajectory, (n_steps + 1, 3)
    outputs: list           # per trajectory, (n_steps + 1, 8)
    states: list            # per trajectory, (n_steps + 1, 12) or None
    pairs: list             # (ic_index, input_index) per trajectory
    delta: float
    seed: int
    n_ics: int
    n_inputs: int

    @property
    def n_trajectories(self) -> int:
        return len(self.outputs)

    @property
    def n_steps(self) -> int:
        return self.outputs[0].shape[0] - 1


def build_test_set(truth: TruthParams, exc: ExcitationConfig, ev: EvalSettings,
                   delta: float, master_seed: int) -> TestSet:
    """Simulate the (n_ics x n_inputs) grid with streams disjoint from the
    training data's."""
    truth.validate_physical()
    ics = [
        sample_initial_condition(
            np.random.default_rng(derive_seed(master_seed, "test", "ic", i)), exc
        )
        for i in range(ev.n_initial_conditions)
    ]
    trajs = [
        gen_input_trajectory(
            ev.test_n, delta,
            np.random.default_rng(derive_seed(master_seed, "test", "input", j)),
            exc,
        )
        for j in range(ev.n_input_trajectories)
    ]
    inputs, outputs, states, pairs = [], [], [], []
    for i, x0 in enumerate(ics):
        for j, traj in enumerate(trajs):
            try:
                xs = integrate_truth(x0, traj.samples, truth, delta, ev.test_n)
            except Exception as e:
                raise RuntimeError(f"test trajectory (ic {i}, input {j}): {e}") from e
            inputs.append(traj.samples)
            outputs.append(output_map(xs))
            states.append(xs)
            pairs.append((i, j))
    return TestSet(inputs=inputs, outputs=outputs, states=states, pairs=pairs,
                   delta=delta, seed=master_seed,
                   n_ics=ev.n_initial_conditions, n_inputs=ev.n_input_trajectories)


def save_test_set(ts: TestSet, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    t = np.arange(ts.n_steps + 1) * ts.delta
    for k in range(ts.n_trajectories):
        ioutil.write_trajectory_csv(
            os.path.join(out_dir, f"traj_{k:02d}.csv"),
            t, ts.inputs[k], ts.outputs[k],
            ts.states[k] if ts.states else None,
        )
    ioutil.write_meta(os.path.join(out_dir, "meta"), {
        "seed": ts.seed,
        "delta": repr(ts.delta),
        "n_steps": ts.n_steps,
        "n_ics": ts.n_ics,
        "n_inputs": ts.n_inputs,
    })


def load_test_set(in_dir) -> TestSet:
    meta = ioutil.read_meta(os.path.join(in_dir, "meta"))
    n_ics = int(meta["n_ics"])
    n_inputs = int(meta["n_inputs"])
    n_steps = int(meta["n_steps"])
    inputs, outputs, states, pairs = [], [], [], []
    for i in range(n_ics):
        for j in range(n_inputs):
            k = i * n_inputs + j
            _, u, y, xs = ioutil.read_trajectory_csv(os.path.join(in_dir, f"traj_{k:02d}.csv"))
            if y.shape[0] != n_steps + 1:
                raise ValueError(f"traj_{k:02d}.csv has {y.shape[0]} rows, expected {n_steps + 1}")
            inputs.append(u)
            outputs.append(y)
            states.append(xs)
            pairs.append((i, j))
    return TestSet(inputs=inputs, outputs=outputs, states=states, pairs=pairs,
                   delta=float(meta["delta"]), seed=int(meta["seed"]),
                   n_ics=n_ics, n_inputs=n_inputs)


@dataclass
class RolloutResult:
    """Open-loop model rollout; rows past n_valid are NaN."""

    z: np.ndarray      # (n_steps + 1, 8)
    n_valid: int       # number of valid samples (z0 always counts)
    diverged: bool


def rollout_model(model, z0: np.ndarray, u_traj: np.ndarray, delta: float,
                  n_steps: int, divergence_threshold: float = 1e6) -> RolloutResult:
    """Euler rollout, truncated (not raised) on divergence."""
    z = np.full((n_steps + 1, N_OUTPUTS), np.nan)
    cur = np.asarray(z0, dtype=float).copy()
    z[0] = cur
    for k in range(n_steps):
        try:
            f = model.rhs(cur, u_traj[k])
        except SingularityError:
            return RolloutResult(z=z, n_valid=k + 1, diverged=True)
        cur = cur + delta * f
        cur[IY_PSI] = wrap_angle(cur[IY_PSI])
        if not np.all(np.isfinite(cur)) or np.max(np.abs(cur)) > divergence_threshold:
            return RolloutResult(z=z, n_valid=k + 1, diverged=True)
        z[k + 1] = cur
    return RolloutResult(z=z, n_valid=n_steps + 1, diverged=False)


def normalized_residuals(z: np.ndarray, y: np.ndarray, std: np.ndarray,
                         n_valid: int | None = None) -> np.ndarray:
    """Per-sample, per-channel standardized residuals (psi wrapped)."""
    n = y.shape[0] if n_valid is None else n_valid
    err = y[:n] - z[:n]
    err[:, IY_PSI] = wrap_angles(err[:, IY_PSI])
    return err / np.asarray(std, dtype=float)


def normalized_mse(z: np.ndarray, y: np.ndarray, std: np.ndarray,
                   n_valid: int | None = None) -> float:
    """Mean over samples of the squared normalized residual norm."""
    r = normalized_residuals(z, y, std, n_valid)
    return float(np.mean(np.sum(r * r, axis=1)))


def mean_boundary_penalty(z: np.ndarray, spec: ConstraintSpec,
                          n_valid: int | None = None) -> float:
    """Average over samples of the constraint-violation norm."""
    n = z.shape[0] if n_valid is None else n_valid
    zz = z[:n]
    viol = np.maximum(0.0, spec.lower - zz) + np.maximum(0.0, zz - spec.upper)
    return float(np.mean(np.sqrt(np.sum(viol * viol, axis=1))))


@dataclass
class InstanceEval:
    """One trained instance scored on the whole test set."""

    traj_mse: np.ndarray       # (n_trajectories,)
    traj_n_valid: np.ndarray   # (n_trajectories,) int
    traj_diverged: np.ndarray  # (n_trajectories,) bool
    mean_mse: float
    mean_penalty: float

    @property
    def diverged(self) -> bool:
        return bool(self.traj_diverged.any())


def evaluate_instance(model, test: TestSet, std: np.ndarray,
                      spec: ConstraintSpec | None = None,
                      divergence_threshold: float = 1e6) -> InstanceEval:
    """Roll the model on every test trajectory from z0 = y0 and score it.

    Diverged rollouts are scored on their valid prefix and flagged.
    """
    spec = spec if spec is not None else default_constraint_spec()
    n = test.n_trajectories
    mses = np.empty(n)
    n_valid = np.empty(n, dtype=int)
    flags = np.zeros(n, dtype=bool)
    penalties = np.empty(n)
    for k in range(n):
        y = test.outputs[k]
        res = rollout_model(model, y[0], test.inputs[k], test.delta,
                            test.n_steps, divergence_threshold)
        mses[k] = normalized_mse(res.z, y, std, res.n_valid)
        penalties[k] = mean_boundary_penalty(res.z, spec, res.n_valid)
        n_valid[k] = res.n_valid
        flags[k] = res.diverged
    return InstanceEval(traj_mse=mses, traj_n_valid=n_valid, traj_diverged=flags,
                        mean_mse=float(mses.mean()), mean_penalty=float(penalties.mean()))


@dataclass
class InstanceResult:
    """Instance identity plus its training fate and test scores."""

    variant: str
    index: int
    seed: int
    train_diverged: bool
    scores: InstanceEval

    @property
    def diverged(self) -> bool:
        return self.train_diverged or self.scores.diverged


@dataclass
class VariantSummary:
    variant: str
    n_instances: int
    mean_mse: float            # over retained instance means (nan if none)
    std_mse: float             # population std over retained means
    retained: int
    diverged: int
    best_index: int | None
    mean_penalty: float        # over retained instances (nan if none)
    retained_indices: tuple = ()
    fence: tuple | None = None


def tukey_fence(values: np.ndarray) -> tuple:
    """Inclusive Tukey 1.5 IQR fence (lo, hi) of a sample."""
    q1, q3 = np.percentile(values, [25.0, 75.0])
    iqr = q3 - q1
    return float(q1 - 1.5 * iqr), float(q3 + 1.5 * iqr)


def summarize_variant(variant: str, instances: list) -> VariantSummary:
    """Fence the non-diverged instance means and pick the best model."""
    if len(instances) < 2:
        raise ValueError(
            f"variant {variant!r} has {len(instances)} instance(s); need at least 2"
        )
    pool = [r for r in instances if not r.diverged]
    diverged = len(instances) - len(pool)
    if not pool:
        return VariantSummary(variant=variant, n_instances=len(instances),
                              mean_mse=math.nan, std_mse=math.nan, retained=0,
                              diverged=diverged, best_index=None,
                              mean_penalty=math.nan)
    means = np.array([r.scores.mean_mse for r in pool])
    lo, hi = tukey_fence(means)
    keep = (means >= lo) & (means <= hi)
    kept = [r for r, k in zip(pool, keep) if k]
    kept_means = means[keep]
    best = kept[int(np.argmin(kept_means))]
    return VariantSummary(
        variant=variant,
        n_instances=len(instances),
        mean_mse=float(kept_means.mean()),
        std_mse=float(kept_means.std()),
        retained=len(kept),
        diverged=diverged,
        best_index=best.index,
        mean_penalty=float(np.mean([r.scores.mean_penalty for r in kept])),
        retained_indices=tuple(r.index for r in kept),
        fence=(lo, hi),
    )


@dataclass
class EvalReport:
    summaries: dict            # variant -> VariantSummary, insertion-ordered
    instances: list            # InstanceResult, grid order
    norm_std: np.ndarray
    n_test_steps: int
    delta: float

    def summary(self, variant: str) -> VariantSummary | None:
        return self.summaries.get(variant)


def aggregate_report(instances: list, norm_std: np.ndarray, n_test_steps: int,
                     delta: float) -> EvalReport:
    """Group instance results by variant (canonical order first)."""
    by_variant = {}
    for r in instances:
        by_variant.setdefault(r.variant, []).append(r)
    order = [v for v in VARIANTS if v in by_variant]
    order += [v for v in by_variant if v not in order]
    summaries = {}
    for v in order:
        group = sorted(by_variant[v], key=lambda r: r.index)
        summaries[v] = summarize_variant(v, group)
    return EvalReport(summaries=summaries, instances=list(instances),
                      norm_std=np.asarray(norm_std, dtype=float),
                      n_test_steps=n_test_steps, delta=delta)


@dataclass
class OrderingCheck:
    name: str
    passed: bool | None  # None: not evaluable with the variants present
    hard: bool
    detail: str


def ordering_checks(report: EvalReport) -> list:
    """Qualitative structure the aggregate numbers are expected to show.

    Hard checks gate acceptance; soft checks only warn, since they sit
    closer to run-to-run noise.
    """
    def stat(variant, attr):
        s = report.summary(variant)
        if s is None or s.retained == 0:
            return None
        return getattr(s, attr)

    checks = []

    def add(name, hard, lhs, rhs, op, fmt="{:.6g}"):
        if lhs is None or rhs is None:
            checks.append(OrderingCheck(name, None, hard, "not evaluable (missing variant or no retained instances)"))
            return
        ok = (lhs < rhs) if op == "<" else (lhs <= rhs)
        detail = f"{fmt.format(lhs)} {op} {fmt.format(rhs)}"
        checks.append(OrderingCheck(name, bool(ok), hard, detail))

    add("graybox < hybrid:0.3 (mean)", True,
        stat("graybox", "mean_mse"), stat("hybrid:0.3", "mean_mse"), "<")
    add("hybrid:0.3 < hybrid:0.5 (mean)", True,
        stat("hybrid:0.3", "mean_mse"), stat("hybrid:0.5", "mean_mse"), "<")
    add("cblackbox <= blackbox (mean)", True,
        stat("cblackbox", "mean_mse"), stat("blackbox", "mean_mse"), "<=")
    add("cblackbox <= blackbox (std)", True,
        stat("cblackbox", "std_mse"), stat("blackbox", "std_mse"), "<=")

    stds = [stat(v, "std_mse") for v in ("hybrid:1.0", "hybrid:0.5", "hybrid:0.3")]
    if any(s is None for s in stds):
        checks.append(OrderingCheck("hybrid:1.0 largest std among hybrids", None,
                                    False, "not evaluable"))
    else:
        ok = stds[0] >= max(stds[1], stds[2])
        checks.append(OrderingCheck(
            "hybrid:1.0 largest std among hybrids", bool(ok), False,
            f"stds (1.0, 0.5, 0.3) = ({stds[0]:.6g}, {stds[1]:.6g}, {stds[2]:.6g})",
        ))
    cb, bb = stat("cblackbox", "mean_mse"), stat("blackbox", "mean_mse")
    if cb is None or bb is None:
        checks.append(OrderingCheck("cblackbox mean <= half blackbox mean", None,
                                    False, "not evaluable"))
    else:
        checks.append(OrderingCheck(
            "cblackbox mean <= half blackbox mean", bool(cb <= 0.5 * bb), False,
            f"{cb:.6g} vs 0.5 * {bb:.6g}",
        ))
    return checks


def discover_runs(runs_dir) -> list:
    """(variant, index, run_dir) for every stored run, grid order."""
    found = []
    if not os.path.isdir(runs_dir):
        raise FileNotFoundError(f"runs directory {runs_dir!r} does not exist")
    for name in sorted(os.listdir(runs_dir)):
        vdir = os.path.join(runs_dir, name)
        if not os.path.isdir(vdir):
            continue
        for sub in sorted(os.listdir(vdir)):
            if not sub.startswith("seed_"):
                continue
            run_dir = os.path.join(vdir, sub)
            if os.path.exists(os.path.join(run_dir, "run.json")):
                found.append((name, int(sub.split("_", 1)[1]), run_dir))
    found.sort(key=lambda item: (item[0], item[1]))
    return found


def evaluate_runs(runs_dir, test: TestSet, dataset: Dataset,
                  spec: ConstraintSpec | None = None,
                  divergence_threshold: float = 1e6,
                  progress=None):
    """Score every stored run; returns (report, best_models).

    best_models maps each variant to its best retained instance's model,
    reloaded from the checkpoint, for artifact generation.
    """
    spec = spec if spec is not None else default_constraint_spec()
    instances = []
    models = {}
    for dirname, index, run_dir in discover_runs(runs_dir):
        with open(os.path.join(run_dir, "run.json"), "r", encoding="utf-8") as fh:
            rec = json.load(fh)
        if rec.get("status") != "ok":
            if progress:
                progress(f"skip {dirname} seed {index}: training failed")
            continue
        model, _, _ = load_checkpoint(os.path.join(run_dir, "checkpoint.json"))
        scores = evaluate_instance(model, test, dataset.norm_std, spec,
                                   divergence_threshold)
        r = InstanceResult(
            variant=model.variant, index=index, seed=int(rec["seed"]),
            train_diverged=rec.get("diverged") is not None, scores=scores,
        )
        instances.append(r)
        models[(model.variant, index)] = model
        if progress:
            flag = " (diverged)" if r.diverged else ""
            progress(f"eval {model.variant} seed {index}: mse {scores.mean_mse:.6g}{flag}")
    if not instances:
        raise ValueError(f"no completed runs under {runs_dir!r}")
    report = aggregate_report(instances, dataset.norm_std, test.n_steps, test.delta)
    best_models = {
        v: models[(v, s.best_index)]
        for v, s in report.summaries.items()
        if s.best_index is not None
    }
    return report, best_models


def _fmt(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else f"{x:.17g}"


def render_summary_csv(report: EvalReport) -> str:
    lines = [SUMMARY_HEADER]
    for v, s in report.summaries.items():
        best = s.best_index if s.best_index is not None else ""
        lines.append(
            f"{v},{_fmt(s.mean_mse)},{_fmt(s.std_mse)},{s.retained},{s.diverged},{best}"
        )
    return "\n".join(lines) + "\n"


def render_summary_text(report: EvalReport) -> str:
    header = ("variant", "mean_mse", "std_mse", "retained", "diverged", "best_seed")
    rows = [header]
    for v, s in report.summaries.items():
        rows.append((
            v,
            f"{s.mean_mse:.6f}" if math.isfinite(s.mean_mse) else "nan",
            f"{s.std_mse:.6f}" if math.isfinite(s.std_mse) else "nan",
            str(s.retained),
            str(s.diverged),
            str(s.best_index) if s.best_index is not None else "-",
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    out = []
    for r in rows:
        out.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(out) + "\n"


def report_to_dict(report: EvalReport) -> dict:
    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None
        return x

    return {
        "n_test_steps": report.n_test_steps,
        "delta": report.delta,
        "norm_std": [float(s) for s in report.norm_std],
        "summaries": {
            v: {
                "variant": s.variant,
                "n_instances": s.n_instances,
                "mean_mse": clean(s.mean_mse),
                "std_mse": clean(s.std_mse),
                "retained": s.retained,
                "diverged": s.diverged,
                "best_seed": s.best_index,
                "mean_penalty": clean(s.mean_penalty),
                "retained_seeds": list(s.retained_indices),
                "fence": list(s.fence) if s.fence else None,
            }
            for v, s in report.summaries.items()
        },
        "instances": [
            {
                "variant": r.variant,
                "index": r.index,
                "seed": r.seed,
                "train_diverged": r.train_diverged,
                "eval_diverged": bool(r.scores.diverged),
                "mean_mse": clean(r.scores.mean_mse),
                "mean_penalty": clean(r.scores.mean_penalty),
                "traj_mse": [clean(float(x)) for x in r.scores.traj_mse],
                "traj_n_valid": [int(x) for x in r.scores.traj_n_valid],
                "traj_diverged": [bool(x) for x in r.scores.traj_diverged],
            }
            for r in report.instances
        ],
        "ordering": [
            {"name": c.name, "passed": c.passed, "hard": c.hard, "detail": c.detail}
            for c in ordering_checks(report)
        ],
    }


_PLOT_TEMPLATE = """\
# gnuplot template for the exported artifacts.
#   gnuplot -p plot.gp
set datafile separator ","
set key autotitle columnhead
set logscale y
set xlabel "t [s]"
set ylabel "normalized squared residual"
plot for [i=2:*:2] "residual_theta.csv" using 1:i with lines
# Overlays: plot "overlay_<variant>.csv" using 1:2 (truth) and 1:3 (model)
# per channel; columns alternate <channel>_true, <channel>_pred.
"""


def emit_artifacts(report: EvalReport, out_dir, test: TestSet, best_models: dict,
                   extra_meta: dict | None = None,
                   divergence_threshold: float = 1e6):
    """Write the report JSON, summary tables, penalty table, per-channel
    residual series for the best models, and truth-vs-model overlays."""
    os.makedirs(out_dir, exist_ok=True)
    payload = report_to_dict(report)
    if extra_meta:
        payload["meta"] = dict(extra_meta)
    ioutil.atomic_write_text(os.path.join(out_dir, "report.json"),
                             json.dumps(payload, indent=1, sort_keys=True) + "\n")
    ioutil.atomic_write_text(os.path.join(out_dir, "summary.csv"),
                             render_summary_csv(report))
    ioutil.atomic_write_text(os.path.join(out_dir, "summary.txt"),
                             render_summary_text(report))

    pen_lines = ["variant,mean_penalty"]
    for v, s in report.summaries.items():
        pen_lines.append(f"{v},{_fmt(s.mean_penalty)}")
    ioutil.atomic_write_text(os.path.join(out_dir, "penalties.csv"),
                             "\n".join(pen_lines) + "\n")

    # Residual series and overlays need fresh rollouts of the best models.
    n = test.n_steps + 1
    t = np.arange(n) * test.delta
    rollouts = {}
    for v, model in best_models.items():
        rollouts[v] = [
            rollout_model(model, test.outputs[k][0], test.inputs[k], test.delta,
                          test.n_steps, divergence_threshold)
            for k in range(test.n_trajectories)
        ]

    for ch in RESIDUAL_CHANNELS:
        ci = OUTPUT_NAMES.index(ch)
        cols = [t]
        header = ["t"]
        for v in report.summaries:
            if v not in rollouts:
                continue
            per_traj = np.full((test.n_trajectories, n), np.nan)
            for k, res in enumerate(rollouts[v]):
                r = normalized_residuals(res.z, test.outputs[k],
                                         report.norm_std, res.n_valid)
                per_traj[k, : res.n_valid] = r[:, ci] ** 2
            with np.errstate(invalid="ignore"):
                mean = np.nanmean(per_traj, axis=0)
                std = np.nanstd(per_traj, axis=0)
            cols += [mean, std]
            header += [f"{v}_mean", f"{v}_std"]
        lines = [",".join(header)]
        for k in range(n):
            cells = [f"{t[k]:.6f}"] + [f"{col[k]:.17g}" for col in cols[1:]]
            lines.append(",".join(cells))
        ioutil.atomic_write_text(os.path.join(out_dir, f"residual_{ch}.csv"),
                                 "\n".join(lines) + "\n")

    for v, model in best_models.items():
        res = rollouts[v][0]
        y = test.outputs[0]
        header = ["t"]
        cols = [t]
        for ci, ch in enumerate(OUTPUT_NAMES):
            header += [f"{ch}_true", f"{ch}_pred"]
            cols += [y[:, ci], res.z[:, ci]]
        lines = [",".join(header)]
        for k in range(n):
            cells = [f"{t[k]:.6f}"] + [f"{col[k]:.17g}" for col in cols[1:]]
            lines.append(",".join(cells))
        ioutil.atomic_write_text(
            os.path.join(out_dir, f"overlay_{variant_dir(v)}.csv"),
            "\n".join(lines) + "\n")

    ioutil.atomic_write_text(os.path.join(out_dir, "plot.gp"), _PLOT_TEMPLATE)
