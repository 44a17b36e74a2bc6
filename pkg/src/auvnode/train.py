"""Curriculum training, checkpoints, and the variant-by-seed grid.

One run trains one model instance through the horizon curriculum: batch i
uses the i-th dataset trajectory, the learning rate decays by a fixed
factor per batch, and the best-loss parameters within a batch are restored
before moving on (plateau patience cuts dead epochs). The boundary penalty
is enabled for the constrained blackbox only; spectrally banded variants
are re-projected after every optimizer step, so the bound holds at every
point of training, not just at the end.

A diverged rollout (non-finite state, magnitude blow-up, or a pitch-pole
hit) flags the run with its batch/epoch, stops it, and keeps the last
checkpoint; the surrounding grid keeps going.

Checkpoints are versioned JSON. Arrays are base64 of raw little-endian
float64, row-major, so state round-trips bit-exactly; nothing in the file
depends on wall time, which keeps reruns byte-identical.
"""

import base64
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ioutil
from .config import TrainSettings
from .constraints import ConstraintSpec, default_constraint_spec
from .excitation import Dataset
from .models import (
    BlackboxModel,
    GrayboxModel,
    GrayboxParams,
    HybridModel,
    IoScales,
    TrainableModel,
    build_model,
    variant_dir,
)
from .ndiff import (
    AdamWState,
    DivergedRollout,
    Mlp,
    SpectralBounds,
    SpectralProjectionError,
    adamw_step,
    bptt_trajectory_grad,
    clip_gradients,
)
from .plant import IY_PSI, TruthParams, wrap_angles
from .seeding import derive_seed

CHECKPOINT_FORMAT = "auvnode-checkpoint"
CHECKPOINT_VERSION = 2

LOG_COLUMNS = ("batch", "epoch", "loss", "penalty", "grad_norm", "wall_ms")

# floor for measured spreads; a near-constant channel must not blow up
# the normalized inputs
SCALE_FLOOR = 1e-6


def dataset_io_scales(dataset: Dataset) -> IoScales:
    """Network coordinate scales measured on the training batches.

    Inputs: per-channel std of the outputs and of the commands. Outputs:
    per-channel max |rate| from one-step forward differences (psi
    differenced with wrapping), so no derivative oracle is involved. The
    max, not the std, sets the output scale: a unit network output must
    cover the fastest rate seen in training, otherwise the spectrally
    banded variants cannot reach the stiff channels at all.
    Deterministic in the dataset, so checkpoints reproduce bit-exactly.
    """
    zs = np.concatenate([b.outputs for b in dataset.batches])
    us = np.concatenate([b.inputs for b in dataset.batches])
    rates = []
    for b in dataset.batches:
        dz = np.diff(b.outputs, axis=0)
        dz[:, IY_PSI] = wrap_angles(dz[:, IY_PSI])
        rates.append(dz / dataset.delta)
    rates = np.concatenate(rates)
    in_scale = np.concatenate([zs.std(axis=0), us.std(axis=0)])
    return IoScales(np.maximum(in_scale, SCALE_FLOOR),
                    np.maximum(np.abs(rates).max(axis=0), SCALE_FLOOR))


def encode_array(a: np.ndarray) -> str:
    """base64 of the raw little-endian float64 row-major buffer."""
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def decode_array(s: str, shape) -> np.ndarray:
    a = np.frombuffer(base64.b64decode(s.encode("ascii")), dtype="<f8")
    expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if a.size != expected:
        raise ValueError(f"array payload has {a.size} values, expected {expected}")
    return a.astype(np.float64).reshape(shape)


def model_to_payload(model: TrainableModel) -> dict:
    d = {"kind": model.kind, "variant": model.variant}
    if model.mlp is not None:
        d["mlp"] = {
            "dims": list(model.mlp.dims),
            "weights": [encode_array(w) for w in model.mlp.weights],
            "biases": [encode_array(b) for b in model.mlp.biases],
        }
        d["scales"] = {
            "in": encode_array(model.scales.in_scale),
            "out": encode_array(model.scales.out_scale),
        }
    if model.graybox is not None:
        d["graybox"] = {
            "mu": encode_array(model.graybox.mu),
            "k_delay": encode_array(model.graybox.k_delay),
        }
    if model.bounds is not None:
        d["bounds"] = [model.bounds.sigma_min, model.bounds.sigma_max]
    if model.e_mu is not None:
        d["e_mu"] = model.e_mu
    return d


def model_from_payload(d: dict) -> TrainableModel:
    kind = d["kind"]
    mlp = None
    scales = None
    if "mlp" in d:
        dims = tuple(d["mlp"]["dims"])
        weights = [
            decode_array(s, (dims[i + 1], dims[i]))
            for i, s in enumerate(d["mlp"]["weights"])
        ]
        biases = [
            decode_array(s, (dims[i + 1],)) for i, s in enumerate(d["mlp"]["biases"])
        ]
        mlp = Mlp(dims, weights, biases)
        scales = IoScales(
            in_scale=decode_array(d["scales"]["in"], (dims[0],)),
            out_scale=decode_array(d["scales"]["out"], (dims[-1],)),
        )
    graybox = None
    if "graybox" in d:
        graybox = GrayboxParams(
            mu=decode_array(d["graybox"]["mu"], (8,)),
            k_delay=decode_array(d["graybox"]["k_delay"], (3,)),
        )
    bounds = SpectralBounds(*d["bounds"]) if "bounds" in d else None
    if kind == "blackbox":
        return BlackboxModel(mlp, scales=scales)
    if kind == "cblackbox":
        return BlackboxModel(mlp, bounds, scales)
    if kind == "graybox":
        return GrayboxModel(graybox)
    if kind == "hybrid":
        return HybridModel(graybox, mlp, d["e_mu"], bounds, scales)
    raise ValueError(f"unknown model kind {kind!r}")


def save_checkpoint(path, model: TrainableModel, opt: AdamWState | None, meta: dict):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model_to_payload(model),
        "meta": dict(meta),
    }
    if opt is not None:
        payload["optimizer"] = {
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "weight_decay": opt.weight_decay,
            "step": opt.step,
            "m": [encode_array(a) for a in opt.m],
            "v": [encode_array(a) for a in opt.v],
            "decay_mask": [bool(x) for x in opt.decay_mask],
            "lr_scale": [None if s is None else encode_array(np.asarray(s, dtype=float))
                         for s in (opt.lr_scale or [None] * len(opt.m))],
        }
    ioutil.atomic_write_text(os.fspath(path), json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Returns (model, optimizer_state_or_None, meta)."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    model = model_from_payload(payload["model"])
    opt = None
    if "optimizer" in payload:
        o = payload["optimizer"]
        arrays = model.trainable_arrays()
        opt = AdamWState(
            lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
            weight_decay=o["weight_decay"], step=o["step"],
            m=[decode_array(s, a.shape) for s, a in zip(o["m"], arrays)],
            v=[decode_array(s, a.shape) for s, a in zip(o["v"], arrays)],
            decay_mask=list(o["decay_mask"]),
            lr_scale=[None if s is None else decode_array(s, a.shape)
                      for s, a in zip(o.get("lr_scale", [None] * len(arrays)),
                                      arrays)],
        )
    return model, opt, payload.get("meta", {})


@dataclass
class TrainRun:
    """Outcome of one training run."""

    variant: str
    seed: int
    loss_history: list = field(default_factory=list)  # per batch, per epoch
    diverged: tuple | None = None                     # (batch, epoch) or None
    wall_time_s: float = 0.0

    @property
    def final_loss(self) -> float | None:
        for batch in reversed(self.loss_history):
            for loss in reversed(batch):
                if math.isfinite(loss):
                    return loss
        return None


def variant_penalty_weight(variant: str, ts: TrainSettings) -> float:
    """Boundary penalty applies to the constraint-informed blackbox only."""
    return ts.penalty_weight if variant == "cblackbox" else 0.0


def variant_lr(variant: str, ts: TrainSettings) -> float:
    return ts.graybox_lr if variant == "graybox" else ts.lr


def train_model(variant: str, dataset: Dataset, ts: TrainSettings, seed: int,
                truth: TruthParams, constraint: ConstraintSpec | None = None,
                log_path=None, step_callback=None):
    """Train one instance through the curriculum.

    Returns (model, opt, TrainRun). `step_callback(model, batch, epoch)`,
    when given, fires after every optimizer step (and projection), which
    is how invariants like the spectral band are audited mid-training.
    """
    rng = np.random.default_rng(seed)
    model = build_model(variant, truth, rng, ts.cbb_sigma, ts.hybrid_sigma,
                        io_scales=dataset_io_scales(dataset))
    spec = constraint if constraint is not None else default_constraint_spec()
    pen_w = variant_penalty_weight(variant, ts)
    lr0 = variant_lr(variant, ts)

    arrays = model.trainable_arrays()
    # Physical coefficients span two orders of magnitude, so the graybox
    # steps in proportion to each coefficient's scale (a param-group lr);
    # the floor keeps a near-zero coefficient trainable.
    lr_scale = None
    if variant == "graybox":
        lr_scale = [np.maximum(np.abs(truth.mu), 1e-2)]

    def fresh_opt(batch_index):
        return AdamWState.for_arrays(
            arrays, lr=lr0 * ts.lr_batch_decay**batch_index,
            weight_decay=ts.weight_decay, decay_mask=model.decay_mask(),
            lr_scale=lr_scale)

    opt = fresh_opt(0)
    run = TrainRun(variant=variant, seed=seed)
    t_start = time.perf_counter()

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if log_fh:
            log_fh.write("\t".join(LOG_COLUMNS) + "\n")
        for bi, batch in enumerate(dataset.batches):
            # each batch is solved as its own problem: fresh moments, lower lr
            opt = fresh_opt(bi)
            z0 = batch.outputs[0]
            u = batch.inputs[: batch.n_steps]
            y = batch.outputs
            best_loss = math.inf
            best_params = [a.copy() for a in arrays]
            wait = 0
            losses = []
            for epoch in range(ts.epochs):
                t0 = time.perf_counter()
                try:
                    res = bptt_trajectory_grad(
                        model, z0, u, y, dataset.delta, spec, pen_w,
                        ts.divergence_threshold,
                    )
                except DivergedRollout:
                    run.diverged = (bi, epoch)
                    break
                if not math.isfinite(res.loss):
                    run.diverged = (bi, epoch)
                    break
                # res.loss belongs to the pre-step params: snapshot them now
                improved = (
                    res.loss < best_loss - max(1e-12, 1e-6 * abs(best_loss))
                    if math.isfinite(best_loss)
                    else True
                )
                if improved:
                    best_loss = res.loss
                    for dst, src in zip(best_params, arrays):
                        np.copyto(dst, src)
                    wait = 0
                else:
                    wait += 1
                    if wait >= ts.patience:
                        losses.append(res.loss)
                        break
                gnorm = clip_gradients(res.grads, ts.grad_clip)
                adamw_step(arrays, res.grads, opt)
                try:
                    model.project()
                except SpectralProjectionError:
                    run.diverged = (bi, epoch)
                    break
                if step_callback is not None:
                    step_callback(model, bi, epoch)
                wall_ms = (time.perf_counter() - t0) * 1e3
                if log_fh:
                    log_fh.write(
                        f"{bi}\t{epoch}\t{res.loss:.17g}\t{res.penalty:.17g}"
                        f"\t{gnorm:.17g}\t{wall_ms:.3f}\n"
                    )
                losses.append(res.loss)
            for dst, src in zip(arrays, best_params):
                np.copyto(dst, src)
            run.loss_history.append(losses)
            if log_fh:
                log_fh.flush()
            if run.diverged is not None:
                break
    finally:
        if log_fh:
            log_fh.close()
    run.wall_time_s = time.perf_counter() - t_start
    return model, opt, run


def _run_record(variant, index, seed, run: TrainRun | None, checkpoint,
                config_hash="", error=None) -> dict:
    rec = {
        "variant": variant,
        "index": index,
        "seed": seed,
        "status": "failed" if error else "ok",
        "diverged": list(run.diverged) if run and run.diverged else None,
        "wall_time_s": run.wall_time_s if run else None,
        "final_loss": run.final_loss if run else None,
        "checkpoint": os.path.basename(checkpoint) if checkpoint else None,
        "config_hash": config_hash,
    }
    if error:
        rec["error"] = error
    return rec


def _run_one(args) -> dict:
    (variant, index, seed, run_dir, dataset, ts, truth, cfg_hash) = args
    os.makedirs(run_dir, exist_ok=True)
    ckpt = os.path.join(run_dir, "checkpoint.json")
    try:
        model, opt, run = train_model(
            variant, dataset, ts, seed, truth,
            log_path=os.path.join(run_dir, "train_log.tsv"),
        )
        meta = {
            "variant": variant,
            "index": index,
            "seed": seed,
            "config_hash": cfg_hash,
            "diverged": list(run.diverged) if run.diverged else None,
        }
        save_checkpoint(ckpt, model, opt, meta)
        rec = _run_record(variant, index, seed, run, ckpt, cfg_hash)
    except Exception as e:  # a failed run must not sink the grid
        rec = _run_record(variant, index, seed, None, None, cfg_hash, error=str(e))
    ioutil.atomic_write_text(
        os.path.join(run_dir, "run.json"), json.dumps(rec, sort_keys=True) + "\n"
    )
    return rec


def run_experiment_grid(variants, dataset: Dataset, ts: TrainSettings,
                        truth: TruthParams, master_seed: int, out_dir,
                        jobs: int = 1, config_hash: str = "",
                        progress=None) -> list:
    """Train `ts.seeds` instances per variant; returns one record per run.

    Run seeds derive from (master_seed, "train", variant, index), so any
    single run can be reproduced in isolation and results do not depend
    on worker count. Runs whose run.json already exists are skipped
    (stage-level resume). Individual failures are recorded and the grid
    continues.
    """
    os.makedirs(out_dir, exist_ok=True)
    pending = []
    records = {}
    for variant in variants:
        for index in range(ts.seeds):
            run_dir = os.path.join(out_dir, variant_dir(variant), f"seed_{index}")
            marker = os.path.join(run_dir, "run.json")
            key = (variant, index)
            if os.path.exists(marker):
                with open(marker, "r", encoding="utf-8") as fh:
                    records[key] = json.load(fh)
                if progress:
                    progress(f"skip {variant} seed {index} (already trained)")
                continue
            seed = derive_seed(master_seed, "train", variant, index)
            pending.append((variant, index, seed, run_dir, dataset, ts, truth, config_hash))

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(_run_one, pending):
                records[(rec["variant"], rec["index"])] = rec
                if progress:
                    progress(_describe(rec))
    else:
        for args in pending:
            rec = _run_one(args)
            records[(rec["variant"], rec["index"])] = rec
            if progress:
                progress(_describe(rec))

    ordered = []
    for variant in variants:
        for index in range(ts.seeds):
            ordered.append(records[(variant, index)])
    return ordered


def _describe(rec: dict) -> str:
    tag = f"{rec['variant']} seed {rec['index']}"
    if rec["status"] != "ok":
        return f"FAILED {tag}: {rec.get('error', '?')}"
    if rec["diverged"]:
        b, e = rec["diverged"]
        return f"done {tag} (diverged at batch {b}, epoch {e})"
    loss = rec["final_loss"]
    return f"done {tag} (loss {loss:.6g})" if loss is not None else f"done {tag}"
