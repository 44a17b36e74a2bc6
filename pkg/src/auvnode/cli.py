"""Command-line entry point.

Subcommands mirror the pipeline stages:

  gen-data   simulate the curriculum training set
  train      train the variant-by-seed grid on a stored dataset
  eval       score stored runs on the test protocol and emit artifacts
  report     print stored evaluation results
  full       run everything end to end, resumable at stage boundaries

Shared flags (--config, --seed, --jobs, --preset) are accepted by every
subcommand. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration errors.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .config import (
    AppConfig,
    ConfigError,
    apply_preset,
    config_hash,
    default_config,
    load_config,
    load_truth_params,
)
from .evaluate import (
    build_test_set,
    emit_artifacts,
    evaluate_runs,
    load_test_set,
    ordering_checks,
    render_summary_text,
    save_test_set,
)
from .excitation import build_dataset, load_dataset, save_dataset
from .ioutil import atomic_write_text
from .models import VARIANTS
from .train import run_experiment_grid


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", metavar="FILE",
                     help="INI file overriding the packaged defaults")
    sub.add_argument("--seed", type=int, metavar="S", help="master seed override")
    sub.add_argument("--jobs", type=int, default=os.cpu_count() or 1, metavar="N",
                     help="parallel training workers (default: logical cores)")
    sub.add_argument("--preset", choices=("small", "full"),
                     help="named experiment scale (small: short curriculum, "
                          "3 seeds, 1000-step test rollouts)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="auvnode",
        description="Gray-to-black-box neural-ODE identification of a torpedo-style AUV.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="simulate the curriculum training set")
    _add_common(p)
    p.add_argument("--out", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--schedule", metavar="N1,N2,...",
                   help="horizon steps per batch (overrides config)")
    p.add_argument("--delta", type=float, metavar="DT", help="sample interval [s]")
    p.add_argument("--params", metavar="FILE",
                   help="config file whose [truth_params] replaces the default plant")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the variant-by-seed grid")
    _add_common(p)
    p.add_argument("--variant", default="all", metavar="V",
                   help="comma-separated variant tags, or 'all' (default)")
    p.add_argument("--dataset", required=True, metavar="DIR")
    p.add_argument("--seeds", type=int, metavar="N", help="instances per variant")
    p.add_argument("--out", required=True, metavar="DIR", help="runs directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score stored runs on the test protocol")
    _add_common(p)
    p.add_argument("--runs", required=True, metavar="DIR")
    p.add_argument("--test", required=True, metavar="DIR",
                   help="test-set directory (built from the config when absent)")
    p.add_argument("--dataset", required=True, metavar="DIR",
                   help="training dataset (normalization statistics)")
    p.add_argument("--out", required=True, metavar="DIR", help="artifact directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print stored evaluation results")
    _add_common(p)
    p.add_argument("--eval", required=True, metavar="DIR", dest="eval_dir")
    p.add_argument("--format", choices=("csv", "txt"), default="txt")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("full", help="run the whole pipeline, resumable")
    _add_common(p)
    p.add_argument("--out", metavar="DIR", help="output root (default from config)")
    p.add_argument("--variants", metavar="V1,V2,...",
                   help="restrict the grid to these variants")
    p.set_defaults(func=cmd_full)
    return parser


def _load_cfg(args) -> AppConfig:
    cfg = default_config()
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config!r} does not exist")
        cfg = load_config(args.config, base=cfg)
    cfg = apply_preset(cfg, args.preset)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg.validate()


def _parse_variants(raw: str | None) -> tuple:
    if raw is None or raw == "all":
        return VARIANTS
    out = []
    for tag in raw.split(","):
        tag = tag.strip()
        if tag not in VARIANTS:
            raise ConfigError(f"unknown variant {tag!r} (expected one of {', '.join(VARIANTS)})")
        out.append(tag)
    if not out:
        raise ConfigError("no variants given")
    return tuple(out)


def _parse_schedule(raw: str) -> tuple:
    try:
        return tuple(int(v) for v in raw.split(","))
    except ValueError as e:
        raise ConfigError(f"bad --schedule {raw!r}: {e}") from e


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    truth = cfg.truth
    if args.params:
        if not os.path.exists(args.params):
            raise ConfigError(f"params file {args.params!r} does not exist")
        truth = load_truth_params(args.params)
    dc = cfg.dataset
    if args.schedule:
        dc = dataclasses.replace(dc, schedule=_parse_schedule(args.schedule))
    if args.delta:
        dc = dataclasses.replace(dc, delta=args.delta)
    dc.validate()
    ds = build_dataset(dc.schedule, dc.delta, truth, cfg.seed, cfg.excitation)
    save_dataset(ds, args.out)
    print(f"dataset: {len(ds.batches)} batches, schedule {list(dc.schedule)}, "
          f"delta {dc.delta:g} s, seed {cfg.seed} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    ts = cfg.train
    if args.seeds:
        ts = dataclasses.replace(ts, seeds=args.seeds)
        ts.validate()
    variants = _parse_variants(args.variant)
    ds = load_dataset(args.dataset)
    records = run_experiment_grid(variants, ds, ts, cfg.truth, cfg.seed, args.out,
                                  jobs=args.jobs, config_hash=config_hash(cfg),
                                  progress=print)
    failed = sum(1 for r in records if r["status"] != "ok")
    diverged = sum(1 for r in records if r["status"] == "ok" and r["diverged"])
    print(f"grid: {len(records)} runs, {failed} failed, {diverged} diverged -> {args.out}")
    return 1 if failed == len(records) else 0


def _ensure_test_set(test_dir, cfg: AppConfig):
    if os.path.exists(os.path.join(test_dir, "meta")):
        return load_test_set(test_dir)
    print(f"test set not found, building it in {test_dir}")
    test = build_test_set(cfg.truth, cfg.excitation, cfg.eval, cfg.dataset.delta, cfg.seed)
    save_test_set(test, test_dir)
    return test


def _print_report(report):
    print(render_summary_text(report), end="")
    for c in ordering_checks(report):
        status = "SKIP" if c.passed is None else ("PASS" if c.passed else "FAIL")
        kind = "hard" if c.hard else "soft"
        print(f"ordering [{kind}] {status}: {c.name} ({c.detail})")


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    ds = load_dataset(args.dataset)
    test = _ensure_test_set(args.test, cfg)
    report, best = evaluate_runs(args.runs, test, ds,
                                 divergence_threshold=cfg.train.divergence_threshold,
                                 progress=print)
    emit_artifacts(report, args.out, test, best,
                   extra_meta={"config_hash": config_hash(cfg), "seed": cfg.seed,
                               "version": __version__},
                   divergence_threshold=cfg.train.divergence_threshold)
    _print_report(report)
    print(f"artifacts -> {args.out}")
    return 0


def cmd_report(args) -> int:
    if args.format == "csv":
        path = os.path.join(args.eval_dir, "summary.csv")
        if not os.path.exists(path):
            raise ConfigError(f"no summary.csv under {args.eval_dir!r}; run eval first")
        with open(path, "r", encoding="utf-8") as fh:
            print(fh.read(), end="")
        return 0
    path = os.path.join(args.eval_dir, "summary.txt")
    report_path = os.path.join(args.eval_dir, "report.json")
    if not os.path.exists(path):
        raise ConfigError(f"no summary.txt under {args.eval_dir!r}; run eval first")
    with open(path, "r", encoding="utf-8") as fh:
        print(fh.read(), end="")
    if os.path.exists(report_path):
        with open(report_path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        for c in payload.get("ordering", []):
            status = "SKIP" if c["passed"] is None else ("PASS" if c["passed"] else "FAIL")
            kind = "hard" if c["hard"] else "soft"
            print(f"ordering [{kind}] {status}: {c['name']} ({c['detail']})")
    return 0


def _manifest_path(out_root):
    return os.path.join(out_root, "manifest.json")


def _load_manifest(out_root) -> dict | None:
    path = _manifest_path(out_root)
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_manifest(out_root, manifest: dict):
    atomic_write_text(_manifest_path(out_root), json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def run_full(cfg: AppConfig, out_root, jobs: int = 1, variants=None, progress=print):
    """All stages into one output root; finished stages are skipped.

    Layout: dataset/<name>/, runs/, test/, eval/, manifest.json. Returns
    the evaluation report.
    """
    variants = tuple(variants) if variants else VARIANTS
    os.makedirs(out_root, exist_ok=True)
    chash = config_hash(cfg)
    manifest = _load_manifest(out_root)
    if manifest is None:
        manifest = {"config_hash": chash, "seed": cfg.seed,
                    "version": __version__, "stages": {}}
    elif manifest.get("config_hash") != chash:
        raise ConfigError(
            f"output root {out_root!r} was produced with a different configuration; "
            "use a fresh directory or the original config/seed/preset"
        )
    _write_manifest(out_root, manifest)

    ds_dir = os.path.join(out_root, "dataset", cfg.dataset.name)
    if os.path.exists(os.path.join(ds_dir, "meta")):
        progress(f"[1/4] dataset: reusing {ds_dir}")
        ds = load_dataset(ds_dir)
    else:
        progress(f"[1/4] dataset: building {ds_dir}")
        ds = build_dataset(cfg.dataset.schedule, cfg.dataset.delta, cfg.truth,
                           cfg.seed, cfg.excitation)
        save_dataset(ds, ds_dir)
    manifest["stages"]["dataset"] = True
    _write_manifest(out_root, manifest)

    runs_dir = os.path.join(out_root, "runs")
    progress(f"[2/4] training grid: {len(variants)} variants x {cfg.train.seeds} seeds")
    records = run_experiment_grid(variants, ds, cfg.train, cfg.truth, cfg.seed,
                                  runs_dir, jobs=jobs, config_hash=chash,
                                  progress=progress)
    failed = [r for r in records if r["status"] != "ok"]
    if failed:
        progress(f"warning: {len(failed)} of {len(records)} runs failed")
    manifest["stages"]["train"] = True
    _write_manifest(out_root, manifest)

    test_dir = os.path.join(out_root, "test")
    if os.path.exists(os.path.join(test_dir, "meta")):
        progress(f"[3/4] test set: reusing {test_dir}")
        test = load_test_set(test_dir)
    else:
        progress(f"[3/4] test set: building {test_dir}")
        test = build_test_set(cfg.truth, cfg.excitation, cfg.eval,
                              cfg.dataset.delta, cfg.seed)
        save_test_set(test, test_dir)
    manifest["stages"]["test"] = True
    _write_manifest(out_root, manifest)

    eval_dir = os.path.join(out_root, "eval")
    progress("[4/4] evaluating")
    report, best = evaluate_runs(runs_dir, test, ds,
                                 divergence_threshold=cfg.train.divergence_threshold,
                                 progress=progress)
    emit_artifacts(report, eval_dir, test, best,
                   extra_meta={"config_hash": chash, "seed": cfg.seed,
                               "version": __version__},
                   divergence_threshold=cfg.train.divergence_threshold)
    manifest["stages"]["eval"] = True
    _write_manifest(out_root, manifest)
    return report


def cmd_full(args) -> int:
    cfg = _load_cfg(args)
    out_root = args.out or cfg.out
    variants = _parse_variants(args.variants)
    report = run_full(cfg, out_root, jobs=args.jobs, variants=variants)
    _print_report(report)
    print(f"done -> {out_root}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
