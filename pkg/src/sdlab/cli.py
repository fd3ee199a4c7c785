"""Command-line interface: configs in, run directories and reports out.

Exit codes: 0 success, 2 configuration or validation problem, 3 numerical
abort. Output roots and thread counts can also come from the environment
(DISTILL_OUT_ROOT, DISTILL_THREADS).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .analysis import (check_shift_inequality, corpus_probe_set, emit_report,
                       error_probe_grid, grad_norm_stats, profile_error_curve,
                       spearman)
from .config import RootConfig, apply_overrides, build_config, load_config
from .corpus import build_corpus
from .denoiser import save_denoiser
from .errors import ConfigurationError, NumericalAbort, ValidationError
from .harness import (ablation_sweep, build_run_denoiser, load_record,
                      run_amortized, run_prompt_specific)
from .schedule import build_schedule

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override, repeatable")
    parser.add_argument("--seed", type=int, help="overrides run.seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel runs for sweeps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdlab",
                                     description="score distillation laboratory")
    sub = parser.add_subparsers(dest="verb", required=True)

    verbs = {
        "train-denoiser": "train a toy diffusion model and save its checkpoint",
        "profile-error": "noise-prediction error across probe timesteps",
        "distill": "prompt-specific particle distillation",
        "distill-amortized": "train a conditional generator by distillation",
        "ablate": "sweep one config axis over several values",
        "check-inequality": "compare prediction error at t versus t+dt",
        "report": "summarize finished run directories",
    }
    parsers = {}
    for verb, helptext in verbs.items():
        p = sub.add_parser(verb, help=helptext)
        _add_common(p)
        parsers[verb] = p

    parsers["ablate"].add_argument("--axis", required=True,
                                   help="dotted config key to sweep")
    parsers["ablate"].add_argument("--values", required=True,
                                   help="comma-separated values for the axis")
    parsers["ablate"].add_argument("--seed-policy", choices=("same", "increment"),
                                   default="same")
    parsers["check-inequality"].add_argument(
        "--pairs", default="200:100,400:100,600:100",
        help="comma-separated t:dt pairs")
    parsers["check-inequality"].add_argument("--draws", type=int, default=256)
    parsers["report"].add_argument("runs", nargs="+", help="run directories")
    return parser


def _resolve_config(args) -> RootConfig:
    cfg = load_config(args.config) if args.config else build_config({})
    pairs = list(args.overrides)
    if args.seed is not None:
        pairs.append(f"run.seed={args.seed}")
    return apply_overrides(cfg, pairs) if pairs else cfg


def _resolve_out(args, verb: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("DISTILL_OUT_ROOT", "runs")
    return Path(root) / verb


def _model_for_analysis(cfg: RootConfig, corpus, schedule):
    rng = np.random.default_rng(cfg.run.seed)
    return build_run_denoiser(cfg, corpus, schedule, rng)


def _cmd_train_denoiser(args) -> int:
    cfg = _resolve_config(args)
    out = _resolve_out(args, "train-denoiser")
    out.mkdir(parents=True, exist_ok=True)
    schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta_family)
    corpus = build_corpus(cfg.run.corpus, cfg.run.class_ids)
    if cfg.denoiser.kind == "oracle":
        raise ConfigurationError("the oracle has no parameters to train")
    rng = np.random.default_rng(cfg.run.seed)
    model = build_run_denoiser(cfg, corpus, schedule, rng)
    path = out / "denoiser.pt"
    save_denoiser(model, path)
    print(f"saved {path}")
    return EXIT_OK


def _cmd_profile_error(args) -> int:
    cfg = _resolve_config(args)
    out = _resolve_out(args, "profile-error")
    schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta_family)
    corpus = build_corpus(cfg.run.corpus, cfg.run.class_ids)
    model = _model_for_analysis(cfg, corpus, schedule)
    rng = np.random.default_rng(cfg.run.seed)
    samples, conds = corpus_probe_set(corpus, 16, rng)
    probes = error_probe_grid(cfg.schedule.t_min, cfg.schedule.t_max, 100)
    tag = "oracle" if cfg.denoiser.kind == "oracle" else "pretrained"
    curve = profile_error_curve(model, schedule, samples, conds, probes, rng, tag=tag)
    emit_report(out, curves={tag: curve})
    rho = spearman(curve.timesteps, curve.mean_error)
    print(f"error curve over {len(probes)} probes, spearman(t, error) = {rho:.4f}")
    print(f"wrote {out / f'curve_{tag}.csv'}")
    return EXIT_OK


def _cmd_distill(args, amortized: bool) -> int:
    cfg = _resolve_config(args)
    out = _resolve_out(args, "distill-amortized" if amortized else "distill")
    if amortized:
        record = run_amortized(cfg, out_dir=out)
    else:
        record = run_prompt_specific(cfg, out_dir=out)
    print(f"status {record.status} after {record.iterations_run} iterations "
          f"({record.wall_clock:.1f}s), outputs in {out}")
    if record.status == "numerical_abort":
        print(f"abort detail: {record.extras.get('abort')}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _resolve_out(args, "ablate")
    import yaml

    values = [yaml.safe_load(v) for v in args.values.split(",") if v != ""]
    records = ablation_sweep(cfg, args.axis, values, out_root=out, jobs=args.jobs,
                             seed_policy=args.seed_policy)
    for value, rec in zip(values, records):
        print(f"{args.axis}={value}: {rec.status} ({rec.iterations_run} iters)")
    if records:
        print(f"comparison table: {out / 'comparison.csv'}")
    if any(r.status == "numerical_abort" for r in records):
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_check_inequality(args) -> int:
    cfg = _resolve_config(args)
    out = _resolve_out(args, "check-inequality")
    schedule = build_schedule(cfg.schedule.T, cfg.schedule.beta_family)
    corpus = build_corpus(cfg.run.corpus, cfg.run.class_ids)
    model = _model_for_analysis(cfg, corpus, schedule)
    rng = np.random.default_rng(cfg.run.seed)
    samples, conds = corpus_probe_set(corpus, 16, rng)
    pairs = []
    for chunk in args.pairs.split(","):
        t, dt = chunk.split(":")
        pairs.append((int(t), int(dt)))
    reports = check_shift_inequality(model, schedule, samples, conds, pairs,
                                     args.draws, rng)
    emit_report(out, tables={"inequality": reports})
    for rep in reports:
        mark = "pass" if rep["passes"] else "FAIL"
        print(f"t={rep['t']} dt={rep['dt']}: err(t)={rep['err_t']:.5f} "
              f"err(t+dt)={rep['err_shifted']:.5f} {mark}")
    return EXIT_OK


def _cmd_report(args) -> int:
    out = _resolve_out(args, "report")
    records = [load_record(d) for d in args.runs]
    tables = {}
    try:
        tables["grad_norms"] = grad_norm_stats(records)
    except ValidationError:
        pass  # mixed scenes: still emit the per-run summary
    manifest = emit_report(out, records=records, tables=tables)
    print(f"report over {len(records)} runs -> {out} ({len(manifest)} files)")
    return EXIT_OK


_DISPATCH = {
    "train-denoiser": _cmd_train_denoiser,
    "profile-error": _cmd_profile_error,
    "distill": lambda a: _cmd_distill(a, amortized=False),
    "distill-amortized": lambda a: _cmd_distill(a, amortized=True),
    "ablate": _cmd_ablate,
    "check-inequality": _cmd_check_inequality,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    threads = os.environ.get("DISTILL_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help; keep its code
        return int(exc.code or 0)
    try:
        return _DISPATCH[args.verb](args)
    except (ConfigurationError, ValidationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
