"""Command-line interface: one subcommand per stage plus ``run-pipeline``.

Every command prints one JSON status object on stdout. Exit codes: 0 ok, 2 missing or
unreadable artifact, 3 invalid configuration, 4 numeric failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, run_dir_name
from .data import ParseError
from .diffusion import SamplingError
from .metrics import MetricError
from .numcore import ConfigError, TrainingError
from .pipeline import STREAMS, PipelineConfig
from .runs import (
    Run,
    StageError,
    run_pipeline,
    step_evaluate,
    step_gen_data,
    step_pseudo_label,
    step_refine,
    step_retrain_probe,
    step_sample,
    step_sample_class,
    step_train_classifier,
    step_train_diffusion,
    write_config,
)
from .ssl_classifier import NumericError

OUTPUT_ROOT_ENV = "DPT_OUTPUT_ROOT"

EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC = 2, 3, 4

SEED_HELP = "Random streams: each stage draws from SeedSequence([seed, offset]) with offsets " + ", ".join(
    f"{k}={v}" for k, v in STREAMS.items()) + ". Sample i of class c uses a child of the " \
    "diffusion_sample stream with spawn key (c, i), so S2 rows do not depend on K."


def _category(e: BaseException) -> tuple[int, str]:
    if isinstance(e, StageError):
        e = e.cause
    if isinstance(e, (FileNotFoundError, ParseError)):
        return EXIT_MISSING, "missing_artifact"
    if isinstance(e, ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(e, (TrainingError, NumericError, SamplingError, MetricError, FloatingPointError)):
        return EXIT_NUMERIC, "numeric"
    if isinstance(e, ValueError) and "checkpoint" in str(e):
        return EXIT_MISSING, "missing_artifact"
    return 1, "internal"


def _parse_grid(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--k-grid expects comma-separated integers, got {text!r}") from None


def resolve(args) -> tuple[PipelineConfig, Path]:
    rc = RunConfig.load(args.config) if args.config else RunConfig(PipelineConfig())
    cfg = rc.pipeline
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "k_grid", None):
        cfg.k_grid = _parse_grid(args.k_grid)
    cfg.validate()
    if args.run_dir:
        root = Path(args.run_dir)
    else:
        base = rc.output_dir or os.environ.get(OUTPUT_ROOT_ENV) or "runs"
        root = Path(base) / run_dir_name(cfg)
    return cfg, root


def cmd_gen_data(run, args):
    return step_gen_data(run)


def cmd_train_classifier(run, args):
    return step_train_classifier(run)


def cmd_pseudo_label(run, args):
    return step_pseudo_label(run, args.probe or "stage1/probe.json", args.out or "stage1/s1.csv")


def cmd_train_diffusion(run, args):
    return step_train_diffusion(run, args.s1 or "stage1/s1.csv", args.out or "stage2/denoiser.json", args.init)


def cmd_sample(run, args):
    if args.cls is not None:
        if args.n is None:
            raise ConfigError("--class requires --n")
        return step_sample_class(run, args.cls, args.n, args.out or f"samples/class{args.cls}_n{args.n}.csv")
    return step_sample(run, args.n, out=args.out or "stage2/s2.csv")


def cmd_retrain_probe(run, args):
    ks = [args.k] if args.k is not None else run.cfg.k_values()
    out = []
    for K in ks:
        out += step_retrain_probe(run, K)
    return out


def cmd_refine(run, args):
    return step_refine(run, args.rounds)


def cmd_evaluate(run, args):
    return step_evaluate(run, args.before or "stage1/probe.json", args.after)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpt", description=__doc__.split("\n")[0], epilog=SEED_HELP,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="master seed; overrides the config value. " + SEED_HELP)
    common.add_argument("--run-dir", help=f"run directory; default ${OUTPUT_ROOT_ENV}/<config hash>-seed<seed> "
                                          "(output_dir from the config takes precedence over the env var; "
                                          "falls back to ./runs)")
    common.add_argument("--k-grid", help="comma-separated K values, e.g. 12,128,256; stage-1/2 artifacts are shared")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_, epilog=SEED_HELP)
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate the mixture benchmark and the labeled/unlabeled split")
    add("train-classifier", cmd_train_classifier, "stage 1: self-supervised encoder and linear probe")
    sp = add("pseudo-label", cmd_pseudo_label, "stage 1: label every real item with a probe (writes S1)")
    sp.add_argument("--probe", help="probe checkpoint relative to the run dir (default stage1/probe.json)")
    sp.add_argument("--out")
    sp = add("train-diffusion", cmd_train_diffusion, "stage 2: train the conditional denoiser on S1")
    sp.add_argument("--s1", help="S1 CSV relative to the run dir")
    sp.add_argument("--init", help="denoiser checkpoint to continue from")
    sp.add_argument("--out")
    sp = add("sample", cmd_sample, "stage 2: write S2 (or --n samples of one --class)")
    sp.add_argument("--class", dest="cls", type=int)
    sp.add_argument("--n", type=int, help="samples per class (default: largest K)")
    sp.add_argument("--out")
    sp = add("retrain-probe", cmd_retrain_probe, "stage 3: fresh probe on S plus the first K samples per class")
    sp.add_argument("--k", type=int, help="single K (default: every K of the grid)")
    sp = add("refine", cmd_refine, "stage 4: relabel, retrain the denoiser, resample, retrain the probe")
    sp.add_argument("--rounds", type=int)
    sp = add("evaluate", cmd_evaluate, "metrics and sorted per-class precision/recall deltas")
    sp.add_argument("--before", help="probe checkpoint (default stage1/probe.json)")
    sp.add_argument("--after", help="probe checkpoint (default stage3 probe at K)")
    sp = add("run-pipeline", None, "all stages in order, with manifest")
    sp.add_argument("--reuse", action="store_true", help="keep existing data, stage-1 and stage-2 training outputs")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    status = {"command": args.command}
    try:
        cfg, root = resolve(args)
        status["run_dir"] = str(root)
        if args.command == "run-pipeline":
            manifest = run_pipeline(cfg, root, reuse=args.reuse)
            failed = [c["name"] for c in manifest["checks"] if not c["passed"]]
            status.update(status="ok", manifest=str(root / "manifest.json"),
                          artifacts=sorted(manifest["artifacts"]), failed_checks=failed)
        else:
            run = Run(root, cfg)
            root.mkdir(parents=True, exist_ok=True)
            written = [] if run.path("config.json").exists() else [write_config(run)]
            written += args.fn(run, args)
            status.update(status="ok", artifacts=written)
    except Exception as e:  # noqa: BLE001 - mapped to an exit code below
        code, category = _category(e)
        status.update(status="error", category=category, error=str(e))
        if isinstance(e, StageError):
            status["stage"] = e.stage
        if code == 1:
            logging.getLogger("dpt").exception("unexpected failure")
        print(json.dumps(status, sort_keys=True))
        return code
    print(json.dumps(status, sort_keys=True))
    return 0

