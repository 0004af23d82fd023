"""Command-line entry points.

Subcommands: generate, plan, verify-plan, pretrain, finetune, evaluate,
report, run. Exit codes: 0 success, 1 leakage/verification failure,
2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .data import DataFormatError
from .experiment import (
    ConfigError,
    build_cohort,
    bundle_from_run_files,
    emit_plans,
    experiment_paths,
    generate_dataset,
    load_config_file,
    load_experiment_checkpoints,
    run_experiment,
    run_phase1,
    run_phase2,
    verify_plan_files,
)
from .report import emit_tables
from .stratify import PlanError, load_plan, verify_no_leakage
from .train import LeakageError, RunResult, evaluate_checkpoint

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

logger = logging.getLogger(__name__)


def _add_common(parser):
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--workers", type=int, default=None,
                        help="override the worker count")
    parser.add_argument("--out", default="out", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sleepstager",
        description="Two-stage demographically stratified sleep-stage "
                    "classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
            ("generate", "write the synthetic cohort as dataset files"),
            ("plan", "emit phase-1 and per-subgroup fold plans"),
            ("pretrain", "run phase-1 pretraining"),
            ("finetune", "run phase-2 subgroup fine-tuning"),
            ("evaluate", "re-evaluate stored checkpoints on their test folds"),
            ("report", "aggregate persisted run results into tables"),
            ("run", "full pipeline: plan, pretrain, finetune, report")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name in ("report", "run"):
            p.add_argument("--format", choices=("markdown", "csv"),
                           action="append", default=None,
                           help="report format (repeatable)")

    p = sub.add_parser("verify-plan", help="check plan files for leakage")
    _add_common(p)
    p.add_argument("plans", nargs="*",
                   help="plan files (defaults to the run's plans directory)")
    return parser


def _load(args):
    return load_config_file(args.config, seed=args.seed, workers=args.workers)


def _formats(args, config):
    if getattr(args, "format", None):
        return tuple(dict.fromkeys(args.format))
    return config.report_formats


def cmd_generate(args):
    config = _load(args)
    manifest = generate_dataset(config, args.out)
    print(f"wrote dataset manifest {manifest}")
    return EXIT_OK


def cmd_plan(args):
    config = _load(args)
    paths, phase1, plans, skipped = emit_plans(config, args.out)
    print(f"phase-1 plan: {paths.phase1_plan()} ({phase1.k} folds)")
    for key, plan in plans:
        print(f"subgroup {key.label}: {len(plan.folds)} folds "
              f"-> {paths.subgroup_plan(key)}")
    for key, reason in skipped:
        print(f"skipped {key.label}: {reason}")
    return EXIT_OK


def cmd_verify_plan(args):
    config = _load(args)
    if args.plans:
        plan_paths = args.plans
    else:
        paths = experiment_paths(config, args.out)
        plan_paths = sorted(paths.plans.glob("*.json"))
        if not plan_paths:
            print(f"no plan files under {paths.plans}", file=sys.stderr)
            return EXIT_CONFIG
    violations, n_plans = verify_plan_files(plan_paths)
    if violations:
        for v in violations:
            print(str(v))
        print(f"{len(violations)} violation(s) across {n_plans} plan file(s)")
        return EXIT_VERIFICATION
    print(f"{n_plans} plan file(s) verified: no leakage")
    return EXIT_OK


def cmd_pretrain(args):
    config = _load(args)
    paths = experiment_paths(config, args.out)
    cohort = build_cohort(config)
    phase1, checkpoints, baselines = run_phase1(config, cohort, paths)
    for result in baselines:
        print(f"fold {result.fold_index}: baseline kappa "
              f"{result.report.kappa:.3f} on {result.n_test_subjects} subjects")
    print(f"{len(checkpoints)} checkpoints under {paths.checkpoints}")
    return EXIT_OK


def cmd_finetune(args):
    config = _load(args)
    paths = experiment_paths(config, args.out)
    cohort = build_cohort(config)
    phase1 = load_plan(paths.phase1_plan())
    checkpoints = load_experiment_checkpoints(paths, phase1)
    by_subgroup, skipped, requested = run_phase2(config, cohort, phase1,
                                                 checkpoints, paths)
    for key, results in by_subgroup.items():
        kappas = ", ".join(f"{r.report.kappa:.3f}" for r in results)
        print(f"{key.label}: fold kappas [{kappas}]")
    for key, reason in skipped:
        print(f"skipped {key.label}: {reason}")
    print(f"{len(requested)} subgroups requested, "
          f"{len(by_subgroup)} fine-tuned, {len(skipped)} skipped")
    return EXIT_OK


def cmd_evaluate(args):
    config = _load(args)
    paths = experiment_paths(config, args.out)
    cohort = build_cohort(config)
    phase1 = load_plan(paths.phase1_plan())
    checkpoints = load_experiment_checkpoints(paths, phase1)
    for ckpt, fold in zip(checkpoints, phase1.folds):
        report = evaluate_checkpoint(ckpt, cohort, fold.test)
        result = RunResult(
            subgroup_label="Baseline", fold_index=fold.index,
            checkpoint_index=fold.index, report=report, baseline_report=None,
            n_test_subjects=len(fold.test), test_subjects=tuple(fold.test))
        out = paths.run_file("baseline", fold.index)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result.to_dict(), sort_keys=True, indent=2)
                       + "\n", encoding="utf-8")
        print(f"fold {fold.index}: accuracy {report.accuracy:.3f}, "
              f"kappa {report.kappa:.3f} -> {out}")
    return EXIT_OK


def cmd_report(args):
    config = _load(args)
    paths = experiment_paths(config, args.out)
    cohort = build_cohort(config)
    bundle = bundle_from_run_files(config, cohort, paths)
    written = emit_tables(bundle, paths.reports, formats=_formats(args, config))
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_run(args):
    config = _load(args)
    if getattr(args, "format", None):
        config = dataclasses.replace(config,
                                     report_formats=_formats(args, config))
    bundle, paths, accounting = run_experiment(config, args.out)
    print(f"run id {paths.run_id}")
    print(f"subgroups: {accounting['requested']} requested, "
          f"{accounting['emitted']} emitted, {accounting['skipped']} skipped")
    for label, reason in bundle.skipped:
        print(f"skipped {label}: {reason}")
    print(f"reports under {paths.reports}")
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "plan": cmd_plan,
    "verify-plan": cmd_verify_plan,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataFormatError, PlanError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LeakageError as exc:
        print(f"leakage: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
