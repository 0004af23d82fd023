"""Config-driven orchestration of the full two-stage experiment.

A single JSON config declares the dataset (synthetic spec or manifest),
model geometry, per-phase training settings and the stratification axes
to fine-tune. run_experiment() plans folds, refuses to train unless the
plans verify leakage-free, pretrains one checkpoint per Phase-1 fold,
fine-tunes every eligible subgroup from its compatible checkpoints, and
persists plans, checkpoints, run results and report tables under a
content-addressed run id so identical config+seed reruns are
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .autodiff import OptimConfig
from .data import (
    Cohort,
    SyntheticCohortSpec,
    generate_synthetic_cohort,
    load_cohort,
    write_cohort,
)
from .model import ModelConfig
from .report import (
    AxisTable,
    ReportBundle,
    ReportRow,
    aggregate_fold_reports,
    emit_tables,
)
from .stratify import (
    ALL_AXES,
    Phase1Plan,
    StratAxis,
    PlanError,
    load_plan,
    plan_phase1,
    plan_phase2_for_subgroup,
    save_plan,
    stratify,
    verify_no_leakage,
)
from .train import (
    Checkpoint,
    LeakageError,
    Phase,
    RunResult,
    TrainConfig,
    evaluate_checkpoint,
    finetune,
    fit,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """The experiment config is structurally or semantically invalid."""


def _expect(payload, key, kind, where, default=None, required=False):
    if key not in payload:
        if required:
            raise ConfigError(f"{where}.{key}: required field missing")
        return default
    value = payload[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(
            f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}")
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    workers: int
    synthetic_spec: SyntheticCohortSpec | None
    manifest_path: str | None
    model: ModelConfig
    pretrain_config: TrainConfig
    finetune_config: TrainConfig
    axes: tuple[StratAxis, ...]
    phase1_folds: int = 5
    single_axis_folds: int = 5
    two_way_folds: int = 3
    validation_fraction: float = 0.10
    min_subgroup_size: int = 4
    min_subgroup_folds: int = 2
    aggregation: str = "mean"
    report_formats: tuple[str, ...] = ("markdown", "csv")
    raw: dict = field(default_factory=dict, compare=False)

    def max_folds_for(self, axis):
        return self.two_way_folds if axis.is_two_way else self.single_axis_folds

    def run_id(self):
        canonical = json.dumps(
            {"config": self.raw, "seed": self.seed},
            sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _parse_train_section(payload, where, phase, seed):
    defaults = (TrainConfig.pretrain_defaults if phase is Phase.PRETRAIN
                else TrainConfig.finetune_defaults)(seed=seed)
    if payload is None:
        return defaults
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object")
    opt = defaults.optimizer
    opt_fields = {
        "learning_rate": _expect(payload, "learning_rate", float, where,
                                 default=opt.learning_rate),
        "adam_beta1": _expect(payload, "adam_beta1", float, where,
                              default=opt.adam_beta1),
        "adam_beta2": _expect(payload, "adam_beta2", float, where,
                              default=opt.adam_beta2),
        "adam_epsilon": _expect(payload, "adam_epsilon", float, where,
                                default=opt.adam_epsilon),
        "max_grad_norm": _expect(payload, "max_grad_norm", float, where,
                                 default=opt.max_grad_norm),
        "plateau_factor": _expect(payload, "plateau_factor", float, where,
                                  default=opt.plateau_factor),
        "plateau_patience": _expect(payload, "plateau_patience", int, where,
                                    default=opt.plateau_patience),
        "early_stop_patience": _expect(payload, "early_stop_patience", int,
                                       where, default=opt.early_stop_patience),
        "min_improvement": _expect(payload, "min_improvement", float, where,
                                   default=opt.min_improvement),
    }
    try:
        optimizer = OptimConfig(**opt_fields)
        return replace(
            defaults,
            optimizer=optimizer,
            batch_size=_expect(payload, "batch_size", int, where,
                               default=defaults.batch_size),
            max_epochs=_expect(payload, "max_epochs", int, where,
                               default=defaults.max_epochs),
            early_stopping=_expect(payload, "early_stopping", bool, where,
                                   default=defaults.early_stopping),
            inherit_norm_stats=_expect(payload, "inherit_norm_stats", bool,
                                       where, default=defaults.inherit_norm_stats),
            freeze_feature_extractor=_expect(
                payload, "freeze_feature_extractor", bool, where,
                default=defaults.freeze_feature_extractor),
            window_stride=_expect(payload, "window_stride", int, where,
                                  default=defaults.window_stride))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(payload, where="config"):
    """Validate a config dict into an ExperimentConfig.

    Errors name the offending field path.
    """
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    seed = _expect(payload, "seed", int, where, default=0)
    workers = _expect(payload, "workers", int, where, default=1)
    if workers < 1:
        raise ConfigError(f"{where}.workers: must be >= 1")

    dataset = _expect(payload, "dataset", dict, where, required=True)
    synthetic_spec = None
    manifest_path = None
    if "synthetic" in dataset:
        try:
            synthetic_spec = SyntheticCohortSpec.from_dict(
                _expect(dataset, "synthetic", dict, f"{where}.dataset",
                        required=True))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{where}.dataset.synthetic: {exc}") from exc
    elif "manifest" in dataset:
        manifest_path = _expect(dataset, "manifest", str, f"{where}.dataset",
                                required=True)
    else:
        raise ConfigError(
            f"{where}.dataset: needs either a 'synthetic' spec or a "
            f"'manifest' path")

    model_payload = _expect(payload, "model", dict, where, default={})
    try:
        model = ModelConfig.from_dict({**ModelConfig().to_dict(), **model_payload})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}.model: {exc}") from exc
    if synthetic_spec is not None:
        if (model.n_channels != synthetic_spec.n_channels
                or model.samples_per_epoch != synthetic_spec.samples_per_epoch):
            raise ConfigError(
                f"{where}.model: geometry ({model.n_channels} ch x "
                f"{model.samples_per_epoch} samples) does not match the "
                f"synthetic dataset ({synthetic_spec.n_channels} ch x "
                f"{synthetic_spec.samples_per_epoch} samples)")

    axes_raw = _expect(payload, "axes", list, where,
                       default=[a.value for a in ALL_AXES])
    axes = []
    for i, name in enumerate(axes_raw):
        try:
            axes.append(StratAxis(name))
        except ValueError:
            valid = ", ".join(a.value for a in ALL_AXES)
            raise ConfigError(
                f"{where}.axes[{i}]: unknown axis {name!r} (valid: {valid})"
            ) from None

    phase1_folds = _expect(payload, "phase1_folds", int, where, default=5)
    single_axis_folds = _expect(payload, "single_axis_folds", int, where, default=5)
    two_way_folds = _expect(payload, "two_way_folds", int, where, default=3)
    for name, value in (("phase1_folds", phase1_folds),
                        ("single_axis_folds", single_axis_folds),
                        ("two_way_folds", two_way_folds)):
        if value < 2:
            raise ConfigError(f"{where}.{name}: fold counts must be >= 2")
    validation_fraction = _expect(payload, "validation_fraction", float, where,
                                  default=0.10)
    if not 0.0 <= validation_fraction < 1.0:
        raise ConfigError(f"{where}.validation_fraction: must lie in [0, 1)")
    min_subgroup_size = _expect(payload, "min_subgroup_size", int, where, default=4)

    report = _expect(payload, "report", dict, where, default={})
    aggregation = _expect(report, "aggregate", str, f"{where}.report",
                          default="mean")
    if aggregation not in ("mean", "pool"):
        raise ConfigError(
            f"{where}.report.aggregate: must be 'mean' or 'pool'")
    formats = tuple(_expect(report, "formats", list, f"{where}.report",
                            default=["markdown", "csv"]))
    for i, fmt in enumerate(formats):
        if fmt not in ("markdown", "csv"):
            raise ConfigError(
                f"{where}.report.formats[{i}]: unknown format {fmt!r}")

    pretrain_config = _parse_train_section(payload.get("pretrain"),
                                           f"{where}.pretrain",
                                           Phase.PRETRAIN, seed)
    finetune_config = _parse_train_section(payload.get("finetune"),
                                           f"{where}.finetune",
                                           Phase.FINETUNE, seed)
    return ExperimentConfig(
        seed=seed, workers=workers, synthetic_spec=synthetic_spec,
        manifest_path=manifest_path, model=model,
        pretrain_config=pretrain_config, finetune_config=finetune_config,
        axes=tuple(axes), phase1_folds=phase1_folds,
        single_axis_folds=single_axis_folds, two_way_folds=two_way_folds,
        validation_fraction=validation_fraction,
        min_subgroup_size=min_subgroup_size, aggregation=aggregation,
        report_formats=formats, raw=payload)


def load_config_file(path, seed=None, workers=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})"
        ) from exc
    if seed is not None:
        payload = {**payload, "seed": seed}
    if workers is not None:
        payload = {**payload, "workers": workers}
    return parse_config(payload)


# ---------------------------------------------------------------------------
# artifact layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentPaths:
    root: Path
    run_id: str

    @property
    def plans(self):
        return self.root / "plans" / self.run_id

    @property
    def checkpoints(self):
        return self.root / "checkpoints" / self.run_id

    @property
    def runs(self):
        return self.root / "runs" / self.run_id

    @property
    def reports(self):
        return self.root / "reports" / self.run_id

    def phase1_plan(self):
        return self.plans / "phase1.json"

    def subgroup_plan(self, key):
        return self.plans / f"{key.slug}.json"

    def checkpoint(self, fold_index):
        return self.checkpoints / f"fold{fold_index}.ckpt"

    def run_file(self, label, fold_index):
        return self.runs / f"{label}_fold{fold_index}.json"


def experiment_paths(config, out_dir):
    return ExperimentPaths(root=Path(out_dir), run_id=config.run_id())


def build_cohort(config):
    if config.synthetic_spec is not None:
        return generate_synthetic_cohort(config.synthetic_spec, config.seed)
    cohort = load_cohort(config.manifest_path)
    if (cohort.n_channels != config.model.n_channels
            or cohort.samples_per_epoch != config.model.samples_per_epoch):
        raise ConfigError(
            f"model geometry ({config.model.n_channels} ch x "
            f"{config.model.samples_per_epoch} samples) does not match the "
            f"loaded cohort ({cohort.n_channels} ch x "
            f"{cohort.samples_per_epoch} samples)")
    return cohort


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

def plan_subgroups(config, cohort, phase1):
    """Phase-2 plans for every requested subgroup, plus skip records.

    Eligibility: at least min_subgroup_size subjects spread over at
    least two Phase-1 folds. Ineligible subgroups are recorded with a
    reason, never trained, and still count in the report accounting.
    """
    plans = []
    skipped = []
    requested = []
    for axis in config.axes:
        groups = stratify(cohort, axis)
        for key, members in groups.items():
            requested.append(key)
            folds_hit = sum(
                1 for fold in phase1.folds if set(fold.test) & members)
            if len(members) < config.min_subgroup_size:
                skipped.append((key, f"only {len(members)} subjects "
                                     f"(minimum {config.min_subgroup_size})"))
                continue
            if folds_hit < config.min_subgroup_folds:
                skipped.append((key, f"subjects span only {folds_hit} phase-1 "
                                     f"fold(s) (minimum {config.min_subgroup_folds})"))
                continue
            try:
                plan = plan_phase2_for_subgroup(
                    key, members, phase1, config.max_folds_for(axis),
                    validation_fraction=config.validation_fraction,
                    seed=config.seed)
            except PlanError as exc:
                skipped.append((key, str(exc)))
                continue
            plans.append((key, plan))
    return plans, skipped, requested


# ---------------------------------------------------------------------------
# job execution
# ---------------------------------------------------------------------------

def _pretrain_fold_job(cohort, fold, model_config, train_config):
    config = replace(train_config, seed=train_config.seed + fold.index)
    trained = fit(cohort, fold.train, fold.validation, model_config, config)
    return Checkpoint(params=trained.params, norm_stats=trained.norm_stats,
                      phase1_fold_index=fold.index, lineage=trained.lineage,
                      log=trained.log)


def _finetune_job(checkpoint, fold, cohort, train_config, label):
    config = replace(train_config, seed=train_config.seed + fold.index)
    _, result = finetune(checkpoint, fold, cohort, config,
                         subgroup_label=label)
    return result


def _run_jobs(jobs, workers):
    """Execute (key, fn, args) jobs; dict of results keyed deterministically."""
    results = {}
    if workers <= 1 or len(jobs) <= 1:
        for key, fn, args in jobs:
            results[key] = fn(*args)
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {key: pool.submit(fn, *args) for key, fn, args in jobs}
        for key, future in futures.items():
            results[key] = future.result()
    return results


# ---------------------------------------------------------------------------
# the full pipeline
# ---------------------------------------------------------------------------

def run_phase1(config, cohort, paths):
    """Plan, verify and pretrain; persists plan + checkpoints + baselines."""
    phase1 = plan_phase1(cohort, k=config.phase1_folds,
                         validation_fraction=config.validation_fraction,
                         seed=config.seed)
    save_plan(phase1, paths.phase1_plan())
    violations = verify_no_leakage(phase1)
    if violations:
        raise LeakageError("; ".join(str(v) for v in violations))
    jobs = [(fold.index, _pretrain_fold_job,
             (cohort, fold, config.model, config.pretrain_config))
            for fold in phase1.folds]
    results = _run_jobs(jobs, config.workers)
    checkpoints = [results[i] for i in sorted(results)]
    paths.runs.mkdir(parents=True, exist_ok=True)
    baseline_results = []
    for ckpt, fold in zip(checkpoints, phase1.folds):
        save_checkpoint(ckpt, paths.checkpoint(fold.index))
        report = evaluate_checkpoint(ckpt, cohort, fold.test)
        result = RunResult(
            subgroup_label="Baseline", fold_index=fold.index,
            checkpoint_index=fold.index, report=report, baseline_report=None,
            n_test_subjects=len(fold.test), test_subjects=tuple(fold.test))
        baseline_results.append(result)
        _write_run(result, paths.run_file("baseline", fold.index))
    return phase1, checkpoints, baseline_results


def run_phase2(config, cohort, phase1, checkpoints, paths):
    """Fine-tune every eligible subgroup; persists plans + run results."""
    plans, skipped, requested = plan_subgroups(config, cohort, phase1)
    violations = verify_no_leakage(phase1, [plan for _, plan in plans])
    if violations:
        raise LeakageError("; ".join(str(v) for v in violations))
    for key, plan in plans:
        save_plan(plan, paths.subgroup_plan(key))
    jobs = []
    for key, plan in plans:
        for fold in plan.folds:
            jobs.append(((key.slug, fold.index), _finetune_job,
                         (checkpoints[fold.checkpoint_index], fold, cohort,
                          config.finetune_config, key.label)))
    results = _run_jobs(jobs, config.workers)
    by_subgroup = {}
    for key, plan in plans:
        fold_results = [results[(key.slug, fold.index)] for fold in plan.folds]
        by_subgroup[key] = fold_results
        for result in fold_results:
            _write_run(result, paths.run_file(key.slug, result.fold_index))
    return by_subgroup, skipped, requested


def _write_run(result, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.to_dict(), sort_keys=True, indent=2)
                    + "\n", encoding="utf-8")


def build_bundle(config, cohort, baseline_results, by_subgroup, skipped):
    baseline_report = aggregate_fold_reports(
        [r.report for r in baseline_results], mode=config.aggregation)
    baseline_row = ReportRow.from_report("Baseline", len(cohort),
                                         baseline_report)
    tables = []
    for axis in config.axes:
        groups = stratify(cohort, axis)
        rows = []
        for key in groups:  # canonical subgroup order within the axis
            fold_results = by_subgroup.get(key)
            if not fold_results:
                continue
            aggregated = aggregate_fold_reports(
                [r.report for r in fold_results], mode=config.aggregation)
            rows.append(ReportRow.from_report(
                key.label, len(groups[key]), aggregated))
        tables.append(AxisTable(axis=axis, rows=rows))
    skip_rows = [(key.label, reason) for key, reason in skipped]
    return ReportBundle(baseline=baseline_row, tables=tables,
                        skipped=skip_rows)


def run_experiment(config, out_dir):
    """Execute the whole pipeline; returns (bundle, paths, accounting)."""
    paths = experiment_paths(config, out_dir)
    cohort = build_cohort(config)
    phase1, checkpoints, baseline_results = run_phase1(config, cohort, paths)
    by_subgroup, skipped, requested = run_phase2(config, cohort, phase1,
                                                 checkpoints, paths)
    bundle = build_bundle(config, cohort, baseline_results, by_subgroup,
                          skipped)
    emit_tables(bundle, paths.reports, formats=config.report_formats)
    accounting = {
        "requested": len(requested),
        "emitted": bundle.n_rows(),
        "skipped": len(skipped),
    }
    summary = {
        "run_id": paths.run_id,
        "seed": config.seed,
        "n_subjects": len(cohort),
        "axes": [a.value for a in config.axes],
        "accounting": accounting,
        "skipped": [{"subgroup": label, "reason": reason}
                    for label, reason in bundle.skipped],
    }
    paths.reports.mkdir(parents=True, exist_ok=True)
    (paths.reports / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return bundle, paths, accounting


# ---------------------------------------------------------------------------
# helpers for the CLI subcommands
# ---------------------------------------------------------------------------

def generate_dataset(config, out_dir):
    if config.synthetic_spec is None:
        raise ConfigError("generate needs a synthetic dataset spec")
    cohort = build_cohort(config)
    return write_cohort(cohort, Path(out_dir) / "dataset")


def emit_plans(config, out_dir):
    paths = experiment_paths(config, out_dir)
    cohort = build_cohort(config)
    phase1 = plan_phase1(cohort, k=config.phase1_folds,
                         validation_fraction=config.validation_fraction,
                         seed=config.seed)
    save_plan(phase1, paths.phase1_plan())
    plans, skipped, _ = plan_subgroups(config, cohort, phase1)
    for key, plan in plans:
        save_plan(plan, paths.subgroup_plan(key))
    return paths, phase1, plans, skipped


def verify_plan_files(plan_paths):
    """Load plan files and re-run the leakage checks.

    Returns (violations, n_plans). Raises PlanError on malformed input.
    """
    phase1 = None
    phase2_plans = []
    for path in plan_paths:
        plan = load_plan(path)
        if isinstance(plan, Phase1Plan):
            if phase1 is not None:
                raise PlanError("multiple phase-1 plans given")
            phase1 = plan
        else:
            phase2_plans.append(plan)
    if phase1 is None:
        raise PlanError("no phase-1 plan among the given files")
    return verify_no_leakage(phase1, phase2_plans), 1 + len(phase2_plans)


def load_experiment_checkpoints(paths, phase1):
    checkpoints = []
    for fold in phase1.folds:
        path = paths.checkpoint(fold.index)
        if not path.is_file():
            raise FileNotFoundError(f"missing checkpoint {path}; run pretrain first")
        checkpoints.append(load_checkpoint(path))
    return checkpoints


def load_run_results(paths):
    results = []
    for path in sorted(paths.runs.glob("*.json")):
        payload = json.loads(path.read_text(encoding="utf-8"))
        results.append(RunResult.from_dict(payload))
    return results


def bundle_from_run_files(config, cohort, paths):
    """Rebuild the report bundle from persisted RunResult files.

    Used by the standalone `report` subcommand and as the provenance
    spot check: every table cell must be recomputable from these files.
    """
    results = load_run_results(paths)
    if not results:
        raise FileNotFoundError(
            f"no run results under {paths.runs}; run the pipeline first")
    baseline_results = [r for r in results if r.subgroup_label == "Baseline"]
    if not baseline_results:
        raise FileNotFoundError("no baseline run results found")
    labels = {}
    for axis in config.axes:
        for key in stratify(cohort, axis):
            labels[(axis, key.label)] = key
    by_subgroup = {}
    for result in results:
        if result.subgroup_label == "Baseline":
            continue
        for axis in config.axes:
            key = labels.get((axis, result.subgroup_label))
            if key is not None:
                by_subgroup.setdefault(key, []).append(result)
                break
    for fold_results in by_subgroup.values():
        fold_results.sort(key=lambda r: r.fold_index)
    return build_bundle(config, cohort, baseline_results, by_subgroup,
                        skipped=[])
