"""Two-stage demographically stratified sleep-stage classification.

Pretrain a CNN-BiLSTM stager on a full cohort under subject-wise
cross-validation, then fine-tune it per demographic subgroup from the
checkpoint that held out the subgroup's test subjects. Includes the
autodiff engine, dataset tooling, fold planning with leakage
verification, metrics, and a config-driven experiment CLI.
"""

from . import autodiff
from .data import (
    AgeGroup,
    AhiSeverity,
    Cohort,
    DataFormatError,
    Demographics,
    Gender,
    NormStats,
    SequenceBatchItem,
    SleepStage,
    SubgroupShift,
    SubjectRecord,
    SyntheticCohortSpec,
    apply_normalization,
    classify_demographics,
    compute_norm_stats,
    generate_synthetic_cohort,
    load_cohort,
    window_sequences,
    write_cohort,
)
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    accuracy,
    cohen_kappa,
    compute_report,
    kappa_improvement,
    macro_f1,
    per_class_f1,
)
from .model import ModelConfig, ModelParams, build_model, forward, param_count, toy_config
from .stratify import (
    ALL_AXES,
    Phase1Plan,
    Phase2Plan,
    PlanError,
    StratAxis,
    SubgroupKey,
    plan_phase1,
    plan_phase2,
    stratify,
    verify_no_leakage,
)
from .train import (
    Checkpoint,
    LeakageError,
    Phase,
    RunResult,
    TrainConfig,
    class_weights,
    evaluate,
    finetune,
    fit,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .experiment import ExperimentConfig, parse_config, run_experiment

__version__ = "0.1.0"
