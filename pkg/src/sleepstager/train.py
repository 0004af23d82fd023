"""Two-stage training: cohort-level pretraining and subgroup fine-tuning.

Stage 1 trains one model per Phase-1 fold, each producing a checkpoint
that has never seen its held-out test subjects -- not in a gradient
step, not in a normalization statistic. Stage 2 initializes from a
compatible checkpoint and fine-tunes on a subgroup's subjects at a
reduced learning rate. Every model carries a lineage (the set of
subjects that influenced its fit) and evaluation refuses subjects found
in that lineage.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .autodiff import (
    OptimConfig,
    TrainController,
    adam_step,
    clip_gradients,
    index_rows,
    no_grad,
    weighted_cross_entropy,
)
from .data import apply_normalization, compute_norm_stats, window_sequences
from .data import NormStats
from .metrics import MetricsReport, compute_report
from .model import ModelConfig, build_model, forward
from .stratify import verify_no_leakage

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


class LeakageError(RuntimeError):
    """A subject crossed the train/evaluation firewall."""


class Phase(str, Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimConfig
    batch_size: int = 32
    max_epochs: int = 100
    phase: Phase = Phase.PRETRAIN
    seed: int = 0
    early_stopping: bool = True
    inherit_norm_stats: bool = False
    freeze_feature_extractor: bool = False
    window_stride: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")

    @classmethod
    def pretrain_defaults(cls, seed=0, **overrides):
        opts = dict(optimizer=OptimConfig(learning_rate=1e-3), batch_size=32,
                    max_epochs=100, phase=Phase.PRETRAIN, seed=seed)
        opts.update(overrides)
        return cls(**opts)

    @classmethod
    def finetune_defaults(cls, seed=0, **overrides):
        opts = dict(optimizer=OptimConfig(learning_rate=1e-4), batch_size=32,
                    max_epochs=50, phase=Phase.FINETUNE, seed=seed)
        opts.update(overrides)
        return cls(**opts)


def class_weights(labels, n_classes=5):
    """Inverse-frequency weights w_i = N / (C_eff * n_i).

    Classes absent from the labels get weight zero and do not count
    toward C_eff, so small subgroups missing a stage stay finite.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("class weights need at least one label")
    counts = np.bincount(labels.astype(np.int64), minlength=n_classes)
    if len(counts) > n_classes:
        raise ValueError("label index out of range")
    present = counts > 0
    effective = int(present.sum())
    weights = np.zeros(n_classes, dtype=np.float64)
    weights[present] = labels.size / (effective * counts[present])
    return weights


@dataclass
class EpochLogEntry:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainedModel:
    """Fitted parameters plus everything needed to use them safely."""

    params: object  # ModelParams
    norm_stats: NormStats
    lineage: frozenset[str]
    log: list[EpochLogEntry] = field(default_factory=list)


@dataclass
class Checkpoint:
    params: object  # ModelParams
    norm_stats: NormStats
    phase1_fold_index: int
    lineage: frozenset[str]
    log: list[EpochLogEntry] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION


@dataclass
class RunResult:
    subgroup_label: str
    fold_index: int
    checkpoint_index: int
    report: MetricsReport
    baseline_report: MetricsReport | None
    n_test_subjects: int
    test_subjects: tuple[str, ...]
    seconds: float = 0.0

    def to_dict(self):
        return {
            "subgroup": self.subgroup_label,
            "fold_index": self.fold_index,
            "checkpoint_index": self.checkpoint_index,
            "report": self.report.to_dict(),
            "baseline_report": (self.baseline_report.to_dict()
                                if self.baseline_report else None),
            "n_test_subjects": self.n_test_subjects,
            "test_subjects": list(self.test_subjects),
            "seconds": self.seconds,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            subgroup_label=d["subgroup"], fold_index=d["fold_index"],
            checkpoint_index=d["checkpoint_index"],
            report=MetricsReport.from_dict(d["report"]),
            baseline_report=(MetricsReport.from_dict(d["baseline_report"])
                             if d.get("baseline_report") else None),
            n_test_subjects=d["n_test_subjects"],
            test_subjects=tuple(d["test_subjects"]),
            seconds=d.get("seconds", 0.0))


# ---------------------------------------------------------------------------
# the fit loop
# ---------------------------------------------------------------------------

def _collect_windows(cohort, subject_ids, stats, seq_len, mode, stride=None):
    items = []
    for sid in sorted(subject_ids):
        rec = apply_normalization(cohort.subject(sid), stats)
        items.extend(window_sequences(rec, seq_len, mode, stride=stride))
    return items


def _batch_loss(params, items, weights, mode, rng=None):
    """Forward one batch of windows; returns (loss node, total weight).

    Zero-weight target positions (classes absent from the training
    labels) are excluded so the weighted mean stays well defined.
    """
    inputs = np.stack([it.inputs for it in items])
    labels = np.concatenate([it.labels for it in items])
    mask = np.concatenate([it.mask for it in items])
    logits = forward(params, inputs, mode, rng)
    n_classes = logits.shape[-1]
    flat = logits.reshape(len(items) * params.config.seq_len, n_classes)
    valid = mask & (weights[labels] > 0)
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return None, 0.0
    selected = index_rows(flat, idx)
    targets = labels[idx]
    loss = weighted_cross_entropy(selected, targets, weights)
    return loss, float(weights[targets].sum())


def _dataset_loss(params, items, weights, batch_size):
    """Pooled weighted loss over a window list, eval mode, no gradients."""
    total, total_w = 0.0, 0.0
    with no_grad():
        for lo in range(0, len(items), batch_size):
            loss, w = _batch_loss(params, items[lo:lo + batch_size], weights, "eval")
            if loss is not None:
                total += float(loss.data) * w
                total_w += w
    if total_w == 0.0:
        return None
    return total / total_w


_FROZEN_PREFIXES = ("conv", "bn", "proj")


def fit(cohort, train_ids, val_ids, model_config, train_config,
        init_params=None, norm_stats=None, base_lineage=frozenset()):
    """Train one model on the given subject split.

    Normalization statistics come from the training subjects (or are
    inherited, in which case their provenance must already be inside the
    lineage). The best-validation parameters are restored at the end.
    """
    train_ids = sorted(set(train_ids))
    val_ids = sorted(set(val_ids))
    if not train_ids:
        raise ValueError("fit needs at least one training subject")
    overlap = set(train_ids) & set(val_ids)
    if overlap:
        raise ValueError(f"subjects in both train and validation: {sorted(overlap)}")

    if norm_stats is None:
        norm_stats = compute_norm_stats(cohort, train_ids)
    allowed = set(train_ids) | set(base_lineage)
    stray = norm_stats.provenance - allowed
    if stray:
        raise LeakageError(
            f"normalization statistics derive from subjects outside the "
            f"training lineage: {sorted(stray)}")

    labels = np.concatenate([cohort.subject(s).labels for s in train_ids])
    weights = class_weights(labels, n_classes=model_config.n_classes)

    seq_len = model_config.seq_len
    train_items = _collect_windows(cohort, train_ids, norm_stats, seq_len,
                                   "train", stride=train_config.window_stride)
    if not train_items and train_config.max_epochs > 0:
        raise ValueError(
            f"no training windows: every training record is shorter than "
            f"seq_len={seq_len}")
    val_items = _collect_windows(cohort, val_ids, norm_stats, seq_len, "eval")

    if init_params is None:
        params = build_model(model_config, seed=train_config.seed)
    else:
        params = init_params.copy()
    if train_config.freeze_feature_extractor:
        for name, tensor in params.store.items():
            if name.startswith(_FROZEN_PREFIXES):
                tensor.requires_grad = False

    rng = np.random.Generator(np.random.PCG64(train_config.seed))
    controller = TrainController(train_config.optimizer,
                                 early_stopping=train_config.early_stopping)
    log: list[EpochLogEntry] = []
    best_state = (params.store.copy_values(),
                  {k: v.copy() for k, v in params.bn_states.items()})

    for epoch in range(train_config.max_epochs):
        order = rng.permutation(len(train_items))
        total, total_w = 0.0, 0.0
        for lo in range(0, len(order), train_config.batch_size):
            batch = [train_items[i] for i in order[lo:lo + train_config.batch_size]]
            loss, w = _batch_loss(params, batch, weights, "train", rng)
            if loss is None:
                continue
            params.store.zero_grad()
            loss.backward()
            clip_gradients(params.store, train_config.optimizer.max_grad_norm)
            adam_step(params.store, train_config.optimizer, lr=controller.lr)
            total += float(loss.data) * w
            total_w += w
        train_loss = total / total_w if total_w else float("nan")
        val_loss = _dataset_loss(params, val_items, weights,
                                 train_config.batch_size)
        monitored = train_loss if val_loss is None else val_loss
        log.append(EpochLogEntry(epoch=epoch, train_loss=train_loss,
                                 val_loss=monitored, lr=controller.lr))
        action = controller.step(monitored)
        if action.improved:
            best_state = (params.store.copy_values(),
                          {k: v.copy() for k, v in params.bn_states.items()})
        if action.stop:
            break

    params.store.load_values(best_state[0])
    params.bn_states = best_state[1]
    lineage = frozenset(base_lineage) | set(train_ids) | set(val_ids)
    return TrainedModel(params=params, norm_stats=norm_stats,
                        lineage=lineage, log=log)


# ---------------------------------------------------------------------------
# the two stages
# ---------------------------------------------------------------------------

def pretrain(cohort, phase1, model_config, train_config):
    """Stage 1: one checkpoint per Phase-1 fold.

    Refuses to train if the plan itself carries leakage violations.
    Each fold's model is seeded independently (seed + fold index).
    """
    violations = verify_no_leakage(phase1)
    if violations:
        raise LeakageError(
            "phase-1 plan failed verification: "
            + "; ".join(str(v) for v in violations))
    checkpoints = []
    for fold in phase1.folds:
        fold_config = replace(train_config, seed=train_config.seed + fold.index)
        trained = fit(cohort, fold.train, fold.validation, model_config,
                      fold_config)
        checkpoints.append(Checkpoint(
            params=trained.params, norm_stats=trained.norm_stats,
            phase1_fold_index=fold.index, lineage=trained.lineage,
            log=trained.log))
    return checkpoints


def finetune(checkpoint, phase2_fold, cohort, train_config,
             subgroup_label="subgroup"):
    """Stage 2: adapt one checkpoint to one fine-tuning fold.

    The checkpoint must be the one whose Phase-1 held-out set contains
    this fold's test subjects; a mismatched pairing is a hard error
    before any training happens. Evaluation of both the fine-tuned model
    and the unmodified checkpoint on the fold's test subjects is
    returned in the RunResult.
    """
    if phase2_fold.checkpoint_index != checkpoint.phase1_fold_index:
        raise LeakageError(
            f"fold expects checkpoint {phase2_fold.checkpoint_index} but got "
            f"checkpoint {checkpoint.phase1_fold_index}; refusing to train")
    started = time.perf_counter()
    norm_stats = checkpoint.norm_stats if train_config.inherit_norm_stats else None
    trained = fit(cohort, phase2_fold.train, phase2_fold.validation,
                  checkpoint.params.config, train_config,
                  init_params=checkpoint.params, norm_stats=norm_stats,
                  base_lineage=checkpoint.lineage)
    report = evaluate(trained.params, trained.norm_stats, cohort,
                      phase2_fold.test, lineage=trained.lineage)
    baseline = evaluate(checkpoint.params, checkpoint.norm_stats, cohort,
                        phase2_fold.test, lineage=checkpoint.lineage)
    result = RunResult(
        subgroup_label=subgroup_label, fold_index=phase2_fold.index,
        checkpoint_index=phase2_fold.checkpoint_index, report=report,
        baseline_report=baseline, n_test_subjects=len(phase2_fold.test),
        test_subjects=tuple(phase2_fold.test),
        seconds=time.perf_counter() - started)
    return trained, result


def predict_epochs(model_params, norm_stats, cohort, subject_ids,
                   batch_size=32):
    """Eval-mode per-epoch predictions: (y_true, y_pred) arrays.

    Diagnostic path with no lineage check (e.g. training accuracy);
    evaluate() is the firewalled entry point for reported metrics.
    """
    subject_ids = sorted(set(subject_ids))
    if not subject_ids:
        raise ValueError("prediction needs at least one subject")
    seq_len = model_params.config.seq_len
    y_true, y_pred = [], []
    items = _collect_windows(cohort, subject_ids, norm_stats, seq_len, "eval")
    with no_grad():
        for lo in range(0, len(items), batch_size):
            batch = items[lo:lo + batch_size]
            inputs = np.stack([it.inputs for it in batch])
            logits = forward(model_params, inputs, "eval")
            pred = logits.data.argmax(axis=2)
            for row, item in enumerate(batch):
                y_true.append(item.labels[item.mask])
                y_pred.append(pred[row][item.mask])
    return np.concatenate(y_true), np.concatenate(y_pred)


def evaluate(model_params, norm_stats, cohort, subject_ids,
             lineage=frozenset(), batch_size=32):
    """Eval-mode metrics over the subjects' scored epochs.

    Subjects that appear in the model's lineage are refused outright;
    this is the runtime firewall behind the planning-level guarantees.
    """
    subject_ids = sorted(set(subject_ids))
    if not subject_ids:
        raise ValueError("evaluate needs at least one subject")
    crossed = set(subject_ids) & set(lineage)
    if crossed:
        raise LeakageError(
            f"evaluation subjects appear in the model's training lineage: "
            f"{sorted(crossed)}")
    y_true, y_pred = predict_epochs(model_params, norm_stats, cohort,
                                    subject_ids, batch_size=batch_size)
    return compute_report(y_true, y_pred,
                          n_classes=model_params.config.n_classes)


def evaluate_checkpoint(checkpoint, cohort, subject_ids, batch_size=32):
    return evaluate(checkpoint.params, checkpoint.norm_stats, cohort,
                    subject_ids, lineage=checkpoint.lineage,
                    batch_size=batch_size)


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------

def _write_block(fh, payload):
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_block(buf, offset):
    (length,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    return buf[offset:offset + length], offset + length


def save_checkpoint(checkpoint, path):
    """Versioned binary: magic, version, config echo, norm stats,
    parameter tensors (f32 LE, declaration order), BN buffers, log."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = checkpoint.params
    echo = {
        "model_config": params.config.to_dict(),
        "phase1_fold_index": checkpoint.phase1_fold_index,
        "lineage": sorted(checkpoint.lineage),
        "param_names": params.store.names(),
        "bn_names": sorted(params.bn_states),
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", checkpoint.version))
        _write_block(fh, json.dumps(echo, sort_keys=True).encode("utf-8"))

        ns = checkpoint.norm_stats
        prov = sorted(ns.provenance)
        fh.write(struct.pack("<I", ns.mean.shape[0]))
        fh.write(ns.mean.astype("<f8").tobytes())
        fh.write(ns.std.astype("<f8").tobytes())
        fh.write(struct.pack("<II", ns.n_epochs, len(prov)))
        for sid in prov:
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)

        for name in params.store.names():
            fh.write(params.store[name].data.astype("<f4").tobytes())
        for name in sorted(params.bn_states):
            st = params.bn_states[name]
            fh.write(struct.pack("<B", 1 if st.initialized else 0))
            fh.write(st.running_mean.astype("<f8").tobytes())
            fh.write(st.running_var.astype("<f8").tobytes())

        fh.write(struct.pack("<I", len(checkpoint.log)))
        for entry in checkpoint.log:
            fh.write(struct.pack("<ddd", entry.train_loss, entry.val_loss,
                                 entry.lr))
    return path


def load_checkpoint(path):
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} in {path}")
    echo_raw, offset = _read_block(buf, 8)
    echo = json.loads(echo_raw.decode("utf-8"))
    config = ModelConfig.from_dict(echo["model_config"])

    (n_channels,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    mean = np.frombuffer(buf, dtype="<f8", count=n_channels, offset=offset).copy()
    offset += 8 * n_channels
    std = np.frombuffer(buf, dtype="<f8", count=n_channels, offset=offset).copy()
    offset += 8 * n_channels
    n_epochs, n_prov = struct.unpack_from("<II", buf, offset)
    offset += 8
    prov = []
    for _ in range(n_prov):
        (length,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        prov.append(buf[offset:offset + length].decode("utf-8"))
        offset += length
    norm_stats = NormStats(mean=mean, std=std, provenance=frozenset(prov),
                           n_epochs=n_epochs)

    params = build_model(config, seed=0)
    if echo["param_names"] != params.store.names():
        raise ValueError(f"checkpoint parameter manifest mismatch in {path}")
    values = {}
    for name in params.store.names():
        shape = params.store[name].data.shape
        count = int(np.prod(shape))
        values[name] = np.frombuffer(buf, dtype="<f4", count=count,
                                     offset=offset).reshape(shape).copy()
        offset += 4 * count
    params.store.load_values(values)
    for name in sorted(params.bn_states):
        st = params.bn_states[name]
        (flag,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        ch = st.n_channels
        st.running_mean = np.frombuffer(buf, dtype="<f8", count=ch,
                                        offset=offset).copy()
        offset += 8 * ch
        st.running_var = np.frombuffer(buf, dtype="<f8", count=ch,
                                       offset=offset).copy()
        offset += 8 * ch
        st.initialized = bool(flag)

    (n_entries,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    log = []
    for i in range(n_entries):
        train_loss, val_loss, lr = struct.unpack_from("<ddd", buf, offset)
        offset += 24
        log.append(EpochLogEntry(epoch=i, train_loss=train_loss,
                                 val_loss=val_loss, lr=lr))
    return Checkpoint(params=params, norm_stats=norm_stats,
                      phase1_fold_index=echo["phase1_fold_index"],
                      lineage=frozenset(echo["lineage"]), log=log,
                      version=version)
