"""Dataset schema, on-disk format, synthetic cohorts and windowing.

The on-disk layout is a deliberately simple binary format (documented in
the README) plus a line-based manifest, standing in for access-gated
clinical recordings. Signals are stored raw; per-channel z-score
normalization is always computed at run time from a fold's training
subjects so that no statistics leak across fold boundaries.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SIGNAL_MAGIC = b"PSG1"
LABELS_MAGIC = b"LBL1"

STAGE_NAMES = ("W", "N1", "N2", "N3", "REM")

# Stage templates for the synthetic generator, per stage code 0..4:
# dominant oscillation as a fraction of the Nyquist frequency, and a
# base amplitude. At 100 Hz sampling this puts W/N1/N2/N3/REM at
# 20/7/13/2/5 Hz with slow high-amplitude deep sleep.
STAGE_FREQ_FRACTIONS = (0.40, 0.14, 0.26, 0.04, 0.10)
STAGE_AMPLITUDES = (0.6, 0.8, 1.0, 2.0, 0.9)


class DataFormatError(ValueError):
    """A dataset file or manifest failed validation."""


class SleepStage(IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4
    EXCLUDED = 255


class Gender(str, Enum):
    MALE = "M"
    FEMALE = "F"


class AgeGroup(str, Enum):
    UNDER_50 = "Under-50"
    FROM_50_TO_65 = "50-65"
    OVER_65 = "Over-65"


class AhiSeverity(str, Enum):
    NORMAL = "Normal"
    MILD = "Mild"
    MODERATE = "Moderate"
    SEVERE = "Severe"


@dataclass(frozen=True)
class Demographics:
    gender: Gender
    age: int
    ahi: float

    def __post_init__(self):
        if self.age < 0:
            raise ValueError("age must be non-negative")
        if self.ahi < 0:
            raise ValueError("AHI must be non-negative")


def classify_demographics(demographics):
    """Map (age, AHI) onto the clinical bins.

    Ages 50 and 65 belong to the middle bin. AHI uses half-open
    intervals: [0,5) Normal, [5,15) Mild, [15,30) Moderate, >=30 Severe.
    """
    age = demographics.age
    if age < 50:
        age_group = AgeGroup.UNDER_50
    elif age <= 65:
        age_group = AgeGroup.FROM_50_TO_65
    else:
        age_group = AgeGroup.OVER_65
    ahi = demographics.ahi
    if ahi < 5:
        severity = AhiSeverity.NORMAL
    elif ahi < 15:
        severity = AhiSeverity.MILD
    elif ahi < 30:
        severity = AhiSeverity.MODERATE
    else:
        severity = AhiSeverity.SEVERE
    return age_group, severity


@dataclass
class SubjectRecord:
    """One subject's demographics and scored signal epochs.

    signals: [n_epochs, channels, samples] float32, raw amplitudes.
    labels: [n_epochs] uint8 stage codes 0..4 (EXCLUDED epochs are
    dropped at load time; their original indices are kept for audit).
    """

    subject_id: str
    demographics: Demographics
    signals: np.ndarray
    labels: np.ndarray
    excluded_epochs: tuple[int, ...] = ()

    def __post_init__(self):
        if self.signals.ndim != 3:
            raise ValueError(
                f"subject {self.subject_id}: signals must be "
                f"[epochs, channels, samples], got {self.signals.shape}")
        if self.labels.shape != (self.signals.shape[0],):
            raise ValueError(
                f"subject {self.subject_id}: {self.signals.shape[0]} signal "
                f"epochs but {self.labels.shape[0]} labels")
        if self.signals.shape[0] < 1:
            raise ValueError(
                f"subject {self.subject_id} has no scored epochs")
        if self.labels.size and self.labels.max() > 4:
            raise ValueError(
                f"subject {self.subject_id}: scored labels must be 0..4")

    @property
    def n_epochs(self):
        return self.signals.shape[0]


@dataclass
class Cohort:
    """An immutable set of subjects sharing one signal geometry."""

    subjects: list[SubjectRecord]
    n_channels: int
    samples_per_epoch: int
    epoch_seconds: float = 30.0

    def __post_init__(self):
        seen = set()
        for rec in self.subjects:
            if rec.subject_id in seen:
                raise ValueError(f"duplicate subject id {rec.subject_id!r}")
            seen.add(rec.subject_id)
            if rec.signals.shape[1:] != (self.n_channels, self.samples_per_epoch):
                raise ValueError(
                    f"subject {rec.subject_id}: signal shape "
                    f"{rec.signals.shape[1:]} does not match cohort geometry "
                    f"({self.n_channels}, {self.samples_per_epoch})")
        self._by_id = {rec.subject_id: rec for rec in self.subjects}

    def __len__(self):
        return len(self.subjects)

    def subject(self, subject_id):
        try:
            return self._by_id[subject_id]
        except KeyError:
            raise KeyError(f"unknown subject id {subject_id!r}") from None

    def subject_ids(self):
        return [rec.subject_id for rec in self.subjects]

    @property
    def sample_rate(self):
        return self.samples_per_epoch / self.epoch_seconds

    def total_epochs(self):
        return sum(rec.n_epochs for rec in self.subjects)


# ---------------------------------------------------------------------------
# binary file format
# ---------------------------------------------------------------------------

def write_signal_file(path, signals):
    signals = np.ascontiguousarray(signals, dtype="<f4")
    n_epochs, n_channels, samples = signals.shape
    with open(path, "wb") as fh:
        fh.write(SIGNAL_MAGIC)
        fh.write(struct.pack("<III", n_epochs, n_channels, samples))
        fh.write(signals.tobytes())


def read_signal_file(path):
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"signal file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != SIGNAL_MAGIC:
        raise DataFormatError(f"bad signal file header in {path}")
    n_epochs, n_channels, samples = struct.unpack("<III", blob[4:16])
    expected = 16 + 4 * n_epochs * n_channels * samples
    if len(blob) != expected:
        raise DataFormatError(
            f"truncated signal payload in {path}: expected {expected} bytes, "
            f"got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    return data.reshape(n_epochs, n_channels, samples).copy()


def write_labels_file(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(LABELS_MAGIC)
        fh.write(struct.pack("<I", labels.shape[0]))
        fh.write(labels.tobytes())


def read_labels_file(path):
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"labels file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 8 or blob[:4] != LABELS_MAGIC:
        raise DataFormatError(f"bad labels file header in {path}")
    n_epochs = struct.unpack("<I", blob[4:8])[0]
    if len(blob) != 8 + n_epochs:
        raise DataFormatError(
            f"truncated labels payload in {path}: expected {8 + n_epochs} "
            f"bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, offset=8).copy()


# ---------------------------------------------------------------------------
# manifest + cohort IO
# ---------------------------------------------------------------------------

def _parse_manifest_line(line, line_no, manifest_path):
    parts = [p.strip() for p in line.split(",")]
    if len(parts) != 6:
        raise DataFormatError(
            f"{manifest_path}:{line_no}: expected 6 comma-separated fields "
            f"(subject_id, gender, age, ahi, signal_path, labels_path), "
            f"got {len(parts)}")
    subject_id, gender, age, ahi, signal_path, labels_path = parts
    if gender not in ("M", "F"):
        raise DataFormatError(
            f"{manifest_path}:{line_no}: gender must be M or F, got {gender!r}")
    try:
        demographics = Demographics(Gender(gender), int(age), float(ahi))
    except ValueError as exc:
        raise DataFormatError(f"{manifest_path}:{line_no}: {exc}") from exc
    return subject_id, demographics, signal_path, labels_path


def load_cohort(manifest_path, expected_channels=None, expected_samples=None,
                epoch_seconds=30.0):
    """Load every subject referenced by a manifest.

    EXCLUDED (255) epochs are dropped from the scored stream; the index
    gaps are recorded on each record. Geometry must be uniform across
    the cohort (and match the expected values when given).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataFormatError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    subjects = []
    n_channels, samples = expected_channels, expected_samples
    for line_no, raw in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        subject_id, demographics, sig_rel, lbl_rel = _parse_manifest_line(
            line, line_no, manifest_path)
        signals = read_signal_file(base / sig_rel)
        labels = read_labels_file(base / lbl_rel)
        if labels.shape[0] != signals.shape[0]:
            raise DataFormatError(
                f"subject {subject_id}: {signals.shape[0]} signal epochs but "
                f"{labels.shape[0]} labels ({base / lbl_rel})")
        bad = labels[(labels > 4) & (labels != SleepStage.EXCLUDED)]
        if bad.size:
            raise DataFormatError(
                f"subject {subject_id}: label {int(bad[0])} out of range in "
                f"{base / lbl_rel}")
        if n_channels is None:
            n_channels, samples = signals.shape[1], signals.shape[2]
        elif signals.shape[1] != n_channels:
            raise DataFormatError(
                f"channel-count mismatch in {base / sig_rel}: header declares "
                f"{signals.shape[1]} channels, expected {n_channels}")
        elif signals.shape[2] != samples:
            raise DataFormatError(
                f"sample-count mismatch in {base / sig_rel}: header declares "
                f"{signals.shape[2]} samples, expected {samples}")
        scored = labels != SleepStage.EXCLUDED
        if not scored.any():
            raise DataFormatError(f"subject {subject_id} has no scored epochs")
        excluded = tuple(int(i) for i in np.nonzero(~scored)[0])
        subjects.append(SubjectRecord(
            subject_id=subject_id, demographics=demographics,
            signals=signals[scored], labels=labels[scored],
            excluded_epochs=excluded))
    if not subjects:
        logger.warning("manifest %s references no subjects", manifest_path)
        return Cohort(subjects=[], n_channels=expected_channels or 0,
                      samples_per_epoch=expected_samples or 0,
                      epoch_seconds=epoch_seconds)
    return Cohort(subjects=subjects, n_channels=n_channels,
                  samples_per_epoch=samples, epoch_seconds=epoch_seconds)


def write_cohort(cohort, out_dir):
    """Write manifest + per-subject signal/label files; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# subject_id, gender, age, ahi, signal_path, labels_path"]
    for rec in cohort.subjects:
        sig_name = f"{rec.subject_id}.psg"
        lbl_name = f"{rec.subject_id}.lbl"
        write_signal_file(out_dir / sig_name, rec.signals)
        write_labels_file(out_dir / lbl_name, rec.labels)
        d = rec.demographics
        lines.append(f"{rec.subject_id},{d.gender.value},{d.age},{d.ahi},"
                     f"{sig_name},{lbl_name}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# synthetic cohort generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubgroupShift:
    """Systematic signal transform applied to matching subjects.

    Any combination of gender / age group / AHI severity may be pinned;
    unset fields match everything. The shift scales each stage's
    dominant frequency and amplitude, creating a subgroup with its own
    signal statistics.
    """

    gender: Gender | None = None
    age_group: AgeGroup | None = None
    ahi_severity: AhiSeverity | None = None
    freq_scale: float = 1.0
    amp_scale: float = 1.0

    def matches(self, demographics):
        age_group, severity = classify_demographics(demographics)
        if self.gender is not None and demographics.gender != self.gender:
            return False
        if self.age_group is not None and age_group != self.age_group:
            return False
        if self.ahi_severity is not None and severity != self.ahi_severity:
            return False
        return True

    def to_dict(self):
        return {
            "gender": self.gender.value if self.gender else None,
            "age_group": self.age_group.value if self.age_group else None,
            "ahi_severity": self.ahi_severity.value if self.ahi_severity else None,
            "freq_scale": self.freq_scale,
            "amp_scale": self.amp_scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            gender=Gender(d["gender"]) if d.get("gender") else None,
            age_group=AgeGroup(d["age_group"]) if d.get("age_group") else None,
            ahi_severity=AhiSeverity(d["ahi_severity"]) if d.get("ahi_severity") else None,
            freq_scale=d.get("freq_scale", 1.0),
            amp_scale=d.get("amp_scale", 1.0))


@dataclass(frozen=True)
class SyntheticCohortSpec:
    """Parameters of the deterministic synthetic cohort generator."""

    n_subjects: int
    epochs_per_subject: int
    n_channels: int = 7
    samples_per_epoch: int = 3000
    epoch_seconds: float = 30.0
    male_fraction: float = 0.5
    age_range: tuple[int, int] = (21, 87)
    ahi_range: tuple[float, float] = (0.0, 60.0)
    noise_sigma: float = 0.3
    subgroup_shift: SubgroupShift | None = None
    demographics: tuple[Demographics, ...] | None = None

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.epochs_per_subject < 1:
            raise ValueError("epochs_per_subject must be >= 1")
        if self.n_channels < 1 or self.samples_per_epoch < 2:
            raise ValueError("signal geometry must be positive")
        if not 0.0 <= self.male_fraction <= 1.0:
            raise ValueError("male_fraction must lie in [0, 1]")
        if self.demographics is not None and len(self.demographics) != self.n_subjects:
            raise ValueError(
                f"explicit demographics list has {len(self.demographics)} "
                f"entries for {self.n_subjects} subjects")

    @property
    def sample_rate(self):
        return self.samples_per_epoch / self.epoch_seconds

    def stage_frequencies(self):
        """Per-stage dominant frequency in Hz (fractions of Nyquist)."""
        nyquist = self.sample_rate / 2.0
        return tuple(f * nyquist for f in STAGE_FREQ_FRACTIONS)

    def to_dict(self):
        return {
            "n_subjects": self.n_subjects,
            "epochs_per_subject": self.epochs_per_subject,
            "n_channels": self.n_channels,
            "samples_per_epoch": self.samples_per_epoch,
            "epoch_seconds": self.epoch_seconds,
            "male_fraction": self.male_fraction,
            "age_range": list(self.age_range),
            "ahi_range": list(self.ahi_range),
            "noise_sigma": self.noise_sigma,
            "subgroup_shift": (self.subgroup_shift.to_dict()
                               if self.subgroup_shift else None),
        }

    @classmethod
    def from_dict(cls, d):
        shift = d.get("subgroup_shift")
        return cls(
            n_subjects=d["n_subjects"],
            epochs_per_subject=d["epochs_per_subject"],
            n_channels=d.get("n_channels", 7),
            samples_per_epoch=d.get("samples_per_epoch", 3000),
            epoch_seconds=d.get("epoch_seconds", 30.0),
            male_fraction=d.get("male_fraction", 0.5),
            age_range=tuple(d.get("age_range", (21, 87))),
            ahi_range=tuple(d.get("ahi_range", (0.0, 60.0))),
            noise_sigma=d.get("noise_sigma", 0.3),
            subgroup_shift=SubgroupShift.from_dict(shift) if shift else None)


# Hypnogram cycle: wake, descend through light and deep sleep, come back
# up and hit REM. Guarantees all five stages appear within 36 epochs.
_HYPNOGRAM_CYCLE = (SleepStage.W, SleepStage.N1, SleepStage.N2,
                    SleepStage.N3, SleepStage.N2, SleepStage.REM)


def _synthetic_hypnogram(rng, n_epochs):
    labels = np.empty(n_epochs, dtype=np.uint8)
    pos = 0
    segment = 0
    while pos < n_epochs:
        stage = _HYPNOGRAM_CYCLE[segment % len(_HYPNOGRAM_CYCLE)]
        dwell = int(rng.integers(2, 7))
        end = min(pos + dwell, n_epochs)
        labels[pos:end] = int(stage)
        pos = end
        segment += 1
    return labels


def _sample_demographics(rng, spec):
    gender = Gender.MALE if rng.random() < spec.male_fraction else Gender.FEMALE
    age = int(rng.integers(spec.age_range[0], spec.age_range[1] + 1))
    ahi = float(np.round(rng.uniform(*spec.ahi_range), 1))
    return Demographics(gender, age, ahi)


def generate_synthetic_cohort(spec, seed):
    """Deterministic synthetic cohort with learnable stage structure.

    Every stage draws from its own generative family (a dominant
    oscillation at a stage-specific frequency plus noise); subjects get
    individual per-channel offsets and gains so that fold-scoped
    normalization matters. When a subgroup shift is configured, matching
    subjects' stage frequencies and amplitudes are transformed, giving
    that subgroup systematically different signal statistics.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    freqs = np.array(spec.stage_frequencies())
    amps = np.array(STAGE_AMPLITUDES)
    fs = spec.sample_rate
    t = np.arange(spec.samples_per_epoch) / fs
    channels = np.arange(spec.n_channels)
    channel_gain = 1.0 + 0.08 * channels

    subjects = []
    for idx in range(spec.n_subjects):
        if spec.demographics is not None:
            demo = spec.demographics[idx]
        else:
            demo = _sample_demographics(rng, spec)
        labels = _synthetic_hypnogram(rng, spec.epochs_per_subject)

        subj_freqs = freqs
        subj_amps = amps
        if spec.subgroup_shift is not None and spec.subgroup_shift.matches(demo):
            subj_freqs = freqs * spec.subgroup_shift.freq_scale
            subj_amps = amps * spec.subgroup_shift.amp_scale
        if np.any(subj_freqs >= fs / 2.0):
            raise ValueError(
                "stage frequency exceeds Nyquist; increase samples_per_epoch "
                "or reduce the frequency shift")

        offset = rng.normal(0.0, 0.5, size=spec.n_channels)
        gain = rng.uniform(0.85, 1.15, size=spec.n_channels)
        signals = np.empty(
            (spec.epochs_per_subject, spec.n_channels, spec.samples_per_epoch),
            dtype=np.float32)
        for e, stage in enumerate(labels):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = np.sin(2.0 * np.pi * subj_freqs[stage] * t[None, :]
                          + phase + 0.3 * channels[:, None])
            amp = subj_amps[stage] * channel_gain * gain
            noise = rng.normal(0.0, spec.noise_sigma,
                               size=(spec.n_channels, spec.samples_per_epoch))
            signals[e] = (amp[:, None] * wave + offset[:, None] + noise
                          ).astype(np.float32)
        subjects.append(SubjectRecord(
            subject_id=f"S{idx:03d}", demographics=demo,
            signals=signals, labels=labels))
    return Cohort(subjects=subjects, n_channels=spec.n_channels,
                  samples_per_epoch=spec.samples_per_epoch,
                  epoch_seconds=spec.epoch_seconds)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    """Per-channel z-score statistics with their training-set provenance."""

    mean: np.ndarray  # [channels] float64
    std: np.ndarray   # [channels] float64, clamped to >= 1e-8
    provenance: frozenset[str]
    n_epochs: int

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "provenance": sorted(self.provenance),
                "n_epochs": self.n_epochs}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64),
                   provenance=frozenset(d["provenance"]),
                   n_epochs=int(d["n_epochs"]))


STD_FLOOR = 1e-8


def compute_norm_stats(cohort, train_subject_ids):
    """Pooled per-channel mean/std over the listed subjects' scored epochs."""
    ids = list(train_subject_ids)
    if not ids:
        raise ValueError("norm stats need at least one training subject")
    n_channels = cohort.n_channels
    total = 0
    sum_x = np.zeros(n_channels, dtype=np.float64)
    sum_x2 = np.zeros(n_channels, dtype=np.float64)
    n_epochs = 0
    for sid in ids:
        rec = cohort.subject(sid)  # raises KeyError for unknown ids
        x = rec.signals.astype(np.float64)
        sum_x += x.sum(axis=(0, 2))
        sum_x2 += (x * x).sum(axis=(0, 2))
        total += rec.n_epochs * cohort.samples_per_epoch
        n_epochs += rec.n_epochs
    mean = sum_x / total
    var = np.maximum(sum_x2 / total - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return NormStats(mean=mean, std=std, provenance=frozenset(ids),
                     n_epochs=n_epochs)


def apply_normalization(record, stats):
    """(x - mean) / std per channel; returns a new record (not idempotent)."""
    mean = stats.mean.astype(np.float32)[None, :, None]
    std = stats.std.astype(np.float32)[None, :, None]
    return replace(record, signals=(record.signals - mean) / std)


# ---------------------------------------------------------------------------
# sequence windowing
# ---------------------------------------------------------------------------

@dataclass
class SequenceBatchItem:
    """One seq_len window of consecutive epochs from a single subject.

    Masked-out positions (padding, or epochs already covered by an
    earlier eval window) contribute to neither loss nor metrics.
    """

    subject_id: str
    start: int
    inputs: np.ndarray   # [seq_len, channels, samples] float32
    labels: np.ndarray   # [seq_len] int64, zero at padded positions
    mask: np.ndarray     # [seq_len] bool

    @property
    def n_valid(self):
        return int(self.mask.sum())


def window_sequences(record, seq_len, mode, stride=None):
    """Cut a record into seq_len windows.

    Train mode emits non-overlapping full windows (configurable stride)
    and drops any short tail. Eval mode tiles non-overlapping windows
    plus one right-aligned final window so every epoch is covered
    exactly once; overlapping positions in the final window are masked
    out (first window wins). Records shorter than seq_len become a
    single zero-padded, masked window in eval mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n = record.n_epochs
    items = []

    if mode == "train":
        stride = seq_len if stride is None else stride
        if stride < 1:
            raise ValueError("stride must be >= 1")
        for start in range(0, n - seq_len + 1, stride):
            items.append(SequenceBatchItem(
                subject_id=record.subject_id, start=start,
                inputs=record.signals[start:start + seq_len],
                labels=record.labels[start:start + seq_len].astype(np.int64),
                mask=np.ones(seq_len, dtype=bool)))
        return items

    if n < seq_len:
        inputs = np.zeros((seq_len,) + record.signals.shape[1:], dtype=np.float32)
        inputs[:n] = record.signals
        labels = np.zeros(seq_len, dtype=np.int64)
        labels[:n] = record.labels
        mask = np.zeros(seq_len, dtype=bool)
        mask[:n] = True
        return [SequenceBatchItem(subject_id=record.subject_id, start=0,
                                  inputs=inputs, labels=labels, mask=mask)]

    starts = list(range(0, n - seq_len + 1, seq_len))
    covered = starts[-1] + seq_len
    if covered < n:
        starts.append(n - seq_len)
    scored_until = 0
    for start in starts:
        mask = np.zeros(seq_len, dtype=bool)
        first_new = max(start, scored_until)
        mask[first_new - start:] = True
        scored_until = start + seq_len
        items.append(SequenceBatchItem(
            subject_id=record.subject_id, start=start,
            inputs=record.signals[start:start + seq_len],
            labels=record.labels[start:start + seq_len].astype(np.int64),
            mask=mask))
    return items
