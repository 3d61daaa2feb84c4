"""Labelled multi-subject datasets: CSV I/O, z-scoring, LOSO folds, synthetic data."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError
from .seeding import stream_rng

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Sample:
    subject_id: str
    label: int
    features: tuple


@dataclass(frozen=True)
class LabeledDataset:
    """Column-oriented sample store.

    ``split`` tags where the rows came from ("all", "train:<subject>",
    "test:<subject>") so the normaliser can refuse test data.
    """

    features: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    n_classes: int
    split: str = "all"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        s = np.asarray(self.subjects, dtype=str)
        if x.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],) or s.shape != (x.shape[0],):
            raise DataError("features, labels and subjects must have the same length")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite values")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "subjects", s)

    @classmethod
    def from_samples(cls, samples, n_classes=None, split="all") -> "LabeledDataset":
        samples = list(samples)
        if not samples:
            raise DataError("no samples")
        labels = [s.label for s in samples]
        return cls(
            np.array([s.features for s in samples], dtype=np.float64),
            np.array(labels),
            np.array([s.subject_id for s in samples]),
            n_classes if n_classes is not None else max(labels) + 1,
            split,
        )

    def __len__(self):
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def roster(self) -> list[str]:
        """Subjects in order of first appearance."""
        _, first = np.unique(self.subjects, return_index=True)
        return [str(s) for s in self.subjects[np.sort(first)]]

    def samples(self):
        for x, y, s in zip(self.features, self.labels, self.subjects):
            yield Sample(str(s), int(y), tuple(x.tolist()))

    def subject_counts(self) -> dict[str, int]:
        return {s: int(np.sum(self.subjects == s)) for s in self.roster}

    def subset(self, index, split=None) -> "LabeledDataset":
        return LabeledDataset(
            self.features[index], self.labels[index], self.subjects[index], self.n_classes,
            self.split if split is None else split,
        )

    def for_subjects(self, subjects, split=None) -> "LabeledDataset":
        return self.subset(np.isin(self.subjects, list(subjects)), split)

    def with_features(self, features) -> "LabeledDataset":
        return LabeledDataset(features, self.labels, self.subjects, self.n_classes, self.split)


def load_csv(path) -> LabeledDataset:
    """Read ``subject_id,label,f0,...,f{d-1}`` rows, preserving order."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        d = len(header) - 2
        expected = ["subject_id", "label"] + [f"f{k}" for k in range(d)]
        if d < 1 or [h.strip() for h in header] != expected:
            raise DataError(f"{path}:1: header must be subject_id,label,f0,...,f{{d-1}}")
        subjects, labels, rows = [], [], []
        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != d + 2:
                raise DataError(f"{path}:{line}: expected {d + 2} fields, got {len(row)}")
            try:
                label = int(row[1])
            except ValueError:
                raise DataError(f"{path}:{line}: label {row[1]!r} is not an integer") from None
            if label < 0:
                raise DataError(f"{path}:{line}: negative label {label}")
            try:
                feats = [float(v) for v in row[2:]]
            except ValueError:
                raise DataError(f"{path}:{line}: non-numeric feature value") from None
            if not all(np.isfinite(feats)):
                raise DataError(f"{path}:{line}: non-finite feature value")
            subjects.append(row[0])
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise DataError(f"{path}: no samples")
    return LabeledDataset(np.array(rows), np.array(labels), np.array(subjects), max(labels) + 1)


def write_csv(dataset: LabeledDataset, path) -> None:
    """Write the CSV schema; ``repr`` keeps every float round-trippable."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "label"] + [f"f{k}" for k in range(dataset.dim)])
        for x, y, s in zip(dataset.features, dataset.labels, dataset.subjects):
            writer.writerow([s, int(y)] + [repr(float(v)) for v in x])


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: str
    clamped: tuple = ()

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "fitted_on": self.fitted_on, "clamped": list(self.clamped)}


def fit_normalizer(dataset: LabeledDataset) -> NormalizationStats:
    if dataset.split.startswith("test"):
        raise ConfigurationError(f"refusing to fit normalisation on {dataset.split!r}")
    mean = dataset.features.mean(axis=0)
    std = dataset.features.std(axis=0)
    clamped = tuple(int(k) for k in np.flatnonzero(std < STD_FLOOR))
    if clamped:
        log.warning("features %s have (near) zero variance; std clamped to %g", clamped, STD_FLOOR)
    return NormalizationStats(mean, np.maximum(std, STD_FLOOR), dataset.split, clamped)


def apply_normalizer(stats: NormalizationStats, dataset: LabeledDataset) -> LabeledDataset:
    if stats.mean.size != dataset.dim:
        raise ConfigurationError(f"stats cover {stats.mean.size} features, dataset has {dataset.dim}")
    return dataset.with_features((dataset.features - stats.mean) / stats.std)


@dataclass(frozen=True)
class Fold:
    held_out: str
    train: LabeledDataset
    test: LabeledDataset

    @property
    def train_subjects(self) -> set:
        return set(self.train.roster)

    @property
    def test_subjects(self) -> set:
        return set(self.test.roster)


def select_held_out(roster, max_folds=None, seed=0) -> list[str]:
    """Subjects to hold out, in roster order; a seeded draw when capped."""
    roster = list(roster)
    if max_folds is None or max_folds >= len(roster):
        return roster
    if max_folds < 1:
        raise ConfigurationError("fold cap must be >= 1")
    rng = stream_rng(seed, "folds")
    chosen = set(rng.permutation(len(roster))[:max_folds].tolist())
    return [s for k, s in enumerate(roster) if k in chosen]


def loso_splits(dataset: LabeledDataset, max_folds=None, seed=0) -> list[Fold]:
    roster = dataset.roster
    if len(roster) < 2:
        raise ConfigurationError("leave-one-subject-out needs at least two subjects")
    folds = []
    for subject in select_held_out(roster, max_folds, seed):
        mask = dataset.subjects == subject
        folds.append(Fold(
            subject,
            dataset.subset(~mask, split=f"train:{subject}"),
            dataset.subset(mask, split=f"test:{subject}"),
        ))
    return folds


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings.

    A sample of subject ``i`` and class ``c`` is
    ``class_mean[c] + subject_shift * multiplier[i] * direction[i] + noise * N(0, I)``
    where class means lie at distance ``class_separation`` from the origin
    along random unit directions. ``multipliers`` may be shorter than
    ``subjects``; missing entries are 1.
    """

    subjects: int = 6
    classes: int = 3
    dim: int = 12
    samples_per_class: int = 30
    class_separation: float = 2.0
    subject_shift: float = 1.0
    multipliers: tuple = ()
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("subjects", "classes", "dim", "samples_per_class"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("class_separation", "subject_shift", "noise"):
            if float(getattr(self, name)) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        mults = tuple(float(m) for m in self.multipliers)
        if len(mults) > self.subjects or any(m < 0 for m in mults):
            raise ConfigurationError("multipliers must be nonnegative, at most one per subject")
        object.__setattr__(self, "multipliers", mults)

    def multiplier(self, i: int) -> float:
        return self.multipliers[i] if i < len(self.multipliers) else 1.0

    def to_dict(self):
        d = asdict(self)
        d["multipliers"] = list(self.multipliers)
        return d


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def synth_generate(config: SyntheticConfig) -> LabeledDataset:
    rng = stream_rng(config.seed, "synth")
    # fixed draw order: class means, subject directions, then noise, so
    # changing multipliers never changes any random draw
    means = _unit_rows(rng, config.classes, config.dim) * config.class_separation
    directions = _unit_rows(rng, config.subjects, config.dim)
    width = max(2, len(str(config.subjects - 1)))
    feats, labels, subjects = [], [], []
    for i in range(config.subjects):
        offset = directions[i] * config.subject_shift * config.multiplier(i)
        for c in range(config.classes):
            noise = rng.standard_normal((config.samples_per_class, config.dim)) * config.noise
            feats.append(means[c] + offset + noise)
            labels.extend([c] * config.samples_per_class)
            subjects.extend([f"s{i:0{width}d}"] * config.samples_per_class)
    return LabeledDataset(np.vstack(feats), np.array(labels), np.array(subjects), config.classes)


def write_synthetic(config: SyntheticConfig, path) -> LabeledDataset:
    """Generate, write the CSV and a ``<path>.json`` sidecar with the config."""
    ds = synth_generate(config)
    write_csv(ds, path)
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps({"synthetic_config": config.to_dict(), "seed": config.seed}, indent=2, sort_keys=True) + "\n")
    return ds
