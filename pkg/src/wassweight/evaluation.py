"""Leave-one-subject-out evaluation and latent-space separation metrics."""
from __future__ import annotations

import csv
import hashlib
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, apply_normalizer, fit_normalizer, loso_splits
from .errors import ConfigurationError, ShapeError
from .model import TrainConfig, encode, predict, train
from .seeding import derive_seed

REPORT_SCHEMA = "wassweight-report/1"


@dataclass
class SeparationReport:
    """Class geometry in latent space.

    Matrices are ``(C, C)``; entries involving a class with no samples are NaN
    (undefined), never zero.
    """

    centroids: np.ndarray
    centroid_distances: np.ndarray
    min_distances: np.ndarray
    class_counts: np.ndarray
    split: str = "test"

    def to_dict(self):
        return {
            "split": self.split,
            "class_counts": self.class_counts.tolist(),
            "centroids": _nan_to_none(self.centroids),
            "centroid_distances": _nan_to_none(self.centroid_distances),
            "min_distances": _nan_to_none(self.min_distances),
        }


def _nan_to_none(a):
    return [[None if math.isnan(v) else v for v in row] for row in np.asarray(a).tolist()]


def _pair_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))


def min_pair_distance(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> float:
    best = math.inf
    for start in range(0, a.shape[0], chunk):
        best = min(best, float(_pair_distances(a[start:start + chunk], b).min()))
    return best


def separation_metrics(latents, labels, n_classes: int | None = None, split: str = "test") -> SeparationReport:
    z = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeError("latents must be (n, k) with one label per row")
    C = int(n_classes if n_classes is not None else y.max() + 1)
    k = z.shape[1]
    counts = np.array([np.sum(y == c) for c in range(C)])
    centroids = np.full((C, k), np.nan)
    for c in range(C):
        if counts[c]:
            centroids[c] = z[y == c].mean(axis=0)
    cent = np.full((C, C), np.nan)
    mins = np.full((C, C), np.nan)
    for a in range(C):
        if not counts[a]:
            continue
        cent[a, a] = mins[a, a] = 0.0
        for b in range(a + 1, C):
            if not counts[b]:
                continue
            cent[a, b] = cent[b, a] = float(np.linalg.norm(centroids[a] - centroids[b]))
            mins[a, b] = mins[b, a] = min_pair_distance(z[y == a], z[y == b])
    return SeparationReport(centroids, cent, mins, counts, split)


@dataclass
class PcaResult:
    projected: np.ndarray
    basis: np.ndarray  # (k, components), orthonormal columns
    explained_variance: np.ndarray
    mean: np.ndarray
    total_variance: float


def pca_project(latents, components: int = 3) -> PcaResult:
    """Project onto the top principal axes of the sample covariance (n - 1).

    Each basis vector is signed so its first non-negligible entry is positive.
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ShapeError("PCA needs an (n, k) array with n >= 2")
    if components < 1 or components > z.shape[1]:
        raise ConfigurationError(f"components must be in [1, {z.shape[1]}], got {components}")
    mean = z.mean(axis=0)
    centered = z - mean
    cov = centered.T @ centered / (z.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:components]
    basis = evecs[:, order]
    for j in range(components):
        nz = np.flatnonzero(np.abs(basis[:, j]) > 1e-12)
        if nz.size and basis[nz[0], j] < 0:
            basis[:, j] = -basis[:, j]
    variances = np.clip(evals[order], 0.0, None)
    return PcaResult(centered @ basis, basis, variances, mean, float(np.trace(cov)))


def pca_reconstruction_error(latents, components: int) -> float:
    res = pca_project(latents, components)
    z = np.asarray(latents, dtype=np.float64)
    recon = res.projected @ res.basis.T + res.mean
    return float(np.mean((z - recon) ** 2))


def write_projection_csv(path, rows) -> None:
    """``rows``: iterable of (projected (n,3), labels, subjects, split)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pc1", "pc2", "pc3", "label", "subject_id", "split"])
        for proj, labels, subjects, split in rows:
            proj = np.asarray(proj)
            if proj.shape[1] < 3:
                proj = np.hstack([proj, np.zeros((proj.shape[0], 3 - proj.shape[1]))])
            for p, y, s in zip(proj, labels, subjects):
                w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), int(y), s, split])


def split_fingerprint(train: LabeledDataset, test: LabeledDataset) -> str:
    h = hashlib.sha256()
    for part in (train, test):
        h.update(part.split.encode())
        h.update("\x1f".join(part.subjects.tolist()).encode())
        h.update(part.labels.tobytes())
        h.update(np.ascontiguousarray(part.features).tobytes())
    return h.hexdigest()


@dataclass
class FoldResult:
    held_out: str
    accuracy: float
    train_report: SeparationReport
    test_report: SeparationReport
    weights: object
    config: dict
    fingerprint: str
    train_subjects: list = field(default_factory=list)
    normalizer_fitted_on: str = ""
    n_train: int = 0
    n_test: int = 0

    def to_dict(self):
        return {
            "held_out": self.held_out,
            "accuracy": self.accuracy,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "train_subjects": self.train_subjects,
            "normalizer_fitted_on": self.normalizer_fitted_on,
            "split_fingerprint": self.fingerprint,
            "train_separation": self.train_report.to_dict(),
            "test_separation": self.test_report.to_dict(),
            "subject_weights": self.weights.to_dict() if self.weights is not None else None,
            "config": self.config,
        }


def accuracy(pred, labels) -> float:
    labels = np.asarray(labels)
    return float(np.mean(np.asarray(pred) == labels)) if labels.size else float("nan")


def fold_seed(seed: int, roster, subject) -> int:
    return derive_seed(seed, "folds", list(roster).index(subject))


def run_fold(fold, config: TrainConfig, roster) -> FoldResult:
    stats = fit_normalizer(fold.train)
    # the normaliser must only ever see this fold's training rows
    assert stats.fitted_on == fold.train.split and stats.fitted_on.startswith("train")
    train_n = apply_normalizer(stats, fold.train)
    test_n = apply_normalizer(stats, fold.test)
    cfg = config.replace(seed=fold_seed(config.seed, roster, fold.held_out))
    result = train(train_n, cfg)
    model = result.model
    return FoldResult(
        held_out=fold.held_out,
        accuracy=accuracy(predict(model, test_n.features), test_n.labels),
        train_report=separation_metrics(encode(model, train_n.features), train_n.labels,
                                        train_n.n_classes, "train"),
        test_report=separation_metrics(encode(model, test_n.features), test_n.labels,
                                       test_n.n_classes, "test"),
        weights=result.weights,
        config=cfg.to_dict(),
        fingerprint=split_fingerprint(fold.train, fold.test),
        train_subjects=fold.train.roster,
        normalizer_fitted_on=stats.fitted_on,
        n_train=len(train_n),
        n_test=len(test_n),
    )


def _run_fold_job(args):
    fold, config, roster = args
    try:
        return run_fold(fold, config, roster), None
    except Exception as exc:  # collected per fold, re-raised by the caller if asked
        return None, exc


def run_loso(dataset: LabeledDataset, config: TrainConfig, max_folds=None, jobs: int = 1,
             failures: list | None = None) -> list[FoldResult]:
    """Train and evaluate one model per held-out subject.

    Fold results come back in held-out order whatever ``jobs`` is. When
    ``failures`` is a list, per-fold exceptions are appended to it as
    ``(subject, exception)`` instead of being raised.
    """
    folds = loso_splits(dataset, max_folds, config.seed)
    roster = dataset.roster
    jobs_args = [(f, config, roster) for f in folds]
    if jobs > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_fold_job, jobs_args))
    else:
        outcomes = [_run_fold_job(a) for a in jobs_args]
    results = []
    for fold, (res, exc) in zip(folds, outcomes):
        if exc is not None:
            if failures is None:
                raise exc
            failures.append((fold.held_out, exc))
        else:
            results.append(res)
    return results


def percent_change(weighted: float, baseline: float):
    if not (np.isfinite(weighted) and np.isfinite(baseline)) or baseline <= 0:
        return None
    return 100.0 * (weighted - baseline) / baseline


def _pair_changes(base: np.ndarray, weighted: np.ndarray) -> dict:
    C = base.shape[0]
    return {f"{a}-{b}": percent_change(weighted[a, b], base[a, b]) for a in range(C) for b in range(a + 1, C)}


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _mean_std(values):
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        return None, None
    return float(vals.mean()), (float(vals.std(ddof=1)) if vals.size > 1 else None)


@dataclass
class ComparisonReport:
    baseline: list
    weighted: list
    baseline_config: dict
    weighted_config: dict
    max_folds: int | None = None
    failures: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        for b, w in zip(self.baseline, self.weighted):
            if b.held_out != w.held_out or b.fingerprint != w.fingerprint:
                raise AssertionError(f"paired folds differ for {b.held_out!r}/{w.held_out!r}")

    def fold_changes(self, split="test", metric="centroid"):
        attr = "centroid_distances" if metric == "centroid" else "min_distances"
        rep = "test_report" if split == "test" else "train_report"
        return [
            _pair_changes(getattr(getattr(b, rep), attr), getattr(getattr(w, rep), attr))
            for b, w in zip(self.baseline, self.weighted)
        ]

    def mean_change(self, split="test", metric="centroid"):
        """Mean percent change over every fold and class pair with a defined value."""
        return _mean(v for fold in self.fold_changes(split, metric) for v in fold.values())

    def pair_means(self, split="test", metric="centroid") -> dict:
        folds = self.fold_changes(split, metric)
        keys = folds[0].keys() if folds else []
        return {k: _mean(f[k] for f in folds) for k in keys}

    def accuracy_summary(self):
        out = {}
        for name, runs in (("baseline", self.baseline), ("weighted", self.weighted)):
            mean, std = _mean_std([r.accuracy for r in runs])
            out[name] = {"mean": mean, "std": std}
        return out

    def summary(self):
        s = {"accuracy": self.accuracy_summary()}
        for split in ("test", "train"):
            for metric in ("centroid", "min"):
                s[f"{split}_{metric}_percent_change_mean"] = self.mean_change(split, metric)
                s[f"{split}_{metric}_percent_change_by_pair"] = self.pair_means(split, metric)
        return s

    def to_dict(self):
        folds = []
        for b, w in zip(self.baseline, self.weighted):
            folds.append({
                "held_out": b.held_out,
                "split_fingerprint": b.fingerprint,
                "baseline": b.to_dict(),
                "weighted": w.to_dict(),
                "percent_change": {
                    f"{split}_{metric}": _pair_changes(
                        getattr(getattr(b, f"{split}_report"), attr),
                        getattr(getattr(w, f"{split}_report"), attr))
                    for split in ("test", "train")
                    for metric, attr in (("centroid", "centroid_distances"), ("min", "min_distances"))
                },
            })
        return {
            "schema": REPORT_SCHEMA,
            "kind": "comparison",
            "baseline_config": self.baseline_config,
            "weighted_config": self.weighted_config,
            "seeds": {"baseline": self.baseline_config["seed"], "weighted": self.weighted_config["seed"]},
            "max_folds": self.max_folds,
            "summary": self.summary(),
            "folds": folds,
            "failures": [{"held_out": s, "error": str(e)} for s, e in self.failures],
            "timing": self.timings,
        }


def compare_modes(dataset: LabeledDataset, config: TrainConfig, max_folds=None, jobs: int = 1,
                  failures: list | None = None, weighted_config: TrainConfig | None = None) -> ComparisonReport:
    """Run LOSO twice on identical folds and seeds: MSE baseline vs weighted loss.

    ``weighted_config`` overrides the weighted run's config (its seed must
    match), e.g. to force degenerate weights.
    """
    base_cfg = config.replace(loss_mode="mse_baseline")
    w_cfg = (weighted_config or config).replace(loss_mode="wasserstein_weighted")
    if w_cfg.seed != base_cfg.seed:
        raise ConfigurationError("paired runs must share a seed")
    timings = {}
    t0 = time.perf_counter()
    base_fail, w_fail = [], []
    baseline = run_loso(dataset, base_cfg, max_folds, jobs, base_fail if failures is not None else None)
    timings["baseline_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    weighted = run_loso(dataset, w_cfg, max_folds, jobs, w_fail if failures is not None else None)
    timings["weighted_seconds"] = time.perf_counter() - t0
    all_fail = [(f"baseline:{s}", e) for s, e in base_fail] + [(f"weighted:{s}", e) for s, e in w_fail]
    if failures is not None:
        failures.extend(all_fail)
    ok = {b.held_out for b in baseline} & {w.held_out for w in weighted}
    baseline = [b for b in baseline if b.held_out in ok]
    weighted = [w for w in weighted if w.held_out in ok]
    return ComparisonReport(baseline, weighted, base_cfg.to_dict(), w_cfg.to_dict(), max_folds, all_fail, timings)
