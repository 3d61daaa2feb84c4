"""Per-subject loss weights from each subject's Wasserstein distance to the group.

alpha_i is the distance between subject i's sample distribution and the pooled
group distribution. lambda_i = 1 - alpha_i / sum(alpha), so subjects far from
the group get smaller classifier-loss weight, and the group term takes what
is left so that lambda_g + sum(lambda_i) = 1.

For more than two subjects the raw lambdas already sum to S - 1, which makes
lambda_g = 2 - S negative. ``mode="paper"`` applies the formulas verbatim and
refuses that case; ``mode="budget"`` (default) rescales the raw lambdas to
sum to ``beta`` and sets lambda_g = 1 - beta, which keeps their ordering and
ratios.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import ConfigurationError, DataError, DegenerateDistanceError, NormalizationError
from .ot import DEFAULT_CAP, EmpiricalDistribution, emd_exact, sliced_wasserstein, subsample
from .seeding import derive_seed, stream_rng

log = logging.getLogger(__name__)

MODES = ("budget", "paper", "degenerate")
ZERO_TOL = 1e-12


@dataclass(frozen=True)
class EstimatorConfig:
    method: str = "sliced"  # "sliced" or "exact"
    n_projections: int = 64
    p: float = 1.0
    cap: int = DEFAULT_CAP
    exclude_self: bool = False
    calibrate: bool = True

    def __post_init__(self):
        if self.method not in ("sliced", "exact"):
            raise ConfigurationError(f"unknown estimator {self.method!r}")
        if self.n_projections < 1 or self.cap < 2:
            raise ConfigurationError("n_projections must be >= 1 and cap >= 2")

    def to_dict(self):
        return asdict(self)


@dataclass
class SubjectWeights:
    alphas: dict
    lambdas: dict
    lambda_g: float
    mode: str
    beta: float | None = None
    provenance: dict = field(default_factory=dict)

    @classmethod
    def degenerate(cls, subjects, alphas=None, provenance=None) -> "SubjectWeights":
        """Group term only: lambda_g = 1, every subject lambda = 0."""
        subjects = list(subjects)
        return cls(
            dict(alphas) if alphas else {s: 0.0 for s in subjects},
            {s: 0.0 for s in subjects}, 1.0, "degenerate", None, dict(provenance or {}),
        )

    def per_sample(self, subjects) -> np.ndarray:
        try:
            return np.array([self.lambdas[str(s)] for s in subjects], dtype=np.float64)
        except KeyError as exc:
            raise ConfigurationError(f"subject {exc.args[0]!r} has no weight") from None

    def scaled(self, k: float) -> "SubjectWeights":
        return SubjectWeights(dict(self.alphas), {s: k * v for s, v in self.lambdas.items()},
                              k * self.lambda_g, self.mode, self.beta, dict(self.provenance))

    def to_dict(self):
        return {
            "subjects": {s: {"alpha": self.alphas.get(s), "lambda": self.lambdas[s]} for s in self.lambdas},
            "lambda_g": self.lambda_g,
            "mode": self.mode,
            "beta": self.beta,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d) -> "SubjectWeights":
        subs = d["subjects"]
        return cls({s: v["alpha"] for s, v in subs.items()}, {s: v["lambda"] for s, v in subs.items()},
                   d["lambda_g"], d["mode"], d.get("beta"), d.get("provenance", {}))


def _distance(s_pts, g_pts, est: EstimatorConfig, proj_seed, sub_rng):
    s = EmpiricalDistribution.uniform(s_pts)
    g = EmpiricalDistribution.uniform(g_pts)
    if est.method == "sliced":
        return sliced_wasserstein(s, g, est.n_projections, est.p, proj_seed, est.calibrate)
    if s.n + g.n > est.cap:
        ks = min(s.n, est.cap // 2)
        s = subsample(s, ks, sub_rng)
        g = subsample(g, est.cap - s.n, sub_rng)
    cost, _ = emd_exact(s, g, cap=est.cap)
    return cost


def compute_alphas(dataset, space="input", encoder: nn.MlpParams | None = None,
                   estimator: EstimatorConfig = EstimatorConfig(), seed: int = 0,
                   subjects=None) -> dict:
    """Distance from every subject's samples to the group distribution.

    ``space="latent"`` measures in the encoder's output space. All subjects
    share one set of projection directions so their alphas are comparable.
    """
    roster = list(subjects) if subjects is not None else dataset.roster
    if len(roster) < 2:
        raise ConfigurationError("subject weighting needs at least two subjects")
    if space == "latent":
        if encoder is None:
            raise ConfigurationError("latent-space alphas need an encoder")
        points, _ = nn.forward(encoder, dataset.features)
    elif space == "input":
        points = dataset.features
    else:
        raise ConfigurationError(f"unknown space {space!r}")
    proj_seed = derive_seed(seed, "projections")
    alphas = {}
    for k, subject in enumerate(roster):
        mask = dataset.subjects == subject
        if not mask.any():
            raise DataError(f"subject {subject!r} has no samples")
        group = points[~mask] if estimator.exclude_self else points
        if group.shape[0] == 0:
            raise DataError("group distribution is empty")
        alphas[subject] = float(_distance(points[mask], group, estimator, proj_seed,
                                          stream_rng(seed, "subsample", k)))
    return alphas


def compute_lambdas(alphas: dict, mode: str = "budget", beta: float = 0.5,
                    on_degenerate: str = "raise", provenance=None) -> SubjectWeights:
    """Turn distances into loss weights.

    ``on_degenerate="uniform"`` falls back to lambda = beta / S (budget) when
    every alpha is zero instead of raising.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown weighting mode {mode!r}")
    if not alphas:
        raise ConfigurationError("no subjects to weight")
    subjects = list(alphas)
    a = np.array([float(alphas[s]) for s in subjects])
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ConfigurationError("alphas must be finite and nonnegative")
    prov = dict(provenance or {})
    if mode == "degenerate":
        return SubjectWeights.degenerate(subjects, alphas, prov)
    if mode == "budget" and not 0.0 < beta < 1.0:
        raise ConfigurationError(f"beta must lie in (0, 1), got {beta}")
    total = abs(a.sum())
    if total <= ZERO_TOL:
        if on_degenerate == "uniform" and mode == "budget":
            log.warning("all subject distances are zero; using uniform lambda = beta / S")
            lam = np.full(a.size, beta / a.size)
            return SubjectWeights(dict(zip(subjects, a.tolist())), dict(zip(subjects, lam.tolist())),
                                  1.0 - beta, mode, beta, {**prov, "fallback": "uniform"})
        raise DegenerateDistanceError(
            "all subject distances are zero (every subject matches the group); "
            "nothing to normalise. Use budget mode with the uniform fallback (lambda = beta / S)."
        )
    raw = 1.0 - a / total
    if mode == "paper":
        lambda_g = 1.0 - float(raw.sum())
        if lambda_g < -1e-12:
            raise NormalizationError(
                f"paper mode gives lambda_g = {lambda_g:.6g} < 0: the subject lambdas "
                f"(1 - alpha_i / sum alpha) sum to S - 1 = {a.size - 1}, so requiring all "
                f"regularisers to sum to 1 forces a negative group weight for S > 2. "
                f"Use --mode budget.",
                lambda_g=lambda_g,
            )
        return SubjectWeights(dict(zip(subjects, a.tolist())), dict(zip(subjects, raw.tolist())),
                              max(lambda_g, 0.0), mode, None, prov)
    if a.size < 2:
        raise ConfigurationError("budget mode needs at least two subjects")
    lam = beta * raw / raw.sum()
    return SubjectWeights(dict(zip(subjects, a.tolist())), dict(zip(subjects, lam.tolist())),
                          1.0 - beta, mode, beta, prov)
