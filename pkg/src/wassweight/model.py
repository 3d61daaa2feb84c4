"""Autoencoder with a classifier on the latent code, trained jointly.

The encoder feeds two heads: the decoder (reconstruction, MSE) and the
classifier (softmax, cross-entropy). The objective per batch is

    total = w_r * r_g + c_g + sum_i c_{s,i}

with r_g the mean reconstruction error, c_g = lambda_g * mean CE over the
batch, and c_{s,i} = lambda_i * mean CE over subject i's rows in the batch.
The MSE baseline is the same objective with lambda_g = 1 and every
lambda_i = 0.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigurationError, DataError, NumericError
from .seeding import derive_seed, stream_rng
from .weighting import EstimatorConfig, SubjectWeights, compute_alphas, compute_lambdas

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "wassweight-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_MODES = ("mse_baseline", "wasserstein_weighted")


@dataclass(frozen=True)
class ArchConfig:
    latent_dim: int = 8
    encoder_hidden: tuple = (32,)
    classifier_hidden: tuple = (16,)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        object.__setattr__(self, "classifier_hidden", tuple(int(h) for h in self.classifier_hidden))
        if self.latent_dim < 1 or any(h < 1 for h in self.encoder_hidden + self.classifier_hidden):
            raise ConfigurationError("layer widths must be >= 1")


@dataclass(frozen=True)
class WeightingConfig:
    mode: str = "budget"
    beta: float = 0.5
    space: str = "input"
    refresh: int = 5  # epochs between latent-space recomputations
    on_degenerate: str = "uniform"
    estimator: EstimatorConfig = EstimatorConfig()

    def __post_init__(self):
        if isinstance(self.estimator, dict):
            object.__setattr__(self, "estimator", EstimatorConfig(**self.estimator))
        if self.space not in ("input", "latent"):
            raise ConfigurationError(f"unknown weighting space {self.space!r}")
        if self.refresh < 1:
            raise ConfigurationError("refresh interval must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64  # 0 means full batch
    lr: float = 1e-3
    recon_weight: float = 1.0
    loss_mode: str = "wasserstein_weighted"
    optimizer: str = "adam"
    seed: int = 0
    arch: ArchConfig = ArchConfig()
    weighting: WeightingConfig = WeightingConfig()

    def __post_init__(self):
        if isinstance(self.arch, dict):
            object.__setattr__(self, "arch", ArchConfig(**self.arch))
        if isinstance(self.weighting, dict):
            object.__setattr__(self, "weighting", WeightingConfig(**self.weighting))
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}")
        if self.epochs < 0 or self.batch_size < 0:
            raise ConfigurationError("epochs and batch_size must be >= 0")
        if self.lr < 0 or self.recon_weight <= 0:
            raise ConfigurationError("lr must be >= 0 and recon_weight > 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return _replace_nested(self, changes)


def _replace_nested(obj, changes):
    """``dataclasses.replace`` that also accepts dotted keys like ``weighting.beta``."""
    direct, nested = {}, {}
    for key, value in changes.items():
        head, _, rest = key.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            direct[head] = value
    names = {f.name for f in fields(obj)}
    unknown = set(direct) | set(nested)
    unknown -= names
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {f.name: getattr(obj, f.name) for f in fields(obj)}
    kwargs.update(direct)
    for head, sub in nested.items():
        kwargs[head] = _replace_nested(kwargs[head], sub)
    return type(obj)(**kwargs)


@dataclass
class AutoencoderClassifier:
    encoder: nn.MlpParams
    decoder: nn.MlpParams
    classifier: nn.MlpParams

    def __post_init__(self):
        k = self.encoder.output_dim
        if self.decoder.input_dim != k or self.classifier.input_dim != k:
            raise ConfigurationError("decoder and classifier must take the encoder's latent dim")
        if self.decoder.output_dim != self.encoder.input_dim:
            raise ConfigurationError("decoder must reconstruct the input dim")
        if self.classifier.specs[-1].activation != "softmax":
            raise ConfigurationError("classifier must end in softmax")

    @property
    def latent_dim(self) -> int:
        return self.encoder.output_dim

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    @property
    def n_classes(self) -> int:
        return self.classifier.output_dim

    @classmethod
    def build(cls, input_dim: int, n_classes: int, arch: ArchConfig = ArchConfig(), seed: int = 0):
        act = arch.activation
        enc_dims = (input_dim, *arch.encoder_hidden, arch.latent_dim)
        encoder = nn.init_params(nn.chain_specs(enc_dims, act, "linear"), derive_seed(seed, "init", 0))
        decoder = nn.init_params(nn.chain_specs(enc_dims[::-1], act, "linear"), derive_seed(seed, "init", 1))
        cls_dims = (arch.latent_dim, *arch.classifier_hidden, n_classes)
        classifier = nn.init_params(nn.chain_specs(cls_dims, act, "softmax"), derive_seed(seed, "init", 2))
        return cls(encoder, decoder, classifier)

    def parts(self):
        return (self.encoder, self.decoder, self.classifier)

    def to_dict(self):
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict(),
                "classifier": self.classifier.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(*(nn.MlpParams.from_dict(d[k]) for k in ("encoder", "decoder", "classifier")))


@dataclass
class LossBreakdown:
    r_g: float
    c_g: float
    c_s_i: dict
    c_s: float
    total: float
    n: int

    def to_dict(self):
        return asdict(self)


@dataclass
class ModelGradients:
    encoder: nn.Gradients
    decoder: nn.Gradients
    classifier: nn.Gradients

    def parts(self):
        return (self.encoder, self.decoder, self.classifier)


def composite_loss(model: AutoencoderClassifier, features, labels, subjects, weights: SubjectWeights,
                   recon_weight: float = 1.0):
    """Loss breakdown and exact gradients of ``w_r * r_g + c_g + c_s``."""
    x = nn.as_batch(features, model.input_dim, "features")
    labels = np.asarray(labels, dtype=np.int64)
    subjects = np.asarray(subjects, dtype=str)
    n = x.shape[0]
    if n == 0:
        raise DataError("empty batch")
    lam = weights.per_sample(subjects)

    z, enc_cache = nn.forward(model.encoder, x)
    recon, dec_cache = nn.forward(model.decoder, z)
    probs, cls_cache = nn.forward(model.classifier, z)

    r_g, g_recon = nn.mse_loss(recon, x)
    y = nn.one_hot(labels, model.n_classes)
    per_sample = -np.log(np.sum(probs * y, axis=1) + nn.LOG_EPS)

    names, inverse, counts = np.unique(subjects, return_inverse=True, return_counts=True)
    c_g = weights.lambda_g * float(np.mean(per_sample))
    c_s_i = {}
    for k, s in enumerate(names):
        c_s_i[str(s)] = weights.lambdas[str(s)] * float(np.mean(per_sample[inverse == k]))
    c_s = float(sum(c_s_i.values()))
    total = recon_weight * r_g + c_g + c_s
    if not np.isfinite(total):
        raise NumericError("composite loss is not finite")

    # each row's share of c_g + c_s: (lambda_g / N + lambda_i / N_i), times N for the CE normaliser
    sample_w = weights.lambda_g + lam * (n / counts[inverse])
    _, g_logits = nn.cross_entropy_loss(probs, y, sample_w)

    dec_grads, gz_dec = nn.backward(model.decoder, dec_cache, recon_weight * g_recon)
    cls_grads, gz_cls = nn.backward(model.classifier, cls_cache, g_logits)
    enc_grads, _ = nn.backward(model.encoder, enc_cache, gz_dec + gz_cls)
    breakdown = LossBreakdown(float(r_g), c_g, c_s_i, c_s, float(total), n)
    return breakdown, ModelGradients(enc_grads, dec_grads, cls_grads)


def encode(model: AutoencoderClassifier, samples) -> np.ndarray:
    z, _ = nn.forward(model.encoder, nn.as_batch(samples, model.input_dim, "samples"))
    return z


def predict_proba(model: AutoencoderClassifier, samples) -> np.ndarray:
    p, _ = nn.forward(model.classifier, encode(model, samples))
    return p


def predict(model: AutoencoderClassifier, samples) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(predict_proba(model, samples), axis=1)


@dataclass
class TrainResult:
    model: AutoencoderClassifier
    history: list = field(default_factory=list)
    weights: SubjectWeights | None = None
    weight_history: list = field(default_factory=list)


def subject_weights_for(dataset, config: TrainConfig, encoder=None) -> SubjectWeights:
    """Weights used by ``train``: degenerate for the baseline, OT-derived otherwise."""
    if config.loss_mode == "mse_baseline":
        return SubjectWeights.degenerate(dataset.roster)
    wc = config.weighting
    alphas = compute_alphas(dataset, wc.space, encoder, wc.estimator, seed=config.seed)
    prov = {"estimator": wc.estimator.to_dict(), "space": wc.space, "seed": config.seed}
    return compute_lambdas(alphas, wc.mode, wc.beta, wc.on_degenerate, prov)


def train(dataset, config: TrainConfig, callback=None) -> TrainResult:
    """Minibatch training of the joint model.

    Each epoch reshuffles with its own seeded stream, and records the loss
    breakdown over the full training set after the epoch's updates.
    ``callback(record, model)`` runs after every epoch.
    """
    if config.loss_mode == "wasserstein_weighted" and len(dataset.roster) < 2:
        raise ConfigurationError("wasserstein_weighted mode needs at least two subjects")
    model = AutoencoderClassifier.build(dataset.dim, dataset.n_classes, config.arch, config.seed)
    weights = subject_weights_for(dataset, config, model.encoder)
    result = TrainResult(model, [], weights, [(0, weights)])
    if config.epochs == 0:
        return result
    opt = [nn.init_optimizer(p, config.lr, config.optimizer) for p in model.parts()]
    n = len(dataset)
    bs = n if config.batch_size == 0 else min(config.batch_size, n)
    refresh = (config.loss_mode == "wasserstein_weighted" and config.weighting.space == "latent")
    for epoch in range(config.epochs):
        if refresh and epoch > 0 and epoch % config.weighting.refresh == 0:
            weights = subject_weights_for(dataset, config, model.encoder)
            result.weight_history.append((epoch, weights))
        order = stream_rng(config.seed, "shuffle", epoch).permutation(n)
        batch_totals = []
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            try:
                bd, grads = composite_loss(model, dataset.features[idx], dataset.labels[idx],
                                           dataset.subjects[idx], weights, config.recon_weight)
                new_parts = []
                for k, (params, g) in enumerate(zip(model.parts(), grads.parts())):
                    params, opt[k] = nn.optimizer_step(params, g, opt[k])
                    new_parts.append(params)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            model = AutoencoderClassifier(*new_parts)
            batch_totals.append(bd.total)
        full, _ = composite_loss(model, dataset.features, dataset.labels, dataset.subjects,
                                 weights, config.recon_weight)
        record = {"epoch": epoch, "batch_mean_total": float(np.mean(batch_totals)), **full.to_dict()}
        result.history.append(record)
        if callback is not None:
            callback(record, model)
    result.model = model
    result.weights = weights
    return result


@dataclass
class Checkpoint:
    model: AutoencoderClassifier
    config: TrainConfig
    weights: SubjectWeights | None = None
    normalizer: dict | None = None  # {"mean": [...], "std": [...], ...} applied before encoding
    train_subjects: list | None = None

    def normalize(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if self.normalizer is None:
            return x
        return (x - np.asarray(self.normalizer["mean"])) / np.asarray(self.normalizer["std"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": ckpt.config.seed,
        "train_config": ckpt.config.to_dict(),
        "subject_weights": ckpt.weights.to_dict() if ckpt.weights is not None else None,
        "normalizer": ckpt.normalizer,
        "train_subjects": ckpt.train_subjects,
        "model": ckpt.model.to_dict(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a JSON checkpoint ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format/version")
    weights = doc.get("subject_weights")
    return Checkpoint(
        AutoencoderClassifier.from_dict(doc["model"]),
        TrainConfig.from_dict(doc["train_config"]),
        SubjectWeights.from_dict(weights) if weights else None,
        doc.get("normalizer"),
        doc.get("train_subjects"),
    )
