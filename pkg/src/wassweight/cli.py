"""``wassweight`` command-line entry point.

Every tunable is a flag and may also be given in a YAML config file
(``--config``) under the same name with underscores, e.g.
``samples_per_class: 20``. Precedence is flag, then config file, then the
built-in default. Artifact-producing commands write ``<output>.manifest.json``
recording the resolved config, seeds, input digests and artifact paths.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import __version__
from .data import (
    SyntheticConfig,
    apply_normalizer,
    fit_normalizer,
    load_csv,
    write_synthetic,
)
from .errors import ConfigurationError, DataError, WassweightError
from .evaluation import (
    REPORT_SCHEMA,
    compare_modes,
    pca_project,
    run_loso,
    write_projection_csv,
)
from .model import (
    ArchConfig,
    Checkpoint,
    TrainConfig,
    encode,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .seeding import derive_seed
from .weighting import EstimatorConfig, compute_alphas, compute_lambdas

log = logging.getLogger("wassweight")

JOBS_ENV = "WASSWEIGHT_JOBS"
STREAMS = ("init", "shuffle", "projections", "synth", "subsample", "folds")


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    text = str(text).strip()
    return [int(v) for v in text.split(",")] if text else []


def _float_list(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    text = str(text).strip()
    return [float(v) for v in text.split(",")] if text else []


def _bool(value):
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("1", "true", "yes", "on"):
        return True
    if str(value).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass(frozen=True)
class Param:
    name: str
    type: object
    default: object
    help: str = ""
    choices: tuple | None = None

    @property
    def flag(self):
        return "--" + self.name.replace("_", "-")


_TRAIN_DEFAULT = TrainConfig()
_ARCH = ArchConfig()
_EST = EstimatorConfig()

SEED = Param("seed", int, 0, "root seed")

SYNTH_PARAMS = [
    Param("subjects", int, 6), Param("classes", int, 3), Param("dim", int, 12),
    Param("samples_per_class", int, 30), Param("class_separation", float, 2.0),
    Param("subject_shift", float, 1.0),
    Param("multipliers", _float_list, [], "comma-separated per-subject shift multipliers"),
    Param("noise", float, 1.0), SEED,
]

ESTIMATOR_PARAMS = [
    Param("estimator", str, _EST.method, "distance estimator", ("sliced", "exact")),
    Param("n_projections", int, _EST.n_projections),
    Param("cap", int, _EST.cap, "support cap for the exact estimator"),
    Param("exclude_self", _bool, _EST.exclude_self, "leave the subject out of the group distribution"),
]

WEIGHT_PARAMS = [
    Param("mode", str, "budget", "lambda normalisation", ("budget", "paper", "degenerate")),
    Param("beta", float, 0.5, "subject-term budget in budget mode"),
    Param("on_degenerate", str, "uniform", "action when every alpha is zero", ("uniform", "raise")),
    *ESTIMATOR_PARAMS, SEED,
]

TRAIN_PARAMS = [
    Param("epochs", int, _TRAIN_DEFAULT.epochs),
    Param("batch_size", int, _TRAIN_DEFAULT.batch_size, "0 means full batch"),
    Param("lr", float, _TRAIN_DEFAULT.lr),
    Param("recon_weight", float, _TRAIN_DEFAULT.recon_weight),
    Param("loss_mode", str, _TRAIN_DEFAULT.loss_mode, None, ("mse_baseline", "wasserstein_weighted")),
    Param("optimizer", str, _TRAIN_DEFAULT.optimizer, None, ("adam", "sgd")),
    Param("latent_dim", int, _ARCH.latent_dim),
    Param("encoder_hidden", _int_list, list(_ARCH.encoder_hidden), "comma-separated widths"),
    Param("classifier_hidden", _int_list, list(_ARCH.classifier_hidden), "comma-separated widths"),
    Param("activation", str, _ARCH.activation, None, ("relu", "tanh", "linear")),
    Param("mode", str, _TRAIN_DEFAULT.weighting.mode, "lambda normalisation", ("budget", "paper", "degenerate")),
    Param("beta", float, _TRAIN_DEFAULT.weighting.beta),
    Param("space", str, _TRAIN_DEFAULT.weighting.space, "space alphas are measured in", ("input", "latent")),
    Param("refresh", int, _TRAIN_DEFAULT.weighting.refresh, "epochs between latent-space weight updates"),
    Param("on_degenerate", str, _TRAIN_DEFAULT.weighting.on_degenerate, None, ("uniform", "raise")),
    *ESTIMATOR_PARAMS, SEED,
]

LOSO_PARAMS = TRAIN_PARAMS + [Param("max_folds", int, None, "hold out at most this many subjects")]

# flat CLI name -> dotted TrainConfig path
TRAIN_KEYS = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "recon_weight": "recon_weight",
    "loss_mode": "loss_mode", "optimizer": "optimizer", "seed": "seed",
    "latent_dim": "arch.latent_dim", "encoder_hidden": "arch.encoder_hidden",
    "classifier_hidden": "arch.classifier_hidden", "activation": "arch.activation",
    "mode": "weighting.mode", "beta": "weighting.beta", "space": "weighting.space",
    "refresh": "weighting.refresh", "on_degenerate": "weighting.on_degenerate",
    "estimator": "weighting.estimator.method", "n_projections": "weighting.estimator.n_projections",
    "cap": "weighting.estimator.cap", "exclude_self": "weighting.estimator.exclude_self",
}

COMMAND_PARAMS = {
    "synth": SYNTH_PARAMS, "weights": WEIGHT_PARAMS, "train": TRAIN_PARAMS,
    "loso": LOSO_PARAMS, "compare": LOSO_PARAMS, "project": [],
}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 rather than argparse's 2, which is reserved for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_jobs():
    raw = os.environ.get(JOBS_ENV)
    if raw is None:
        return 1
    try:
        jobs = int(raw)
    except ValueError:
        raise ConfigurationError(f"{JOBS_ENV}={raw!r} is not an integer") from None
    if jobs < 1:
        raise ConfigurationError(f"{JOBS_ENV} must be >= 1")
    return jobs


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wassweight", description="Wasserstein subject weighting for latent-space classifiers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    helps = {
        "synth": "generate a synthetic multi-subject dataset",
        "weights": "compute per-subject alphas and lambdas",
        "train": "train one model on a dataset",
        "loso": "leave-one-subject-out evaluation",
        "compare": "paired LOSO: MSE baseline vs weighted loss",
        "project": "PCA projection of a checkpoint's latents",
    }
    for name, params in COMMAND_PARAMS.items():
        p = sub.add_parser(name, help=helps[name])
        if name == "project":
            p.add_argument("checkpoint")
        if name != "synth":
            p.add_argument("dataset", help="CSV with subject_id,label,f0,... columns")
        p.add_argument("-o", "--output", required=name != "weights",
                       help="output path" + (" (default: stdout)" if name == "weights" else ""))
        if name != "project":
            p.add_argument("--config", help="YAML file with defaults for any flag")
        if name == "train":
            p.add_argument("--history", help="history JSON path (default: <output>.history.json)")
        if name in ("loso", "compare"):
            p.add_argument("--jobs", type=int, default=None, help=f"parallel folds (default: ${JOBS_ENV} or 1)")
        for prm in params:
            kwargs = {"default": None, "help": prm.help or None, "dest": prm.name}
            if prm.type is _bool:
                p.add_argument(prm.flag, type=_bool, nargs="?", const=True, metavar="BOOL", **kwargs)
            else:
                p.add_argument(prm.flag, type=prm.type, choices=prm.choices, **kwargs)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the optional YAML file and explicit flags (highest wins)."""
    params = COMMAND_PARAMS[command]
    resolved = {p.name: p.default for p in params}
    path = getattr(args, "config", None)
    if path:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: expected a mapping of option names")
        by_name = {p.name: p for p in params}
        for key, value in doc.items():
            name = str(key).replace("-", "_")
            if name not in by_name:
                raise ConfigurationError(f"{path}: unknown option {key!r} for {command}")
            prm = by_name[name]
            try:
                value = None if value is None else prm.type(value)
            except (TypeError, ValueError):
                raise ConfigurationError(f"{path}: bad value {value!r} for {key!r}") from None
            if prm.choices and value not in prm.choices:
                raise ConfigurationError(f"{path}: {key!r} must be one of {list(prm.choices)}")
            resolved[name] = value
    for prm in params:
        value = getattr(args, prm.name, None)
        if value is not None:
            resolved[prm.name] = value
    return resolved


def train_config(resolved: dict) -> TrainConfig:
    changes = {TRAIN_KEYS[k]: v for k, v in resolved.items() if k in TRAIN_KEYS}
    try:
        return TrainConfig().replace(**changes)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_manifest(output, command, resolved, seed, inputs, artifacts) -> Path:
    manifest = {
        "tool": "wassweight",
        "version": __version__,
        "command": command,
        "config": resolved,
        "seeds": {"root": seed, "streams": {s: derive_seed(seed, s) for s in STREAMS}},
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "artifacts": [str(a) for a in artifacts],
    }
    path = Path(str(output) + ".manifest.json")
    write_json(path, manifest)
    return path


def _standardized(dataset):
    stats = fit_normalizer(dataset)
    return apply_normalizer(stats, dataset), stats


def cmd_synth(args, resolved):
    cfg = SyntheticConfig(**{k: (tuple(v) if k == "multipliers" else v) for k, v in resolved.items()})
    ds = write_synthetic(cfg, args.output)
    sidecar = str(args.output) + ".json"
    write_manifest(args.output, "synth", resolved, cfg.seed, [], [args.output, sidecar])
    log.info("wrote %d samples for %d subjects to %s", len(ds), len(ds.roster), args.output)
    return 0


def cmd_weights(args, resolved):
    ds, _ = _standardized(load_csv(args.dataset))
    est = EstimatorConfig(method=resolved["estimator"], n_projections=resolved["n_projections"],
                          cap=resolved["cap"], exclude_self=resolved["exclude_self"])
    seed = resolved["seed"]
    alphas = compute_alphas(ds, "input", None, est, seed)
    w = compute_lambdas(alphas, resolved["mode"], resolved["beta"], resolved["on_degenerate"])
    doc = {
        "subjects": {s: {"alpha": w.alphas[s], "lambda": w.lambdas[s]} for s in ds.roster},
        "lambda_g": w.lambda_g,
        "mode": w.mode,
        "beta": w.beta,
        "estimator": est.to_dict(),
        "seed": seed,
    }
    if args.output is None:
        sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return 0
    write_json(args.output, doc)
    write_manifest(args.output, "weights", resolved, seed, [args.dataset], [args.output])
    return 0


def cmd_train(args, resolved):
    cfg = train_config(resolved)
    raw = load_csv(args.dataset)
    ds, stats = _standardized(raw)
    result = train(ds, cfg)
    history_path = args.history or str(args.output) + ".history.json"
    save_checkpoint(args.output, Checkpoint(result.model, cfg, result.weights, stats.to_dict(), ds.roster))
    write_json(history_path, {
        "epochs": result.history,
        "weight_updates": [{"epoch": e, "weights": w.to_dict()} for e, w in result.weight_history],
    })
    write_manifest(args.output, "train", resolved, cfg.seed, [args.dataset], [args.output, history_path])
    return 0


def _fold_failures(failures):
    return [{"held_out": s, "error": f"{type(e).__name__}: {e}"} for s, e in failures]


def _failure_exit(failures):
    for subject, exc in failures:
        print(f"fold failed: {subject} ({type(exc).__name__}: {exc})", file=sys.stderr)
    first = failures[0][1]
    return first.exit_code if isinstance(first, WassweightError) else 3


def cmd_loso(args, resolved):
    cfg = train_config(resolved)
    ds = load_csv(args.dataset)
    jobs = args.jobs if args.jobs is not None else _default_jobs()
    failures = []
    t0 = time.perf_counter()
    results = run_loso(ds, cfg, resolved["max_folds"], jobs, failures)
    accs = [r.accuracy for r in results]
    doc = {
        "schema": REPORT_SCHEMA,
        "kind": "loso",
        "config": cfg.to_dict(),
        "seeds": {"root": cfg.seed},
        "max_folds": resolved["max_folds"],
        "folds": [r.to_dict() for r in results],
        "summary": {"accuracy_mean": sum(accs) / len(accs) if accs else None, "completed": len(results)},
        "failures": _fold_failures(failures),
        "timing": {"seconds": time.perf_counter() - t0},
    }
    write_json(args.output, doc)
    write_manifest(args.output, "loso", resolved, cfg.seed, [args.dataset], [args.output])
    return _failure_exit(failures) if failures else 0


def cmd_compare(args, resolved):
    cfg = train_config(resolved)
    ds = load_csv(args.dataset)
    jobs = args.jobs if args.jobs is not None else _default_jobs()
    failures = []
    report = compare_modes(ds, cfg, resolved["max_folds"], jobs, failures)
    doc = report.to_dict()
    doc["failures"] = _fold_failures(failures)
    write_json(args.output, doc)
    write_manifest(args.output, "compare", resolved, cfg.seed, [args.dataset], [args.output])
    return _failure_exit(failures) if failures else 0


def cmd_project(args, resolved):
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_csv(args.dataset)
    if ds.dim != ckpt.model.input_dim:
        raise DataError(f"{args.dataset}: {ds.dim} features, checkpoint expects {ckpt.model.input_dim}")
    latents = encode(ckpt.model, ckpt.normalize(ds.features))
    pca = pca_project(latents, min(3, latents.shape[1], max(latents.shape[0] - 1, 1)))
    trained_on = set(ckpt.train_subjects or [])
    split = ["train" if s in trained_on else "test" for s in ds.subjects]
    rows = [(pca.projected[i:i + 1], ds.labels[i:i + 1], ds.subjects[i:i + 1], split[i]) for i in range(len(ds))]
    write_projection_csv(args.output, rows)
    write_manifest(args.output, "project", {"checkpoint": str(args.checkpoint)}, ckpt.config.seed,
                   [args.checkpoint, args.dataset], [args.output])
    return 0


COMMANDS = {
    "synth": cmd_synth, "weights": cmd_weights, "train": cmd_train,
    "loso": cmd_loso, "compare": cmd_compare, "project": cmd_project,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        resolved = resolve_config(args.command, args)
        return COMMANDS[args.command](args, resolved)
    except WassweightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return DataError.exit_code
    except (ValueError, TypeError) as exc:
        # dataclass validation outside the package's own error types
        print(f"error: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
