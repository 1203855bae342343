"""Command-line interface: dataset generation, training, evaluation, export.

Every command reads a JSON config, applies flag overrides (flags beat the
PHOTONVAE_SEED environment variable, which beats the config file), echoes the
effective merged config next to its outputs, and prints a single JSON summary
line on stdout.  Log chatter goes to stderr so output files and stdout stay
byte-reproducible.

Exit codes: 0 success, 1 config/usage error, 2 physics validation error,
3 checkpoint format/version error, 4 dataset/network mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .detector import DetectorConfig
from .distributions import PhysicsError, SourceKind, SourceSpec
from .sampling import (
    Dataset,
    DatasetMeta,
    feature_matrix,
    generate_dataset,
    label_vector,
    load_dataset_csv,
    split_rows,
    write_dataset_csv,
    write_dataset_meta,
)
from .vae import (
    CheckpointError,
    DataMismatchError,
    NetworkSpec,
    VAEClassifier,
    evaluate_model,
    load_checkpoint,
    save_checkpoint,
    train_model,
)
from .workflows import (
    WARMUP_BCE_WEIGHT,
    WARMUP_EPOCHS,
    derived_seed,
    export_latent,
    write_confusion_csv,
    write_latent_csv,
    write_report_csv,
)

SEED_ENV_VAR = "PHOTONVAE_SEED"


class ConfigError(ValueError):
    """Config file missing, unparsable, or missing required fields."""


class UsageError(ValueError):
    """Bad command line."""


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _load_config(path: str | None) -> dict:
    if not path:
        raise ConfigError("--config PATH is required")
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return payload


def _resolve_seed(config: dict, args) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR}={env!r} is not an integer") from exc
    return int(config.get("seed", 0))


def _require(config: dict, key: str):
    if key not in config:
        raise ConfigError(f"config is missing required field {key!r}")
    return config[key]


def _name(config: dict, args) -> str:
    if "name" in config:
        return str(config["name"])
    return Path(args.config).stem


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, name: str, effective: dict) -> None:
    (out / f"{name}.config.json").write_text(
        json.dumps(effective, indent=2, sort_keys=True) + "\n"
    )


def _parse_sources(entries) -> tuple[tuple[str, SourceSpec], ...]:
    sources = []
    for entry in entries:
        try:
            kind = SourceKind(entry["kind"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad class entry {entry!r}: {exc}") from exc
        sources.append(
            (
                str(entry.get("label", kind.value)),
                SourceSpec(kind, float(_require(entry, "mean_param")),
                           float(entry.get("mix_ratio", 1.0))),
            )
        )
    return tuple(sources)


def _parse_detector(payload: dict) -> DetectorConfig:
    return DetectorConfig(
        n_detectors=int(_require(payload, "n_detectors")),
        efficiency=float(_require(payload, "efficiency")),
    )


def _summary(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _load_rows(paths) -> list:
    rows = []
    for path in paths if isinstance(paths, (list, tuple)) else [paths]:
        try:
            rows.extend(load_dataset_csv(path))
        except OSError as exc:
            raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"bad dataset {path}: {exc}") from exc
    if not rows:
        raise ConfigError("datasets contain no rows")
    return rows


def _dataset_paths(config: dict) -> list[str]:
    if "datasets" in config:
        paths = config["datasets"]
        return list(paths) if isinstance(paths, (list, tuple)) else [paths]
    return [str(_require(config, "dataset"))]


def _class_order(config: dict, rows) -> list[str]:
    if "classes" in config and config["classes"] and isinstance(config["classes"][0], str):
        return [str(label) for label in config["classes"]]
    return sorted({row.label for row in rows})


def _features_flag(config: dict, default: str = "probs") -> str:
    features = str(config.get("features", default))
    if features not in ("probs", "probs+nbar"):
        raise ConfigError(f"features must be 'probs' or 'probs+nbar', got {features!r}")
    return features


def _model_features(model: VAEClassifier) -> str:
    return "probs+nbar" if model.spec.input_dim == 6 else "probs"


# --- commands -------------------------------------------------------------


def cmd_gen(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(config, args)
    name = _name(config, args)
    out = _out_dir(args)
    meta = DatasetMeta(
        sources=_parse_sources(_require(config, "classes")),
        detector=_parse_detector(_require(config, "detector")),
        bin_size=int(_require(config, "bin_size")),
        bins_per_class=int(_require(config, "bins_per_class")),
        seed=seed,
    )
    dataset = generate_dataset(meta)
    csv_path = out / f"{name}.csv"
    write_dataset_csv(csv_path, dataset)
    write_dataset_meta(out / f"{name}.meta.json", dataset)
    _echo_config(out, name, {**config, "seed": seed, "name": name, "out": str(out)})
    _summary(
        {
            "command": "gen",
            "name": name,
            "rows": len(dataset.rows),
            "csv": str(csv_path),
            "seed": seed,
        }
    )
    return 0


def _train_common(args, base_model: VAEClassifier | None, base_header: dict | None) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(config, args)
    name = _name(config, args)
    out = _out_dir(args)
    rows = _load_rows(_dataset_paths(config))
    class_order = _class_order(config, rows)

    if base_model is not None:
        features = _model_features(base_model)
        if "features" in config and config["features"] != features:
            raise DataMismatchError(
                f"checkpoint expects {features!r} inputs, config says {config['features']!r}"
            )
        if base_header and base_header.get("class_labels") != class_order:
            class_order = list(base_header["class_labels"])
        model = base_model
        model.reseed(seed)
        warmup = 0
    else:
        features = _features_flag(config)
        spec = NetworkSpec(
            input_dim=6 if features == "probs+nbar" else 5,
            num_classes=max(len(class_order), 2),
        )
        model = VAEClassifier(spec, seed=seed)
        warmup = int(config.get("warmup_epochs", WARMUP_EPOCHS))

    include_nbar = features == "probs+nbar"
    train_rows, val_rows, test_rows = split_rows(rows, seed=derived_seed(seed, 40))
    x_t, y_t = feature_matrix(train_rows, include_nbar), label_vector(train_rows, class_order)
    x_v, y_v = feature_matrix(val_rows, include_nbar), label_vector(val_rows, class_order)
    x_s, y_s = feature_matrix(test_rows, include_nbar), label_vector(test_rows, class_order)

    epochs = int(config.get("epochs", 200))
    batch_size = int(config.get("batch_size", 512))
    learning_rate = float(config.get("learning_rate", 1e-3))
    history = train_model(
        model, x_t, y_t, x_v, y_v,
        epochs=epochs,
        batch_size=batch_size,
        learning_rate=learning_rate,
        warmup_epochs=warmup,
        warmup_bce_weight=float(config.get("warmup_bce_weight", WARMUP_BCE_WEIGHT)),
    )
    accuracy, _ = evaluate_model(model, x_s, y_s)

    ckpt_path = out / f"{name}.ckpt"
    save_checkpoint(
        ckpt_path,
        model,
        seed=seed,
        epochs_trained=history.epochs_run,
        class_labels=class_order,
        hyperparameters={
            "epochs": epochs,
            "batch_size": batch_size,
            "learning_rate": learning_rate,
            "warmup_epochs": warmup,
            "features": features,
        },
    )
    _echo_config(out, name, {**config, "seed": seed, "name": name, "out": str(out)})
    _summary(
        {
            "command": "finetune" if base_model is not None else "train",
            "name": name,
            "checkpoint": str(ckpt_path),
            "epochs_run": history.epochs_run,
            "final_train_loss": history.train_loss[-1],
            "final_val_loss": history.val_loss[-1] if history.val_loss else None,
            "test_accuracy": accuracy,
            "seed": seed,
        }
    )
    return 0


def cmd_train(args) -> int:
    return _train_common(args, None, None)


def cmd_finetune(args) -> int:
    if not args.base_checkpoint:
        raise UsageError("finetune requires --base-checkpoint PATH")
    model, header = load_checkpoint(args.base_checkpoint)
    return _train_common(args, model, header)


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(config, args)
    name = _name(config, args)
    out = _out_dir(args)
    model, header = load_checkpoint(str(_require(config, "checkpoint")))
    class_order = list(header["class_labels"])
    include_nbar = _model_features(model) == "probs+nbar"

    report_rows = []
    confusions = {}
    for path in _dataset_paths(config):
        rows = _load_rows([path])
        try:
            y = label_vector(rows, class_order)
        except ValueError as exc:
            raise DataMismatchError(str(exc)) from exc
        x = feature_matrix(rows, include_nbar)
        accuracy, confusion = evaluate_model(model, x, y)
        report_rows.append(
            {
                "dataset": str(path),
                "rows": len(rows),
                "bin_size": rows[0].bin_size,
                "accuracy": accuracy,
            }
        )
        confusions[Path(path).stem] = confusion
    report_path = out / f"{name}_report.csv"
    write_report_csv(report_path, report_rows)
    write_confusion_csv(out / f"{name}_confusion.csv", confusions, class_order)
    _echo_config(out, name, {**config, "seed": seed, "name": name, "out": str(out)})
    _summary(
        {
            "command": "eval",
            "name": name,
            "report": str(report_path),
            "cells": report_rows,
            "seed": seed,
        }
    )
    return 0


def cmd_export_latent(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(config, args)
    name = _name(config, args)
    out = _out_dir(args)
    model, header = load_checkpoint(str(_require(config, "checkpoint")))
    rows = _load_rows([_require(config, "dataset")])
    try:
        latents = export_latent(model, rows, list(header["class_labels"]))
    except ValueError as exc:
        raise DataMismatchError(str(exc)) from exc
    latent_path = out / f"{name}_latent.csv"
    write_latent_csv(latent_path, latents, list(header["class_labels"]))
    _echo_config(out, name, {**config, "seed": seed, "name": name, "out": str(out)})
    _summary(
        {
            "command": "export-latent",
            "name": name,
            "latent": str(latent_path),
            "rows": int(latents.shape[0]),
            "seed": seed,
        }
    )
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(config, args)
    name = _name(config, args)
    out = _out_dir(args)
    model, header = load_checkpoint(str(_require(config, "checkpoint")))
    class_order = list(header["class_labels"])
    include_nbar = _model_features(model) == "probs+nbar"
    sources = _parse_sources(_require(config, "classes"))
    detector_payload = dict(_require(config, "detector"))

    bin_sizes = args.bin_sizes or config.get("bin_sizes") or [int(_require(config, "bin_size"))]
    etas = args.etas or config.get("etas") or [float(detector_payload["efficiency"])]
    bins_per_class = int(config.get("bins_per_class", 400))

    report_rows = []
    confusions = {}
    for bin_size in bin_sizes:
        for eta in etas:
            detector = DetectorConfig(int(detector_payload["n_detectors"]), float(eta))
            meta = DatasetMeta(
                sources=sources,
                detector=detector,
                bin_size=int(bin_size),
                bins_per_class=bins_per_class,
                seed=derived_seed(seed, 50, int(bin_size), round(float(eta) * 1000)),
            )
            dataset = generate_dataset(meta)
            try:
                y = label_vector(dataset.rows, class_order)
            except ValueError as exc:
                raise DataMismatchError(str(exc)) from exc
            x = feature_matrix(dataset.rows, include_nbar)
            accuracy, confusion = evaluate_model(model, x, y)
            report_rows.append(
                {
                    "bin_size": int(bin_size),
                    "eta": float(eta),
                    "nbar_obs": float(np.mean([r.nbar_obs for r in dataset.rows])),
                    "accuracy": accuracy,
                }
            )
            confusions[f"bin{bin_size}_eta{eta:g}"] = confusion
    report_path = out / f"{name}_report.csv"
    write_report_csv(report_path, report_rows)
    write_confusion_csv(out / f"{name}_confusion.csv", confusions, class_order)
    _echo_config(
        out, name,
        {**config, "seed": seed, "name": name, "out": str(out),
         "bin_sizes": [int(b) for b in bin_sizes], "etas": [float(e) for e in etas]},
    )
    _summary(
        {
            "command": "sweep",
            "name": name,
            "report": str(report_path),
            "cells": report_rows,
            "seed": seed,
        }
    )
    return 0


# --- argument parsing -------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 for bad usage, not argparse's 2
        raise UsageError(message)


def _csv_ints(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part]


def _csv_floats(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="photonvae",
        description="Simulate photon-counting datasets and train/evaluate the VAE classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, handler, extra in (
        ("gen", cmd_gen, ()),
        ("train", cmd_train, ()),
        ("finetune", cmd_finetune, ("base",)),
        ("eval", cmd_eval, ()),
        ("export-latent", cmd_export_latent, ()),
        ("sweep", cmd_sweep, ("grid",)),
    ):
        p = sub.add_parser(command, parents=[], description=f"{command} command")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--out", default=".", help="output directory")
        if "base" in extra:
            p.add_argument("--base-checkpoint", dest="base_checkpoint",
                           help="checkpoint to fine-tune from")
        if "grid" in extra:
            p.add_argument("--bin-sizes", dest="bin_sizes", type=_csv_ints,
                           help="comma-separated bin sizes")
            p.add_argument("--eta", dest="etas", type=_csv_floats,
                           help="comma-separated efficiencies")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return 1
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return 1
    except PhysicsError as exc:
        _log(f"physics validation error: {exc}")
        return 2
    except CheckpointError as exc:
        _log(f"checkpoint error: {exc}")
        return 3
    except DataMismatchError as exc:
        _log(f"dataset/network mismatch: {exc}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
