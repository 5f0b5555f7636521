"""Batch-experiment command line.

Commands: synth, train, eval, gradcheck, ablate. Configuration comes from an
optional JSON file ({"model": {...}, "train": {...}, "data": {...}}) with
command-line flags taking precedence; the effective configuration is echoed
into every output directory. Exit codes: 0 success, 2 configuration error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .dataio import generate_synthetic, load_manifest, load_window_samples, CLASS_NAMES
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    EmofuseError,
    FormatError,
    LabelError,
    MissingClassError,
    ParameterError,
    ShapeMismatchError,
)
from .model import ModelConfig, load_checkpoint
from .objectives import MetricsReport
from .trainer import (
    TrainConfig,
    ablate_windows,
    evaluate,
    gradient_audit,
    train_from_dir,
)

GRADCHECK_TOLERANCE = 1e-4

_EXIT_CODES = (
    (DivergenceError, 4),
    ((DataError, FormatError, MissingClassError), 3),
    ((ConfigError, ParameterError, ShapeMismatchError, LabelError, ContractError), 2),
    (EmofuseError, 2),
)


def _exit_code(exc: Exception) -> int:
    for types, code in _EXIT_CODES:
        if isinstance(exc, types):
            return code
    return 1


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except EmofuseError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code(exc))
    return wrapper


def _load_config_file(path: str | None) -> dict:
    """Read the JSON config, rejecting unknown sections and keys by name."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    known_sections = {"model", "train", "data"}
    for section in doc:
        if section not in known_sections:
            raise ConfigError(f"unknown config section {section!r} in {path}")
    fields = {"model": {f.name for f in dataclasses.fields(ModelConfig)},
              "train": {f.name for f in dataclasses.fields(TrainConfig)},
              "data": {"dir", "out", "ckpt", "split"}}
    for section, values in doc.items():
        for key in values:
            if key not in fields[section]:
                raise ConfigError(f"unknown key {section}.{key!r} in {path}")
    return doc


def _build_configs(config_path: str | None, train_overrides: dict) -> tuple[ModelConfig, TrainConfig, dict]:
    doc = _load_config_file(config_path)
    model_cfg = ModelConfig(**doc.get("model", {}))
    train_kwargs = dict(doc.get("train", {}))
    for key, value in train_overrides.items():
        if value is not None:
            train_kwargs[key] = value
    train_cfg = TrainConfig(**train_kwargs)
    return model_cfg, train_cfg, doc.get("data", {})


def _echo_config(out_dir: Path, command: str, model_cfg: ModelConfig,
                 train_cfg: TrainConfig | None, extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "model": dataclasses.asdict(model_cfg)}
    if train_cfg is not None:
        doc["train"] = dataclasses.asdict(train_cfg)
    doc.update(extra)
    (out_dir / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _require_empty_or_force(out_dir: Path, force: bool) -> None:
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"output directory {out_dir} is not empty; pass --force to overwrite")


def _metrics_table(report: MetricsReport) -> str:
    width = max(len(n) for n in CLASS_NAMES)
    lines = [f"{'Class':<{width}}  {'F1':>7}"]
    for name, f1 in zip(CLASS_NAMES, report.per_class_f1):
        lines.append(f"{name:<{width}}  {f1:>7.4f}")
    lines.append(f"{'Macro F1':<{width}}  {report.macro_f1:>7.4f}")
    return "\n".join(lines)


@click.group()
@click.version_option(__version__)
def main():
    """Audio-visual expression recognition experiments on feature files."""


@main.command()
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--per-class", default=40, show_default=True, type=int,
              help="Training samples per class.")
@click.option("--val-per-class", default=None, type=int,
              help="Validation samples per class (default: per-class // 4).")
@click.option("--window", default=10, show_default=True, type=int)
@click.option("--t-audio", default=12, show_default=True, type=int)
@click.option("--separation", default=4.0, show_default=True, type=float)
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
@_handle_errors
def synth(out, per_class, val_per_class, window, t_audio, separation, seed, force):
    """Generate a deterministic synthetic feature dataset plus text bank."""
    _require_empty_or_force(out, force)
    ds = generate_synthetic(out, n_per_class=per_class, window=window, t_audio=t_audio,
                            separation=separation, seed=seed, val_per_class=val_per_class)
    _echo_config(out, "synth", ModelConfig(), None, {
        "data": {"per_class": per_class, "val_per_class": val_per_class,
                 "window": window, "t_audio": t_audio, "separation": separation,
                 "seed": seed}})
    click.echo(f"wrote {len(ds.train.samples)} train / {len(ds.val.samples)} val samples "
               f"and text bank under {out}")


def _train_options(fn):
    for opt in reversed([
        click.option("--seed", default=None, type=int),
        click.option("--epochs", default=None, type=int),
        click.option("--lr", default=None, type=float),
        click.option("--batch-size", default=None, type=int),
        click.option("--accumulation-steps", default=None, type=int),
        click.option("--lam", default=None, type=float, help="Contrastive loss weight."),
        click.option("--tau", default=None, type=float, help="Contrastive temperature."),
    ]):
        fn = opt(fn)
    return fn


@main.command()
@click.option("--data", required=True, type=click.Path(path_type=Path),
              help="Dataset dir with train.json, val.json, text_bank.mmfe.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--config", "config_path", default=None, type=click.Path())
@_train_options
@_handle_errors
def train(data, out, config_path, **overrides):
    """Train the fusion head; keeps the best-validation checkpoint."""
    model_cfg, train_cfg, _ = _build_configs(config_path, overrides)
    _echo_config(out, "train", model_cfg, train_cfg, {"data": {"dir": str(data)}})
    result = train_from_dir(data, model_cfg, train_cfg, out)
    click.echo(f"best val macro F1 {result.best_val_macro_f1:.4f} "
               f"(epoch {result.best_epoch}); checkpoint {result.checkpoint_path}")


@main.command(name="eval")
@click.option("--ckpt", required=True, type=click.Path(path_type=Path))
@click.option("--data", required=True, type=click.Path(path_type=Path))
@click.option("--split", default="val", show_default=True,
              type=click.Choice(["train", "val", "test"]))
@click.option("--out", default=None, type=click.Path(path_type=Path),
              help="Directory for metrics.json (defaults to printing only).")
@_handle_errors
def eval_cmd(ckpt, data, split, out):
    """Evaluate a checkpoint on one split; prints the per-class F1 table."""
    state = load_checkpoint(ckpt)
    samples = load_window_samples(load_manifest(Path(data) / f"{split}.json"))
    report = evaluate(state, samples)
    click.echo(_metrics_table(report))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json() + "\n")
        _echo_config(out, "eval", state.config, None,
                     {"data": {"dir": str(data), "split": split, "ckpt": str(ckpt)}})
        click.echo(f"wrote {out / 'metrics.json'}")


@main.command()
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--max-coords", default=120, show_default=True, type=int)
@_handle_errors
def gradcheck(seed, max_coords):
    """Finite-difference audit of every layer and the combined loss."""
    results = gradient_audit(seed=seed, max_coords=max_coords)
    failed = False
    for name, err in results:
        status = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
        failed |= err > GRADCHECK_TOLERANCE
        click.echo(f"{name:26s} max rel err {err:.3e}  {status}")
    if failed:
        click.echo(f"error: gradient check exceeded {GRADCHECK_TOLERANCE}", err=True)
        sys.exit(4)


@main.command()
@click.option("--windows", default="10,15,30,60", show_default=True,
              help="Comma-separated window sizes.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--per-class", default=10, show_default=True, type=int)
@click.option("--val-per-class", default=None, type=int)
@click.option("--t-audio", default=12, show_default=True, type=int)
@click.option("--separation", default=4.0, show_default=True, type=float)
@_train_options
@_handle_errors
def ablate(windows, out, config_path, per_class, val_per_class, t_audio,
           separation, **overrides):
    """Window-size ablation on synthetic data; emits the results table."""
    try:
        window_list = [int(w) for w in windows.split(",") if w.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse --windows {windows!r}") from exc
    model_cfg, train_cfg, _ = _build_configs(config_path, overrides)
    _echo_config(out, "ablate", model_cfg, train_cfg, {
        "data": {"windows": window_list, "per_class": per_class,
                 "val_per_class": val_per_class, "t_audio": t_audio,
                 "separation": separation}})
    report = ablate_windows(window_list, out, model_cfg, train_cfg,
                            n_per_class=per_class, t_audio=t_audio,
                            separation=separation, val_per_class=val_per_class)
    click.echo(report.table(), nl=False)
    click.echo(f"table: {report.table_path}  json: {report.json_path}")


if __name__ == "__main__":
    main()
