"""``theftnet`` command line: generate, train, compare, stability.

Exit codes: 0 success, 2 usage error, 1 runtime error. Every command writes a
``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import functools
import hashlib
import json
import logging
import sys
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path

import click

from . import __version__
from .baselines import ForestConfig, ForestModel, GbmConfig, GbmModel, baseline_to_text
from .data import generate_synthetic, load_csv, save_csv
from .errors import TheftNetError
from .models import (
    ModelConfig,
    atomic_write,
    config_from_text,
    config_to_text,
    desk_configs,
    parse_kv,
    save_checkpoint,
)
from .training import (
    MODEL_KINDS,
    NEURAL_KINDS,
    ExperimentConfig,
    TrainConfig,
    benchmark_config,
    compare,
    comparison_csv,
    comparison_table,
    rows_to_csv,
    run_experiment,
    stability_diagnostic,
)

MANIFEST = "manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(out_dir: Path, command: str, params: dict, config_hash: str | None, dataset_hash: str | None,
                   seed) -> None:
    manifest = {
        "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()},
        "config_sha256": config_hash,
        "dataset_sha256": dataset_hash,
        "seed": seed,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    atomic_write(out_dir / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _coerce(cls, key: str, value: str):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise click.UsageError(f"unknown {cls.__name__} key {key!r}")
    t = str(types[key])
    if "bool" in t:
        return value.lower() in ("1", "true", "yes")
    if "int" in t:
        return int(value)
    if "float" in t:
        return float(value)
    return value


def experiment_config(kind: str, config_text: str | None, preset: str, seed: int) -> ExperimentConfig:
    """Start from the preset, then apply a config file: a model section plus train./rf./gbm. overrides."""
    cfg = benchmark_config(seed) if preset == "desk" else ExperimentConfig(seed=seed)
    if not config_text:
        return cfg
    kv = parse_kv(config_text)
    overrides = {"train.": {}, "rf.": {}, "gbm.": {}}
    for key, value in kv.items():
        for prefix in overrides:
            if key.startswith(prefix):
                overrides[prefix][key[len(prefix):]] = value
    train = replace(cfg.train, **{k: _coerce(TrainConfig, k, v) for k, v in overrides["train."].items()})
    forest = replace(cfg.forest, **{k: _coerce(ForestConfig, k, v) for k, v in overrides["rf."].items()})
    gbm = replace(cfg.gbm, **{k: _coerce(GbmConfig, k, v) for k, v in overrides["gbm."].items()})
    models = dict(cfg.models)
    if "architecture" in kv:
        if kind not in NEURAL_KINDS:
            raise click.UsageError(f"model kind {kind} takes no network config")
        models[kind] = config_from_text(config_text)
    return replace(cfg, train=train, forest=forest, gbm=gbm, models=models)


def _load(data: Path):
    return load_csv(data), sha256_file(data)


def _runtime_errors(fn):
    """Turn library errors into a message on stderr and exit code 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (TheftNetError, ValueError, OSError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
    return wrapper


def _out_dir(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return out


@click.group()
@click.version_option(__version__, prog_name="theftnet")
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for per-epoch losses.")
def main(verbose):
    """Electricity-theft detection from daily smart-meter readings."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--users", type=click.IntRange(min=10), default=2000, show_default=True)
@click.option("--theft-frac", type=click.FloatRange(0, 1, max_open=True), default=0.15, show_default=True)
@click.option("--missing", type=click.FloatRange(0, 0.2), default=0.02, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="CSV path.")
@_runtime_errors
def generate(users, theft_frac, missing, seed, out):
    """Write a synthetic labelled dataset (CSV plus .meta.json sidecar)."""
    ds = generate_synthetic(users, theft_frac, missing, seed)
    save_csv(ds, out)
    params = {"users": users, "theft_frac": theft_frac, "missing": missing, "seed": seed, "out": out}
    write_manifest(out.parent, "generate", params, None, sha256_file(out), seed)
    n_missing = int(sum(r.missing_mask.sum() for r in ds.records))
    click.echo(f"users {len(ds)}  theft {int(ds.labels.sum())}  honest {len(ds) - int(ds.labels.sum())}  "
               f"missing readings {n_missing}")
    click.echo(f"wrote {out}")


def _checkpoint_writer(kind: str, out: Path):
    def write(fold: int, model):
        if isinstance(model, (ForestModel, GbmModel)):
            atomic_write(out / f"fold{fold}.{kind}.txt", baseline_to_text(model).encode("utf-8"))
        else:
            save_checkpoint(model, out / f"fold{fold}.{kind}.ckpt")
    return write


@main.command()
@click.option("--model", "kind", type=click.Choice(MODEL_KINDS), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--config", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Model config file; may also carry train./rf./gbm. overrides.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--preset", type=click.Choice(["full", "desk"]), default="full", show_default=True,
              help="Network sizes before any config file is applied.")
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True, help="Parallel fold workers.")
@_runtime_errors
def train(kind, data, config, seed, out, preset, threads):
    """5-fold cross-validated training of one model kind."""
    config_text = config.read_text(encoding="utf-8") if config else None
    cfg = experiment_config(kind, config_text, preset, seed)
    ds, data_hash = _load(data)
    out = _out_dir(out)
    report = run_experiment(kind, ds, cfg, on_model=_checkpoint_writer(kind, out), n_workers=threads)
    report.dataset = data_hash
    atomic_write(out / "report.csv", report.to_csv().encode("utf-8"))
    if kind in NEURAL_KINDS:
        atomic_write(out / "model.conf", config_to_text(cfg.models[kind]).encode("utf-8"))
    echo = "".join(f"{k} = {v}\n" for k, v in sorted(report.config.items()))
    params = {"model": kind, "data": data, "config": config, "seed": seed, "out": out, "preset": preset,
              "threads": threads}
    write_manifest(out, "train", params, sha256_text(config_text or echo), data_hash, seed)
    click.echo(report.table())


def _seeds(ctx, param, value):
    try:
        seeds = [int(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise click.BadParameter("seeds must be comma-separated integers") from None
    if not seeds:
        raise click.BadParameter("need at least one seed")
    return seeds


@main.command(name="compare")
@click.option("--data", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--seeds", callback=_seeds, default="0,1,2", show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--preset", type=click.Choice(["full", "desk"]), default="desk", show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@_runtime_errors
def compare_cmd(data, seeds, out, preset, threads):
    """Run all five model kinds over the listed seeds and rank them by mean AUC."""
    cfg = benchmark_config() if preset == "desk" else ExperimentConfig()
    ds, data_hash = _load(data)
    out = _out_dir(out)
    rows, reports = compare(ds, seeds, cfg, n_workers=threads)
    atomic_write(out / "comparison.csv", comparison_csv(rows).encode("utf-8"))
    per_fold = [(r.seed, *row) for r in reports for row in r.csv_rows()]
    atomic_write(out / "reports.csv", rows_to_csv(per_fold, ("seed", "model", "fold", "logloss", "auc")).encode("utf-8"))
    table = comparison_table(rows)
    atomic_write(out / "comparison.txt", (table + "\n").encode("utf-8"))
    conf = "".join(config_to_text(cfg.models[k]) for k in NEURAL_KINDS)
    params = {"data": data, "seeds": seeds, "out": out, "preset": preset, "threads": threads}
    write_manifest(out, "compare", params, sha256_text(conf), data_hash, seeds)
    click.echo(table)


@main.command()
@click.option("--data", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
@_runtime_errors
def stability(data, seed, out):
    """Validation-loss jitter of the multi-scale model under both layer orderings."""
    cfg = benchmark_config(seed)
    model_cfg: ModelConfig = desk_configs()["ms-densenet"]
    ds, data_hash = _load(data)
    out = _out_dir(out)
    rep = stability_diagnostic(ds, model_cfg, cfg.train, seed)
    rows = [(name, repr(sd), len(rep.histories[name].val_loss)) for name, sd in rep.orderings.items()]
    atomic_write(out / "stability.csv", rows_to_csv(rows, ("ordering", "sd_diff_val_logloss", "epochs")).encode("utf-8"))
    curves = [(name, e, repr(t), repr(v)) for name, h in rep.histories.items() for e, t, v in h.rows()]
    atomic_write(out / "stability_curves.csv",
                 rows_to_csv(curves, ("ordering", "epoch", "train_logloss", "val_logloss")).encode("utf-8"))
    params = {"data": data, "seed": seed, "out": out}
    write_manifest(out, "stability", params, sha256_text(config_to_text(model_cfg)), data_hash, seed)
    click.echo(rep.table())


if __name__ == "__main__":  # pragma: no cover
    main()
