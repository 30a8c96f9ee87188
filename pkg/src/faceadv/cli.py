"""Command-line interface: attack, grid, sweep, report, simulate.

Anything that shapes a run lives in a JSON config file; flags cover only
paths, seeds, subset filters, and scheduling. Exit codes are stable: 0 on
success, 1 for contract or runtime failures, 2 for usage errors (bad flags,
unreadable configs, missing files).
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys

import click

from . import pipeline
from .attacks import AttackConfig, config_from_dict, config_to_dict, run_attack
from .errors import ContractError, FaceadvError
from .evalharness import sweep_to_csv
from .featnet import ARCHITECTURES, EnsembleSpec, FeatureExtractor
from .imagecore import load_image, load_mask, load_thresholds, quantize8, save_image
from .physim import CaptureParams, capture_params_from_dict, capture_params_to_dict, \
    realign, simulate_capture, simulate_print

OUT_ENV = "FACEADV_OUT"


def _load_json_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise click.UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"config {path} is not valid JSON: {exc}")


def _usage_on_contract(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ContractError as exc:
        raise click.UsageError(str(exc))


def _resolve_out(out_dir, kind: str) -> str:
    if out_dir:
        return out_dir
    root = os.environ.get(OUT_ENV)
    if root:
        return os.path.join(root, kind)
    raise click.UsageError(f"no output directory: pass --out or set {OUT_ENV}")


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


@click.group()
@click.version_option(pipeline.VERSION, prog_name="faceadv")
def cli():
    """Adversarial face attack synthesis and print-capture evaluation."""


@cli.command("attack")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
              help="JSON with an 'attack' section (AttackConfig fields) and optional 'models' list.")
@click.option("--source", "source_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--target", "target_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--patch-mask", "patch_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--noise-mask", "noise_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--thresholds", "thresholds_path", type=click.Path(exists=True, dir_okay=False),
              help="Per-pixel threshold matrix for the masked smoothness loss.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
def cmd_attack(config_path, source_path, target_path, patch_path, noise_path,
               thresholds_path, out_dir):
    """Generates one adversarial image and writes image, trace, and metadata."""
    raw = _load_json_config(config_path)
    if not isinstance(raw, dict) or "attack" not in raw:
        raise click.UsageError(f"config {config_path} needs an 'attack' section")
    config = _usage_on_contract(config_from_dict, raw["attack"])

    source = load_image(source_path)
    target = load_image(target_path)
    patch = load_mask(patch_path)
    noise = load_mask(noise_path) if noise_path else None
    if thresholds_path:
        config = config.replace(thresholds=load_thresholds(thresholds_path))

    model_specs = raw.get("models", [{"architecture": "A", "seed": 11},
                                     {"architecture": "B", "seed": 22}])
    members = []
    for ms in model_specs:
        if not isinstance(ms, dict) or "architecture" not in ms or "seed" not in ms:
            raise click.UsageError("each entry in 'models' needs architecture and seed")
        if ms["architecture"] not in ARCHITECTURES:
            raise click.UsageError(f"unknown architecture {ms['architecture']!r}")
        members.append(FeatureExtractor(ms["architecture"], ms["seed"],
                                        input_size=source.shape[:2],
                                        channels=source.shape[2],
                                        embed_dim=ms.get("embed_dim", 128)))
    if config.blackbox not in ("ensemble", "di_ensemble"):
        members = members[:1]
    models = EnsembleSpec.equal(members)

    out_dir = _resolve_out(out_dir, "attack")
    os.makedirs(out_dir, exist_ok=True)
    result = run_attack(source, target, patch, config, models, noise_mask=noise)

    save_image(quantize8(result.image), os.path.join(out_dir, "adversarial.png"))
    pipeline.write_trace(os.path.join(out_dir, "trace.csv"), result)
    metadata = {
        "config": config_to_dict(config),
        "models": list(models.model_ids),
        "inputs": {"source": os.path.abspath(source_path),
                   "target": os.path.abspath(target_path),
                   "patch_mask": os.path.abspath(patch_path),
                   "noise_mask": os.path.abspath(noise_path) if noise_path else None},
        "result": {
            "iterations_run": result.iterations_run,
            "diverged": result.diverged,
            "best_loss": None if result.best_loss != result.best_loss else result.best_loss,
            "best_distance": None if result.best_distance != result.best_distance else result.best_distance,
            "box_clipped_pixels": result.audit.box_clipped_pixels,
            "eps_small_max": result.audit.eps_small_max,
        },
    }
    _write_json(os.path.join(out_dir, "metadata.json"), metadata)
    state = "diverged" if result.diverged else "completed"
    click.echo(f"attack {state}: best loss {result.best_loss:.6g} after {result.iterations_run} iterations")


def _csv_list(_ctx, _param, value):
    if value is None:
        return None
    return tuple(v.strip() for v in value.split(",") if v.strip())


@cli.command("grid")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
              help="JSON of GridRunSpec fields.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
@click.option("--workers", type=int, default=None, help="Process count; default = available cores.")
@click.option("--resume/--fresh", default=True, help="Skip cells with a completed record.")
@click.option("--seed", type=int, default=None, help="Override the master seed.")
@click.option("--algorithms", callback=_csv_list, default=None, help="Comma-separated subset.")
@click.option("--blackbox", callback=_csv_list, default=None, help="Comma-separated subset.")
@click.option("--techniques", callback=_csv_list, default=None, help="Comma-separated subset.")
def cmd_grid(config_path, out_dir, workers, resume, seed, algorithms, blackbox, techniques):
    """Runs the ablation grid end to end and writes the report."""
    spec = _usage_on_contract(pipeline.grid_spec_from_dict, _load_json_config(config_path))
    overrides = {}
    if seed is not None:
        overrides["master_seed"] = seed
    if algorithms:
        overrides["algorithms"] = algorithms
    if blackbox:
        overrides["blackbox"] = blackbox
    if techniques:
        overrides["techniques"] = techniques
    if overrides:
        spec = _usage_on_contract(dataclasses.replace, spec, **overrides)
    if workers is None:
        workers = os.cpu_count() or 1
    out_dir = _resolve_out(out_dir, "grid")
    pipeline.write_manifest(out_dir, "grid", pipeline.grid_spec_to_dict(spec),
                            config_path, workers)
    report = pipeline.run_grid(spec, out_dir, workers=workers, resume=resume,
                               progress=lambda name: click.echo(f"cell done: {name}", err=True))
    click.echo(f"grid complete: {len(report.cells)} cells -> {out_dir}")


@cli.command("sweep")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
              help="JSON of SweepRunSpec fields.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
def cmd_sweep(config_path, out_dir):
    """Runs the perturbation-budget sweep and writes the curve CSV."""
    spec = _usage_on_contract(pipeline.sweep_spec_from_dict, _load_json_config(config_path))
    out_dir = _resolve_out(out_dir, "sweep")
    pipeline.write_manifest(out_dir, "sweep", pipeline.sweep_spec_to_dict(spec), config_path)
    points = pipeline.run_sweep(spec, out_dir)
    click.echo(sweep_to_csv(points), nl=False)
    click.echo(f"sweep complete: {len(points)} budgets -> {out_dir}")


@cli.command("report")
@click.option("--results", "results_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              help="Defaults to the results directory itself.")
def cmd_report(results_dir, out_dir):
    """Regenerates the report from stored per-cell records."""
    report, corrupt = pipeline.rebuild_report(results_dir)
    for name in corrupt:
        click.echo(f"warning: skipping corrupt record for cell {name}", err=True)
    pipeline.write_report_files(report, out_dir or results_dir)
    click.echo(f"report rebuilt from {len(report.cells)} cells")


@cli.command("simulate")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help="JSON of CaptureParams fields; defaults used when omitted.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
def cmd_simulate(image_path, config_path, out_dir):
    """One-off print-and-capture simulation for a single image."""
    params = CaptureParams()
    if config_path:
        params = _usage_on_contract(capture_params_from_dict, _load_json_config(config_path))
    image = load_image(image_path)
    out_dir = _resolve_out(out_dir, "simulate")
    os.makedirs(out_dir, exist_ok=True)
    printed = simulate_print(image, params)
    captured = simulate_capture(printed, params)
    aligned = realign(captured, params)
    save_image(printed, os.path.join(out_dir, "printed.png"))
    save_image(captured, os.path.join(out_dir, "captured.png"))
    save_image(aligned, os.path.join(out_dir, "realigned.png"))
    _write_json(os.path.join(out_dir, "params.json"), capture_params_to_dict(params))
    click.echo(f"simulated capture written to {out_dir}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except (FaceadvError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
