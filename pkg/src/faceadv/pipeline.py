"""End-to-end runs: generate the grid, evaluate digitally, then physically,
then reduce to a report.

A run is fully determined by a GridRunSpec (or SweepRunSpec). Cells are
independent: each derives its seeds from (master seed, cell key), so serial
and parallel execution produce bit-identical artifacts. Every cell writes its
adversarial images as 8-bit PNGs and evaluates the quantized pixels, making
the stored artifacts the single source of truth; record.json doubles as the
cell's completion marker for resume.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import faces
from .attacks import ALGORITHMS, BLACKBOX_MODES, TECHNIQUES, AttackConfig, CellFailure, \
    GridCell, cell_config, ensemble_for, grid_cells, run_attack
from .errors import ContractError
from .evalharness import AblationReport, VerificationThreshold, bar_data_csv, build_report, \
    calibrate_threshold, digital_outcomes, epsilon_sweep, report_to_csv, report_to_json, \
    sweep_to_csv, verification_scores
from .featnet import FeatureExtractor, feature_distance
from .imagecore import quantize8, save_image, tv_loss
from .physim import capture_grid, realigned_captures, score_captures

VERSION = "0.1.0"

_ASR_COLUMNS = ("digital_whitebox_asr", "digital_blackbox_asr",
                "physical_whitebox_asr", "physical_blackbox_asr")


def _default_capture() -> dict:
    return {}


@dataclass(frozen=True)
class GridRunSpec:
    """Everything that determines an ablation run; JSON-serializable."""

    master_seed: int = 0
    image_size: int = 64
    n_pairs: int = 20
    n_physical_pairs: int = 5
    algorithms: tuple = ALGORITHMS
    blackbox: tuple = BLACKBOX_MODES
    techniques: tuple = TECHNIQUES
    iterations: int = 2000
    cw_iterations: int = 7000
    step_size: float = 0.01
    cw_step_size: float | None = None
    gamma: float = 0.05
    tau: float = 0.1
    epsilon_patch: float = 1.0
    epsilon_small: float = 0.25
    metric: str = "l2"
    init_sigma: float = 0.05
    diversity_fraction: float = 0.07
    model_seeds: tuple = (11, 22, 33, 44)
    calib_identities: int = 6
    calib_photos: int = 3
    capture: dict = field(default_factory=_default_capture)
    sharpness_floor: float = 1e-5

    def __post_init__(self):
        if self.n_pairs < 1 or self.n_physical_pairs < 0:
            raise ContractError("n_pairs must be >= 1 and n_physical_pairs >= 0")
        if self.n_physical_pairs > self.n_pairs:
            raise ContractError("n_physical_pairs cannot exceed n_pairs")
        if len(self.model_seeds) != 4:
            raise ContractError("model_seeds must list 4 seeds (2 generation + 2 held-out)")
        if self.calib_identities < 2 or self.calib_photos < 2:
            raise ContractError("calibration needs >= 2 identities and >= 2 photos")
        for name, values in (("algorithms", ALGORITHMS), ("blackbox", BLACKBOX_MODES),
                             ("techniques", TECHNIQUES)):
            chosen = getattr(self, name)
            if not chosen or any(v not in values for v in chosen):
                raise ContractError(f"{name} must be a non-empty subset of {values}")


def grid_spec_to_dict(spec: GridRunSpec) -> dict:
    out = dataclasses.asdict(spec)
    for key in ("algorithms", "blackbox", "techniques", "model_seeds"):
        out[key] = list(out[key])
    return out


def grid_spec_from_dict(raw: dict) -> GridRunSpec:
    known = {f.name for f in dataclasses.fields(GridRunSpec)}
    extra = set(raw) - known
    if extra:
        raise ContractError(f"unknown grid config fields: {sorted(extra)}")
    raw = dict(raw)
    for key in ("algorithms", "blackbox", "techniques", "model_seeds"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return GridRunSpec(**raw)


def build_models(spec) -> tuple[dict, tuple[str, ...], tuple[str, ...]]:
    """Two generation models (A, B) and two held-out models (C, D)."""
    size = (spec.image_size, spec.image_size)
    archs = ("A", "B", "C", "D")
    models = {}
    ids = []
    for arch, seed in zip(archs, spec.model_seeds):
        m = FeatureExtractor(arch, seed, input_size=size)
        models[m.model_id] = m
        ids.append(m.model_id)
    return models, tuple(ids[:2]), tuple(ids[2:])


def calibration_photo_sets(master_seed: int, n_identities: int, n_photos: int,
                           size: int) -> list[list[np.ndarray]]:
    base = master_seed * 10_000 + 9_000
    return [faces.identity_photos(base + k, n_photos, size) for k in range(n_identities)]


def calibrate_models(spec, models: dict) -> dict[str, VerificationThreshold]:
    photo_sets = calibration_photo_sets(spec.master_seed, spec.calib_identities,
                                        spec.calib_photos, spec.image_size)
    thresholds = {}
    for model_id, model in models.items():
        genuine, impostor = verification_scores(model, photo_sets, spec.metric)
        thresholds[model_id] = calibrate_threshold(genuine, impostor, spec.metric, model_id)
    return thresholds


def calibrate_models_captured(spec, models: dict, grid) -> dict[str, VerificationThreshold]:
    """Thresholds for the capture domain: enrolled digital templates scored
    against calibration photos pushed through the print-and-capture chain.

    The toy extractors have none of the illumination invariance of a trained
    verifier, so reusing the digital threshold would make every capture fail
    regardless of the attack. Recalibrating on captured genuine and impostor
    probes keeps the pass criterion meaningful under the simulated optics.
    """
    photo_sets = calibration_photo_sets(spec.master_seed, spec.calib_identities,
                                        spec.calib_photos, spec.image_size)
    templates = {mid: [m.embed(photos[0]) for photos in photo_sets]
                 for mid, m in models.items()}
    probe_embeddings: list[tuple[int, list]] = []
    for k, photos in enumerate(photo_sets):
        for probe in photos[1:]:
            captures = realigned_captures(probe, grid)
            for _, realigned, sharp in captures:
                if sharp < spec.sharpness_floor:
                    continue
                probe_embeddings.append(
                    (k, {mid: m.embed(realigned) for mid, m in models.items()}))
    thresholds = {}
    for mid in models:
        genuine, impostor = [], []
        for k, embeddings in probe_embeddings:
            for other, template in enumerate(templates[mid]):
                d = feature_distance(template, embeddings[mid], spec.metric)
                (genuine if other == k else impostor).append(d)
        thresholds[mid] = calibrate_threshold(genuine, impostor, spec.metric, mid)
    return thresholds


_captured_threshold_cache: dict[str, dict] = {}


def _captured_thresholds_cached(spec, models: dict, grid) -> dict[str, VerificationThreshold]:
    # identical spec -> identical thresholds, so memoize per process
    key = json.dumps(grid_spec_to_dict(spec), sort_keys=True)
    if key not in _captured_threshold_cache:
        _captured_threshold_cache[key] = calibrate_models_captured(spec, models, grid)
    return _captured_threshold_cache[key]


def _base_config(spec: GridRunSpec) -> AttackConfig:
    return AttackConfig(step_size=spec.step_size, cw_step_size=spec.cw_step_size,
                        epsilon_patch=spec.epsilon_patch, epsilon_small=spec.epsilon_small,
                        gamma=spec.gamma, tau=spec.tau, metric=spec.metric,
                        init_sigma=spec.init_sigma, diversity_fraction=spec.diversity_fraction)


def _num(value):
    value = float(value)
    return value if np.isfinite(value) else None


def run_one_cell(spec: GridRunSpec, cell: GridCell, out_dir=None) -> dict:
    """Generates, saves, and evaluates one grid cell; returns its record."""
    models, gen_ids, hold_ids = build_models(spec)
    thresholds = calibrate_models(spec, models)
    pairs = faces.attack_pairs(spec.master_seed, spec.n_pairs, spec.image_size)
    patch = faces.eyeglass_mask(spec.image_size)
    grid = capture_grid(seed=spec.master_seed, **spec.capture)
    base = _base_config(spec)
    ensemble = ensemble_for(cell, [models[m] for m in gen_ids])
    iters = {"cw": spec.cw_iterations}
    holdout_before = {m: models[m].query_count for m in hold_ids}

    results = []
    for idx, (src, tgt) in enumerate(pairs):
        cfg = cell_config(cell, base, spec.master_seed, idx)
        cfg = cfg.replace(iterations=iters.get(cell.algorithm, spec.iterations))
        try:
            results.append(run_attack(src, tgt, patch, cfg, ensemble))
        except Exception as exc:  # deliberate: one bad pair must not sink the cell
            results.append(CellFailure(idx, type(exc).__name__, str(exc)))

    holdout_queries = sum(models[m].query_count - holdout_before[m] for m in hold_ids)
    if holdout_queries:
        raise ContractError(f"held-out models were queried {holdout_queries} times during generation")

    captured_thresholds = None
    if spec.n_physical_pairs > 0:
        captured_thresholds = _captured_thresholds_cached(spec, models, grid)

    axs = []
    for idx, result in enumerate(results):
        if isinstance(result, CellFailure):
            axs.append({"pair": idx, "ok": False, "error_type": result.error_type,
                        "error": result.message})
            continue
        src, tgt = pairs[idx]
        # evaluation always sees 8-bit pixels, matching the stored PNG exactly
        adv = quantize8(result.image)
        filename = None
        if out_dir is not None:
            filename = f"ax_{idx:03d}.png"
            save_image(adv, os.path.join(out_dir, filename))
            write_trace(os.path.join(out_dir, f"trace_{idx:03d}.csv"), result)
        digital = digital_outcomes(adv, tgt, models, thresholds)
        # white-box means the models actually attacked: the full pool for
        # ensemble cells, just the first model otherwise
        wb_success = all(digital[m]["success"] for m in ensemble.model_ids)
        entry = {
            "pair": idx, "ok": True, "file": filename,
            "diverged": bool(result.diverged),
            "iterations": int(result.iterations_run),
            "best_loss": _num(result.best_loss),
            "tv": float(tv_loss(adv - src, patch)),
            "eps_small_max": float(result.audit.eps_small_max),
            "nontrainable_max": float(result.audit.nontrainable_max),
            "box_clipped": int(result.audit.box_clipped_pixels),
            "cw_open": bool(result.audit.in_open_interval),
            "pixel_min": float(result.audit.pixel_min),
            "pixel_max": float(result.audit.pixel_max),
            "digital": digital,
            "digital_whitebox_success": bool(wb_success),
            "physical": None,
        }
        if idx < spec.n_physical_pairs and wb_success:
            captures = realigned_captures(adv, grid)
            retained = sum(1 for _, _, sharp in captures if sharp >= spec.sharpness_floor)
            entry["physical"] = {
                "retained": retained,
                "whitebox_rates": _rates(captures, tgt, ensemble.model_ids, models,
                                         captured_thresholds, spec),
                "blackbox_rates": _rates(captures, tgt, hold_ids, models, captured_thresholds, spec),
            }
        axs.append(entry)

    record = {
        "cell": {"algorithm": cell.algorithm, "blackbox": cell.blackbox,
                 "technique": cell.technique},
        "master_seed": spec.master_seed,
        "n_pairs": spec.n_pairs,
        "n_physical_pairs": spec.n_physical_pairs,
        "generation_ids": list(gen_ids),
        "holdout_ids": list(hold_ids),
        "cell_generation_ids": list(ensemble.model_ids),
        "holdout_queries_during_generation": holdout_queries,
        "digital_thresholds": {m: thresholds[m].value for m in models},
        "captured_thresholds": ({m: captured_thresholds[m].value for m in models}
                                if captured_thresholds else None),
        "axs": axs,
    }
    if out_dir is not None:
        _write_json_atomic(os.path.join(out_dir, "record.json"), record)
    return record


def _rates(captures, target, model_ids, models, thresholds, spec) -> dict:
    rates = {}
    for mid in model_ids:
        outcomes = score_captures(captures, target, models[mid], thresholds[mid].value,
                                  thresholds[mid].metric, spec.sharpness_floor)
        retained = [o for o in outcomes if o.retained]
        rates[mid] = (sum(o.success for o in retained) / len(retained)) if retained else None
    return rates


def write_trace(path, result) -> None:
    lines = ["iteration,loss,distance"]
    for i, (loss, dist) in enumerate(zip(result.loss_trace, result.distance_trace)):
        lines.append(f"{i},{loss!r},{dist!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_json_atomic(path, payload) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def _cell_dir(out_root: str, cell: GridCell) -> str:
    return os.path.join(out_root, "cells", cell.name)


def _cell_worker(args) -> tuple[str, dict]:
    spec_dict, cell_key, out_root = args
    spec = grid_spec_from_dict(spec_dict)
    cell = GridCell(*cell_key)
    out_dir = None
    if out_root is not None:
        out_dir = _cell_dir(out_root, cell)
        os.makedirs(out_dir, exist_ok=True)
    return cell.name, run_one_cell(spec, cell, out_dir)


def load_cell_record(out_root: str, cell: GridCell) -> dict | None:
    path = os.path.join(_cell_dir(out_root, cell), "record.json")
    if not os.path.exists(path):
        return None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (json.JSONDecodeError, OSError):
        return None


def run_grid(spec: GridRunSpec, out_root=None, workers: int = 1, resume: bool = True,
             progress=None) -> AblationReport:
    """Runs every cell of the configured grid, then reduces to the report.

    With an output root, completed cells (valid record.json) are skipped when
    resume is set, artifacts land under cells/<name>/, and the report files
    are written next to them. workers > 1 distributes cells over processes.
    """
    cells = grid_cells(spec.algorithms, spec.blackbox, spec.techniques)
    records: dict[str, dict] = {}
    todo = []
    for cell in cells:
        if out_root is not None and resume:
            existing = load_cell_record(out_root, cell)
            if existing is not None:
                records[cell.name] = existing
                continue
        todo.append(cell)

    spec_dict = grid_spec_to_dict(spec)
    jobs = [(spec_dict, (c.algorithm, c.blackbox, c.technique), out_root) for c in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for name, record in pool.map(_cell_worker, jobs):
                records[name] = record
                if progress:
                    progress(name)
    else:
        for job in jobs:
            name, record = _cell_worker(job)
            records[name] = record
            if progress:
                progress(name)

    report = build_report(records.values(), meta=_report_meta(spec))
    if out_root is not None:
        write_report_files(report, out_root)
    return report


def _report_meta(spec: GridRunSpec) -> dict:
    return {"master_seed": spec.master_seed, "image_size": spec.image_size,
            "n_pairs": spec.n_pairs, "n_physical_pairs": spec.n_physical_pairs,
            "metric": spec.metric, "version": VERSION}


def write_report_files(report: AblationReport, out_root: str) -> None:
    os.makedirs(out_root, exist_ok=True)
    with open(os.path.join(out_root, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report))
    with open(os.path.join(out_root, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(report_to_csv(report))
    for column in _ASR_COLUMNS:
        with open(os.path.join(out_root, f"bars_{column}.csv"), "w", encoding="utf-8") as fh:
            fh.write(bar_data_csv(report, column))


def rebuild_report(out_root: str) -> tuple[AblationReport, list[str]]:
    """Reduces stored per-cell records to the report without re-running attacks.

    Returns the report plus the names of any unreadable records. The run's
    manifest, when present, supplies the report metadata so regeneration is
    byte-identical to the original."""
    cells_root = os.path.join(out_root, "cells")
    if not os.path.isdir(cells_root):
        raise ContractError(f"no records under {cells_root}")
    records, corrupt = [], []
    for name in sorted(os.listdir(cells_root)):
        path = os.path.join(cells_root, name, "record.json")
        if not os.path.exists(path):
            continue
        try:
            with open(path, "r", encoding="utf-8") as fh:
                record = json.load(fh)
            _ = (record["cell"]["algorithm"], record["cell"]["blackbox"],
                 record["cell"]["technique"], record["axs"])
        except (json.JSONDecodeError, OSError, KeyError, TypeError):
            corrupt.append(name)
            continue
        records.append(record)
    if not records:
        raise ContractError(f"no records under {cells_root}")
    meta = {}
    manifest_path = os.path.join(out_root, "manifest.json")
    if os.path.exists(manifest_path):
        try:
            with open(manifest_path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
            meta = _report_meta(grid_spec_from_dict(manifest["config"]))
        except (json.JSONDecodeError, OSError, KeyError, TypeError, ContractError):
            meta = {}
    return build_report(records, meta=meta), corrupt


# ---------------------------------------------------------------------------
# epsilon sweep runs

PAPER_EPSILONS = (0.02, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class SweepRunSpec:
    master_seed: int = 0
    image_size: int = 64
    epsilons: tuple = PAPER_EPSILONS
    n_per_eps: int = 3
    iterations: int = 400
    step_size: float = 0.01
    model_architecture: str = "A"
    model_seed: int = 11
    metric: str = "l2"
    calib_identities: int = 6
    calib_photos: int = 3
    capture: dict = field(default_factory=_default_capture)
    sharpness_floor: float = 1e-5

    def __post_init__(self):
        if not self.epsilons:
            raise ContractError("sweep needs at least one epsilon")
        if any(not 0.0 < e <= 1.0 for e in self.epsilons):
            raise ContractError("sweep epsilons must lie in (0, 1]")
        if self.n_per_eps < 1:
            raise ContractError("n_per_eps must be positive")


def sweep_spec_to_dict(spec: SweepRunSpec) -> dict:
    out = dataclasses.asdict(spec)
    out["epsilons"] = list(out["epsilons"])
    return out


def sweep_spec_from_dict(raw: dict) -> SweepRunSpec:
    known = {f.name for f in dataclasses.fields(SweepRunSpec)}
    extra = set(raw) - known
    if extra:
        raise ContractError(f"unknown sweep config fields: {sorted(extra)}")
    raw = dict(raw)
    if "epsilons" in raw:
        raw["epsilons"] = tuple(raw["epsilons"])
    return SweepRunSpec(**raw)


def run_sweep(spec: SweepRunSpec, out_dir=None):
    """Noise-only budget sweep on one white-box model; same pairs at every budget."""
    model = FeatureExtractor(spec.model_architecture, spec.model_seed,
                             input_size=(spec.image_size, spec.image_size))
    photo_sets = calibration_photo_sets(spec.master_seed, spec.calib_identities,
                                        spec.calib_photos, spec.image_size)
    genuine, impostor = verification_scores(model, photo_sets, spec.metric)
    threshold = calibrate_threshold(genuine, impostor, spec.metric, model.model_id)
    grid = capture_grid(seed=spec.master_seed, **spec.capture)
    captured = calibrate_models_captured(spec, {model.model_id: model}, grid)

    def pair_factory(_eps_index, attempt):
        # same source/target faces at every budget: the trend is paired
        base = spec.master_seed * 10_000 + 7_000 + 2 * attempt
        return (faces.synth_face(base, None, spec.image_size),
                faces.synth_face(base + 1, None, spec.image_size))

    points = epsilon_sweep(spec.epsilons, spec.n_per_eps, model, grid, threshold,
                           pair_factory, iterations=spec.iterations,
                           step_size=spec.step_size, master_seed=spec.master_seed,
                           sharpness_floor=spec.sharpness_floor,
                           capture_threshold=captured[model.model_id])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8") as fh:
            fh.write(sweep_to_csv(points))
    return points


# ---------------------------------------------------------------------------
# manifests


def write_manifest(out_root: str, kind: str, config: dict, config_path=None,
                   workers: int = 1) -> None:
    manifest = {
        "kind": kind,
        "master_seed": config.get("master_seed", 0),
        "config": config,
        "config_path": str(config_path) if config_path else None,
        "out_dir": os.path.abspath(out_root),
        "version": VERSION,
        "workers": workers,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    os.makedirs(out_root, exist_ok=True)
    _write_json_atomic(os.path.join(out_root, "manifest.json"), manifest)
