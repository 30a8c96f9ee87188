"""Verification thresholds, attack success rates, and the ablation report.

Thresholds are calibrated per model by exhaustive best-f1 sweep over
genuine/impostor scores. Digital success rates separate white-box (generation
models) from black-box (held-out models, never queried during generation);
physical rates run the capture chain on digitally successful examples only.
Report assembly is a pure reduction over per-cell records, so regenerating a
report from stored artifacts is byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .attacks import TECHNIQUES, AttackConfig, run_attack
from .errors import ContractError
from .featnet import DISTANCE_METRICS, EnsembleSpec, feature_distance
from .imagecore import quantize8
from .physim import DEFAULT_SHARPNESS_FLOOR, capture_outcomes, distance_passes
from .physim import asr_from_outcomes as physical_rate


@dataclass(frozen=True)
class VerificationThreshold:
    """Decision threshold for one model; distances pass at or below it for l2,
    similarities at or above it for cosine."""

    metric: str
    value: float
    model_id: str
    calibration: str = "best_f1"

    def __post_init__(self):
        if self.metric not in DISTANCE_METRICS:
            raise ContractError(f"unknown metric {self.metric!r}")
        if self.calibration != "best_f1":
            raise ContractError(f"unknown calibration {self.calibration!r}")
        if not math.isfinite(self.value):
            raise ContractError("threshold value must be finite")

    def passes(self, distance: float) -> bool:
        return distance_passes(distance, self.value, self.metric)


def _f1(genuine: np.ndarray, impostor: np.ndarray, tau: float, accept_low: bool) -> float:
    if accept_low:
        tp = int((genuine <= tau).sum())
        fp = int((impostor <= tau).sum())
    else:
        tp = int((genuine >= tau).sum())
        fp = int((impostor >= tau).sum())
    fn = genuine.size - tp
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def calibrate_threshold(genuine_scores, impostor_scores, metric: str,
                        model_id: str = "") -> VerificationThreshold:
    """Best-f1 threshold over all candidate cut points.

    Scores follow the metric's native convention: distances for l2 (genuine
    low), similarities for cosine (genuine high). Candidates are the midpoints
    between consecutive unique scores plus one point beyond each end; ties go
    to the midpoint of the first maximal-f1 interval.
    """
    if metric not in DISTANCE_METRICS:
        raise ContractError(f"unknown metric {metric!r}")
    g = np.asarray(genuine_scores, dtype=np.float64).ravel()
    i = np.asarray(impostor_scores, dtype=np.float64).ravel()
    if g.size == 0 or i.size == 0:
        raise ContractError("calibration needs at least one genuine and one impostor score")
    if not (np.isfinite(g).all() and np.isfinite(i).all()):
        raise ContractError("calibration scores must be finite")
    accept_low = metric == "l2"
    uniq = np.unique(np.concatenate([g, i]))
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    candidates = np.concatenate([[uniq[0] - 1.0], mids, [uniq[-1] + 1.0]])
    scores = np.array([_f1(g, i, t, accept_low) for t in candidates])
    # candidate k probes the open interval (uniq[k-1], uniq[k]); both ends are
    # unbounded probes. Ties merge consecutive intervals; return the midpoint
    # of the first maximal run, or the probe point when an end is unbounded.
    is_best = scores >= scores.max() - 1e-12
    lo = int(np.argmax(is_best))
    hi = lo
    while hi + 1 < len(candidates) and is_best[hi + 1]:
        hi += 1
    left = None if lo == 0 else float(uniq[lo - 1])
    right = None if hi == len(candidates) - 1 else float(uniq[hi])
    if left is not None and right is not None:
        tau = (left + right) / 2.0
    elif left is None and right is None:
        tau = (float(uniq[0]) + float(uniq[-1])) / 2.0
    elif left is None:
        tau = float(candidates[0])
    else:
        tau = float(candidates[-1])
    return VerificationThreshold(metric=metric, value=tau, model_id=model_id)


def verification_scores(model, photo_sets, metric: str) -> tuple[np.ndarray, np.ndarray]:
    """Genuine (within identity) and impostor (across identity) scores.

    photo_sets is a list of per-identity photo lists. Scores follow the
    calibration convention: l2 distances, cosine similarities.
    """
    if len(photo_sets) < 2 or any(len(p) < 2 for p in photo_sets):
        raise ContractError("calibration needs at least 2 identities with 2 photos each")
    embs = [[model.embed(p) for p in photos] for photos in photo_sets]

    def score(a, b):
        d = feature_distance(a, b, metric)
        return d if metric == "l2" else 1.0 - d

    genuine, impostor = [], []
    for per_id in embs:
        for a in range(len(per_id)):
            for b in range(a + 1, len(per_id)):
                genuine.append(score(per_id[a], per_id[b]))
    for ia in range(len(embs)):
        for ib in range(ia + 1, len(embs)):
            for a in embs[ia]:
                for b in embs[ib]:
                    impostor.append(score(a, b))
    return np.asarray(genuine), np.asarray(impostor)


# ---------------------------------------------------------------------------
# digital evaluation


def digital_outcomes(adv_image, target_image, models: dict,
                     thresholds: dict) -> dict[str, dict]:
    """Distance and pass/fail of one adversarial image under every model."""
    out = {}
    for model_id, model in models.items():
        thr = thresholds.get(model_id)
        if thr is None:
            raise ContractError(f"no calibrated threshold for model {model_id!r}")
        d = feature_distance(model.embed(target_image), model.embed(adv_image), thr.metric)
        out[model_id] = {"distance": float(d), "success": bool(thr.passes(d))}
    return out


def asr_over_models(outcome_list, model_ids) -> float:
    """Mean success over all (example, model) pairs for the given model ids."""
    model_ids = tuple(model_ids)
    if not outcome_list or not model_ids:
        raise ContractError("ASR needs at least one outcome and one model id")
    flags = []
    for outcomes in outcome_list:
        for mid in model_ids:
            if mid not in outcomes:
                raise ContractError(f"unknown model id {mid!r} in digital outcomes")
            flags.append(outcomes[mid]["success"])
    return float(np.mean(flags))


def digital_asr(adv_images, target_images, models: dict, thresholds: dict, mode: str,
                generation_ids, holdout_ids) -> float:
    """Per-cell digital ASR; whitebox scores on generation models, blackbox on
    held-out models only. Overlap between the two sets is a contract error."""
    if mode not in ("whitebox", "blackbox"):
        raise ContractError(f"unknown evaluation mode {mode!r}")
    generation_ids, holdout_ids = tuple(generation_ids), tuple(holdout_ids)
    if set(generation_ids) & set(holdout_ids):
        raise ContractError("generation and held-out model sets overlap")
    eval_ids = generation_ids if mode == "whitebox" else holdout_ids
    for mid in eval_ids:
        if mid not in models:
            raise ContractError(f"unknown model id {mid!r}")
    if len(adv_images) != len(target_images):
        raise ContractError("adversarial and target image counts differ")
    outcomes = [digital_outcomes(a, t, {m: models[m] for m in eval_ids}, thresholds)
                for a, t in zip(adv_images, target_images)]
    return asr_over_models(outcomes, eval_ids)


# ---------------------------------------------------------------------------
# aggregate statistics


def tv_statistics(tv_by_technique: dict) -> dict[str, float]:
    """Mean final-patch total variation per perturbation technique."""
    out = {}
    for technique, values in tv_by_technique.items():
        if technique not in TECHNIQUES:
            raise ContractError(f"unknown technique {technique!r}")
        values = list(values)
        if not values:
            raise ContractError(f"technique {technique!r} has no examples")
        out[technique] = float(np.mean(values))
    return out


def physical_transferability(cell_records) -> dict[tuple[str, str], float | None]:
    """Physical pass rate among digitally successful examples, per
    (technique, algorithm), pooled over black-box modes. Cells without any
    digitally successful example stay None, never 0."""
    pools: dict[tuple[str, str], list[float]] = {}
    for rec in cell_records:
        cell = rec["cell"]
        key = (cell["technique"], cell["algorithm"])
        pools.setdefault(key, [])
        for ax in rec["axs"]:
            if not ax.get("ok") or ax.get("physical") is None:
                continue
            for rate in ax["physical"]["whitebox_rates"].values():
                if rate is not None:
                    pools[key].append(rate)
    return {key: (float(np.mean(v)) if v else None) for key, v in pools.items()}


# ---------------------------------------------------------------------------
# epsilon sweep


@dataclass
class SweepPoint:
    epsilon: float
    attempted: int
    digital_successes: int
    physical_asr: float | None
    physical_se: float | None
    mean_linf: float | None


def epsilon_sweep(epsilons, n_per_eps: int, model, grid, threshold: VerificationThreshold,
                  pair_factory, iterations: int = 400, step_size: float = 0.01,
                  master_seed: int = 0,
                  sharpness_floor: float = DEFAULT_SHARPNESS_FLOOR,
                  capture_threshold: VerificationThreshold | None = None) -> list[SweepPoint]:
    """Noise-only attacks at each perturbation budget, evaluated physically.

    pair_factory(eps_index, attempt_index) supplies (source, target) images.
    Only digitally successful examples count toward the physical rate; a
    budget with no digital success yields an undefined (None) point.
    capture_threshold scores the simulated captures; it defaults to the
    digital threshold.
    """
    if n_per_eps < 1:
        raise ContractError(f"n_per_eps must be positive, got {n_per_eps}")
    if capture_threshold is None:
        capture_threshold = threshold
    if capture_threshold.metric != threshold.metric:
        raise ContractError("digital and capture thresholds must share a metric")
    points = []
    models = EnsembleSpec.equal([model])
    for e_idx, eps in enumerate(epsilons):
        rates, linfs = [], []
        successes = 0
        for j in range(n_per_eps):
            source, target = pair_factory(e_idx, j)
            seed = int(np.random.SeedSequence(entropy=int(master_seed), spawn_key=(e_idx, j))
                       .generate_state(1, dtype=np.uint64)[0])
            cfg = AttackConfig(algorithm="pgd", iterations=iterations, step_size=step_size,
                               epsilon_small=float(eps), layout="patch_noise",
                               smoothness_kind="none", blackbox="none",
                               metric=threshold.metric, seed=seed)
            result = run_attack(source, target, np.zeros(source.shape[:2]), cfg, models)
            adv = quantize8(result.image)
            d = feature_distance(model.embed(target), model.embed(adv), threshold.metric)
            if not threshold.passes(d):
                continue
            successes += 1
            linfs.append(float(np.abs(adv - source).max()))
            outcomes = capture_outcomes(adv, target, grid, model,
                                        capture_threshold.value, capture_threshold.metric,
                                        sharpness_floor)
            rates.append(physical_rate(outcomes))
        if successes:
            se = float(np.std(rates, ddof=1) / np.sqrt(len(rates))) if len(rates) > 1 else None
            points.append(SweepPoint(float(eps), n_per_eps, successes,
                                     float(np.mean(rates)), se, float(np.mean(linfs))))
        else:
            points.append(SweepPoint(float(eps), n_per_eps, 0, None, None, None))
    return points


def sweep_to_csv(points) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epsilon", "physical_asr", "physical_se", "digital_successes",
                     "attempted", "mean_linf"])
    for p in points:
        writer.writerow([_fmt(p.epsilon), _fmt(p.physical_asr), _fmt(p.physical_se),
                         p.digital_successes, p.attempted, _fmt(p.mean_linf)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# report assembly


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def cell_summary(record: dict) -> dict:
    """Reduces one per-cell record to its report row values."""
    gen_ids = tuple(record["generation_ids"])
    hold_ids = tuple(record["holdout_ids"])
    if set(gen_ids) & set(hold_ids):
        raise ContractError("generation and held-out model sets overlap")
    # whitebox statistics cover the models this cell attacked, which is a
    # subset of the generation pool for single-model cells
    attacked = tuple(record.get("cell_generation_ids") or gen_ids)
    axs = [ax for ax in record["axs"] if ax.get("ok")]
    dig_wb, dig_bb = [], []
    phys_wb, phys_bb, transfer = [], [], []
    tvs = []
    for ax in axs:
        outcomes = ax["digital"]
        for mid in attacked:
            dig_wb.append(outcomes[mid]["success"])
        for mid in hold_ids:
            dig_bb.append(outcomes[mid]["success"])
        tvs.append(ax["tv"])
        phys = ax.get("physical")
        if phys is not None:
            wb_rates = [r for r in phys["whitebox_rates"].values() if r is not None]
            bb_rates = [r for r in phys["blackbox_rates"].values() if r is not None]
            phys_wb.extend(wb_rates)
            phys_bb.extend(bb_rates)
            if wb_rates:
                transfer.append(float(np.mean(wb_rates)))

    def mean_or_none(values):
        return float(np.mean(values)) if values else None

    return {
        "algorithm": record["cell"]["algorithm"],
        "blackbox": record["cell"]["blackbox"],
        "technique": record["cell"]["technique"],
        "n_ok": len(axs),
        "n_failed": len(record["axs"]) - len(axs),
        "digital_whitebox_asr": mean_or_none(dig_wb),
        "digital_blackbox_asr": mean_or_none(dig_bb),
        "physical_whitebox_asr": mean_or_none(phys_wb),
        "physical_blackbox_asr": mean_or_none(phys_bb),
        "transfer_rate": mean_or_none(transfer),
        "tv_mean": mean_or_none(tvs),
    }


@dataclass
class AblationReport:
    cells: dict[str, dict]
    technique_tv: dict[str, float | None]
    transfer_table: dict[str, float | None]
    meta: dict

    def as_json_dict(self) -> dict:
        return {"cells": self.cells, "technique_tv": self.technique_tv,
                "transfer_table": self.transfer_table, "meta": self.meta}


def _cell_name(record: dict) -> str:
    c = record["cell"]
    return f"{c['algorithm']}_{c['blackbox']}_{c['technique']}"


def build_report(cell_records, meta: dict | None = None) -> AblationReport:
    """Pure reduction of per-cell records into the ablation report."""
    records = sorted(cell_records, key=_cell_name)
    names = [_cell_name(r) for r in records]
    if len(set(names)) != len(names):
        raise ContractError("duplicate grid cells in report input")
    cells = {name: cell_summary(rec) for name, rec in zip(names, records)}
    tv_by_tech: dict[str, list[float]] = {}
    for rec in records:
        tech = rec["cell"]["technique"]
        for ax in rec["axs"]:
            if ax.get("ok"):
                tv_by_tech.setdefault(tech, []).append(ax["tv"])
    technique_tv = {t: (float(np.mean(v)) if v else None) for t, v in sorted(tv_by_tech.items())}
    transfer = physical_transferability(records)
    transfer_table = {f"{tech}/{alg}": rate for (tech, alg), rate in sorted(transfer.items())}
    return AblationReport(cells=cells, technique_tv=technique_tv,
                          transfer_table=transfer_table, meta=dict(meta or {}))


def report_to_json(report: AblationReport) -> str:
    return json.dumps(report.as_json_dict(), indent=2, sort_keys=True) + "\n"


_CSV_COLUMNS = ("algorithm", "blackbox", "technique", "n_ok", "n_failed",
                "digital_whitebox_asr", "digital_blackbox_asr",
                "physical_whitebox_asr", "physical_blackbox_asr",
                "transfer_rate", "tv_mean")


def report_to_csv(report: AblationReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_COLUMNS)
    for name in sorted(report.cells):
        row = report.cells[name]
        writer.writerow([row[c] if isinstance(row[c], (str, int)) else _fmt(row[c])
                         for c in _CSV_COLUMNS])
    return buf.getvalue()


def bar_data_csv(report: AblationReport, column: str) -> str:
    """Two-column plot data (cell, value) for one of the ASR columns."""
    if column not in _CSV_COLUMNS[5:]:
        raise ContractError(f"no bar data for column {column!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cell", column])
    for name in sorted(report.cells):
        writer.writerow([name, _fmt(report.cells[name][column])])
    return buf.getvalue()
