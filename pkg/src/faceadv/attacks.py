"""Impersonation attack loops: PGD, IFGSM, CW, and LOTS over patch-noise layouts.

Every algorithm minimizes the same composite loss, a weighted embedding
distance to the target identity plus an optional smoothness penalty on the
patch region, and differs only in initialization, update rule, and feasible
set handling. All loops keep per-iteration loss and distance traces, select
the best iterate seen, and are deterministic given the config seed.

The 80-cell ablation enumeration (4 algorithms x 4 black-box modes x 5
perturbation techniques) lives here as well; result persistence and the
capture pipeline are layered on top in pipeline.py.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .imagecore import SmoothnessSpec, as_image, as_mask, as_thresholds, \
    masked_smoothness, masked_smoothness_grad, tv_loss, tv_loss_grad
from .featnet import DISTANCE_METRICS, DiversityConfig, EnsembleSpec, \
    apply_diversity, diversity_pullback, feature_distance_with_grad, sample_crop_offsets

ALGORITHMS = ("pgd", "ifgsm", "cw", "lots")
BLACKBOX_MODES = ("none", "di", "ensemble", "di_ensemble")
TECHNIQUES = ("noreg", "tv", "masked", "combo_tv", "combo_masked")
LAYOUTS = ("patch_only", "patch_noise")

DEFAULT_ITERATIONS = 2000
DEFAULT_CW_ITERATIONS = 7000

# technique name -> (mask layout, smoothness kind)
TECHNIQUE_SETTINGS = {
    "noreg": ("patch_only", "none"),
    "tv": ("patch_only", "tv"),
    "masked": ("patch_only", "masked"),
    "combo_tv": ("patch_noise", "tv"),
    "combo_masked": ("patch_noise", "masked"),
}

_CW_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class AttackConfig:
    """Knobs shared by all attack loops; unset iterations fall back per algorithm."""

    algorithm: str = "pgd"
    iterations: int | None = None
    step_size: float = 0.01
    cw_step_size: float | None = None
    epsilon_patch: float = 1.0
    epsilon_small: float = 0.25
    layout: str = "patch_only"
    smoothness_kind: str = "none"
    gamma: float = 0.05
    tau: float = 0.1
    thresholds: np.ndarray | None = None
    blackbox: str = "none"
    metric: str = "l2"
    seed: int = 0
    init_sigma: float = 0.05
    diversity_fraction: float = 0.07

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ContractError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.iterations is not None and self.iterations < 1:
            raise ContractError(f"iterations must be positive, got {self.iterations}")
        if self.step_size <= 0:
            raise ContractError(f"step_size must be positive, got {self.step_size}")
        if self.cw_step_size is not None and self.cw_step_size <= 0:
            raise ContractError(f"cw_step_size must be positive, got {self.cw_step_size}")
        for name in ("epsilon_patch", "epsilon_small"):
            eps = getattr(self, name)
            if not 0.0 < eps <= 1.0:
                raise ContractError(f"{name} must be in (0, 1], got {eps}")
        if self.layout not in LAYOUTS:
            raise ContractError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        if self.smoothness_kind not in ("none", "tv", "masked"):
            raise ContractError(f"unknown smoothness kind {self.smoothness_kind!r}")
        if self.gamma < 0:
            raise ContractError(f"gamma must be nonnegative, got {self.gamma}")
        if self.tau < 0:
            raise ContractError(f"tau must be nonnegative, got {self.tau}")
        if self.blackbox not in BLACKBOX_MODES:
            raise ContractError(f"unknown blackbox mode {self.blackbox!r}; expected one of {BLACKBOX_MODES}")
        if self.metric not in DISTANCE_METRICS:
            raise ContractError(f"unknown metric {self.metric!r}; expected one of {DISTANCE_METRICS}")
        if self.init_sigma < 0:
            raise ContractError(f"init_sigma must be nonnegative, got {self.init_sigma}")
        if not 0.0 <= self.diversity_fraction < 0.5:
            raise ContractError(f"diversity_fraction must be in [0, 0.5), got {self.diversity_fraction}")

    @property
    def resolved_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        return DEFAULT_CW_ITERATIONS if self.algorithm == "cw" else DEFAULT_ITERATIONS

    @property
    def resolved_cw_step(self) -> float:
        return self.cw_step_size if self.cw_step_size is not None else self.step_size

    @property
    def uses_diversity(self) -> bool:
        return self.blackbox in ("di", "di_ensemble")

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)


def config_to_dict(config: AttackConfig) -> dict:
    out = dataclasses.asdict(config)
    if config.thresholds is not None:
        out["thresholds"] = np.asarray(config.thresholds).tolist()
    return out


def config_from_dict(raw: dict) -> AttackConfig:
    known = {f.name for f in dataclasses.fields(AttackConfig)}
    extra = set(raw) - known
    if extra:
        raise ContractError(f"unknown attack config fields: {sorted(extra)}")
    raw = dict(raw)
    if raw.get("thresholds") is not None:
        raw["thresholds"] = np.asarray(raw["thresholds"], dtype=np.float64)
    return AttackConfig(**raw)


def save_attack_config(config: AttackConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_attack_config(path) -> AttackConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


@dataclass
class AttackAudit:
    """Measured per-iteration feasibility, asserted on by the tests.

    eps_small_max is the largest noise-layer deviation seen at any iterate;
    nontrainable_max the largest drift on frozen pixels; box_clipped_pixels
    counts pixel clips to [0, 1] applied by the first-order loops (always zero
    for cw); in_open_interval stays true while every cw iterate keeps all
    pixels strictly inside (0, 1); pixel_min and pixel_max bound every pixel
    of every iterate.
    """

    eps_small_max: float = 0.0
    nontrainable_max: float = 0.0
    box_clipped_pixels: int = 0
    in_open_interval: bool = True
    pixel_min: float = float("inf")
    pixel_max: float = float("-inf")

    def observe(self, x, source, noise3, trainable3, check_open=False):
        self.pixel_min = min(self.pixel_min, float(x.min()))
        self.pixel_max = max(self.pixel_max, float(x.max()))
        if noise3.any():
            dev = float(np.abs((x - source) * noise3).max())
            self.eps_small_max = max(self.eps_small_max, dev)
        frozen = ~trainable3
        if frozen.any():
            drift = float(np.abs((x - source) * frozen).max())
            self.nontrainable_max = max(self.nontrainable_max, drift)
        if check_open:
            inside = ((x > 0.0) & (x < 1.0)) | ~trainable3
            if not inside.all():
                self.in_open_interval = False


@dataclass(eq=False)
class AttackResult:
    image: np.ndarray
    loss_trace: np.ndarray
    distance_trace: np.ndarray
    iterations_run: int
    best_loss: float
    best_distance: float
    diverged: bool
    config: AttackConfig
    audit: AttackAudit


def resolve_masks(layout: str, patch_mask: np.ndarray, shape: tuple,
                  noise_mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Returns (patch_mask, noise_mask) for the layout; default noise mask is the
    complement of the patch. Masks must be disjoint and cover at least one pixel."""
    patch = as_mask(patch_mask, name="patch mask")
    if patch.shape != tuple(shape[:2]):
        raise ContractError(f"patch mask shape {patch.shape} does not match image {tuple(shape[:2])}")
    if layout == "patch_only":
        noise = np.zeros(patch.shape)
    else:
        noise = 1.0 - patch if noise_mask is None else as_mask(noise_mask, name="noise mask")
        if noise.shape != patch.shape:
            raise ContractError(f"noise mask shape {noise.shape} does not match image {tuple(shape[:2])}")
        if (patch * noise).any():
            raise ContractError("patch and noise masks overlap")
    if not (patch.any() or noise.any()):
        raise ContractError("attack has no trainable pixels")
    return patch, noise


class _Objective:
    """Composite loss with pixel gradients, target embeddings precomputed."""

    def __init__(self, source, target, models: EnsembleSpec, config: AttackConfig,
                 patch_mask, smooth: SmoothnessSpec | None):
        self.source = source
        self.models = models
        self.config = config
        self.patch_mask = patch_mask
        # smoothness is charged over the whole deviation image, patch and
        # small-noise layer alike; untouched pixels have zero deviation and
        # only contribute boundary terms that blend the patch into the face
        self.smooth_region = np.ones(source.shape[:2])
        self.smooth = smooth
        self.target_embs = [m.embed(target) for m in models.members]
        self.lots = config.algorithm == "lots"

    def _smooth_terms(self, x, want_grad):
        if self.smooth is None or self.smooth.gamma == 0.0:
            return 0.0, None
        if self.smooth.kind == "tv":
            r = x - self.source
            value = tv_loss(r, self.smooth_region)
            grad = tv_loss_grad(r, self.smooth_region) if want_grad else None
        else:
            value = masked_smoothness(x, self.smooth, self.smooth_region)
            grad = masked_smoothness_grad(x, self.smooth, self.smooth_region) if want_grad else None
        return self.smooth.gamma * value, None if grad is None else self.smooth.gamma * grad

    def evaluate(self, x, offsets=None, want_grad=True):
        """Returns (loss, distance, grad or None); distance is the verification metric."""
        x_in = apply_diversity(x, offsets) if offsets and offsets != (0, 0, 0, 0) else x
        dist = 0.0
        attack_term = 0.0
        grad = None
        for member, weight, t_emb in zip(self.models.members, self.models.weights, self.target_embs):
            if want_grad:
                emb, cache = member.forward(x_in)
            else:
                emb = member.embed(x_in)
            d, d_emb = feature_distance_with_grad(t_emb, emb, self.config.metric)
            dist += weight * d
            if self.lots:
                diff = emb - t_emb
                attack_term += weight * 0.5 * float(diff @ diff)
                up = weight * diff
            else:
                attack_term += weight * d
                up = weight * d_emb
            if want_grad:
                g = member.backward_input(cache, up)
                grad = g if grad is None else grad + g
        if want_grad and offsets and offsets != (0, 0, 0, 0):
            grad = diversity_pullback(grad, offsets, x.shape)
        s_val, s_grad = self._smooth_terms(x, want_grad)
        loss = attack_term + s_val
        if want_grad and s_grad is not None:
            grad = s_grad if grad is None else grad + s_grad
        return loss, dist, grad


def _expand(mask, channels):
    return np.repeat(mask[:, :, None].astype(bool), channels, axis=2)


def _build_smooth_spec(config: AttackConfig, shape, reference) -> SmoothnessSpec | None:
    if config.smoothness_kind == "none":
        return None
    if config.smoothness_kind == "tv":
        return SmoothnessSpec(kind="tv", gamma=config.gamma)
    thr = config.thresholds
    if thr is None:
        thr = np.full(shape[:2], config.tau)
    thr = as_thresholds(thr, name="smoothness thresholds")
    if thr.shape != tuple(shape[:2]):
        raise ContractError(f"thresholds shape {thr.shape} does not match image {tuple(shape[:2])}")
    return SmoothnessSpec(kind="masked", gamma=config.gamma, thresholds=thr, reference=reference)


def _ball_bounds(source, patch3, noise3, eps_p, eps_s):
    lo = np.where(patch3, source - eps_p, np.where(noise3, source - eps_s, source))
    hi = np.where(patch3, source + eps_p, np.where(noise3, source + eps_s, source))
    return lo, hi


class _BestTracker:
    def __init__(self):
        self.loss = np.inf
        self.distance = np.inf
        self.image = None

    def offer(self, loss, distance, x):
        if loss < self.loss:
            self.loss = loss
            self.distance = distance
            self.image = x.copy()


def _make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def _offsets_for(config, rng, shape):
    if not config.uses_diversity:
        return None
    div = DiversityConfig(enabled=True, max_crop_fraction=config.diversity_fraction)
    return sample_crop_offsets(shape[:2], div, rng)


def _finalize(best, traces, config, audit, diverged, fallback):
    losses, dists = traces
    image = best.image if best.image is not None else fallback.copy()
    return AttackResult(image=image, loss_trace=np.asarray(losses), distance_trace=np.asarray(dists),
                        iterations_run=len(losses), best_loss=best.loss if np.isfinite(best.loss) else np.nan,
                        best_distance=best.distance, diverged=diverged, config=config, audit=audit)


def _run_first_order(source, target, patch_mask, config, models, noise_mask, with_audit):
    source = as_image(source, "source image")
    target = as_image(target, "target image")
    if source.shape != target.shape:
        raise ContractError(f"source shape {source.shape} != target shape {target.shape}")
    patch, noise = resolve_masks(config.layout, patch_mask, source.shape, noise_mask)
    c = source.shape[2]
    patch3, noise3 = _expand(patch, c), _expand(noise, c)
    trainable3 = patch3 | noise3
    lo, hi = _ball_bounds(source, patch3, noise3, config.epsilon_patch, config.epsilon_small)
    rng = _make_rng(config.seed)
    audit = AttackAudit() if with_audit else None

    def project(cand, count_clips):
        inside = np.clip(cand, lo, hi)
        boxed = np.clip(inside, 0.0, 1.0)
        if count_clips and audit is not None:
            audit.box_clipped_pixels += int((boxed != inside).sum())
        return np.where(trainable3, boxed, source)

    if config.algorithm == "pgd" and config.init_sigma > 0:
        x = project(source + rng.normal(0.0, config.init_sigma, source.shape) * trainable3, False)
    else:
        x = source.copy()

    smooth = _build_smooth_spec(config, source.shape, x.copy())
    obj = _Objective(source, target, models, config, patch, smooth)
    best = _BestTracker()
    losses, dists = [], []
    diverged = False

    for _ in range(config.resolved_iterations):
        offsets = _offsets_for(config, rng, source.shape)
        loss, dist, grad = obj.evaluate(x, offsets)
        if not np.isfinite(loss):
            diverged = True
            break
        losses.append(loss)
        dists.append(dist)
        best.offer(loss, dist, x)
        if audit is not None:
            audit.observe(x, source, noise3, trainable3)
        grad = grad * trainable3
        if config.algorithm == "lots":
            peak = float(np.abs(grad).max())
            if peak == 0.0:
                break
            step = config.step_size * grad / peak
        else:
            step = config.step_size * np.sign(grad)
        x = project(x - step, True)

    if not diverged and losses:
        loss, dist, _ = obj.evaluate(x, _offsets_for(config, rng, source.shape), want_grad=False)
        if np.isfinite(loss):
            best.offer(loss, dist, x)
            if audit is not None:
                audit.observe(x, source, noise3, trainable3)
    return _finalize(best, (losses, dists), config, audit, diverged, source)


def _run_cw(source, target, patch_mask, config, models, noise_mask, with_audit):
    source = as_image(source, "source image")
    target = as_image(target, "target image")
    if source.shape != target.shape:
        raise ContractError(f"source shape {source.shape} != target shape {target.shape}")
    patch, noise = resolve_masks(config.layout, patch_mask, source.shape, noise_mask)
    c = source.shape[2]
    patch3, noise3 = _expand(patch, c), _expand(noise, c)
    trainable3 = patch3 | noise3
    lo, hi = _ball_bounds(source, patch3, noise3, config.epsilon_patch, config.epsilon_small)
    # the tanh parameterization needs pixels strictly inside (0, 1); the
    # epsilon projection below also enforces that, so no [0, 1] clip exists
    lo = np.maximum(lo, _CW_EPS)
    hi = np.minimum(hi, 1.0 - _CW_EPS)
    rng = _make_rng(config.seed)
    audit = AttackAudit() if with_audit else None

    w = np.arctanh(2.0 * np.clip(source, _CW_EPS, 1.0 - _CW_EPS) - 1.0)

    def materialize(wv):
        return np.where(trainable3, (np.tanh(wv) + 1.0) / 2.0, source)

    x = materialize(w)
    smooth = _build_smooth_spec(config, source.shape, x.copy())
    obj = _Objective(source, target, models, config, patch, smooth)
    best = _BestTracker()
    losses, dists = [], []
    diverged = False
    step = config.resolved_cw_step

    for _ in range(config.resolved_iterations):
        offsets = _offsets_for(config, rng, source.shape)
        loss, dist, grad = obj.evaluate(x, offsets)
        if not np.isfinite(loss):
            diverged = True
            break
        losses.append(loss)
        dists.append(dist)
        best.offer(loss, dist, x)
        if audit is not None:
            audit.observe(x, source, noise3, trainable3, check_open=True)
        t = np.tanh(w)
        grad_w = grad * trainable3 * (1.0 - t * t) / 2.0
        w = w - step * grad_w
        # pull the pixel view back inside the epsilon ball, exactly inverted
        pix = (np.tanh(w) + 1.0) / 2.0
        pix = np.clip(pix, lo, hi)
        w = np.where(trainable3, np.arctanh(2.0 * pix - 1.0), w)
        x = materialize(w)

    if not diverged and losses:
        loss, dist, _ = obj.evaluate(x, _offsets_for(config, rng, source.shape), want_grad=False)
        if np.isfinite(loss):
            best.offer(loss, dist, x)
            if audit is not None:
                audit.observe(x, source, noise3, trainable3, check_open=True)
    return _finalize(best, (losses, dists), config, audit, diverged, source)


def run_attack(source, target, patch_mask, config: AttackConfig, models: EnsembleSpec,
               noise_mask=None, with_audit: bool = True) -> AttackResult:
    """Runs the configured algorithm; see run_pgd and friends for the fixed entry points."""
    if config.uses_diversity and len(models.members) not in (1, 2):
        raise ContractError("diversity modes expect one or two generation models")
    if config.blackbox in ("ensemble", "di_ensemble") and len(models.members) < 2:
        raise ContractError(f"blackbox mode {config.blackbox!r} needs an ensemble of at least 2 models")
    runner = _run_cw if config.algorithm == "cw" else _run_first_order
    return runner(source, target, patch_mask, config, models, noise_mask, with_audit)


def _fixed_algorithm(name):
    def run(source, target, patch_mask, config, models, noise_mask=None, with_audit=True):
        if config.algorithm != name:
            raise ContractError(f"config.algorithm is {config.algorithm!r}, expected {name!r}")
        return run_attack(source, target, patch_mask, config, models, noise_mask, with_audit)
    run.__name__ = f"run_{name}"
    run.__qualname__ = f"run_{name}"
    run.__doc__ = f"Runs the {name} loop; config.algorithm must be {name!r}."
    return run


run_pgd = _fixed_algorithm("pgd")
run_ifgsm = _fixed_algorithm("ifgsm")
run_cw = _fixed_algorithm("cw")
run_lots = _fixed_algorithm("lots")


# ---------------------------------------------------------------------------
# ablation grid enumeration


@dataclass(frozen=True)
class GridCell:
    algorithm: str
    blackbox: str
    technique: str

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ContractError(f"unknown algorithm {self.algorithm!r}")
        if self.blackbox not in BLACKBOX_MODES:
            raise ContractError(f"unknown blackbox mode {self.blackbox!r}")
        if self.technique not in TECHNIQUES:
            raise ContractError(f"unknown technique {self.technique!r}")

    @property
    def name(self) -> str:
        return f"{self.algorithm}_{self.blackbox}_{self.technique}"


def grid_cells(algorithms=ALGORITHMS, blackbox=BLACKBOX_MODES,
               techniques=TECHNIQUES) -> tuple[GridCell, ...]:
    """Full cross product in canonical order; 80 cells with the defaults."""
    return tuple(GridCell(a, b, t) for a in algorithms for b in blackbox for t in techniques)


def pair_seed(master_seed: int, cell: GridCell, pair_index: int) -> int:
    """Stable per-(cell, pair) seed; independent of execution order."""
    key = (ALGORITHMS.index(cell.algorithm), BLACKBOX_MODES.index(cell.blackbox),
           TECHNIQUES.index(cell.technique), int(pair_index))
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def cell_config(cell: GridCell, base: AttackConfig, master_seed: int, pair_index: int) -> AttackConfig:
    layout, kind = TECHNIQUE_SETTINGS[cell.technique]
    return base.replace(algorithm=cell.algorithm, blackbox=cell.blackbox, layout=layout,
                        smoothness_kind=kind, seed=pair_seed(master_seed, cell, pair_index))


def ensemble_for(cell: GridCell, generation_models) -> EnsembleSpec:
    models = tuple(generation_models)
    if cell.blackbox in ("ensemble", "di_ensemble"):
        return EnsembleSpec.equal(models[:2])
    return EnsembleSpec.equal(models[:1])


@dataclass
class CellFailure:
    pair_index: int
    error_type: str
    message: str


def run_cell(cell: GridCell, pairs, patch_mask, base: AttackConfig, generation_models,
             master_seed: int, iterations_override=None) -> list:
    """Runs one cell over all pairs; per-pair failures are recorded, not raised.

    iterations_override maps algorithm name to an iteration count, letting
    callers give cw its longer budget in one place.
    """
    models = ensemble_for(cell, generation_models)
    out = []
    for idx, (src, tgt) in enumerate(pairs):
        cfg = cell_config(cell, base, master_seed, idx)
        if iterations_override:
            cfg = cfg.replace(iterations=iterations_override.get(cell.algorithm, cfg.iterations))
        try:
            out.append(run_attack(src, tgt, patch_mask, cfg, models))
        except Exception as exc:  # deliberate: one bad pair must not sink the cell
            out.append(CellFailure(idx, type(exc).__name__, str(exc)))
    return out
