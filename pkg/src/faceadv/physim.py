"""Simulated print-and-capture pipeline with a yaw/illuminance/color grid.

The chain stands in for printing an adversarial image and photographing it:
printing quantizes colors, darkens via dot gain, and blurs slightly; capture
scales exposure by illuminance, applies white-balance gains for the lamp's
color temperature, warps the image plane by the camera yaw, blurs, and adds
seeded sensor noise. Realignment inverts the known warp exactly, so no face
detector is needed. Everything is a pure function of (image, params).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import ContractError, DegenerateGridError
from .featnet import feature_distance
from .imagecore import as_image

DEFAULT_SHARPNESS_FLOOR = 1e-5


@dataclass(frozen=True)
class CaptureParams:
    """One print-and-capture condition; neutral() gives the identity chain."""

    illuminance: float = 1200.0
    color_temperature: float = 6500.0
    yaw_degrees: float = 0.0
    blur_sigma: float = 1.0
    sensor_noise_sigma: float = 0.01
    print_levels: int = 64
    dot_gain_gamma: float = 1.15
    print_blur_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.illuminance <= 0:
            raise ContractError(f"illuminance must be positive, got {self.illuminance}")
        if not 1000.0 <= self.color_temperature <= 12000.0:
            raise ContractError(f"color_temperature must be in [1000, 12000] K, got {self.color_temperature}")
        if not -90.0 < self.yaw_degrees < 90.0:
            raise ContractError(f"yaw_degrees must be in (-90, 90), got {self.yaw_degrees}")
        if self.blur_sigma < 0 or self.print_blur_sigma < 0 or self.sensor_noise_sigma < 0:
            raise ContractError("blur and noise sigmas must be nonnegative")
        if self.print_levels < 2:
            raise ContractError(f"print_levels must be at least 2, got {self.print_levels}")
        if self.dot_gain_gamma <= 0:
            raise ContractError(f"dot_gain_gamma must be positive, got {self.dot_gain_gamma}")

    @classmethod
    def neutral(cls, **overrides) -> "CaptureParams":
        base = cls(illuminance=1200.0, color_temperature=6500.0, yaw_degrees=0.0,
                   blur_sigma=0.0, sensor_noise_sigma=0.0, print_levels=256,
                   dot_gain_gamma=1.0, print_blur_sigma=0.0, seed=0)
        return replace(base, **overrides) if overrides else base


def capture_grid(n_angles: int = 5, luxes=(800.0, 1200.0), kelvins=(3000.0, 5000.0),
                 yaw_limit: float = 22.5, seed: int = 0, **shared) -> tuple[CaptureParams, ...]:
    """Cross product of lux x kelvin x evenly spaced yaws, in a fixed order.

    Each point gets its own derived sensor-noise seed, so the grid is
    deterministic but points are independently noisy. Extra keyword arguments
    override the shared CaptureParams fields (blur, print settings).
    """
    if n_angles < 1:
        raise ContractError(f"n_angles must be at least 1, got {n_angles}")
    if not luxes or not kelvins:
        raise ContractError("capture grid needs at least one lux and one kelvin value")
    yaws = np.linspace(-yaw_limit, yaw_limit, n_angles) if n_angles > 1 else np.array([0.0])
    points = []
    for lux in luxes:
        for kelvin in kelvins:
            for yaw in yaws:
                point_seed = int(np.random.SeedSequence(entropy=int(seed), spawn_key=(len(points),))
                                 .generate_state(1, dtype=np.uint64)[0])
                points.append(CaptureParams(illuminance=float(lux), color_temperature=float(kelvin),
                                            yaw_degrees=float(yaw), seed=point_seed, **shared))
    return tuple(points)


def capture_params_to_dict(params: CaptureParams) -> dict:
    return dataclasses.asdict(params)


def capture_params_from_dict(raw: dict) -> CaptureParams:
    known = {f.name for f in dataclasses.fields(CaptureParams)}
    extra = set(raw) - known
    if extra:
        raise ContractError(f"unknown capture params fields: {sorted(extra)}")
    return CaptureParams(**raw)


def capture_grid_from_dict(raw: dict) -> tuple[CaptureParams, ...]:
    known = {"n_angles", "luxes", "kelvins", "yaw_limit", "seed", "blur_sigma",
             "sensor_noise_sigma", "print_levels", "dot_gain_gamma", "print_blur_sigma"}
    extra = set(raw) - known
    if extra:
        raise ContractError(f"unknown capture grid fields: {sorted(extra)}")
    return capture_grid(**raw)


# ---------------------------------------------------------------------------
# color temperature

# piecewise fit of blackbody color against kelvin/100; the published
# coefficients work in 0..255 units, normalized below so 6500 K is unity
def _blackbody_rgb(kelvin: float) -> np.ndarray:
    t = kelvin / 100.0
    if t <= 66.0:
        r = 255.0
        g = 99.4708025861 * np.log(t) - 161.1195681661
    else:
        r = 329.698727446 * (t - 60.0) ** -0.1332047592
        g = 288.1221695283 * (t - 60.0) ** -0.0755148492
    if t >= 66.0:
        b = 255.0
    elif t <= 19.0:
        b = 0.0
    else:
        b = 138.5177312231 * np.log(t - 10.0) - 305.0447927307
    return np.clip(np.array([r, g, b]), 0.0, 255.0)


def kelvin_gains(kelvin: float) -> np.ndarray:
    """Per-channel white-balance gains; exactly (1, 1, 1) at 6500 K."""
    if not 1000.0 <= kelvin <= 12000.0:
        raise ContractError(f"kelvin must be in [1000, 12000], got {kelvin}")
    return _blackbody_rgb(kelvin) / _blackbody_rgb(6500.0)


# ---------------------------------------------------------------------------
# geometry


def yaw_homography(height: int, width: int, yaw_degrees: float) -> np.ndarray:
    """Pixel-space homography of a yaw about the vertical axis through the center.

    The image plane sits at distance D = 1.5 * max(h, w) with focal length f =
    D, so zero yaw is the exact identity. Coordinates are (x, y, 1) with x the
    column index.
    """
    theta = np.deg2rad(yaw_degrees)
    f = d = 1.5 * max(height, width)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    plane = np.array([[f * np.cos(theta), 0.0, 0.0],
                      [0.0, f, 0.0],
                      [np.sin(theta), 0.0, d]])
    to_center = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    from_center = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    h = from_center @ plane @ to_center
    return h / h[2, 2]


def warp_image(x: np.ndarray, backward_map: np.ndarray) -> np.ndarray:
    """Bilinear warp; backward_map sends each output pixel to its source point."""
    x = as_image(x, "warp input")
    h, w = x.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    src = np.asarray(backward_map, dtype=np.float64) @ pts
    if (src[2] <= 0).any():
        raise ContractError("warp maps output pixels behind the camera")
    src = src[:2] / src[2]
    visible = ((src[0] > -0.5) & (src[0] < w - 0.5) & (src[1] > -0.5) & (src[1] < h - 0.5))
    if not visible.any():
        raise ContractError("warp leaves no visible source region")
    coords = np.stack([src[1].reshape(h, w), src[0].reshape(h, w)])
    out = np.empty_like(x)
    for c in range(x.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(x[:, :, c], coords, order=1, mode="nearest")
    return out


def realign(captured: np.ndarray, params: CaptureParams) -> np.ndarray:
    """Undoes the capture warp using the known geometry."""
    h, w = captured.shape[:2]
    return warp_image(captured, yaw_homography(h, w, params.yaw_degrees))


# ---------------------------------------------------------------------------
# transforms


def simulate_print(x: np.ndarray, params: CaptureParams) -> np.ndarray:
    """Uniform per-channel quantization, dot-gain darkening, slight blur."""
    x = as_image(x, "print input")
    if x.min() < 0 or x.max() > 1:
        raise ContractError("print input must lie in [0, 1]")
    levels = params.print_levels
    out = np.rint(x * (levels - 1)) / (levels - 1)
    if params.dot_gain_gamma != 1.0:
        out = out ** params.dot_gain_gamma
    if params.print_blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(params.print_blur_sigma, params.print_blur_sigma, 0.0),
                                      mode="nearest")
    return np.clip(out, 0.0, 1.0)


def simulate_capture(x: np.ndarray, params: CaptureParams) -> np.ndarray:
    """Exposure, white balance, yaw warp, blur, sensor noise, clamp; in that order."""
    x = as_image(x, "capture input")
    if x.shape[2] != 3:
        raise ContractError(f"capture expects a 3-channel image, got {x.shape[2]} channels")
    out = np.clip(x * (params.illuminance / 1200.0), 0.0, 1.0)
    out = out * kelvin_gains(params.color_temperature)
    if params.yaw_degrees != 0.0:
        h, w = out.shape[:2]
        out = warp_image(out, np.linalg.inv(yaw_homography(h, w, params.yaw_degrees)))
    if params.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(params.blur_sigma, params.blur_sigma, 0.0), mode="nearest")
    if params.sensor_noise_sigma > 0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(params.seed))))
        out = out + rng.normal(0.0, params.sensor_noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def sharpness(x: np.ndarray) -> float:
    """Mean squared Laplacian of the grayscale image; the cleaning statistic."""
    x = as_image(x, "sharpness input")
    lap = ndimage.laplace(x.mean(axis=2), mode="nearest")
    return float((lap * lap).mean())


def distance_passes(distance: float, threshold: float, metric: str) -> bool:
    """Verification decision: small distances pass for l2, high similarity for cosine."""
    if metric == "l2":
        return distance <= threshold
    if metric == "cosine":
        return 1.0 - distance >= threshold
    raise ContractError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class CaptureOutcome:
    params: CaptureParams
    sharpness: float
    retained: bool
    distance: float
    success: bool


def realigned_captures(x_adv, grid) -> list[tuple[CaptureParams, np.ndarray, float]]:
    """Print, capture, and realign at every grid point; model-independent half
    of the physical evaluation, so several models can score one chain."""
    if not grid:
        raise ContractError("capture grid is empty")
    out = []
    for params in grid:
        captured = simulate_capture(simulate_print(x_adv, params), params)
        aligned = realign(captured, params)
        out.append((params, aligned, sharpness(aligned)))
    return out


def score_captures(captures, x_target, model, threshold: float, metric: str = "l2",
                   sharpness_floor: float = DEFAULT_SHARPNESS_FLOOR) -> list[CaptureOutcome]:
    """Applies cleaning and verification to precomputed realigned captures."""
    target_emb = model.embed(x_target)
    outcomes = []
    for params, aligned, sharp in captures:
        if sharp < sharpness_floor:
            outcomes.append(CaptureOutcome(params, sharp, False, np.nan, False))
            continue
        d = feature_distance(target_emb, model.embed(aligned), metric)
        outcomes.append(CaptureOutcome(params, sharp, True, d, distance_passes(d, threshold, metric)))
    return outcomes


def capture_outcomes(x_adv, x_target, grid, model, threshold: float, metric: str = "l2",
                     sharpness_floor: float = DEFAULT_SHARPNESS_FLOOR) -> list[CaptureOutcome]:
    """Runs the full chain at every grid point and scores the realigned captures."""
    return score_captures(realigned_captures(x_adv, grid), x_target, model,
                          threshold, metric, sharpness_floor)


def asr_from_outcomes(outcomes) -> float:
    retained = [o for o in outcomes if o.retained]
    if not retained:
        raise DegenerateGridError("sharpness cleaning discarded every capture in the grid")
    return sum(o.success for o in retained) / len(retained)


def physical_asr(x_adv, x_target, grid, model, threshold: float, metric: str = "l2",
                 sharpness_floor: float = DEFAULT_SHARPNESS_FLOOR) -> float:
    """Fraction of retained (sharp enough) captures that pass verification."""
    return asr_from_outcomes(capture_outcomes(x_adv, x_target, grid, model, threshold,
                                              metric, sharpness_floor))
