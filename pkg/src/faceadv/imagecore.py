"""Image tensors, binary masks, raster I/O, and smoothness losses.

Images are float64 arrays of shape (H, W, C) with C in {1, 3} and values in
[0, 1]. Masks and threshold matrices are float64 arrays of shape (H, W);
masks hold exactly 0.0 or 1.0. Signed deviation images (adversarial noise)
use the same layout but may leave [0, 1].

All functions are pure: inputs are never modified in place.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin, UnidentifiedImageError

from .errors import ContractError, CorruptImageError, UnsupportedFormatError

SMOOTHNESS_KINDS = ("none", "tv", "masked")


# ---------------------------------------------------------------------------
# validation helpers

def as_image(arr, name: str = "image") -> np.ndarray:
    """Coerces to a float64 (H, W, C) array; 2-D input becomes single-channel."""
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim == 2:
        out = out[:, :, None]
    if out.ndim != 3 or out.shape[2] not in (1, 3):
        raise ContractError(f"{name}: expected (H, W) or (H, W, C) with C in {{1, 3}}, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise ContractError(f"{name}: contains non-finite values")
    return out


def as_mask(arr, like: np.ndarray | None = None, name: str = "mask") -> np.ndarray:
    """Coerces to a float64 (H, W) mask of exact 0/1 values."""
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ContractError(f"{name}: expected (H, W), got shape {out.shape}")
    if not np.isin(out, (0.0, 1.0)).all():
        raise ContractError(f"{name}: values must be exactly 0 or 1")
    if like is not None and out.shape != like.shape[:2]:
        raise ContractError(f"{name}: shape {out.shape} does not match image {like.shape[:2]}")
    return out


def as_thresholds(arr, like: np.ndarray | None = None, name: str = "thresholds") -> np.ndarray:
    """Coerces to a float64 (H, W) matrix of finite nonnegative per-pixel thresholds."""
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ContractError(f"{name}: expected (H, W), got shape {out.shape}")
    if not np.isfinite(out).all() or (out < 0).any():
        raise ContractError(f"{name}: entries must be finite and >= 0")
    if like is not None and out.shape != like.shape[:2]:
        raise ContractError(f"{name}: shape {out.shape} does not match image {like.shape[:2]}")
    return out


def _check_tv_dims(img: np.ndarray) -> None:
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        raise ContractError(f"smoothness losses need height and width >= 2, got {h}x{w}")


# ---------------------------------------------------------------------------
# smoothness spec

@dataclass(frozen=True)
class SmoothnessSpec:
    """Regularizer choice for attack objectives.

    kind "none" ignores gamma; kind "masked" additionally needs a per-pixel
    threshold matrix and a reference image (the noise region at attack start)
    from which deviations are measured.
    """

    kind: str = "none"
    gamma: float = 0.0
    thresholds: np.ndarray | None = None
    reference: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in SMOOTHNESS_KINDS:
            raise ContractError(f"smoothness kind must be one of {SMOOTHNESS_KINDS}, got {self.kind!r}")
        if self.gamma < 0:
            raise ContractError("smoothness gamma must be >= 0")
        if self.kind == "masked":
            if self.thresholds is None or self.reference is None:
                raise ContractError("masked smoothness needs both thresholds and a reference image")

    def with_reference(self, reference: np.ndarray) -> "SmoothnessSpec":
        return SmoothnessSpec(self.kind, self.gamma, self.thresholds, reference)


# ---------------------------------------------------------------------------
# total variation

def tv_loss(r, region) -> float:
    """Isotropic total variation of ``r`` over a binary region.

    Per pixel and channel the contribution is
    sqrt(down_diff**2 + right_diff**2), where a difference term is dropped
    when its neighbor falls outside the image or outside the region.
    Channels are summed without coupling.
    """
    r = as_image(r, "r")
    region = as_mask(region, like=r, name="region")
    _check_tv_dims(r)
    return float(np.sqrt(_tv_pair_sums(r, region)).sum())


def tv_loss_grad(r, region) -> np.ndarray:
    """Analytic gradient of :func:`tv_loss` w.r.t. ``r`` (subgradient 0 at kinks)."""
    r = as_image(r, "r")
    region = as_mask(region, like=r, name="region")
    _check_tv_dims(r)

    pair_v = (region[:-1, :] * region[1:, :])[:, :, None]
    pair_h = (region[:, :-1] * region[:, 1:])[:, :, None]
    dv = (r[:-1, :, :] - r[1:, :, :]) * pair_v
    dh = (r[:, :-1, :] - r[:, 1:, :]) * pair_h

    s = np.sqrt(_tv_pair_sums(r, region))
    inv = np.divide(1.0, s, out=np.zeros_like(s), where=s > 0)

    grad = np.zeros_like(r)
    wv = dv * inv[:-1, :, :]
    grad[:-1, :, :] += wv
    grad[1:, :, :] -= wv
    wh = dh * inv[:, :-1, :]
    grad[:, :-1, :] += wh
    grad[:, 1:, :] -= wh
    return grad


def _tv_pair_sums(r: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Per-pixel sum of masked squared forward differences, shape (H, W, C)."""
    pair_v = (region[:-1, :] * region[1:, :])[:, :, None]
    pair_h = (region[:, :-1] * region[:, 1:])[:, :, None]
    sq = np.zeros_like(r)
    sq[:-1, :, :] += (r[:-1, :, :] - r[1:, :, :]) ** 2 * pair_v
    sq[:, :-1, :] += (r[:, :-1, :] - r[:, 1:, :]) ** 2 * pair_h
    return sq


# ---------------------------------------------------------------------------
# threshold-masked smoothness

def masked_smoothness(current, spec: SmoothnessSpec, region) -> float:
    """Smoothness penalty active only where the deviation exceeds its threshold.

    The deviation p = current - spec.reference is measured inside the region;
    a pixel activates when \\|p\\| >= its per-pixel threshold, and a difference
    term counts only when both endpoints are active. With all-zero thresholds
    this reduces exactly to the total variation of p over the region.
    """
    current = as_image(current, "current")
    p, active = _deviation_and_active(current, spec, region)
    _check_tv_dims(p)

    pair_v = active[:-1, :, :] * active[1:, :, :]
    pair_h = active[:, :-1, :] * active[:, 1:, :]
    sq = np.zeros_like(p)
    sq[:-1, :, :] += (p[1:, :, :] - p[:-1, :, :]) ** 2 * pair_v
    sq[:, :-1, :] += (p[:, 1:, :] - p[:, :-1, :]) ** 2 * pair_h
    return float(np.sqrt(sq).sum())


def masked_smoothness_grad(current, spec: SmoothnessSpec, region) -> np.ndarray:
    """Gradient of :func:`masked_smoothness` w.r.t. ``current``.

    The activation mask is treated as a constant of the differentiation (its
    dependence on p is a step function with zero derivative almost
    everywhere), so inactive pixels receive gradient only through terms in
    which both endpoints are active, i.e. none.
    """
    current = as_image(current, "current")
    p, active = _deviation_and_active(current, spec, region)
    _check_tv_dims(p)

    pair_v = active[:-1, :, :] * active[1:, :, :]
    pair_h = active[:, :-1, :] * active[:, 1:, :]
    dv = (p[1:, :, :] - p[:-1, :, :]) * pair_v
    dh = (p[:, 1:, :] - p[:, :-1, :]) * pair_h
    sq = np.zeros_like(p)
    sq[:-1, :, :] += dv ** 2
    sq[:, :-1, :] += dh ** 2
    s = np.sqrt(sq)
    inv = np.divide(1.0, s, out=np.zeros_like(s), where=s > 0)

    grad = np.zeros_like(p)
    wv = dv * inv[:-1, :, :]
    grad[1:, :, :] += wv
    grad[:-1, :, :] -= wv
    wh = dh * inv[:, :-1, :]
    grad[:, 1:, :] += wh
    grad[:, :-1, :] -= wh
    return grad


def _deviation_and_active(current: np.ndarray, spec: SmoothnessSpec, region) -> tuple[np.ndarray, np.ndarray]:
    if spec.kind != "masked":
        raise ContractError(f"masked smoothness needs spec.kind='masked', got {spec.kind!r}")
    reference = as_image(spec.reference, "reference")
    if reference.shape != current.shape:
        raise ContractError(f"reference shape {reference.shape} does not match image {current.shape}")
    region = as_mask(region, like=current, name="region")
    z = as_thresholds(spec.thresholds, like=current)
    p = (current - reference) * region[:, :, None]
    active = (np.abs(p) >= z[:, :, None]).astype(np.float64) * region[:, :, None]
    return p, active


# ---------------------------------------------------------------------------
# patch + noise composition

def compose_patch_noise(source, patch_delta, noise_delta, patch_mask, noise_mask) -> np.ndarray:
    """Applies a visible patch layer and a small full-face noise layer.

    Returns clamp(source + noise_mask * noise_delta + patch_mask * patch_delta, 0, 1).
    The two masks must have disjoint support; pixels in neither mask pass
    through untouched.
    """
    source = as_image(source, "source")
    patch_delta = as_image(patch_delta, "patch_delta")
    noise_delta = as_image(noise_delta, "noise_delta")
    if patch_delta.shape != source.shape or noise_delta.shape != source.shape:
        raise ContractError("delta shapes must match the source image")
    patch_mask = as_mask(patch_mask, like=source, name="patch_mask")
    noise_mask = as_mask(noise_mask, like=source, name="noise_mask")
    if (patch_mask * noise_mask).any():
        raise ContractError("patch_mask and noise_mask must not overlap")

    out = source + noise_mask[:, :, None] * noise_delta + patch_mask[:, :, None] * patch_delta
    np.clip(out, 0.0, 1.0, out=out)
    # keep untouched pixels bit-identical to the source
    touched = ((patch_mask + noise_mask) > 0)[:, :, None]
    return np.where(touched, out, source)


# ---------------------------------------------------------------------------
# raster I/O

_LOSSLESS_FORMATS = {"PNG", "BMP"}
_SCALE_KEY = "faceadv_scale"


def quantize8(img: np.ndarray) -> np.ndarray:
    """Rounds an image through the 8-bit representation used on disk."""
    img = as_image(img)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _open_checked(path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise CorruptImageError(f"{path}: not a decodable image") from exc
    except OSError as exc:
        raise CorruptImageError(f"{path}: truncated or corrupt image data") from exc
    if im.format not in _LOSSLESS_FORMATS:
        raise UnsupportedFormatError(f"{path}: format {im.format} is not a supported lossless raster (PNG/BMP)")
    return im


def load_image(path) -> np.ndarray:
    """Loads an 8-bit gray or RGB lossless raster as a [0, 1] float image."""
    im = _open_checked(path)
    if im.mode not in ("L", "RGB"):
        raise UnsupportedFormatError(f"{path}: mode {im.mode} not supported (need 8-bit L or RGB)")
    arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_image(img, path) -> None:
    """Writes a [0, 1] float image as an 8-bit PNG or BMP."""
    img = as_image(img)
    if img.min() < -1e-9 or img.max() > 1 + 1e-9:
        raise ContractError("image values must lie in [0, 1] when saved")
    path = Path(path)
    if path.suffix.lower() not in (".png", ".bmp"):
        raise UnsupportedFormatError(f"{path}: use a .png or .bmp suffix")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        Image.fromarray(data[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def load_mask(path) -> np.ndarray:
    """Loads a mask from a 1-channel image: value >= 128 means 1."""
    im = _open_checked(path)
    arr = np.asarray(im.convert("L"), dtype=np.float64)
    return (arr >= 128.0).astype(np.float64)


def save_mask(mask, path) -> None:
    mask = as_mask(mask)
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def load_thresholds(path) -> np.ndarray:
    """Loads a threshold matrix from a scaled 1-channel PNG or a numeric text grid."""
    path = Path(path)
    if path.suffix.lower() == ".txt":
        if not path.exists():
            raise FileNotFoundError(path)
        z = np.loadtxt(path, dtype=np.float64, ndmin=2)
        return as_thresholds(z)
    im = _open_checked(path)
    text = getattr(im, "text", {})
    if _SCALE_KEY not in text:
        raise UnsupportedFormatError(f"{path}: threshold image lacks the {_SCALE_KEY} header")
    scale = float(text[_SCALE_KEY])
    arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return as_thresholds(arr * scale)


def save_thresholds(z, path) -> None:
    """Writes a threshold matrix; .txt gets a numeric grid, .png a scaled image."""
    z = as_thresholds(z)
    path = Path(path)
    if path.suffix.lower() == ".txt":
        np.savetxt(path, z, fmt="%.9g")
        return
    scale = max(float(z.max()), 1e-12)
    data = np.rint(z / scale * 255.0).astype(np.uint8)
    info = PngImagePlugin.PngInfo()
    info.add_text(_SCALE_KEY, repr(scale))
    Image.fromarray(data, mode="L").save(path, pnginfo=info)
