"""Deterministic synthetic face images and the default eyeglass patch mask.

These stand in for a face dataset: every identity is a parameter draw from a
seeded generator, and photos of one identity are small jittered variants of
its canonical rendering. Faces always contain exact-black pupils and an
exact-white highlight so that full-range perturbations are representable.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

# eye geometry is shared by the renderer and the eyeglass mask
_EYE_Y = 0.42
_EYE_DX = 0.16


def _grids(size: int):
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy + 0.5) / size, (xx + 0.5) / size


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synth_face(identity_seed: int, photo_seed: int | None = None, size: int = 64) -> np.ndarray:
    """Renders one photo of a synthetic identity as a (size, size, 3) image.

    ``photo_seed=None`` gives the canonical photo: no jitter, pupils exactly
    0.0 and highlight exactly 1.0. Other seeds add brightness jitter, a small
    shift, and sensor-like noise.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([0xFACE, int(identity_seed)])))
    yy, xx = _grids(size)

    # identity parameters span wide ranges so impostor pairs sit well apart
    # from the photo jitter applied below
    bg = rng.uniform(0.08, 0.92, size=3)
    skin_r = rng.uniform(0.45, 0.90)
    skin = np.array([skin_r, skin_r * rng.uniform(0.70, 0.90), skin_r * rng.uniform(0.45, 0.80)])
    hair = rng.uniform(0.0, 0.50, size=3)
    iris = rng.uniform(0.05, 0.75, size=3)
    mouth = np.array([rng.uniform(0.45, 0.85), rng.uniform(0.05, 0.35), rng.uniform(0.10, 0.40)])
    face_ry = rng.uniform(0.32, 0.42)
    face_rx = rng.uniform(0.24, 0.34)
    hairline = rng.uniform(0.24, 0.34)
    eye_ry = rng.uniform(0.030, 0.045)
    eye_rx = rng.uniform(0.045, 0.070)
    iris_r = rng.uniform(0.018, 0.028)
    brow_h = rng.uniform(0.010, 0.035)
    brow_off = rng.uniform(0.040, 0.070)
    mouth_y = rng.uniform(0.69, 0.75)
    mouth_rx = rng.uniform(0.07, 0.15)
    nose_ry = rng.uniform(0.045, 0.075)
    nose_rx = rng.uniform(0.018, 0.035)
    cheek_gain = rng.uniform(0.80, 1.12)

    img = np.empty((size, size, 3))
    img[:] = bg
    head = _ellipse(yy, xx, 0.52, 0.5, face_ry, face_rx)
    img[head] = skin
    for sx in (-1.0, 1.0):
        cheek = _ellipse(yy, xx, 0.60, 0.5 + sx * 0.17, 0.07, 0.06)
        img[cheek & head] = np.clip(skin * cheek_gain, 0.0, 1.0)
    hair_zone = _ellipse(yy, xx, 0.48, 0.5, face_ry * 1.12, face_rx * 1.08) & (yy < hairline)
    img[hair_zone] = hair

    for sx in (-1.0, 1.0):
        ex = 0.5 + sx * _EYE_DX
        img[_ellipse(yy, xx, _EYE_Y, ex, eye_ry, eye_rx)] = (0.92, 0.92, 0.92)
        img[_ellipse(yy, xx, _EYE_Y, ex, iris_r, iris_r)] = iris
        img[_ellipse(yy, xx, _EYE_Y - brow_off, ex, brow_h, 0.06)] = hair * 0.8

    img[_ellipse(yy, xx, mouth_y, 0.5, 0.025, mouth_rx)] = mouth
    nose = _ellipse(yy, xx, 0.58, 0.5, nose_ry, nose_rx)
    img[nose] = skin * 0.88

    img = ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0.0), mode="nearest")

    # stamped after blur so the extremes survive: pupils 0.0, highlight 1.0
    for sx in (-1.0, 1.0):
        img[_ellipse(yy, xx, _EYE_Y, 0.5 + sx * _EYE_DX, 0.012, 0.012)] = 0.0
    img[_ellipse(yy, xx, 0.33, 0.42, 0.015, 0.015)] = 1.0

    if photo_seed is not None:
        # session-to-session variation: exposure, head roll, framing, sensor
        # noise; wide enough that calibrated thresholds resemble a usable
        # verifier rather than an exact-match detector
        prng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([0xF0F0, int(identity_seed), int(photo_seed)])))
        img = img * prng.uniform(0.85, 1.15)
        angle = prng.uniform(-4.0, 4.0)
        img = ndimage.rotate(img, angle, axes=(0, 1), reshape=False, order=1, mode="nearest")
        shift = prng.integers(-3, 4, size=2)
        img = ndimage.shift(img, (shift[0], shift[1], 0), order=0, mode="nearest")
        img = img + prng.normal(0.0, 0.02, size=img.shape)

    return np.clip(img, 0.0, 1.0)


def identity_photos(identity_seed: int, n_photos: int, size: int = 64) -> list[np.ndarray]:
    """Canonical photo followed by jittered variants."""
    photos = [synth_face(identity_seed, None, size)]
    photos += [synth_face(identity_seed, j, size) for j in range(1, n_photos)]
    return photos


def attack_pairs(master_seed: int, n_pairs: int, size: int = 64) -> list[tuple[np.ndarray, np.ndarray]]:
    """Source/target canonical photos of distinct identities, seeded off ``master_seed``."""
    pairs = []
    for k in range(n_pairs):
        src_id = master_seed * 10_000 + 2 * k
        tgt_id = master_seed * 10_000 + 2 * k + 1
        pairs.append((synth_face(src_id, None, size), synth_face(tgt_id, None, size)))
    return pairs


def eyeglass_mask(size: int) -> np.ndarray:
    """Eyeglass-shaped binary patch mask matching the rendered eye positions."""
    yy, xx = _grids(size)
    lens_r = 0.13
    mask = np.zeros((size, size), dtype=bool)
    for sx in (-1.0, 1.0):
        mask |= _ellipse(yy, xx, _EYE_Y, 0.5 + sx * _EYE_DX, lens_r, lens_r)
    bridge = (np.abs(yy - _EYE_Y) < 0.025) & (np.abs(xx - 0.5) <= _EYE_DX)
    temples = (np.abs(yy - _EYE_Y) < 0.02) & (np.abs(xx - 0.5) > _EYE_DX + lens_r * 0.7)
    return (mask | bridge | temples).astype(np.float64)
