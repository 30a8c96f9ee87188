"""Fixed-weight convolutional feature extractors with hand-derived input gradients.

Four small architectures (A-D) map images to unit-free embedding vectors.
Weights are drawn once from a seeded generator and never trained; what matters
for attack synthesis is that embeddings are smooth in the input and that the
gradient of any scalar on the embedding can be pulled back to pixel space
exactly. The backward pass is written against the forward pass by hand and is
checked against finite differences in the tests.

Also here: embedding distances with gradients, weighted extractor ensembles,
and the random crop-and-resize input diversity transform with its exact
linear pullback.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError
from .imagecore import as_image

# architecture name -> tuple of (out_channels, kernel, stride) conv layers,
# each followed by tanh; a global average pool and linear head finish the map
ARCHITECTURES = {
    "A": ((8, 3, 2), (16, 3, 2)),
    "B": ((6, 3, 2), (12, 3, 2), (24, 3, 2)),
    "C": ((12, 5, 2), (20, 3, 2)),
    "D": ((4, 3, 2), (8, 3, 2), (16, 3, 2), (32, 3, 2)),
}

DISTANCE_METRICS = ("l2", "cosine")

# keeps the standardization denominator away from zero; large enough that a
# near-constant channel cannot blow up attack gradients
_NORM_EPS = 1e-3


def _same_pad(n: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


class FeatureExtractor:
    """Deterministic conv-tanh stack with global average pooling and a linear head.

    Inputs are (height, width, channels) images in [0, 1]. Each channel is
    standardized to zero mean and unit variance before the first convolution,
    which gives the extractor the exposure and white-balance invariance a
    trained verifier would have; without it, simulated capture conditions
    would swamp identity information entirely. The same (architecture, seed)
    pair always yields identical weights.
    """

    def __init__(self, architecture: str, seed: int, input_size: tuple[int, int] = (112, 112),
                 channels: int = 3, embed_dim: int = 128):
        if architecture not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {architecture!r}; expected one of {sorted(ARCHITECTURES)}")
        if len(input_size) != 2 or min(input_size) < 2 ** len(ARCHITECTURES[architecture]):
            raise ContractError(f"input_size {input_size!r} too small for architecture {architecture}")
        if channels not in (1, 3):
            raise ContractError(f"channels must be 1 or 3, got {channels}")
        if embed_dim < 1:
            raise ContractError(f"embed_dim must be positive, got {embed_dim}")
        self.architecture = architecture
        self.seed = int(seed)
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.channels = int(channels)
        self.embed_dim = int(embed_dim)
        # forward-pass counter; generation-phase hygiene audits read this to
        # prove held-out models were never queried
        self.query_count = 0

        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))
        self._layers = []
        in_c = self.channels
        for out_c, k, s in ARCHITECTURES[architecture]:
            fan_in = k * k * in_c
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(out_c, k, k, in_c))
            b = rng.normal(0.0, 0.1, size=out_c)
            self._layers.append((w, b, k, s))
            in_c = out_c
        self._head_w = rng.normal(0.0, 1.0 / np.sqrt(in_c), size=(self.embed_dim, in_c))
        self._head_b = rng.normal(0.0, 0.1, size=self.embed_dim)

    @property
    def model_id(self) -> str:
        return f"{self.architecture}-{self.seed}"

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = as_image(x, "extractor input")
        expect = (self.input_size[0], self.input_size[1], self.channels)
        if x.shape != expect:
            raise ContractError(f"extractor {self.model_id} expects input shape {expect}, got {x.shape}")
        return x

    def forward(self, x: np.ndarray):
        """Returns (embedding, cache); the cache feeds backward_input."""
        x = self._check_input(x)
        self.query_count += 1
        sig = x.std(axis=(0, 1))
        scale = sig + _NORM_EPS
        h = (x - x.mean(axis=(0, 1))) / scale
        norm_cache = (sig, scale, h)
        cache = []
        for w, b, k, s in self._layers:
            out_h, pt, pb = _same_pad(h.shape[0], k, s)
            out_w, pl, pr = _same_pad(h.shape[1], k, s)
            hp = np.pad(h, ((pt, pb), (pl, pr), (0, 0)))
            win = sliding_window_view(hp, (k, k), axis=(0, 1))[::s, ::s]
            pre = np.tensordot(win, w, axes=([2, 3, 4], [3, 1, 2])) + b
            act = np.tanh(pre)
            cache.append((h.shape, hp.shape, (pt, pl), act))
            h = act
        feat = h.mean(axis=(0, 1))
        emb = self._head_w @ feat + self._head_b
        return emb, (norm_cache, cache, h.shape)

    def backward_input(self, cache, upstream: np.ndarray) -> np.ndarray:
        """Pulls d(scalar)/d(embedding) back to d(scalar)/d(input pixels)."""
        norm_cache, layer_cache, last_shape = cache
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (self.embed_dim,):
            raise ContractError(f"upstream gradient must have shape ({self.embed_dim},), got {upstream.shape}")
        d_feat = self._head_w.T @ upstream
        d_h = np.broadcast_to(d_feat / (last_shape[0] * last_shape[1]), last_shape).copy()
        for (w, b, k, s), (in_shape, pad_shape, (pt, pl), act) in zip(
                reversed(self._layers), reversed(layer_cache)):
            d_pre = d_h * (1.0 - act * act)
            d_pad = np.zeros(pad_shape)
            oh, ow = d_pre.shape[:2]
            for ky in range(k):
                for kx in range(k):
                    contrib = np.tensordot(d_pre, w[:, ky, kx, :], axes=([2], [0]))
                    d_pad[ky:ky + oh * s:s, kx:kx + ow * s:s, :] += contrib
            d_h = d_pad[pt:pt + in_shape[0], pl:pl + in_shape[1], :]
        sig, scale, normed = norm_cache
        g_mean = d_h.mean(axis=(0, 1))
        gy_mean = (d_h * normed).mean(axis=(0, 1))
        # d/dx of (x - mean) / (std + eps); the std term vanishes for a
        # constant channel, where normed is identically zero anyway
        sig_safe = np.where(sig > 0.0, sig, 1.0)
        return (d_h - g_mean) / scale - normed * (gy_mean / sig_safe)

    def embed(self, x: np.ndarray) -> np.ndarray:
        emb, _ = self.forward(x)
        return emb

    def input_gradient(self, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        _, cache = self.forward(x)
        return self.backward_input(cache, upstream)

    def spec_dict(self) -> dict:
        return {"architecture": self.architecture, "seed": self.seed,
                "input_size": list(self.input_size), "channels": self.channels,
                "embed_dim": self.embed_dim}


def save_extractor_spec(model: FeatureExtractor, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.spec_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_extractor_spec(path) -> FeatureExtractor:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        return FeatureExtractor(raw["architecture"], raw["seed"],
                                input_size=tuple(raw.get("input_size", (112, 112))),
                                channels=raw.get("channels", 3),
                                embed_dim=raw.get("embed_dim", 128))
    except KeyError as exc:
        raise ContractError(f"extractor spec {path} is missing field {exc}") from exc


# ---------------------------------------------------------------------------
# embedding distances


def feature_distance(reference: np.ndarray, query: np.ndarray, metric: str = "l2") -> float:
    value, _ = feature_distance_with_grad(reference, query, metric)
    return value


def feature_distance_with_grad(reference: np.ndarray, query: np.ndarray,
                               metric: str = "l2") -> tuple[float, np.ndarray]:
    """Distance between embeddings and its gradient with respect to ``query``.

    l2 is the euclidean norm of the difference; cosine is 1 minus cosine
    similarity. Both are minimized by an impersonation attack.
    """
    r = np.asarray(reference, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    if r.shape != q.shape or r.ndim != 1:
        raise ContractError(f"embeddings must be equal-length vectors, got {r.shape} and {q.shape}")
    if metric == "l2":
        diff = q - r
        d = float(np.linalg.norm(diff))
        grad = diff / d if d > 0 else np.zeros_like(diff)
        return d, grad
    if metric == "cosine":
        nr = float(np.linalg.norm(r))
        nq = float(np.linalg.norm(q))
        if nr == 0 or nq == 0:
            raise ContractError("cosine distance is undefined for zero embeddings")
        cos = float(q @ r) / (nr * nq)
        grad = -(r / (nr * nq) - cos * q / (nq * nq))
        return 1.0 - cos, grad
    raise ContractError(f"unknown metric {metric!r}; expected one of {DISTANCE_METRICS}")


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class EnsembleSpec:
    """Extractors queried during generation, with convex weights."""

    members: tuple[FeatureExtractor, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if not self.members:
            raise ContractError("ensemble needs at least one member")
        if len(self.weights) != len(self.members):
            raise ContractError(f"{len(self.members)} members but {len(self.weights)} weights")
        if any(w < 0 for w in self.weights):
            raise ContractError("ensemble weights must be nonnegative")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ContractError(f"ensemble weights must sum to 1, got {sum(self.weights)}")

    @classmethod
    def equal(cls, members) -> "EnsembleSpec":
        members = tuple(members)
        return cls(members, (1.0 / len(members),) * len(members))

    @property
    def model_ids(self) -> tuple[str, ...]:
        return tuple(m.model_id for m in self.members)


def ensemble_distance(spec: EnsembleSpec, image: np.ndarray, target: np.ndarray,
                      metric: str = "l2") -> tuple[float, np.ndarray]:
    """Weighted distance from ``image`` to ``target`` across members, with pixel gradient."""
    total = 0.0
    grad = None
    for member, w in zip(spec.members, spec.weights):
        t_emb = member.embed(target)
        emb, cache = member.forward(image)
        d, d_emb = feature_distance_with_grad(t_emb, emb, metric)
        total += w * d
        g = member.backward_input(cache, w * d_emb)
        grad = g if grad is None else grad + g
    return total, grad


# ---------------------------------------------------------------------------
# input diversity


@dataclass(frozen=True)
class DiversityConfig:
    """Random crop-and-resize applied to attack inputs at each iteration."""

    enabled: bool = True
    max_crop_fraction: float = 0.07

    def __post_init__(self):
        if not 0.0 <= self.max_crop_fraction < 0.5:
            raise ContractError(f"max_crop_fraction must be in [0, 0.5), got {self.max_crop_fraction}")


def sample_crop_offsets(shape: tuple[int, int], config: DiversityConfig,
                        rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Crop widths (top, bottom, left, right), each uniform on [0, floor(f * edge)]."""
    if not config.enabled:
        return (0, 0, 0, 0)
    h, w = shape
    mv = int(np.floor(config.max_crop_fraction * h))
    mh = int(np.floor(config.max_crop_fraction * w))
    top, bottom = (int(rng.integers(0, mv + 1)) for _ in range(2))
    left, right = (int(rng.integers(0, mh + 1)) for _ in range(2))
    return (top, bottom, left, right)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # align-corners bilinear: endpoints map to endpoints
    if n_in == n_out:
        return np.eye(n_in)
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = np.linspace(0.0, n_in - 1.0, n_out)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def _diversity_matrices(shape, offsets):
    h, w = shape
    top, bottom, left, right = offsets
    ch, cw = h - top - bottom, w - left - right
    if ch < 1 or cw < 1:
        raise ContractError(f"crop offsets {offsets} leave no pixels in a {shape} image")
    return _interp_matrix(h, ch), _interp_matrix(w, cw)


def apply_diversity(x: np.ndarray, offsets: tuple[int, int, int, int]) -> np.ndarray:
    """Crops by the given per-edge widths and resizes back to the input size."""
    x = as_image(x, "diversity input")
    top, bottom, left, right = offsets
    if offsets == (0, 0, 0, 0):
        return x
    rm, cm = _diversity_matrices(x.shape[:2], offsets)
    crop = x[top:x.shape[0] - bottom, left:x.shape[1] - right, :]
    tmp = np.tensordot(rm, crop, axes=(1, 0))
    return np.tensordot(tmp, cm, axes=([1], [1])).transpose(0, 2, 1)


def diversity_pullback(grad: np.ndarray, offsets: tuple[int, int, int, int],
                       shape: tuple[int, int, int]) -> np.ndarray:
    """Exact adjoint of apply_diversity: maps output gradients to input gradients."""
    grad = as_image(grad, "diversity gradient")
    top, bottom, left, right = offsets
    if offsets == (0, 0, 0, 0):
        return grad
    rm, cm = _diversity_matrices(shape[:2], offsets)
    tmp = np.tensordot(rm.T, grad, axes=(1, 0))
    d_crop = np.tensordot(tmp, cm.T, axes=([1], [1])).transpose(0, 2, 1)
    out = np.zeros(shape)
    out[top:shape[0] - bottom, left:shape[1] - right, :] = d_crop
    return out
