"""Deterministic image corruptions at severities 1-5.

Each image gets its own Philox stream keyed by ``(seed, kind, severity,
image index)``. Image ``i`` of a batch is therefore corrupted the same way
whatever the other images are and in whatever order images are processed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DomainError

KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "contrast",
    "brightness",
    "pixelate",
    "defocus_blur_boxapprox",
)
NOISE_KINDS = ("gaussian_noise", "shot_noise", "impulse_noise")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}; known: {', '.join(KINDS)}")
        if int(self.severity) != self.severity or not 1 <= self.severity <= 5:
            raise ConfigError(f"severity must be an integer in 1..5, got {self.severity}")
        if self.seed < 0:
            raise ConfigError("corruption seed must be nonnegative")


def _stream(spec: CorruptionSpec, index: int) -> np.random.Generator:
    key = np.random.SeedSequence([spec.seed, KINDS.index(spec.kind), spec.severity, index])
    return np.random.Generator(np.random.Philox(key))


def _box_blur(img: np.ndarray, width: int) -> np.ndarray:
    r = width // 2
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    return sliding_window_view(padded, (width, width), axis=(1, 2)).mean(axis=(-2, -1))


def _pixelate(img: np.ndarray, factor: int) -> np.ndarray:
    _, h, w = img.shape
    small = img[:, ::factor, ::factor]
    return np.repeat(np.repeat(small, factor, axis=1), factor, axis=2)[:, :h, :w]


def _corrupt_one(img: np.ndarray, spec: CorruptionSpec, index: int) -> np.ndarray:
    s = spec.severity
    kind = spec.kind
    if kind == "gaussian_noise":
        return img + _stream(spec, index).normal(0.0, 0.04 * s + 0.02, size=img.shape)
    if kind == "shot_noise":
        rate = 60.0 / s
        return _stream(spec, index).poisson(img * rate) / rate
    if kind == "impulse_noise":
        rng = _stream(spec, index)
        hit = rng.random(img.shape) < 0.02 * s
        salt = rng.random(img.shape) < 0.5
        return np.where(hit, salt.astype(np.float64), img)
    if kind == "contrast":
        mean = img.mean()
        return (img - mean) * (1 - 0.15 * s) + mean
    if kind == "brightness":
        return img + 0.1 * s
    if kind == "pixelate":
        return _pixelate(img, 1 + s)
    return _box_blur(img, 2 * s + 1)


def corrupt(images, spec: CorruptionSpec) -> np.ndarray:
    """Apply ``spec`` to an ``n x c x h x w`` batch in [0, 1]; result clamped to [0, 1]."""
    x = np.asarray(getattr(images, "data", images), dtype=np.float64)
    if x.ndim != 4:
        raise DomainError(f"corrupt expects n x c x h x w images, got shape {x.shape}")
    if x.size and (not np.isfinite(x).all() or x.min() < 0 or x.max() > 1):
        raise DomainError("pixel values must lie in [0, 1]")
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = _corrupt_one(x[i], spec, i)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
