"""Procedural clean scenes and degraded/clean training pairs."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .degradation import degrade, random_params


def _smooth_noise(rng: np.random.Generator, size: int, scale: float) -> np.ndarray:
    n = rng.standard_normal((size, size))
    n = ndimage.gaussian_filter(n, sigma=scale, mode="wrap")
    n -= n.min()
    return n / (n.max() + 1e-12)


def clean_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """A (3,size,size) scene in [0,1]: colour gradient, soft texture, a few shapes."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    tex = _smooth_noise(rng, size, scale=rng.uniform(1.5, 5.0))
    img = img * (0.75 + 0.5 * (tex - 0.5))
    for _ in range(rng.integers(2, 6)):
        colour = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.25)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img = np.where(mask[None], 0.7 * colour[:, None, None] + 0.3 * img, img)
    return np.clip(img, 0.0, 1.0)


def make_pairs(n: int, seed: int, size: int = 64) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` (degraded, clean) pairs, fully determined by ``seed``."""
    if n < 1:
        raise ValueError("need at least one image")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        clean = clean_image(rng, size)
        pairs.append((degrade(clean, random_params(rng)), clean))
    return pairs
