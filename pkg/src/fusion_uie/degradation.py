"""Synthetic underwater image formation.

Per channel c, with transmittance t_c = max(exp(-beta_c * depth), floor):

    out_c = clean_c * t_c + backscatter_c * (1 - t_c)

The first term is Beer-Lambert attenuation; the second is the veiling
light that makes the degradation more than a per-channel gain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DegradationParams:
    beta: tuple[float, float, float] = (0.8, 0.3, 0.1)
    depth: float = 2.0
    backscatter: tuple[float, float, float] = (0.0, 0.1, 0.15)
    floor: float = 1e-3

    def __post_init__(self):
        if min(self.beta) < 0:
            raise ValueError("attenuation coefficients must be non-negative")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if not all(0.0 <= b <= 1.0 for b in self.backscatter):
            raise ValueError("backscatter must lie in [0, 1]")
        if self.floor < 0:
            raise ValueError("transmittance floor must be non-negative")

    def transmittance(self) -> np.ndarray:
        t = np.exp(-np.asarray(self.beta, dtype=np.float64) * self.depth)
        return np.maximum(t, self.floor)


def degrade(clean: np.ndarray, p: DegradationParams) -> np.ndarray:
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3 or clean.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got {clean.shape}")
    t = p.transmittance()[:, None, None]
    b = np.asarray(p.backscatter, dtype=np.float64)[:, None, None]
    return np.clip(clean * t + b * (1.0 - t), 0.0, 1.0)


def random_params(rng: np.random.Generator) -> DegradationParams:
    """Draw a water type with red attenuating fastest, then green, then blue."""
    beta = np.sort(rng.uniform(0.05, 1.0, size=3))[::-1]
    depth = rng.uniform(0.5, 3.0)
    back = (rng.uniform(0.0, 0.1), rng.uniform(0.1, 0.4), rng.uniform(0.2, 0.5))
    return DegradationParams(beta=tuple(float(x) for x in beta), depth=float(depth),
                             backscatter=tuple(float(x) for x in back))
