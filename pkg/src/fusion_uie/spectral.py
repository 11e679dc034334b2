"""2-D DFT with magnitude/phase split and phase-preserving reconstruction.

Conventions: unnormalized forward transform, 1/(HW) on the inverse, no
frequency shifting (index (0, 0) is DC).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

MAG_EPS = 1e-12
NEGATIVE_MAG_WARN = -1e-6
_warned_negative = False


class ImaginaryResidueError(ArithmeticError):
    """The inverse transform came back with a non-negligible imaginary part.

    This means something upstream broke conjugate symmetry of the spectrum.
    """


@dataclass
class SpectrumPair:
    magnitude: Tensor
    phase: Tensor

    @property
    def shape(self) -> tuple:
        return self.magnitude.shape

    def complex(self) -> np.ndarray:
        return self.magnitude.data * np.exp(1j * self.phase.data)


def _mirror(a: np.ndarray) -> np.ndarray:
    """a[..., (-u) % H, (-v) % W]"""
    return np.roll(np.flip(a, axis=(-2, -1)), 1, axis=(-2, -1))


def _hermitian(X: np.ndarray) -> np.ndarray:
    # exact conjugate symmetry; FFT roundoff otherwise leaves the phase of
    # near-zero bins arbitrary, and any learned nonzero magnitude placed
    # there would leak into the imaginary part of the inverse
    return 0.5 * (X + np.conj(_mirror(X)))


def fft2(x: Tensor) -> SpectrumPair:
    """Per-channel forward DFT of a (C,H,W) tensor, split into polar form."""
    if x.ndim != 3:
        raise T.ShapeError(f"fft2 expects (C,H,W), got {x.shape}")
    X = _hermitian(np.fft.fft2(x.data, axes=(-2, -1)))
    mag = np.abs(X)
    phase = np.angle(X)
    hw = x.shape[1] * x.shape[2]
    safe = np.maximum(mag, MAG_EPS)

    def _pullback(z):
        # real input: dL/dx = Re(HW * ifft2(z)) for dL = Re<z, dX>
        return (np.real(np.fft.ifft2(z, axes=(-2, -1))) * hw,)

    def bw_mag(g):
        return _pullback((g / safe) * X)

    def bw_phase(g):
        return _pullback(1j * (g / (safe * safe)) * X)

    return SpectrumPair(
        T._make(mag, (x,), bw_mag, "fft2.mag"),
        T._make(phase, (x,), bw_phase, "fft2.phase"),
    )


def recombine(magnitude_refined: Tensor, phase: Tensor) -> SpectrumPair:
    """Pair a (learned) magnitude with the original phase.

    Negative magnitudes are clamped to zero; anything below -1e-6 before
    the clamp is logged.
    """
    if magnitude_refined.shape != phase.shape:
        raise T.ShapeError(f"magnitude {magnitude_refined.shape} and phase {phase.shape} differ")
    global _warned_negative
    lo = float(magnitude_refined.data.min())
    if lo < NEGATIVE_MAG_WARN:
        # learned magnitudes go negative routinely; warn once, then only debug
        level = logging.DEBUG if _warned_negative else logging.WARNING
        _warned_negative = True
        log.log(level, "clamping negative refined magnitude (min %.3e)", lo)
    return SpectrumPair(T.clamp_min(magnitude_refined, 0.0), phase)


def ifft2(spectrum: SpectrumPair) -> Tensor:
    """Real part of the inverse DFT of magnitude * exp(j*phase)."""
    mag, phase = spectrum.magnitude, spectrum.phase
    rot = np.exp(1j * phase.data)
    y = np.fft.ifft2(mag.data * rot, axes=(-2, -1))
    re = np.real(y)
    resid = float(np.abs(np.imag(y)).max()) if y.size else 0.0
    bound = 1e-6 * (1.0 + float(np.abs(re).max()))
    if resid > bound:
        raise ImaginaryResidueError(
            f"inverse DFT imaginary residue {resid:.3e} exceeds {bound:.3e}; "
            "upstream op broke conjugate symmetry")

    def bw(g):
        w = rot * np.fft.ifft2(g, axes=(-2, -1))
        return np.real(w), -mag.data * np.imag(w)

    return T._make(np.ascontiguousarray(re), (mag, phase), bw, "ifft2")
