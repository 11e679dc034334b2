"""The dual-domain enhancement network and its ablation switches.

Data flow for an RGB input ``D`` (3,H,W):

    per channel i in R, G, B (kernel 3, 5, 7):
        spatial   f3_i  = cbam(conv_i(D_i)) + conv_i(D_i)
        frequency ff_i  = ifft2(attn(norm(1x1 stack(|F(D_i)|))) * exp(j*phase))
        fused     fu_i  = relu(conv1x1([f3_i, ff_i]))
        residual  fr_i  = fu_i + D_i
    f_concat = [fr_R, fr_G, fr_B]
    f_d      = relu(T_d(f_concat))
    f_fusion = relu(T_f([f_d, ff_R, ff_G, ff_B]))
    f_attn   = cbam(f_fusion) + proj(f_concat)
    E        = sigmoid(T_e(f_attn))
    out      = E * calibration(E)
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import spectral
from . import tensor as T
from .attention import CBAM, ChannelCalibration, FrequencyAttention
from .layers import Conv2d, Module, PReLU
from .tensor import Parameter, Tensor

CHANNELS = ("R", "G", "B")
KERNELS = {"R": 3, "G": 5, "B": 7}
NORM_EPS = 1e-5
MIN_SIZE = 8


class NumericalError(ArithmeticError):
    """A forward stage produced NaN or Inf."""


@dataclass(frozen=True)
class AblationConfig:
    freq_attention: bool = True
    freq_branch: bool = True
    freq_fusion: bool = True
    chan_calib: bool = True
    local_attention: bool = True
    global_attention: bool = True

    def __post_init__(self):
        if self.freq_attention and not self.freq_branch:
            raise ValueError("freq_attention requires freq_branch")

    def to_bits(self) -> int:
        return sum(1 << i for i, f in enumerate(fields(self)) if getattr(self, f.name))

    @classmethod
    def from_bits(cls, bits: int) -> "AblationConfig":
        return cls(**{f.name: bool(bits >> i & 1) for i, f in enumerate(fields(cls))})

    @classmethod
    def preset(cls, name: str) -> "AblationConfig":
        try:
            return ABLATION_PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown ablation preset {name!r}; choose from {', '.join(ABLATION_PRESETS)}") from None


# Row order and labels follow the ablation table.  "No Frequency Branch" lists
# frequency attention as enabled, which cannot exist without the branch, so it
# is switched off here.
ABLATION_PRESETS: dict[str, AblationConfig] = {
    "full": AblationConfig(),
    "no_freq_attn": AblationConfig(freq_attention=False),
    "no_freq_branch": AblationConfig(freq_attention=False, freq_branch=False),
    "no_freq_fusion": AblationConfig(freq_fusion=False),
    "no_chan_calib": AblationConfig(chan_calib=False),
    "no_local_attn": AblationConfig(local_attention=False),
    "no_global_attn": AblationConfig(global_attention=False),
    "spatial_only": AblationConfig(freq_attention=False, freq_branch=False, freq_fusion=False),
    "minimal": AblationConfig(False, False, False, False, False, False),
}

ABLATION_LABELS = {
    "full": "Full Model (FUSION)",
    "no_freq_attn": "No Frequency Attention",
    "no_freq_branch": "No Frequency Branch",
    "no_freq_fusion": "No Frequency Guided Fusion",
    "no_chan_calib": "No Channel Calibration",
    "no_local_attn": "No Local Attention",
    "no_global_attn": "No Global Attention",
    "spatial_only": "Spatial Only",
    "minimal": "Minimal Model",
}


@dataclass(frozen=True)
class WidthPreset:
    name: str
    base: int      # feature maps per colour branch
    decoder: int   # width of the fusion head


WIDTH_PRESETS = {
    "tiny": WidthPreset("tiny", 4, 8),
    "small": WidthPreset("small", 8, 16),
    "paper": WidthPreset("paper", 32, 80),
}


def width_preset(name: str) -> WidthPreset:
    try:
        return WIDTH_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown width preset {name!r}; choose from {', '.join(WIDTH_PRESETS)}") from None


def _finite(stage: str, t: Tensor) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericalError(f"non-finite values produced at stage '{stage}'")
    return t


class SpatialBranch(Module):
    def __init__(self, channels: int, kernel: int, local_attention: bool, rng: np.random.Generator):
        self.conv = Conv2d(1, channels, kernel, rng)
        self.cbam = CBAM(channels, rng) if local_attention else None

    def __call__(self, d: Tensor) -> Tensor:
        f1 = self.conv(d)
        f2 = self.cbam(f1) if self.cbam is not None else f1
        return f2 + f1


class SpectralNorm(Module):
    """Per-channel affine normalization of a spectrum over its H*W bins."""

    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def __call__(self, m: Tensor) -> Tensor:
        c = m.shape[0]
        centered = m - T.mean(m, axis=(1, 2), keepdims=True)
        var = T.mean(T.square(centered), axis=(1, 2), keepdims=True)
        scaled = centered / T.sqrt(var + NORM_EPS)
        return scaled * T.reshape(self.gamma, (c, 1, 1)) + T.reshape(self.beta, (c, 1, 1))


class FrequencyBranch(Module):
    """|FFT| -> 1x1 conv, PReLU, 1x1 conv -> norm -> clamp -> attention -> IFFT.

    The clamp runs before attention so the attention pools a valid
    magnitude; its gains are positive, so the order does not change the
    product.  Unit-variance magnitudes are multiplied by sqrt(H*W) before
    the inverse transform, which by Parseval gives O(1) spatial features
    at any resolution.
    """

    def __init__(self, channels: int, freq_attention: bool, rng: np.random.Generator):
        self.lift = Conv2d(1, channels, 1, rng)
        # magnitudes are >= 0: alternate signs so the PReLU sees both sides
        signs = np.where(np.arange(channels) % 2 == 0, 1.0, -1.0)
        self.lift.weight.data[:] = np.abs(self.lift.weight.data) * signs[:, None, None, None]
        self.act = PReLU()
        self.mix = Conv2d(channels, channels, 1, rng)
        self.norm = SpectralNorm(channels)
        self.attention = FrequencyAttention(channels, rng) if freq_attention else None

    def refine(self, magnitude: Tensor) -> Tensor:
        m = T.clamp_min(self.norm(self.mix(self.act(self.lift(magnitude)))), 0.0)
        if self.attention is not None:
            m = self.attention(m)
        return m

    def __call__(self, d: Tensor) -> Tensor:
        spec = spectral.fft2(d)
        h, w = d.shape[1:]
        m = self.refine(spec.magnitude) * float(np.sqrt(h * w))
        phase = T.broadcast_to(spec.phase, m.shape)
        return spectral.ifft2(spectral.recombine(m, phase))


class FGF(Module):
    """1x1 conv + ReLU over [spatial, frequency] features."""

    def __init__(self, channels: int, with_frequency: bool, rng: np.random.Generator):
        self.conv = Conv2d(2 * channels if with_frequency else channels, channels, 1, rng)
        self.with_frequency = with_frequency

    def __call__(self, f_spatial: Tensor, f_freq: Optional[Tensor]) -> Tensor:
        if self.with_frequency:
            if f_freq is None or f_freq.shape != f_spatial.shape:
                raise T.ShapeError(f"FGF inputs differ: {f_spatial.shape} vs {None if f_freq is None else f_freq.shape}")
            x = T.concat([f_spatial, f_freq], axis=0)
        else:
            x = f_spatial
        return T.relu(self.conv(x))


class FusionModel(Module):
    def __init__(self, width: str | WidthPreset = "tiny", ablation: str | AblationConfig = "full", seed: int = 0):
        self.width = width if isinstance(width, WidthPreset) else width_preset(width)
        self.ablation = ablation if isinstance(ablation, AblationConfig) else AblationConfig.preset(ablation)
        self.seed = seed
        rng = np.random.default_rng(seed)
        c, dw, ab = self.width.base, self.width.decoder, self.ablation

        self.spatial = {ch: SpatialBranch(c, KERNELS[ch], ab.local_attention, rng) for ch in CHANNELS}
        self.frequency = ({ch: FrequencyBranch(c, ab.freq_attention, rng) for ch in CHANNELS}
                          if ab.freq_branch else {})
        self.fgf = ({ch: FGF(c, ab.freq_branch, rng) for ch in CHANNELS}
                    if ab.freq_fusion else {})
        self.expand = Conv2d(3 * c, dw, 3, rng)
        self.integrate = Conv2d(dw + (3 * c if ab.freq_branch else 0), dw, 3, rng)
        if ab.global_attention:
            self.global_attention = CBAM(dw, rng)
            self.context = Conv2d(3 * c, dw, 1, rng)
        self.decode1 = Conv2d(dw, dw, 3, rng)
        self.decode2 = Conv2d(dw, 3, 3, rng)
        if ab.chan_calib:
            self.calibration = ChannelCalibration(rng)
        self.assign_names()

    # -- per-channel stages ------------------------------------------------
    def spatial_branch(self, d: Tensor, channel_id: str) -> Tensor:
        if d.ndim != 3 or d.shape[0] != 1:
            raise T.ShapeError(f"spatial branch takes a single channel (1,H,W), got {d.shape}")
        return self.spatial[channel_id](d)

    def frequency_branch(self, d: Tensor, channel_id: str) -> Tensor:
        if not self.ablation.freq_branch:
            raise RuntimeError("frequency branch is disabled in this configuration")
        if d.ndim != 3 or d.shape[0] != 1:
            raise T.ShapeError(f"frequency branch takes a single channel (1,H,W), got {d.shape}")
        return self.frequency[channel_id](d)

    def fuse(self, f_spatial: Tensor, f_freq: Optional[Tensor], channel_id: str) -> Tensor:
        if not self.ablation.freq_fusion:
            return f_spatial
        return self.fgf[channel_id](f_spatial, f_freq)

    # -- full network --------------------------------------------------------
    def __call__(self, D) -> Tensor:
        return self.forward(D)

    def forward(self, D) -> Tensor:
        D = T.as_tensor(D)
        if D.ndim != 3 or D.shape[0] != 3:
            raise T.ShapeError(f"expected an RGB image (3,H,W), got {D.shape}")
        if D.shape[1] < MIN_SIZE or D.shape[2] < MIN_SIZE:
            raise T.ShapeError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {D.shape[1]}x{D.shape[2]}")
        if not np.isfinite(D.data).all() or D.data.min() < 0 or D.data.max() > 1:
            raise ValueError("input values must lie in [0, 1]")
        ab = self.ablation
        residual, freq = [], []
        for i, ch in enumerate(CHANNELS):
            d = D[i:i + 1]
            fs = _finite(f"spatial.{ch}", self.spatial_branch(d, ch))
            ff = _finite(f"frequency.{ch}", self.frequency_branch(d, ch)) if ab.freq_branch else None
            fu = _finite(f"fgf.{ch}", self.fuse(fs, ff, ch))
            residual.append(fu + d)
            if ff is not None:
                freq.append(ff)
        f_concat = T.concat(residual, axis=0)
        f_d = _finite("expand", T.relu(self.expand(f_concat)))
        joint = T.concat([f_d] + freq, axis=0) if freq else f_d
        f_fusion = _finite("integrate", T.relu(self.integrate(joint)))
        if ab.global_attention:
            f_attn = self.global_attention(f_fusion) + self.context(f_concat)
            f_attn = _finite("global_attention", f_attn)
        else:
            f_attn = f_fusion
        E = T.sigmoid(self.decode2(T.relu(self.decode1(f_attn))))
        E = _finite("decoder", E)
        if ab.chan_calib:
            E = _finite("calibration", self.calibration(E))
        return E


def count_parameters(model: Module) -> tuple[int, dict[str, int]]:
    """Total scalar count and a breakdown keyed by top-level module."""
    breakdown: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        breakdown[top] = breakdown.get(top, 0) + p.size
    return sum(breakdown.values()), breakdown
