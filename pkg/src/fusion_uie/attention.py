"""Multiplicative attention blocks: channel, spatial (together CBAM),
frequency-magnitude, and the final RGB calibration."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv2d, Linear, Module
from .tensor import Tensor

SPATIAL_KERNEL = 7
CALIBRATION_HIDDEN = 8


MIN_HIDDEN = 4
HIDDEN_BIAS_INIT = 1.0


def reduction_ratio(channels: int) -> int:
    return 16 if channels >= 16 else channels


def hidden_width(channels: int, reduction: int) -> int:
    """channels // reduction, floored at MIN_HIDDEN (never above channels).

    A single ReLU unit fed by same-signed pooled statistics is dead for
    every input half of the time; four units make that vanishingly rare.
    """
    return max(channels // reduction, min(channels, MIN_HIDDEN))


def _gate_mlp(c_in: int, hidden: int, c_out: int, rng: np.random.Generator) -> tuple[Linear, Linear]:
    fc1 = Linear(c_in, hidden, rng)
    fc1.bias.data[:] = HIDDEN_BIAS_INIT  # gates start in the ReLU's linear regime
    return fc1, Linear(hidden, c_out, rng)


def _check_channels(f: Tensor, channels: int, who: str) -> None:
    if f.ndim != 3 or f.shape[0] != channels:
        raise T.ShapeError(f"{who} configured for {channels} channels, got input {f.shape}")


def _scale_channels(f: Tensor, w: Tensor) -> Tensor:
    return f * T.reshape(w, (w.shape[0], 1, 1))


class ChannelAttention(Module):
    """sigmoid(W2 relu(W1 avgpool(f))) applied per channel.

    Pooling is average-only (no max branch).
    """

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int | None = None):
        r = reduction or reduction_ratio(channels)
        if channels % r:
            raise ValueError(f"channels {channels} not divisible by reduction {r}")
        self.channels = channels
        self.reduction = r
        self.fc1, self.fc2 = _gate_mlp(channels, hidden_width(channels, r), channels, rng)

    def weights(self, f: Tensor) -> Tensor:
        _check_channels(f, self.channels, "channel attention")
        return T.sigmoid(self.fc2(T.relu(self.fc1(T.global_avg_pool(f)))))

    def __call__(self, f: Tensor) -> Tensor:
        return _scale_channels(f, self.weights(f))


class SpatialAttention(Module):
    def __init__(self, rng: np.random.Generator, kernel: int = SPATIAL_KERNEL):
        self.conv = Conv2d(2, 1, kernel, rng)

    def weights(self, f: Tensor) -> Tensor:
        """(1,H,W) map in (0,1), independent of the channel count of ``f``."""
        return T.sigmoid(self.conv(T.spatial_pool_pair(f)))

    def __call__(self, f: Tensor) -> Tensor:
        return f * self.weights(f)


class CBAM(Module):
    """Channel attention followed by spatial attention."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channel = ChannelAttention(channels, rng)
        self.spatial = SpatialAttention(rng)

    def __call__(self, f: Tensor) -> Tensor:
        return self.spatial(self.channel(f))


class FrequencyAttention(Module):
    """Per-channel gains for a magnitude spectrum from its mean amplitude."""

    def __init__(self, channels: int, rng: np.random.Generator):
        r = reduction_ratio(channels)
        self.channels = channels
        self.fc3, self.fc4 = _gate_mlp(channels, hidden_width(channels, r), channels, rng)

    def weights(self, mag: Tensor) -> Tensor:
        _check_channels(mag, self.channels, "frequency attention")
        return T.sigmoid(self.fc4(T.relu(self.fc3(T.global_avg_pool(mag)))))

    def __call__(self, mag: Tensor) -> Tensor:
        return _scale_channels(mag, self.weights(mag))


class ChannelCalibration(Module):
    def __init__(self, rng: np.random.Generator, hidden: int = CALIBRATION_HIDDEN):
        self.fc1, self.fc2 = _gate_mlp(3, hidden, 3, rng)

    def weights(self, E: Tensor) -> Tensor:
        if E.ndim != 3 or E.shape[0] != 3:
            raise T.ShapeError(f"channel calibration needs a 3-channel image, got {E.shape}")
        return T.sigmoid(self.fc2(T.relu(self.fc1(T.global_avg_pool(E)))))

    def __call__(self, E: Tensor) -> Tensor:
        return _scale_channels(E, self.weights(E))
