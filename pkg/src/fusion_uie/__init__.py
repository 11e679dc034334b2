"""Dual-domain (spatial + Fourier) underwater image enhancement in numpy."""

__version__ = "0.1.0"
