"""Ideal 4f correlator: convolution by pointwise multiplication in the Fourier plane."""

import numpy as np

from ..errors import DimensionError, InfeasibleError


def fourier_conv(x, k, max_extent=None):
    """Full linear convolution ``x * k`` through the DFT.

    Both operands are zero padded to ``(Hi+Hk-1) x (Wi+Wk-1)`` so the
    circular convolution computed by the transform has no wraparound.
    """
    x, k = np.asarray(x, dtype=np.float64), np.asarray(k, dtype=np.float64)
    if x.ndim != 2 or k.ndim != 2:
        raise DimensionError("fourier_conv takes two 2D operands")
    shape = (x.shape[0] + k.shape[0] - 1, x.shape[1] + k.shape[1] - 1)
    if max_extent is not None and max(shape) > max_extent:
        raise InfeasibleError(f"output plane {shape} exceeds {max_extent} pixels")
    spec = np.fft.rfft2(x, shape) * np.fft.rfft2(k, shape)
    return np.fft.irfft2(spec, shape)


def flip(k):
    """Rotate kernels by 180 degrees so a true convolution computes a correlation."""
    return np.asarray(k)[..., ::-1, ::-1]


def capacity(resolution, input_extent, kernel_extent):
    """Channels that fit along one axis of the device: ``R // (M + N - 1)``."""
    if min(resolution, input_extent, kernel_extent) < 1:
        raise ValueError("resolution and extents must be positive")
    n = resolution // (input_extent + kernel_extent - 1)
    if n == 0:
        raise InfeasibleError(
            f"a {input_extent}+{kernel_extent}-1 cell does not fit in {resolution} pixels",
            capacity=0,
        )
    return n
