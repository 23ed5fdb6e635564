"""Ideal 4f correlator: Fourier-plane convolution, tiling layouts, planning and simulation."""

from .fourier import capacity, fourier_conv
from .planner import InferencePlan, estimate_latency, plan_inferences
from .tiling import DeviceSpec, TilingPlan, channel_tiling, kernel_tiling, mixed_tiling

__all__ = [
    "DeviceSpec", "InferencePlan", "TilingPlan", "capacity", "channel_tiling", "estimate_latency",
    "fourier_conv", "kernel_tiling", "mixed_tiling", "plan_inferences",
]
