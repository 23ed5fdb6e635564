"""Linear layers emulated by shared grouped convolution.

A token is an ``H x W`` matrix held in one channel.  Convolving it with a
kernel of the same extent under valid padding yields one scalar, which is
exactly one output node of a linear layer.  Reusing the same kernel bank for
every channel (group size 1) applies the same linear layer to every token;
a group size ``g > 1`` folds ``g`` consecutive tokens into each output.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import truncnorm

from . import tensor_ops
from .errors import ConfigurationError, DimensionError
from .tensor_ops import SAME, VALID


@dataclass
class SharedGroupedConv:
    """A kernel bank applied to every group of ``group_size`` channels.

    ``kernels`` has shape ``[M_out, g, Kh, Kw]``.  The unshared ablation
    carries one independent bank per group: ``[copies, M_out, g, Kh, Kw]``.
    """

    kernels: np.ndarray
    group_size: int = 1
    bias: Optional[np.ndarray] = None
    padding: str = VALID

    def __post_init__(self):
        if self.padding not in tensor_ops.PADDING_MODES:
            raise ConfigurationError(f"unknown padding {self.padding!r}")
        if self.kernels.ndim not in (4, 5):
            raise DimensionError(f"kernel bank must be rank 4 or 5, got {self.kernels.shape}")
        if self.kernels.shape[-3] != self.group_size:
            raise ConfigurationError(
                f"kernel depth {self.kernels.shape[-3]} != group size {self.group_size}"
            )
        if self.bias is not None and self.bias.shape != self.kernels.shape[:-3]:
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match bank {self.kernels.shape[:-3]}"
            )

    @property
    def shared(self):
        return self.kernels.ndim == 4

    @property
    def out_channels(self):
        return self.kernels.shape[-4]

    @property
    def kernel_shape(self):
        return self.kernels.shape[-2:]


@dataclass
class LinearEquivalent:
    weight: np.ndarray  # [M_out, g*Kh*Kw]
    bias: Optional[np.ndarray] = None


def _check_input(layer, x):
    t, h, w = x.shape[-3:]
    g = layer.group_size
    if t % g:
        raise ConfigurationError(f"{t} channels not divisible by group size {g}")
    if layer.padding == VALID and (h, w) != layer.kernel_shape:
        raise ConfigurationError(
            f"valid padding needs full-extent kernels: token {h}x{w}, "
            f"kernel {layer.kernel_shape[0]}x{layer.kernel_shape[1]}"
        )
    if not layer.shared and layer.kernels.shape[0] != t // g:
        raise ConfigurationError(
            f"unshared bank has {layer.kernels.shape[0]} copies for {t // g} groups"
        )
    return t // g


def shared_forward(layer, x, target_shape=None):
    """Apply ``layer`` to ``x [..., T, H, W]``.

    Valid padding yields the raw ``[..., (T/g)*M_out, 1, 1]`` column of
    scalars; same padding yields ``[..., (T/g)*M_out, H, W]``.  When
    ``target_shape`` is given, the trailing three axes are reshaped to it
    (the caller decides how the 1x1 outputs are laid back out as tokens).
    """
    x = np.asarray(x)
    groups = _check_input(layer, x)
    lead = x.shape[:-3]
    m = layer.out_channels
    if layer.shared:
        xg = x.reshape(*lead, groups, layer.group_size, *x.shape[-2:])
        y = tensor_ops.conv2d(xg, layer.kernels, layer.padding)
        if layer.bias is not None:
            y = y + layer.bias[:, None, None]
    else:
        bank = layer.kernels.reshape(groups * m, *layer.kernels.shape[2:])
        y = tensor_ops.conv2d(x, bank, layer.padding, groups=groups)
        if layer.bias is not None:
            y = y + layer.bias.reshape(-1)[:, None, None]
    y = y.reshape(*lead, groups * m, *y.shape[-2:])
    if target_shape is not None:
        y = y.reshape(*lead, *target_shape)
    return y


def shared_backward(layer, x, dy):
    """Adjoint of :func:`shared_forward`.

    ``dy`` may be in raw or caller-reshaped layout.  Returns
    ``(dx, dkernels, dbias)``; ``dbias`` is None for bias-free layers.
    """
    groups = _check_input(layer, x)
    lead = x.shape[:-3]
    m = layer.out_channels
    k = layer.kernel_shape
    if layer.padding == VALID:
        out_hw = (1, 1)
    else:
        out_hw = x.shape[-2:]
    if layer.shared:
        dy = dy.reshape(*lead, groups, m, *out_hw)
        xg = x.reshape(*lead, groups, layer.group_size, *x.shape[-2:])
        dxg, dk = tensor_ops.conv2d_backward(xg, layer.kernels, dy, layer.padding)
        dx = dxg.reshape(x.shape)
        db = None if layer.bias is None else dy.sum(axis=tuple(range(dy.ndim - 3)) + (-2, -1))
    else:
        dy = dy.reshape(*lead, groups * m, *out_hw)
        bank = layer.kernels.reshape(groups * m, layer.group_size, *k)
        dx, dk = tensor_ops.conv2d_backward(x, bank, dy, layer.padding, groups=groups)
        dk = dk.reshape(layer.kernels.shape)
        db = None
        if layer.bias is not None:
            db = dy.sum(axis=tuple(range(dy.ndim - 3)) + (-2, -1)).reshape(layer.bias.shape)
    return dx, dk, db


def to_linear(layer):
    if not layer.shared:
        raise ConfigurationError("an unshared bank has no single linear equivalent")
    m = layer.out_channels
    bias = None if layer.bias is None else layer.bias.copy()
    return LinearEquivalent(layer.kernels.reshape(m, -1).copy(), bias)


def from_linear(weq, group_size, kh, kw, padding=VALID):
    m, n = weq.weight.shape
    if n != group_size * kh * kw:
        raise ConfigurationError(
            f"weight has {n} inputs, expected g*Kh*Kw = {group_size * kh * kw}"
        )
    bias = None if weq.bias is None else weq.bias.copy()
    return SharedGroupedConv(
        weq.weight.reshape(m, group_size, kh, kw).copy(), group_size, bias, padding
    )


def linear_oracle(weq, x, group_size):
    """Flatten each group of tokens and multiply by the weight matrix.

    Returns ``[..., T/g, M_out]``.
    """
    lead = x.shape[:-3]
    flat = x.reshape(*lead, x.shape[-3] // group_size, -1)
    y = flat @ weq.weight.T
    if weq.bias is not None:
        y = y + weq.bias
    return y


def unshared_variant(layer, channels):
    """Materialize one independent copy of the bank per channel group."""
    if not layer.shared:
        raise ConfigurationError("layer is already unshared")
    if channels % layer.group_size:
        raise ConfigurationError(
            f"{channels} channels not divisible by group size {layer.group_size}"
        )
    copies = channels // layer.group_size
    kernels = np.repeat(layer.kernels[None], copies, axis=0)
    bias = None if layer.bias is None else np.repeat(layer.bias[None], copies, axis=0)
    return SharedGroupedConv(kernels, layer.group_size, bias, layer.padding)


def init_bank(rng, out_channels, group_size, kh, kw, bias=False, std=0.02, dtype=np.float64):
    """Truncated-normal kernels (cut at two standard deviations), zero bias."""
    k = truncnorm.rvs(-2.0, 2.0, scale=std, size=(out_channels, group_size, kh, kw),
                      random_state=rng).astype(dtype)
    return k, (np.zeros(out_channels, dtype=dtype) if bias else None)
