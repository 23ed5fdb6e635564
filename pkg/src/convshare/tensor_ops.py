"""Dense tensor arithmetic on numpy arrays.

Every function accepts arbitrary leading batch axes in front of the
documented trailing shape, so a single call can evaluate a whole batch of
images or heads.  All functions are pure: inputs are never modified.

Convolution follows the deep-learning correlation convention (no kernel
flip)::

    Y[k, p, q] = sum_c sum_i sum_j X[c, p + i, q + j] * W[k, c, i, j]
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError

VALID = "valid"
SAME = "same"
PADDING_MODES = (VALID, SAME)

_GELU_C = math.sqrt(2.0 / math.pi)


def same_padding(kernel_extent):
    """(leading, trailing) zero padding that keeps the spatial extent.

    Odd totals put the extra zero on the trailing side.
    """
    total = kernel_extent - 1
    lead = total // 2
    return lead, total - lead


def _check_padding(padding):
    if padding not in PADDING_MODES:
        raise ConfigurationError(f"unknown padding mode {padding!r}")


def _pad_spatial(x, kh, kw, padding):
    if padding == VALID:
        return x
    ph, pw = same_padding(kh), same_padding(kw)
    widths = [(0, 0)] * (x.ndim - 2) + [ph, pw]
    return np.pad(x, widths)


def _reduce_to_shape(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _conv_geometry(x, kernels, padding, groups):
    _check_padding(padding)
    if x.ndim < 3:
        raise DimensionError(f"conv2d input needs [C, H, W], got shape {x.shape}")
    if kernels.ndim < 4:
        raise DimensionError(
            f"conv2d kernels need [C_out, C_in/groups, Kh, Kw], got shape {kernels.shape}"
        )
    if groups < 1:
        raise ConfigurationError(f"groups must be positive, got {groups}")
    c_in, h, w = x.shape[-3:]
    c_out, c_group, kh, kw = kernels.shape[-4:]
    if c_in % groups or c_out % groups:
        raise ConfigurationError(
            f"groups={groups} must divide C_in={c_in} and C_out={c_out}"
        )
    if c_group != c_in // groups:
        raise DimensionError(
            f"kernel depth {c_group} does not match C_in/groups = {c_in // groups}"
        )
    if padding == VALID:
        hp, wp = h, w
    else:
        hp, wp = h + kh - 1, w + kw - 1
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    return c_in, c_out, kh, kw, hp - kh + 1, wp - kw + 1


def _im2col(xp, groups, kh, kw):
    """[..., C, Hp, Wp] -> [..., G, P*Q, (C/G)*Kh*Kw]."""
    lead = xp.shape[:-3]
    c = xp.shape[-3]
    if xp.shape[-2:] == (kh, kw):
        return xp.reshape(*lead, groups, 1, -1)
    if kh == kw == 1:
        return np.swapaxes(xp.reshape(*lead, groups, c // groups, -1), -1, -2)
    win = sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    p, q = win.shape[-4], win.shape[-3]
    win = win.reshape(*lead, groups, c // groups, p, q, kh, kw)
    nl = len(lead)
    order = tuple(range(nl)) + (nl, nl + 2, nl + 3, nl + 1, nl + 4, nl + 5)
    return win.transpose(order).reshape(*lead, groups, p * q, (c // groups) * kh * kw)


def conv2d(x, kernels, padding=VALID, groups=1):
    """Grouped 2D convolution (correlation form).

    Parameters
    ----------
    x : array [..., C_in, H, W]
    kernels : array [..., C_out, C_in/groups, Kh, Kw]
        Leading axes broadcast against those of ``x``.
    padding : "valid" or "same"
    groups : int
        Output channel ``k`` only sees the input channels of group
        ``k // (C_out/groups)``.
    """
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    _, c_out, kh, kw, p, q = _conv_geometry(x, kernels, padding, groups)
    cols = _im2col(_pad_spatial(x, kh, kw, padding), groups, kh, kw)
    klead = kernels.shape[:-4]
    kmat = kernels.reshape(*klead, groups, c_out // groups, -1)
    out = cols @ np.swapaxes(kmat, -1, -2)  # [..., G, PQ, Kg]
    out = np.swapaxes(out, -1, -2)
    return out.reshape(*out.shape[:-3], c_out, p, q)


def conv2d_backward(x, kernels, dout, padding=VALID, groups=1):
    """Adjoint of :func:`conv2d`; returns ``(dx, dkernels)``."""
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    c_in, c_out, kh, kw, p, q = _conv_geometry(x, kernels, padding, groups)
    xp = _pad_spatial(x, kh, kw, padding)
    cols = _im2col(xp, groups, kh, kw)
    klead = kernels.shape[:-4]
    kmat = kernels.reshape(*klead, groups, c_out // groups, -1)
    dlead = dout.shape[:-3]
    dmat = np.swapaxes(dout.reshape(*dlead, groups, c_out // groups, p * q), -1, -2)

    dk = np.swapaxes(dmat, -1, -2) @ cols  # [..., G, Kg, CKK]
    dk = _reduce_to_shape(dk, kmat.shape).reshape(kernels.shape)

    cg = c_in // groups
    dcols = (dmat @ kmat).reshape(*dlead, groups, p, q, cg, kh, kw)
    dxp = np.zeros(dlead + (groups, cg) + xp.shape[-2:], dtype=dcols.dtype)
    nl = len(dlead)
    if kh * kw <= p * q:
        order = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 2, nl + 4, nl + 5)
        dc = dcols.transpose(order)  # [..., G, Cg, P, Q, Kh, Kw]
        for i in range(kh):
            for j in range(kw):
                dxp[..., i:i + p, j:j + q] += dc[..., i, j]
    else:
        for a in range(p):
            for b in range(q):
                dxp[..., a:a + kh, b:b + kw] += dcols[..., a, b, :, :, :]
    dxp = dxp.reshape(*dlead, c_in, *xp.shape[-2:])
    if padding == SAME:
        (t, _), (l, _) = same_padding(kh), same_padding(kw)
        dxp = dxp[..., t:t + x.shape[-2], l:l + x.shape[-1]]
    return _reduce_to_shape(dxp, x.shape), dk


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    x = np.asarray(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y, dy, axis=-1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def layer_norm(x, gain, offset, eps=1e-6):
    """Normalize every [H, W] token slice of ``x`` to zero mean, unit variance."""
    y, _ = layer_norm_cached(x, gain, offset, eps)
    return y


def layer_norm_cached(x, gain, offset, eps=1e-6):
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    x = np.asarray(x)
    if x.shape[-2:] != np.shape(gain) or x.shape[-2:] != np.shape(offset):
        raise DimensionError(
            f"gain/offset {np.shape(gain)} do not match token shape {x.shape[-2:]}"
        )
    mu = x.mean(axis=(-2, -1), keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(-2, -1), keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + offset, (xhat, inv, gain)


def layer_norm_backward(cache, dy):
    """Returns ``(dx, dgain, doffset)``; parameter grads summed over tokens."""
    xhat, inv, gain = cache
    red = tuple(range(dy.ndim - 2))
    dgain = (dy * xhat).sum(axis=red)
    doffset = dy.sum(axis=red)
    dxhat = dy * gain
    n = xhat.shape[-2] * xhat.shape[-1]
    dx = inv / n * (
        n * dxhat
        - dxhat.sum(axis=(-2, -1), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(-2, -1), keepdims=True)
    )
    return dx, dgain, doffset


def gelu(x):
    """GELU, tanh approximation."""
    x = np.asarray(x)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_backward(x, dy):
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def reshape(x, new_shape):
    x = np.asarray(x)
    new_shape = tuple(new_shape)
    if math.prod(new_shape) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} ({x.size} elements) to {new_shape}")
    return x.reshape(new_shape)


def permute(x, axis_order):
    x = np.asarray(x)
    axis_order = tuple(axis_order)
    if sorted(axis_order) != list(range(x.ndim)):
        raise DimensionError(f"{axis_order} is not a permutation of {x.ndim} axes")
    return x.transpose(axis_order)
