"""Multi-head self-attention built only from convolutions.

Tokens stay two-dimensional.  Heads are formed by cutting every ``H x W``
token into a ``sqrt(heads) x sqrt(heads)`` grid of ``h x w`` sub-patches;
head ``k`` sees sub-patch ``k`` of every token and its output is written
back to the same location.  Inside a head:

* Q, K and V come from shared depthwise convolutions with full-extent
  kernels (see :mod:`convshare.linear`).
* Scores are valid convolutions of every query with every key.
* The weighted sum is a pointwise convolution whose kernel bank is the
  softmaxed score matrix.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_ops
from .errors import ConfigurationError, DimensionError
from .linear import SharedGroupedConv, shared_backward, shared_forward
from .tensor_ops import VALID


def head_grid(heads):
    r = math.isqrt(heads)
    if heads < 1 or r * r != heads:
        raise ConfigurationError(f"heads must be a perfect square, got {heads}")
    return r


def head_shape(token_shape, heads):
    r = head_grid(heads)
    hh, ww = token_shape
    if hh % r or ww % r:
        raise ConfigurationError(f"{hh}x{ww} token cannot be cut into {r}x{r} head patches")
    return hh // r, ww // r


@dataclass
class ConvAttentionLayer:
    wq: SharedGroupedConv
    wk: SharedGroupedConv
    wv: SharedGroupedConv
    heads: int
    token_shape: tuple

    def __post_init__(self):
        self.token_shape = tuple(self.token_shape)
        h, w = self.head_shape
        for name, proj in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv)):
            if proj.group_size != 1:
                raise ConfigurationError(f"{name} must have group size 1")
            if tuple(proj.kernel_shape) != (h, w):
                raise ConfigurationError(
                    f"{name} kernels {tuple(proj.kernel_shape)} do not match head patch {(h, w)}"
                )
            expected = h * w if proj.padding == VALID else 1
            if proj.out_channels != expected:
                raise ConfigurationError(
                    f"{name} has {proj.out_channels} outputs, expected {expected}"
                )

    @property
    def head_shape(self):
        return head_shape(self.token_shape, self.heads)

    @property
    def scale(self):
        """The divisor ``d``; scores are divided by ``sqrt(d)``."""
        h, w = self.head_shape
        return h * w


def split_heads(x, heads):
    """``[..., T, H, W] -> [..., heads, T, h, w]`` (heads in row-major grid order)."""
    x = np.asarray(x)
    r = head_grid(heads)
    h, w = head_shape(x.shape[-2:], heads)
    lead, t = x.shape[:-3], x.shape[-3]
    y = x.reshape(*lead, t, r, h, r, w)
    n = len(lead)
    y = y.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return y.reshape(*lead, heads, t, h, w)


def merge_heads(x):
    """Inverse of :func:`split_heads`."""
    heads, t, h, w = x.shape[-4:]
    r = head_grid(heads)
    lead = x.shape[:-4]
    n = len(lead)
    y = x.reshape(*lead, r, r, t, h, w)
    y = y.transpose(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return y.reshape(*lead, t, r * h, r * w)


def attention_scores(q, k, d):
    """Scaled all-to-all valid convolution: ``S[..., i, j] = <Q_i, K_j> / sqrt(d)``."""
    q, k = np.asarray(q), np.asarray(k)
    if q.shape != k.shape:
        raise DimensionError(f"Q {q.shape} and K {k.shape} differ")
    # keys act as single-channel images, queries as the kernel bank
    s = tensor_ops.conv2d(k[..., :, None, :, :], q[..., None, :, None, :, :], VALID)
    return np.swapaxes(s[..., 0, 0], -1, -2) / math.sqrt(d)


def weighted_values(a, v):
    """Pointwise convolution of the value tokens with ``A`` as kernel bank."""
    a, v = np.asarray(a), np.asarray(v)
    t = v.shape[-3]
    if a.shape[-2:] != (t, t):
        raise DimensionError(f"score matrix {a.shape[-2:]} does not match {t} value tokens")
    return tensor_ops.conv2d(v, a[..., None, None], VALID)


def _project(proj, xs):
    if proj.padding == VALID:
        return shared_forward(proj, xs, xs.shape[-3:])
    return shared_forward(proj, xs)


def conv_mhsa_cached(layer, x):
    """Forward pass that also returns the intermediates for the backward pass."""
    x = np.asarray(x)
    if tuple(x.shape[-2:]) != layer.token_shape:
        raise DimensionError(f"tokens {x.shape[-2:]} do not match layer {layer.token_shape}")
    xs = split_heads(x, layer.heads)
    q, k, v = (_project(p, xs) for p in (layer.wq, layer.wk, layer.wv))
    a = tensor_ops.softmax(attention_scores(q, k, layer.scale), axis=-1)
    out = merge_heads(weighted_values(a, v))
    return out, (xs, q, k, v, a)


def conv_mhsa_forward(layer, x, trace=False):
    """Attention over ``x [..., T, H, W]``.

    With ``trace=True`` also returns the post-softmax scores
    ``[..., heads, T, T]``.
    """
    out, (_, _, _, _, a) = conv_mhsa_cached(layer, x)
    return (out, a) if trace else out


def conv_mhsa_backward(layer, cache, dout):
    """Returns ``dx`` and the kernel/bias gradients of wq, wk, wv."""
    xs, q, k, v, a = cache
    do = split_heads(dout, layer.heads)
    da = np.einsum("...iuv,...juv->...ij", do, v)
    dv = np.einsum("...ij,...iuv->...juv", a, do)
    ds = tensor_ops.softmax_backward(a, da) / math.sqrt(layer.scale)
    dq = np.einsum("...ij,...juv->...iuv", ds, k)
    dk = np.einsum("...ij,...iuv->...juv", ds, q)
    dxs = np.zeros_like(xs)
    grads = {}
    for name, proj, dproj in (("q", layer.wq, dq), ("k", layer.wk, dk), ("v", layer.wv, dv)):
        dx_p, dker, db = shared_backward(proj, xs, dproj)
        dxs += dx_p
        grads[name] = (dker, db)
    return merge_heads(dxs), grads


def reference_mhsa(x, wq, wk, wv, heads):
    """Standard attention on flat tokens ``x [T, D]`` (heads slice the feature axis)."""
    x = np.asarray(x)
    t, dim = x.shape[-2:]
    if dim % heads:
        raise DimensionError(f"D={dim} not divisible by {heads} heads")
    for w in (wq, wk, wv):
        if w.shape != (dim, dim):
            raise DimensionError(f"projection {w.shape} is not {dim}x{dim}")
    dh = dim // heads

    def split(z):
        return np.swapaxes(z.reshape(*z.shape[:-1], heads, dh), -2, -3)

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    a = tensor_ops.softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(dh), axis=-1)
    o = np.swapaxes(a @ v, -2, -3)
    return o.reshape(*o.shape[:-2], dim)


def head_permutation(token_shape, heads):
    """Flat feature order that lines 2D head patches up with feature slices.

    ``x.reshape(T, H*W)[:, perm]`` puts head ``k``'s sub-patch (row-major)
    into features ``k*h*w ... (k+1)*h*w - 1``.
    """
    hh, ww = token_shape
    idx = np.arange(hh * ww).reshape(1, hh, ww)
    return split_heads(idx, heads)[:, 0].reshape(-1)


def flatten_tokens(x, heads):
    return x.reshape(*x.shape[:-2], -1)[..., head_permutation(x.shape[-2:], heads)]


def unflatten_tokens(x, token_shape, heads):
    perm = head_permutation(token_shape, heads)
    out = np.empty_like(x)
    out[..., perm] = x
    return out.reshape(*x.shape[:-1], *token_shape)


def reference_weights(layer):
    """Dense ``D x D`` projections equivalent to a shared valid conv layer."""
    h, w = layer.head_shape
    mats = []
    for proj in (layer.wq, layer.wk, layer.wv):
        if not proj.shared or proj.padding != VALID:
            raise ConfigurationError("only shared valid projections have a dense equivalent")
        if proj.bias is not None:
            raise ConfigurationError("projection biases have no place in the reference oracle")
        block = proj.kernels.reshape(h * w, h * w).T
        mats.append(np.kron(np.eye(layer.heads), block))
    return tuple(mats)


def transport_weights(wq, wk, wv, heads, token_shape):
    """Build the conv layer matching dense projections in head-permuted order.

    The dense weights must be block diagonal with one ``hw x hw`` block
    repeated for every head; anything else has no shared-kernel equivalent.
    """
    hh, ww = token_shape
    h, w = head_shape(token_shape, heads)
    n = h * w
    banks = []
    for name, mat in (("wq", wq), ("wk", wk), ("wv", wv)):
        mat = np.asarray(mat)
        if mat.shape != (hh * ww, hh * ww):
            raise ConfigurationError(f"{name} is {mat.shape}, expected D x D with D = {hh * ww}")
        block = mat[:n, :n]
        if not np.array_equal(mat, np.kron(np.eye(heads), block)):
            raise ConfigurationError(
                f"{name} is not head-block-diagonal with one shared block; "
                "no shared convolution reproduces it"
            )
        banks.append(SharedGroupedConv(block.T.reshape(n, 1, h, w).copy()))
    return ConvAttentionLayer(*banks, heads=heads, token_shape=(hh, ww))


def write_trace_csv(scores, path):
    """One layer's scores ``[heads, T, T]`` as ``heads*T`` rows of ``T`` values."""
    scores = np.asarray(scores)
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in scores.reshape(-1, scores.shape[-1]):
            writer.writerow([repr(float(v)) for v in row])
    return path


def read_trace_csv(path, heads):
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    return rows.reshape(heads, -1, rows.shape[-1])
