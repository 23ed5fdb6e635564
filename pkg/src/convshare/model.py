"""ConvShareViT assembly.

Image -> transpose-convolution tokens -> class token -> positional
encoding -> encoder blocks (pre-norm attention and MLP with residuals)
-> final norm -> class-token readout through a full-extent valid
convolution.

Parameters live in a flat ``dict`` keyed by stable dotted names
(``blocks.0.attn.q.kernels`` ...); layer objects are thin views over those
arrays, so optimizers can update the dict in place.
"""

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.stats import truncnorm

from . import tensor_ops
from .attention import ConvAttentionLayer, conv_mhsa_backward, conv_mhsa_cached, head_shape
from .errors import ConfigurationError, DimensionError, StateError
from .linear import SharedGroupedConv, init_bank, shared_backward, shared_forward
from .tensor_ops import SAME, VALID

LN_EPS = 1e-6
POS_KINDS = ("trainable", "sinusoidal")


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    embed_h: int = 16
    embed_w: int = 16
    heads: int = 16
    depth: int = 9
    mlp_ratio: int = 2
    pos_encoding: str = "trainable"
    num_classes: int = 100
    weight_sharing: bool = True
    qkv_padding: str = VALID
    bias: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("image_size", "patch_size", "in_channels", "embed_h", "embed_w",
                     "heads", "depth", "mlp_ratio", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.pos_encoding not in POS_KINDS:
            raise ConfigurationError(f"pos_encoding must be one of {POS_KINDS}")
        if self.qkv_padding not in tensor_ops.PADDING_MODES:
            raise ConfigurationError(f"qkv_padding must be one of {tensor_ops.PADDING_MODES}")
        head_shape(self.embed_shape, self.heads)
        self.tokenizer_geometry  # noqa: B018  (raises on impossible fits)

    @property
    def embed_shape(self):
        return (self.embed_h, self.embed_w)

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def tokens(self):
        """Token count including the class token."""
        return self.grid**2 + 1

    @property
    def tokenizer_geometry(self):
        """(stride, kernel) per axis with ``(P-1)*stride + kernel == embed extent``.

        The largest stride that still lets neighbouring kernel footprints
        touch (kernel >= stride) is used: 16 -> (4, 4), 13 -> (3, 4), 8 -> (2, 2)
        for a 4x4 patch.
        """
        p = self.patch_size
        geo = []
        for e in self.embed_shape:
            if p == 1:
                geo.append((1, e))
                continue
            s = e // p
            if s < 1:
                raise ConfigurationError(f"embedding extent {e} smaller than patch size {p}")
            geo.append((s, e - (p - 1) * s))
        return tuple(geo)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class ConvMlp:
    expand: SharedGroupedConv
    reduce: SharedGroupedConv
    ratio: int


def mlp_cached(mlp, x):
    t, hh, ww = x.shape[-3:]
    hidden = shared_forward(mlp.expand, x, (t * mlp.ratio, hh, ww))
    act = tensor_ops.gelu(hidden)
    out = shared_forward(mlp.reduce, act, (t, hh, ww))
    return out, (x, hidden, act)


def mlp_forward(mlp, x):
    return mlp_cached(mlp, x)[0]


def mlp_backward(mlp, cache, dout):
    x, hidden, act = cache
    dact, dk2, db2 = shared_backward(mlp.reduce, act, dout)
    dhidden = tensor_ops.gelu_backward(hidden, dact)
    dx, dk1, db1 = shared_backward(mlp.expand, x, dhidden)
    return dx, {"expand": (dk1, db1), "reduce": (dk2, db2)}


def sinusoidal_table(tokens, token_shape):
    """Fixed sin/cos encoding over the flattened feature index."""
    dim = token_shape[0] * token_shape[1]
    pos = np.arange(tokens, dtype=np.float64)[:, None]
    i = np.arange(dim)
    freq = np.power(10000.0, -(2 * (i // 2)) / dim)
    angle = pos * freq
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.reshape(tokens, *token_shape)


def add_positional(x, table):
    if np.shape(table) != x.shape[-3:]:
        raise DimensionError(f"positional table {np.shape(table)} does not match {x.shape[-3:]}")
    return x + table


def _patches(images, patch):
    """``[..., C, S, S] -> [..., N, C, P, P]`` with patches in row-major order."""
    lead = images.shape[:-3]
    c, s, _ = images.shape[-3:]
    g = s // patch
    x = images.reshape(*lead, c, g, patch, g, patch)
    n = len(lead)
    x = x.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return x.reshape(*lead, g * g, c, patch, patch)


def tokenize(images, kernels, bias, config):
    """Map every ``P x P`` patch to an ``H x W`` token by one transpose convolution.

    ``kernels`` has shape ``[C, kh, kw]``; ``bias`` is a length-1 array or None.
    """
    images = np.asarray(images)
    c, s, s2 = images.shape[-3:]
    if s != s2 or s != config.image_size or c != config.in_channels:
        raise DimensionError(
            f"image {images.shape[-3:]} does not match config "
            f"({config.in_channels}, {config.image_size}, {config.image_size})"
        )
    p = config.patch_size
    (sh, kh), (sw, kw) = config.tokenizer_geometry
    patches = _patches(images, p)
    out = np.zeros(patches.shape[:-3] + config.embed_shape, dtype=np.result_type(images, kernels))
    for i in range(p):
        for j in range(p):
            out[..., i * sh:i * sh + kh, j * sw:j * sw + kw] += np.einsum(
                "...c,ckl->...kl", patches[..., i, j], kernels
            )
    if bias is not None:
        out += bias[0]
    return out, patches


def tokenize_backward(patches, dout, config, has_bias):
    p = config.patch_size
    (sh, kh), (sw, kw) = config.tokenizer_geometry
    lead = tuple(range(dout.ndim - 2))
    dk = np.zeros((config.in_channels, kh, kw), dtype=dout.dtype)
    for i in range(p):
        for j in range(p):
            win = dout[..., i * sh:i * sh + kh, j * sw:j * sw + kw]
            dk += np.tensordot(patches[..., i, j], win, axes=(lead, lead))
    db = np.array([dout.sum()]) if has_bias else None
    return dk, db


def encoder_block(x, attn, mlp, norm1, norm2):
    """Pre-norm residual block; ``norm1``/``norm2`` are ``(gain, offset)`` pairs."""
    x = x + conv_mhsa_cached(attn, tensor_ops.layer_norm(x, *norm1, LN_EPS))[0]
    return x + mlp_forward(mlp, tensor_ops.layer_norm(x, *norm2, LN_EPS))


def _tn(rng, shape, dtype):
    return truncnorm.rvs(-2.0, 2.0, scale=0.02, size=shape, random_state=rng).astype(dtype)


def init_params(config, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    hh, ww = config.embed_shape
    (_, kh), (_, kw) = config.tokenizer_geometry
    t = config.tokens
    r = config.mlp_ratio
    p = {"tokenizer.kernels": _tn(rng, (config.in_channels, kh, kw), dtype)}
    if config.bias:
        p["tokenizer.bias"] = np.zeros(1, dtype=dtype)
    p["cls_token"] = _tn(rng, (hh, ww), dtype)
    if config.pos_encoding == "trainable":
        p["pos_embed"] = _tn(rng, (t, hh, ww), dtype)

    h, w = head_shape(config.embed_shape, config.heads)
    m_qkv = h * w if config.qkv_padding == VALID else 1

    def put(prefix, m, g, kh_, kw_, copies=None):
        k, b = init_bank(rng, m, g, kh_, kw_, config.bias, dtype=dtype)
        if copies is not None:
            k = np.repeat(k[None], copies, axis=0)
            b = None if b is None else np.repeat(b[None], copies, axis=0)
        p[prefix + ".kernels"] = k
        if b is not None:
            p[prefix + ".bias"] = b

    copies = None if config.weight_sharing else t
    for i in range(config.depth):
        pre = f"blocks.{i}"
        for n in ("norm1", "norm2"):
            p[f"{pre}.{n}.gain"] = np.ones((hh, ww), dtype=dtype)
            p[f"{pre}.{n}.offset"] = np.zeros((hh, ww), dtype=dtype)
        for n in "qkv":
            put(f"{pre}.attn.{n}", m_qkv, 1, h, w, copies)
        put(f"{pre}.mlp.expand", r * hh * ww, 1, hh, ww, copies)
        put(f"{pre}.mlp.reduce", hh * ww, r, hh, ww, copies)
    p["norm.gain"] = np.ones((hh, ww), dtype=dtype)
    p["norm.offset"] = np.zeros((hh, ww), dtype=dtype)
    p["head.kernels"] = _tn(rng, (config.num_classes, 1, hh, ww), dtype)
    p["head.bias"] = np.zeros(config.num_classes, dtype=dtype)
    return p


class ConvShareViT:
    """Model state: a config plus the named parameter arrays."""

    def __init__(self, config, params=None, seed=0, dtype=np.float64):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = init_params(config, seed, self.dtype) if params is None else params
        self._pos_table = None
        if config.pos_encoding == "sinusoidal":
            self._pos_table = sinusoidal_table(config.tokens, config.embed_shape).astype(self.dtype)

    # views --------------------------------------------------------------
    def _bank(self, prefix, g, padding=VALID):
        return SharedGroupedConv(
            self.params[prefix + ".kernels"], g, self.params.get(prefix + ".bias"), padding
        )

    def attention_layer(self, i):
        pre = f"blocks.{i}.attn"
        pad = self.config.qkv_padding
        return ConvAttentionLayer(
            self._bank(pre + ".q", 1, pad), self._bank(pre + ".k", 1, pad),
            self._bank(pre + ".v", 1, pad), heads=self.config.heads,
            token_shape=self.config.embed_shape,
        )

    def mlp(self, i):
        pre = f"blocks.{i}.mlp"
        return ConvMlp(self._bank(pre + ".expand", 1),
                       self._bank(pre + ".reduce", self.config.mlp_ratio),
                       self.config.mlp_ratio)

    def norm(self, name):
        return self.params[name + ".gain"], self.params[name + ".offset"]

    @property
    def head(self):
        return self._bank("head", 1)

    @property
    def positional_table(self):
        if self._pos_table is not None:
            return self._pos_table
        return self.params["pos_embed"]

    def parameter_count(self):
        return int(sum(a.size for a in self.params.values()))

    # forward ------------------------------------------------------------
    def embed(self, images):
        """Tokens with class token and positional encoding, ``[..., T, H, W]``."""
        tokens, _ = tokenize(images, self.params["tokenizer.kernels"],
                             self.params.get("tokenizer.bias"), self.config)
        cls = np.broadcast_to(self.params["cls_token"], tokens.shape[:-3] + (1,) + tokens.shape[-2:])
        return add_positional(np.concatenate([cls, tokens], axis=-3), self.positional_table)

    def forward_cached(self, images):
        images = np.asarray(images, dtype=self.dtype)
        cache = {"images_shape": images.shape}
        tokens, patches = tokenize(images, self.params["tokenizer.kernels"],
                                   self.params.get("tokenizer.bias"), self.config)
        cache["patches"] = patches
        cls = np.broadcast_to(self.params["cls_token"], tokens.shape[:-3] + (1,) + tokens.shape[-2:])
        x = add_positional(np.concatenate([cls, tokens], axis=-3), self.positional_table)
        blocks = []
        for i in range(self.config.depth):
            attn, mlp = self.attention_layer(i), self.mlp(i)
            n1, c1 = tensor_ops.layer_norm_cached(x, *self.norm(f"blocks.{i}.norm1"), LN_EPS)
            a, ca = conv_mhsa_cached(attn, n1)
            x = x + a
            n2, c2 = tensor_ops.layer_norm_cached(x, *self.norm(f"blocks.{i}.norm2"), LN_EPS)
            m, cm = mlp_cached(mlp, n2)
            x = x + m
            blocks.append((c1, ca, c2, cm))
        cache["blocks"] = blocks
        nf, cf = tensor_ops.layer_norm_cached(x, *self.norm("norm"), LN_EPS)
        cache["norm"] = cf
        cls_out = nf[..., 0:1, :, :]
        cache["cls_out"] = cls_out
        logits = shared_forward(self.head, cls_out, (self.config.num_classes,))
        return logits, cache

    def logits_from(self, x, start_block):
        """Finish a forward pass from the activations entering ``start_block``.

        ``start_block == depth`` runs only the final norm and classifier.
        """
        for i in range(start_block, self.config.depth):
            x = encoder_block(x, self.attention_layer(i), self.mlp(i),
                              self.norm(f"blocks.{i}.norm1"), self.norm(f"blocks.{i}.norm2"))
        nf = tensor_ops.layer_norm(x, *self.norm("norm"), LN_EPS)
        return shared_forward(self.head, nf[..., 0:1, :, :], (self.config.num_classes,))

    def block_inputs(self, images):
        """Activations entering every block, plus the final block output."""
        x = self.embed(np.asarray(images, dtype=self.dtype))
        acts = [x]
        for i in range(self.config.depth):
            x = encoder_block(x, self.attention_layer(i), self.mlp(i),
                              self.norm(f"blocks.{i}.norm1"), self.norm(f"blocks.{i}.norm2"))
            acts.append(x)
        return acts

    def forward(self, images, trace=False):
        """Logits ``[..., num_classes]``; with ``trace`` also the per-layer scores."""
        logits, cache = self.forward_cached(images)
        if not trace:
            return logits
        return logits, [blk[1][4] for blk in cache["blocks"]]

    def backward(self, cache, dlogits):
        """Gradients of ``sum(logits * dlogits)`` for every parameter."""
        if not cache or "blocks" not in cache:
            raise StateError("backward needs the cache from forward_cached")
        cfg = self.config
        grads = {}

        def put(prefix, dk, db):
            grads[prefix + ".kernels"] = dk
            if db is not None:
                grads[prefix + ".bias"] = db

        dcls, dk, db = shared_backward(self.head, cache["cls_out"], dlogits)
        put("head", dk, db)
        dnf = np.zeros(dcls.shape[:-3] + (cfg.tokens,) + cfg.embed_shape, dtype=dcls.dtype)
        dnf[..., 0:1, :, :] = dcls
        dx, grads["norm.gain"], grads["norm.offset"] = tensor_ops.layer_norm_backward(
            cache["norm"], dnf)
        for i in reversed(range(cfg.depth)):
            c1, ca, c2, cm = cache["blocks"][i]
            pre = f"blocks.{i}"
            dn2, gm = mlp_backward(self.mlp(i), cm, dx)
            put(pre + ".mlp.expand", *gm["expand"])
            put(pre + ".mlp.reduce", *gm["reduce"])
            d, grads[pre + ".norm2.gain"], grads[pre + ".norm2.offset"] = \
                tensor_ops.layer_norm_backward(c2, dn2)
            dx = dx + d
            dn1, ga = conv_mhsa_backward(self.attention_layer(i), ca, dx)
            for n in "qkv":
                put(f"{pre}.attn.{n}", *ga[n])
            d, grads[pre + ".norm1.gain"], grads[pre + ".norm1.offset"] = \
                tensor_ops.layer_norm_backward(c1, dn1)
            dx = dx + d
        lead = tuple(range(dx.ndim - 3))
        if "pos_embed" in self.params:
            grads["pos_embed"] = dx.sum(axis=lead)
        grads["cls_token"] = dx[..., 0, :, :].sum(axis=lead)
        dk, db = tokenize_backward(cache["patches"], dx[..., 1:, :, :], cfg,
                                   "tokenizer.bias" in self.params)
        put("tokenizer", dk, db)
        return grads


def attention_heatmaps(trace, config, layer=None):
    """Class-token attention projected back onto the image.

    ``trace`` is the per-layer list of ``[heads, T, T]`` scores of one image.
    Returns one ``[S, S]`` map in ``[0, 1]`` per layer (or just ``layer``).
    """
    if not trace:
        raise StateError("no attention trace was collected")
    layers = range(len(trace)) if layer is None else [layer]
    p, g = config.patch_size, config.grid
    maps = []
    for i in layers:
        scores = np.asarray(trace[i])
        if scores.ndim != 3:
            raise DimensionError(f"trace layer {i} must be [heads, T, T], got {scores.shape}")
        row = scores[:, 0, 1:].mean(axis=0).reshape(g, g)
        up = np.kron(row, np.ones((p, p)))
        lo, hi = up.min(), up.max()
        maps.append((up - lo) / (hi - lo) if hi > lo else np.zeros_like(up))
    return maps if layer is None else maps[0]
