"""Model inference with every convolutional stage executed on a simulated 4f device.

Two engines compute the same optical passes:

``canvas``
    Builds every tiled canvas literally and runs :func:`optical_pass` on it.
    Faithful but slow, meant for small models and cross-checks.
``spectral``
    Uses the tile isolation that the canvas layout guarantees: each valid
    output pixel depends only on its own input cell and kernel cell, so it is
    evaluated as the inverse DFT of the cell-sized spectral product at that
    pixel alone.  The arithmetic is the same Fourier-plane product, reduced
    to the pixels the camera would keep.

Both engines count optical passes with the layout rules of
:mod:`convshare.optics.tiling`; for a feasible model the count per image
equals :func:`convshare.optics.planner.plan_inferences` ``.total``.
"""

import math

import numpy as np

from .. import tensor_ops
from ..errors import ConfigurationError
from ..model import LN_EPS
from ..linear import shared_forward
from .fourier import capacity, flip
from .planner import block_counts
from .tiling import kernel_passes, kernel_tiling, mixed_passes, mixed_tiling

ENGINES = ("spectral", "canvas")


def _spectrum(x, cell):
    """2D DFT of ``x [..., H, W]`` zero padded to ``cell x cell``, flattened."""
    return np.fft.fft2(x, (cell, cell)).reshape(*x.shape[:-2], cell * cell)


def _readout(cell, row, col):
    """Inverse-DFT weights of output pixel ``(row, col)`` of a ``cell``-sized plane."""
    u = np.arange(cell)
    ph = np.exp(2j * np.pi * (np.add.outer(u * row, u * col) % cell) / cell)
    return ph.reshape(-1) / (cell * cell)


class _Spectral:
    """Valid-pixel readout of mixed/kernel tiling for full-extent kernels."""

    def __init__(self, h):
        self.cell = 2 * h - 1
        # a full-extent valid correlation keeps a single pixel at (h-1, h-1)
        self.w = _readout(self.cell, h - 1, h - 1)
        self._banks = {}

    def bank(self, key, kernels):
        """Pre-multiplied kernel spectra ``[..., F]`` for a fixed bank."""
        if key not in self._banks:
            self._banks[key] = _spectrum(flip(kernels), self.cell) * self.w
        return self._banks[key]

    def inputs(self, x):
        return _spectrum(x, self.cell)


class OpticalSimulator:
    """Runs a :class:`~convshare.model.ConvShareViT` with optical convolutions."""

    def __init__(self, model, device, engine="spectral"):
        if engine not in ENGINES:
            raise ConfigurationError(f"engine must be one of {ENGINES}")
        self.model = model
        self.config = model.config
        self.device = device
        self.engine = engine
        self.counts, self.cap = block_counts(self.config, device)
        self.h = self.config.embed_h
        self.inferences = 0
        self.stage_inferences = {s: 0 for s in self.counts}
        self._spec = _Spectral(self.h)

    def _tick(self, stage, n):
        self.inferences += n
        self.stage_inferences[stage] += n

    # stages -------------------------------------------------------------
    def _qkv(self, i, x):
        t, h = x.shape[-3], self.h
        m = h * h
        banks = [self.model.params[f"blocks.{i}.attn.{p}.kernels"] for p in "qkv"]
        biases = [self.model.params.get(f"blocks.{i}.attn.{p}.bias") for p in "qkv"]
        bank = np.concatenate(banks)[:, 0]  # [3M, H, W]
        self._tick("qkv", mixed_passes(t, 3 * t * m, self.cap, "qkv"))
        if self.engine == "spectral":
            ks = self._spec.bank(("qkv", i), bank)
            out = (self._spec.inputs(x) @ ks.T).real  # [T, 3M]
        else:
            kern = np.zeros((t, 3 * m, t, h, h))
            kern[np.arange(t), :, np.arange(t)] = bank
            rows, _ = mixed_tiling(x, kern.reshape(t * 3 * m, t, h, h), self.device,
                                   depthwise=True, designated=np.repeat(np.arange(t), 3 * m),
                                   mode="valid")
            out = rows.reshape(t, 3 * m)
        res = []
        for j, b in enumerate(biases):
            o = out[:, j * m:(j + 1) * m]
            if b is not None:
                o = o + b
            res.append(o.reshape(t, h, h))
        return res

    def _scores(self, q, k):
        t, h = q.shape[0], self.h
        self._tick("scores", mixed_passes(t, t * t, self.cap, "scores"))
        if self.engine == "spectral":
            qs = self._spec.inputs(flip(q)) * self._spec.w
            s = (qs @ self._spec.inputs(k).T).real  # [query, key]
        else:
            kern = np.zeros((t, t, t, h, h))
            kern[:, np.arange(t), np.arange(t)] = q[:, None]
            rows, _ = mixed_tiling(k, kern.reshape(t * t, t, h, h), self.device,
                                   depthwise=True, designated=np.tile(np.arange(t), t),
                                   mode="valid")
            s = rows.reshape(t, t)
        return s / math.sqrt(h * h)

    def _weighted(self, a, v):
        t = v.shape[0]
        self._tick("weighted_sum", mixed_passes(t, t, capacity(self.device.resolution, self.h, 1),
                                                "weighted_sum"))
        if self.engine == "spectral":
            # 1x1 kernels have flat spectra, so the Fourier plane holds A @ V
            vs = np.fft.fft2(v)
            return np.fft.ifft2(np.einsum("ij,juv->iuv", a, vs)).real
        out, _ = mixed_tiling(v, a[:, :, None, None], self.device, mode="valid")
        return out

    def _mlp(self, i, x):
        t, h = x.shape[-3], self.h
        r = self.config.mlp_ratio
        m = h * h
        pre = f"blocks.{i}.mlp"
        wexp = self.model.params[pre + ".expand.kernels"][:, 0]  # [rM, H, W]
        wred = self.model.params[pre + ".reduce.kernels"]  # [M, r, H, W]
        bexp = self.model.params.get(pre + ".expand.bias")
        bred = self.model.params.get(pre + ".reduce.bias")
        self._tick("mlp", t * kernel_passes(r * m, self.cap))
        if self.engine == "spectral":
            hidden = (self._spec.inputs(x) @ self._spec.bank(("exp", i), wexp).T).real
        else:
            hidden = np.stack([kernel_tiling(x[j], wexp, self.device, "valid")[0].reshape(-1)
                               for j in range(t)])
        if bexp is not None:
            hidden = hidden + bexp
        act = tensor_ops.gelu(hidden.reshape(t, r, h, h))
        self._tick("mlp", t * r * kernel_passes(m, self.cap))
        if self.engine == "spectral":
            ks = self._spec.bank(("red", i), np.swapaxes(wred, 0, 1))  # [r, M, F]
            out = np.einsum("tcf,cmf->tm", self._spec.inputs(act), ks).real
        else:
            out = np.zeros((t, m))
            for j in range(t):
                for c in range(r):
                    o, _ = kernel_tiling(act[j, c], wred[:, c], self.device, "valid")
                    out[j] += o.reshape(-1)  # channel sum done electronically
        if bred is not None:
            out = out + bred
        return out.reshape(t, h, h)

    # model --------------------------------------------------------------
    def _block(self, i, x):
        n1 = tensor_ops.layer_norm(x, *self.model.norm(f"blocks.{i}.norm1"), LN_EPS)
        q, k, v = self._qkv(i, n1)
        a = tensor_ops.softmax(self._scores(q, k), axis=-1)
        x = x + self._weighted(a, v)
        n2 = tensor_ops.layer_norm(x, *self.model.norm(f"blocks.{i}.norm2"), LN_EPS)
        return x + self._mlp(i, n2)

    def forward_one(self, image):
        x = self.model.embed(np.asarray(image, dtype=np.float64)[None])[0]
        for i in range(self.config.depth):
            x = self._block(i, x)
        nf = tensor_ops.layer_norm(x, *self.model.norm("norm"), LN_EPS)
        return shared_forward(self.model.head, nf[0:1], (self.config.num_classes,))

    def forward(self, images):
        """Logits ``[N, classes]`` for ``images [N, C, S, S]``."""
        return np.stack([self.forward_one(img) for img in np.asarray(images)])


def logit_deviation(optical, electronic):
    """Per input ``max|o - e| / max|e|``."""
    optical, electronic = np.atleast_2d(optical), np.atleast_2d(electronic)
    scale = np.maximum(np.abs(electronic).max(axis=-1), np.finfo(np.float64).tiny)
    return np.abs(optical - electronic).max(axis=-1) / scale


def compare(model, images, device, engine="spectral"):
    """Optical vs electronic logits on ``images``; returns a report dict."""
    sim = OpticalSimulator(model, device, engine)
    opt = sim.forward(images)
    ele = model.forward(np.asarray(images, dtype=model.dtype)).astype(np.float64)
    dev = logit_deviation(opt, ele)
    per_image = sim.inferences // len(images)
    return {
        "engine": engine,
        "images": len(images),
        "max_relative_deviation": float(dev.max()),
        "argmax_identical": bool(np.array_equal(opt.argmax(-1), ele.argmax(-1))),
        "argmax_mismatches": int(np.sum(opt.argmax(-1) != ele.argmax(-1))),
        "inferences_per_image": per_image,
        "plan_total": sim.config.depth * sum(sim.counts.values()),
        "stage_inferences_per_image": {k: v // len(images) for k, v in sim.stage_inferences.items()},
        "optical_logits": opt,
        "electronic_logits": ele,
    }

