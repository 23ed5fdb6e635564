"""Randomized equivalence suites behind ``convshare verify``.

Each suite draws random instances, compares a fast path with a reference
computation and records the worst error.  Relative errors are
``max|a - b| / max|b|`` per instance.
"""

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .attention import (conv_mhsa_forward, flatten_tokens, reference_mhsa, transport_weights,
                        unflatten_tokens)
from .linear import SharedGroupedConv, linear_oracle, shared_forward, to_linear
from .model import ModelConfig
from .optics.planner import plan_inferences, reference_device
from .optics.fourier import capacity
from .optics.tiling import DeviceSpec, channel_tiling, kernel_tiling, mixed_tiling
from .tensor_ops import conv2d

SCHEMA_VERSION = 1

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "command", "passed", "suites"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "command": {"const": "verify"},
        "seed": {"type": "integer"},
        "passed": {"type": "boolean"},
        "failed": {"type": "array", "items": {"type": "string"}},
        "suites": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "property", "instances", "max_error", "threshold", "passed"],
                "properties": {
                    "name": {"type": "string"},
                    "property": {"type": "string"},
                    "instances": {"type": "integer", "minimum": 1},
                    "max_error": {"type": "number", "minimum": 0},
                    "threshold": {"type": "number", "exclusiveMinimum": 0},
                    "passed": {"type": "boolean"},
                    "seconds": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}


@dataclass
class SuiteResult:
    name: str
    property: str
    instances: int
    max_error: float
    threshold: float
    passed: bool
    seconds: float = 0.0


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), np.finfo(np.float64).tiny))


def _finish(name, prop, errors, threshold, t0):
    worst = float(max(errors))
    return SuiteResult(name, prop, len(errors), worst, threshold, worst < threshold,
                       time.perf_counter() - t0)


def linear_suite(rng, instances=100, fault=False):
    """Shared valid convolution vs the flatten-and-matmul form."""
    t0 = time.perf_counter()
    errors = []
    for n in range(instances):
        g = int(rng.choice([1, 2, 4]))
        t = g * int(rng.integers(1, 16 // g + 1))
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        m = int(rng.integers(1, 9))
        bias = rng.standard_normal(m) if rng.random() < 0.5 else None
        layer = SharedGroupedConv(rng.standard_normal((m, g, h, w)), g, bias)
        x = rng.standard_normal((t, h, w))
        weq = to_linear(layer)
        if fault and n == 0:
            layer.kernels = layer.kernels.copy()
            layer.kernels[0] *= 1.0 + 1e-6
        y = shared_forward(layer, x).reshape(t // g, m)
        errors.append(float(np.abs(y - linear_oracle(weq, x, g)).max()))
    return _finish("linear-equivalence", "shared_forward equals per-token matmul (abs)",
                   errors, 1e-12, t0)


def attention_suite(rng, heads_list=(1, 4, 16), instances=20):
    """Convolutional attention vs textbook multi-head attention on transported weights."""
    t0 = time.perf_counter()
    errors = []
    for heads in heads_list:
        r = math.isqrt(heads)
        for _ in range(instances):
            t = int(rng.integers(2, 12))
            h, w = (int(v) for v in rng.integers(1, 4, size=2))
            shape = (r * h, r * w)
            n = h * w
            dense = [np.kron(np.eye(heads), rng.standard_normal((n, n)) / math.sqrt(n))
                     for _ in range(3)]
            layer = transport_weights(*dense, heads, shape)
            x = rng.standard_normal((t,) + shape)
            ref = unflatten_tokens(reference_mhsa(flatten_tokens(x, heads), *dense, heads),
                                   shape, heads)
            errors.append(rel_error(conv_mhsa_forward(layer, x), ref))
    return _finish("attention-equivalence", "conv MHSA equals reference MHSA (relative)",
                   errors, 1e-10, t0)


def optics_suite(rng, instances=50):
    """Kernel, channel and mixed tiling valid regions vs direct convolution."""
    t0 = time.perf_counter()
    errors = []
    for scheme in ("kernel", "channel", "mixed"):
        for _ in range(instances):
            m = int(rng.integers(1, 17))
            n = int(rng.integers(1, m + 1))
            cell = m + n - 1
            if scheme == "kernel":
                k = int(rng.integers(1, 10))
                device = DeviceSpec(int(rng.integers(cell, 4 * cell + 1)))
                x, ks = rng.standard_normal((m, m)), rng.standard_normal((k, n, n))
                out, _ = kernel_tiling(x, ks, device, "valid")
                ref = conv2d(x[None], ks[:, None])
            elif scheme == "channel":
                s = int(rng.integers(1, 4))
                device = DeviceSpec(int(rng.integers(cell, (s + 1) * cell + 1)))
                xs, ks = rng.standard_normal((s * s, m, m)), rng.standard_normal((s * s, n, n))
                out, _ = channel_tiling(xs, ks, device, "valid")
                ref = conv2d(xs, ks[None])[0]
            else:
                c_in = int(rng.integers(1, 5))
                c_out = int(rng.integers(1, 6))
                device = DeviceSpec(int(rng.integers(c_in * cell, (c_in + 3) * cell + 1)))
                xs, ks = rng.standard_normal((c_in, m, m)), rng.standard_normal((c_out, c_in, n, n))
                out, _ = mixed_tiling(xs, ks, device, mode="valid")
                ref = conv2d(xs, ks)
            errors.append(rel_error(out, ref))
    return _finish("optical-equivalence", "tiled 4f valid regions equal conv2d (relative)",
                   errors, 1e-9, t0)


REFERENCE_COUNTS = {"capacity": 86, "qkv": 384, "scores": 50, "weighted_sum": 1, "mlp": 195,
                "total": 5670, "latency_s": 2.835e-3}


def deployment_config():
    """Single-head 13x13 deployment shape on 32x32 images."""
    return ModelConfig(embed_h=13, embed_w=13, heads=1)


def counts_suite():
    t0 = time.perf_counter()
    plan = plan_inferences(deployment_config(), reference_device())
    got = dict(plan.stage_counts, capacity=capacity(2160, 13, 13), total=plan.total,
               latency_s=plan.latency)
    errors = [abs(got[k] - v) for k, v in REFERENCE_COUNTS.items()]
    # the latency is compared as a float; exact integers on the rest
    return SuiteResult("inference-counts", "planner reproduces the published counts",
                       len(errors), float(max(errors)), 1e-15, max(errors) < 1e-15,
                       time.perf_counter() - t0)


def run_all(seed=0, fault=False):
    rng = np.random.default_rng(seed)
    suites = [linear_suite(rng, fault=fault), attention_suite(rng), optics_suite(rng),
              counts_suite()]
    failed = [s.name for s in suites if not s.passed]
    return {
        "schema_version": SCHEMA_VERSION,
        "command": "verify",
        "seed": int(seed),
        "passed": not failed,
        "failed": failed,
        "suites": [asdict(s) for s in suites],
    }
