"""Inference counts and latency of a single-head model on a 4f device.

Per encoder block the convolutional stages are mapped as follows:

* ``qkv``: depthwise mixed tiling, the ``T`` tokens are the input row and
  every one of the ``3*T*H*W`` shared kernels (Q, K and V banks) occupies a
  kernel row; rows are batched by the device capacity.
* ``scores``: depthwise mixed tiling with keys as inputs and one query
  kernel per ``(query, key)`` pair, ``T*T`` rows.
* ``weighted_sum``: one mixed tiling pass with 1x1 kernels taken from the
  score matrix.
* ``mlp``: kernel tiling, one pass per input channel of each layer
  (``T`` for the expansion, ``r*T`` for the reduction).

Tokenizer, normalization, softmax, GELU, residual additions and the
classifier run electronically and are not counted.
"""

import json
import math
from dataclasses import dataclass

from ..errors import ConfigurationError, InfeasibleError
from ..tensor_ops import VALID
from .fourier import capacity
from .tiling import DeviceSpec

STAGES = ("qkv", "scores", "weighted_sum", "mlp")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class InferencePlan:
    stage_counts: dict
    blocks: int
    capacity: int
    total: int
    latency: float

    @property
    def per_block(self):
        return sum(self.stage_counts.values())

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "stage_counts": dict(self.stage_counts),
            "per_block": self.per_block,
            "blocks": self.blocks,
            "capacity": self.capacity,
            "total": self.total,
            "latency_s": self.latency,
            "latency_display": format_latency(self.latency),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def format_latency(seconds):
    """Two significant figures in the largest fitting unit, e.g. ``2.8 ms``."""
    if seconds == 0:
        return "0 s"
    for unit, scale in (("s", 1.0), ("ms", 1e-3), ("us", 1e-6), ("ns", 1e-9)):
        if seconds >= scale:
            break
    return f"{float(f'{seconds / scale:.2g}'):g} {unit}"


def _stage_capacity(stage, resolution, m, n):
    try:
        return capacity(resolution, m, n)
    except InfeasibleError as exc:
        raise InfeasibleError(f"stage {stage}: capacity 0, {exc}", stage=stage, capacity=0) from None


def _require(stage, ok, detail):
    if not ok:
        raise InfeasibleError(f"stage {stage}: {detail}", stage=stage)


def check_deployable(config):
    """The planner covers the single-head, valid, shared-weight deployment shape."""
    if config.heads != 1:
        raise ConfigurationError("optical planning needs heads=1")
    if config.qkv_padding != VALID:
        raise ConfigurationError("optical planning needs valid QKV padding")
    if not config.weight_sharing:
        raise ConfigurationError("optical planning needs shared weights")
    h, w = config.embed_shape
    if h != w:
        raise ConfigurationError("optical planning needs square tokens")


def block_counts(config, device):
    """Per-block stage counts and the device capacity for ``H x H`` operands."""
    check_deployable(config)
    t = config.tokens
    h = config.embed_h
    hw = h * h
    r = config.mlp_ratio
    res = device.resolution

    n = _stage_capacity("qkv", res, h, h)
    _require("qkv", t <= n, f"{t} token inputs exceed capacity {n}")
    counts = {"qkv": math.ceil(3 * t * hw / n)}
    _require("scores", t <= n, f"{t} key inputs exceed capacity {n}")
    counts["scores"] = math.ceil(t * t / n)
    n1 = _stage_capacity("weighted_sum", res, h, 1)
    _require("weighted_sum", t <= n1, f"{t} value inputs exceed pointwise capacity {n1}")
    counts["weighted_sum"] = math.ceil(t / n1)
    counts["mlp"] = t * math.ceil(r * hw / n**2) + r * t * math.ceil(hw / n**2)
    return counts, n


def plan_inferences(config, device):
    counts, n = block_counts(config, device)
    total = config.depth * sum(counts.values())
    return InferencePlan(counts, config.depth, n, total, estimate_latency(total, device))


def estimate_latency(plan_or_total, device):
    """Seconds for ``total`` inferences at one inference per clock tick."""
    total = plan_or_total.total if isinstance(plan_or_total, InferencePlan) else plan_or_total
    if total < 0:
        raise ValueError("inference count must be nonnegative")
    return total / device.clock


def plan_table(plan, device):
    """Human-readable rows: layer, stage, count, cumulative count, cumulative latency."""
    rows = [("layer", "stage", "count", "cumulative", "latency")]
    cum = 0
    for b in range(plan.blocks):
        for stage in STAGES:
            c = plan.stage_counts[stage]
            cum += c
            rows.append((f"block{b}", stage, str(c), str(cum),
                         f"{cum / device.clock * 1e3:.6g} ms"))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    lines = ["  ".join(cell.ljust(wd) for cell, wd in zip(r, widths)).rstrip() for r in rows]
    lines.append(f"total {plan.total}, {plan.latency * 1e3:.6g} ms"
                 f" (displayed {format_latency(plan.latency)})")
    return "\n".join(lines)


def reference_device():
    return DeviceSpec(resolution=2160, clock=2e6)
