"""Kernel, channel and mixed tiling on a finite 4f device.

Every operand is zero padded to a cell of ``c = M + N - 1`` pixels so a
full linear convolution of one input with one kernel fills exactly one
cell.  Cells are laid out on an input canvas and a kernel canvas, one
optical pass convolves the two canvases, and the wanted results are read
from known tiles of the output plane.

``mode="full"`` returns the full (flipped-kernel) convolution tile;
``mode="valid"`` loads the kernels rotated by 180 degrees and reads only
the valid part of the tile, which equals :func:`convshare.tensor_ops.conv2d`
with valid padding.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigurationError, DimensionError, InfeasibleError
from .fourier import capacity, flip, fourier_conv

MODES = ("full", "valid")


@dataclass(frozen=True)
class DeviceSpec:
    resolution: int = 2160
    clock: float = 2e6

    def __post_init__(self):
        if self.resolution < 1:
            raise ConfigurationError("device resolution must be at least 1 pixel")
        if not self.clock > 0:
            raise ConfigurationError("device clock must be positive")


@dataclass
class TilingPlan:
    """Layout of one optical pass.

    ``cells[r][c]`` describes what the kernel canvas holds in grid cell
    ``(r, c)``: ``"kernel:<out>,<in>"`` or ``"zero"``; ``inputs`` lists the
    input-canvas cells the same way.  ``valid_regions`` are half-open pixel
    boxes ``[row0, row1) x [col0, col1)`` on the output plane.
    """

    scheme: str
    cell_size: int
    grid: tuple
    cells: list
    inputs: list
    valid_regions: list
    inference_index: int = 0
    canvas: int = 0

    def check(self, device):
        if self.canvas > device.resolution:
            raise InfeasibleError(
                f"{self.scheme} canvas {self.canvas} exceeds {device.resolution} pixels",
                stage=self.scheme,
            )
        boxes = [(v["row0"], v["row1"], v["col0"], v["col1"]) for v in self.valid_regions]
        for r0, r1, c0, c1 in boxes:
            if not (0 <= r0 < r1 <= self.canvas and 0 <= c0 < c1 <= self.canvas):
                raise ConfigurationError(f"valid region {(r0, r1, c0, c1)} leaves the canvas")
        for a in range(len(boxes)):
            for b in range(a + 1, len(boxes)):
                ra, rb = boxes[a], boxes[b]
                if ra[0] < rb[1] and rb[0] < ra[1] and ra[2] < rb[3] and rb[2] < ra[3]:
                    raise ConfigurationError("valid regions overlap")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _square(arr, what):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[-1] != arr.shape[-2]:
        raise DimensionError(f"{what} must be square, got {arr.shape[-2:]}")
    return arr


def _check_mode(mode):
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}")


def _region(tile_row, tile_col, cell, m, n, mode, output):
    r0, c0 = tile_row * cell, tile_col * cell
    if mode == "full":
        return {"output": output, "row0": r0, "row1": r0 + cell, "col0": c0, "col1": c0 + cell}
    return {"output": output, "row0": r0 + n - 1, "row1": r0 + m,
            "col0": c0 + n - 1, "col1": c0 + m}


def _read(plane, region):
    return plane[region["row0"]:region["row1"], region["col0"]:region["col1"]]


def _place(canvas, cell, r, c, block):
    canvas[r * cell:r * cell + block.shape[0], c * cell:c * cell + block.shape[1]] = block


def kernel_passes(kernels, cap):
    """Passes kernel tiling needs for one input and ``kernels`` kernels."""
    return math.ceil(kernels / (cap * cap))


def mixed_passes(c_in, c_out, cap, stage="mixed"):
    """Passes mixed tiling needs: output rows batched by ``cap``."""
    if c_in > cap:
        raise InfeasibleError(
            f"{c_in} input channels exceed the per-pass capacity {cap}; "
            "input-channel splitting is not supported",
            stage=stage, capacity=cap,
        )
    return math.ceil(c_out / cap)


def optical_pass(input_canvas, kernel_canvas):
    """One trip through the correlator; returns the output plane."""
    return fourier_conv(input_canvas, kernel_canvas)


def kernel_tiling(x, kernels, device, mode="full"):
    """Convolve one input with many kernels.

    Returns ``(outputs [K, ...], plans)``; a new pass is planned whenever the
    kernels overflow the ``n x n`` grid of the device.
    """
    _check_mode(mode)
    x = _square(x, "input")
    kernels = _square(kernels, "kernels")
    m, n = x.shape[-1], kernels.shape[-1]
    cell = m + n - 1
    cap = capacity(device.resolution, m, n)
    loaded = flip(kernels) if mode == "valid" else kernels
    per_pass = cap * cap
    outputs, plans = [], []
    for start in range(0, len(kernels), per_pass):
        batch = loaded[start:start + per_pass]
        cols = min(len(batch), cap)
        rows = math.ceil(len(batch) / cols)
        side = cell * max(rows, cols)
        kc = np.zeros((side, side))
        xc = np.zeros((side, side))
        xc[:m, :m] = x
        cells = [["zero"] * cols for _ in range(rows)]
        regions = []
        for i, k in enumerate(batch):
            r, c = divmod(i, cols)
            _place(kc, cell, r, c, k)
            cells[r][c] = f"kernel:{start + i},0"
            regions.append(_region(r, c, cell, m, n, mode, start + i))
        plan = TilingPlan("kernel", cell, (rows, cols), cells, [["input:0"]], regions,
                          len(plans), side)
        plan.check(device)
        plane = optical_pass(xc, kc)
        outputs.extend(_read(plane, reg) for reg in regions)
        plans.append(plan)
    return np.stack(outputs), plans


def channel_tiling(inputs, kernels, device, mode="full"):
    """Channel-summed convolution ``sum_c x_c * k_c`` read from the central tile.

    Inputs and kernels sit on mirrored ``sqrt(Nc) x sqrt(Nc)`` grids so only
    matching pairs land in the centre of the ``(2 sqrt(Nc) - 1)``-tile output.
    More channels than the device holds are split into passes whose central
    tiles are summed.
    """
    _check_mode(mode)
    inputs = _square(inputs, "inputs")
    kernels = _square(kernels, "kernels")
    nc = len(inputs)
    if len(kernels) != nc:
        raise DimensionError(f"{nc} inputs but {len(kernels)} kernels")
    s = math.isqrt(nc)
    if s * s != nc:
        raise ConfigurationError(f"channel tiling needs a perfect-square channel count, got {nc}")
    m, n = inputs.shape[-1], kernels.shape[-1]
    cell = m + n - 1
    cap = capacity(device.resolution, m, n)
    loaded = flip(kernels) if mode == "valid" else kernels
    side_cap = min(cap, s)
    chunk = side_cap * side_cap
    total, plans = None, []
    for start in range(0, nc, chunk):
        xs, ks = inputs[start:start + chunk], loaded[start:start + chunk]
        g = math.isqrt(len(xs))
        if g * g != len(xs):
            g += 1
        side = g * cell
        xc = np.zeros((side, side))
        kc = np.zeros((side, side))
        in_cells = [["zero"] * g for _ in range(g)]
        k_cells = [["zero"] * g for _ in range(g)]
        for i in range(len(xs)):
            r, c = divmod(i, g)
            _place(xc, cell, r, c, xs[i])
            _place(kc, cell, g - 1 - r, g - 1 - c, ks[i])
            in_cells[r][c] = f"input:{start + i}"
            k_cells[g - 1 - r][g - 1 - c] = f"kernel:0,{start + i}"
        region = _region(g - 1, g - 1, cell, m, n, mode, 0)
        plan = TilingPlan("channel", cell, (g, g), k_cells, in_cells, [region], len(plans), side)
        plan.check(device)
        out = _read(optical_pass(xc, kc), region)
        total = out if total is None else total + out
        plans.append(plan)
    return total, plans


def mixed_tiling(inputs, kernels, device, depthwise=False, designated=None, mode="full"):
    """A whole convolutional layer: inputs in one row, one kernel row per output.

    ``kernels`` is ``[C_out, C_in, N, N]``.  Input ``i`` sits in cell
    ``(0, i)``; kernel ``(o, i)`` sits in cell ``(o, C_in - 1 - i)``, so the
    centre tile of output row ``o`` sums ``x_i * k_{o,i}`` over ``i``.  With
    ``depthwise`` every kernel in a row except the one for the row's
    designated input is zeroed (default designation ``o // (C_out / C_in)``).
    Output rows beyond the device capacity go to further passes.
    """
    _check_mode(mode)
    inputs = _square(inputs, "inputs")
    kernels = _square(kernels, "kernels")
    c_in = len(inputs)
    c_out = len(kernels)
    if kernels.shape[1] != c_in:
        raise DimensionError(f"kernels have depth {kernels.shape[1]}, expected {c_in}")
    m, n = inputs.shape[-1], kernels.shape[-1]
    cell = m + n - 1
    cap = capacity(device.resolution, m, n)
    mixed_passes(c_in, c_out, cap)
    if depthwise:
        if designated is None:
            if c_out % c_in:
                raise ConfigurationError("depthwise tiling needs C_out divisible by C_in")
            designated = np.arange(c_out) // (c_out // c_in)
        designated = np.asarray(designated)
        mask = np.zeros((c_out, c_in))
        mask[np.arange(c_out), designated] = 1.0
        kernels = kernels * mask[:, :, None, None]
    loaded = flip(kernels) if mode == "valid" else kernels
    outputs, plans = [], []
    for start in range(0, c_out, cap):
        rows_k = loaded[start:start + cap]
        rows = len(rows_k)
        side = cell * max(rows, c_in)
        xc = np.zeros((side, side))
        kc = np.zeros((side, side))
        in_cells = [[f"input:{i}" for i in range(c_in)]]
        k_cells = [["zero"] * c_in for _ in range(rows)]
        for i in range(c_in):
            _place(xc, cell, 0, i, inputs[i])
        regions = []
        for r in range(rows):
            o = start + r
            for i in range(c_in):
                if depthwise and i != designated[o]:
                    continue
                _place(kc, cell, r, c_in - 1 - i, rows_k[r, i])
                k_cells[r][c_in - 1 - i] = f"kernel:{o},{i}"
            regions.append(_region(r, c_in - 1, cell, m, n, mode, o))
        plan = TilingPlan("mixed", cell, (rows, c_in), k_cells, in_cells, regions,
                          len(plans), side)
        plan.check(device)
        plane = optical_pass(xc, kc)
        outputs.extend(_read(plane, reg) for reg in regions)
        plans.append(plan)
    return np.stack(outputs), plans


def plans_to_json(plans):
    return json.dumps([p.to_dict() for p in plans], sort_keys=True, indent=1)
