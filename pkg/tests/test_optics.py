import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convshare.errors import ConfigurationError, InfeasibleError
from convshare.linear import SharedGroupedConv, shared_forward
from convshare.model import ConvShareViT, ModelConfig
from convshare.optics.fourier import capacity, fourier_conv
from convshare.optics.planner import (estimate_latency, format_latency, plan_inferences,
                                      plan_table, reference_device)
from convshare.optics.simulate import OpticalSimulator, compare
from convshare.optics.tiling import (DeviceSpec, TilingPlan, channel_tiling, kernel_tiling,
                                     mixed_tiling, plans_to_json)
from convshare.tensor_ops import conv2d
from convshare.verify import deployment_config
from oracles import conv2d_loops, full_conv_loops


def rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


# fourier_conv ------------------------------------------------------------
def test_delta_kernel_is_identity(rng):
    x = rng.standard_normal((5, 4))
    k = np.zeros((3, 2))
    k[0, 0] = 1.0
    want = np.zeros((7, 5))
    want[:5, :4] = x
    np.testing.assert_allclose(fourier_conv(x, k), want, atol=1e-14)


def test_ones_counts_overlaps():
    out = fourier_conv(np.ones((2, 2)), np.ones((2, 2)))
    np.testing.assert_allclose(out, [[1, 2, 1], [2, 4, 2], [1, 2, 1]], atol=1e-14)


def test_fourier_matches_loop_oracle(rng):
    x, k = rng.standard_normal((8, 8)), rng.standard_normal((3, 3))
    assert rel(fourier_conv(x, k), full_conv_loops(x, k)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), hi=st.integers(1, 9), wi=st.integers(1, 9),
       hk=st.integers(1, 6), wk=st.integers(1, 6))
def test_fourier_is_linear_convolution(seed, hi, wi, hk, wk):
    rng = np.random.default_rng(seed)
    x, k = rng.standard_normal((hi, wi)), rng.standard_normal((hk, wk))
    assert rel(fourier_conv(x, k), full_conv_loops(x, k)) < 1e-9


def test_fourier_canvas_limit(rng):
    with pytest.raises(InfeasibleError):
        fourier_conv(np.ones((10, 10)), np.ones((5, 5)), max_extent=13)


# capacity ----------------------------------------------------------------
@pytest.mark.parametrize("args,n", [((2160, 13, 13), 86), ((25, 13, 13), 1), ((2160, 13, 1), 166)])
def test_capacity_values(args, n):
    assert capacity(*args) == n


def test_capacity_zero_is_infeasible():
    with pytest.raises(InfeasibleError) as err:
        capacity(24, 13, 13)
    assert err.value.capacity == 0


@settings(max_examples=200, deadline=None)
@given(r=st.integers(1, 5000), m=st.integers(1, 50), n=st.integers(1, 50), d=st.integers(0, 50))
def test_capacity_monotone(r, m, n, d):
    def cap(*a):
        try:
            return capacity(*a)
        except InfeasibleError:
            return 0

    assert cap(r + d, m, n) >= cap(r, m, n)
    assert cap(r, m + d, n) <= cap(r, m, n)
    assert cap(r, m, n + d) <= cap(r, m, n)


def test_device_validation():
    with pytest.raises(ConfigurationError):
        DeviceSpec(0, 1.0)
    with pytest.raises(ConfigurationError):
        DeviceSpec(10, 0.0)


# tiling ------------------------------------------------------------------
def test_kernel_tiling_cell_size(rng):
    _, plans = kernel_tiling(rng.standard_normal((4, 4)), rng.standard_normal((2, 3, 3)),
                             DeviceSpec(100))
    assert plans[0].cell_size == 6


def test_single_kernel_is_plain_fourier_conv(rng):
    x, k = rng.standard_normal((4, 4)), rng.standard_normal((1, 3, 3))
    out, plans = kernel_tiling(x, k, DeviceSpec(6))
    assert len(plans) == 1 and plans[0].canvas == 6
    np.testing.assert_allclose(out[0], fourier_conv(x, k[0]), atol=1e-12)


@pytest.mark.parametrize("mode", ["full", "valid"])
def test_kernel_tiling_four_kernels(rng, mode):
    x, ks = rng.standard_normal((4, 4)), rng.standard_normal((4, 3, 3))
    out, _ = kernel_tiling(x, ks, DeviceSpec(2160), mode)
    for o, k in zip(out, ks):
        if mode == "full":
            want = full_conv_loops(x, k)
        else:
            want = conv2d_loops(x[None], k[None, None])[0]
        assert rel(o, want) < 1e-9


def test_kernel_tiling_splits_plans(rng):
    x, ks = rng.standard_normal((4, 4)), rng.standard_normal((7, 3, 3))
    out, plans = kernel_tiling(x, ks, DeviceSpec(12), "valid")  # 2x2 kernels per pass
    assert len(plans) == 2 and [p.inference_index for p in plans] == [0, 1]
    assert rel(out, conv2d(x[None], ks[:, None])) < 1e-9


def test_channel_tiling_four_channels(rng):
    xs, ks = rng.standard_normal((4, 5, 5)), rng.standard_normal((4, 3, 3))
    out, plans = channel_tiling(xs, ks, DeviceSpec(2160))
    assert plans[0].grid == (2, 2)
    want = sum(full_conv_loops(x, k) for x, k in zip(xs, ks))
    assert rel(out, want) < 1e-9
    valid, _ = channel_tiling(xs, ks, DeviceSpec(2160), "valid")
    assert rel(valid, conv2d_loops(xs, ks[None])[0]) < 1e-9


def test_channel_tiling_output_block_is_odd_grid(rng):
    s = 3
    xs, ks = rng.standard_normal((s * s, 4, 4)), rng.standard_normal((s * s, 2, 2))
    _, plans = channel_tiling(xs, ks, DeviceSpec(2160))
    plan = plans[0]
    tiles = (2 * plan.canvas - 1) / plan.cell_size
    assert math.ceil(tiles) == 2 * s  # (2s-1) full tiles plus one partial zero row
    r = plan.valid_regions[0]
    assert r["row0"] == (s - 1) * plan.cell_size


def test_single_channel_is_plain_conv(rng):
    x, k = rng.standard_normal((1, 5, 5)), rng.standard_normal((1, 2, 2))
    out, _ = channel_tiling(x, k, DeviceSpec(2160))
    np.testing.assert_allclose(out, fourier_conv(x[0], k[0]), atol=1e-12)


def test_channel_tiling_needs_square_count(rng):
    with pytest.raises(ConfigurationError):
        channel_tiling(rng.standard_normal((3, 4, 4)), rng.standard_normal((3, 2, 2)), DeviceSpec(100))


def test_channel_tiling_splits_and_sums(rng):
    xs, ks = rng.standard_normal((9, 4, 4)), rng.standard_normal((9, 2, 2))
    out, plans = channel_tiling(xs, ks, DeviceSpec(10), "valid")  # 2x2 channels per pass
    assert len(plans) == 3
    assert rel(out, conv2d(xs, ks[None])[0]) < 1e-9


def test_mixed_single_channel_is_plain_conv(rng):
    x, k = rng.standard_normal((1, 6, 6)), rng.standard_normal((1, 1, 3, 3))
    out, _ = mixed_tiling(x, k, DeviceSpec(2160))
    np.testing.assert_allclose(out[0], fourier_conv(x[0], k[0, 0]), atol=1e-12)


def test_mixed_four_in_three_out(rng):
    xs, ks = rng.standard_normal((4, 6, 6)), rng.standard_normal((3, 4, 3, 3))
    out, plans = mixed_tiling(xs, ks, DeviceSpec(2160), mode="valid")
    assert plans[0].grid == (3, 4)
    assert rel(out, conv2d_loops(xs, ks)) < 1e-9


def test_mixed_depthwise_qkv_layout_equals_shared_forward(rng):
    t, h = 5, 4
    m = h * h
    bank = rng.standard_normal((m, 1, h, h))
    x = rng.standard_normal((t, h, h))
    kern = np.zeros((t * m, t, h, h))
    for o in range(t * m):
        kern[o, o // m] = bank[o % m, 0]
    kern += rng.standard_normal(kern.shape) * (kern == 0)  # masked off by the depthwise flag
    out, plans = mixed_tiling(x, kern, DeviceSpec(7 * 10), depthwise=True, mode="valid")
    assert len(plans) == math.ceil(t * m / 10)
    want = shared_forward(SharedGroupedConv(bank), x)
    assert rel(out, want) < 1e-9


def test_mixed_input_overflow_is_infeasible(rng):
    with pytest.raises(InfeasibleError) as err:
        mixed_tiling(rng.standard_normal((5, 4, 4)), rng.standard_normal((2, 5, 2, 2)), DeviceSpec(20))
    assert err.value.capacity == 4


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scheme=st.sampled_from(["kernel", "channel", "mixed"]))
def test_plans_fit_and_regions_are_disjoint(seed, scheme):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 9))
    n = int(rng.integers(1, m + 1))
    device = DeviceSpec(int(rng.integers(3 * (m + n - 1), 8 * (m + n - 1))))
    if scheme == "kernel":
        _, plans = kernel_tiling(rng.standard_normal((m, m)), rng.standard_normal((6, n, n)), device, "valid")
    elif scheme == "channel":
        _, plans = channel_tiling(rng.standard_normal((4, m, m)), rng.standard_normal((4, n, n)), device, "valid")
    else:
        _, plans = mixed_tiling(rng.standard_normal((3, m, m)), rng.standard_normal((5, 3, n, n)), device, mode="valid")
    for p in plans:
        assert p.cell_size * max(p.grid) <= device.resolution
        assert p.canvas <= device.resolution
        p.check(device)


def test_overlapping_regions_rejected():
    r = {"output": 0, "row0": 0, "row1": 4, "col0": 0, "col1": 4}
    plan = TilingPlan("kernel", 4, (1, 2), [["kernel:0,0", "kernel:1,0"]], [["input:0"]], [r, dict(r)], 0, 8)
    with pytest.raises(ConfigurationError):
        plan.check(DeviceSpec(8))


def test_plan_json_export(rng):
    _, plans = kernel_tiling(rng.standard_normal((4, 4)), rng.standard_normal((3, 2, 2)), DeviceSpec(50))
    data = json.loads(plans_to_json(plans))
    assert data[0]["scheme"] == "kernel" and data[0]["cell_size"] == 5
    assert data[0]["grid"] == [1, 3]
    assert data[0]["cells"][0] == ["kernel:0,0", "kernel:1,0", "kernel:2,0"]
    assert {"valid_regions", "inference_index", "inputs"} <= set(data[0])


# planner -----------------------------------------------------------------
def test_reference_plan_counts():
    plan = plan_inferences(deployment_config(), reference_device())
    assert plan.capacity == 86
    assert plan.stage_counts == {"qkv": 384, "scores": 50, "weighted_sum": 1, "mlp": 195}
    assert plan.total == 5670
    assert plan.latency == 2.835e-3
    assert format_latency(plan.latency) == "2.8 ms"


def test_one_block_one_hertz():
    cfg = ModelConfig(embed_h=13, embed_w=13, heads=1, depth=1)
    plan = plan_inferences(cfg, DeviceSpec(2160, 1.0))
    assert plan.latency == plan.per_block == 630


def test_latency_linearity():
    dev = reference_device()
    assert estimate_latency(0, dev) == 0.0
    assert estimate_latency(2 * 5670, dev) == 2 * estimate_latency(5670, dev)


def test_doubling_depth_doubles_total():
    a = plan_inferences(ModelConfig(embed_h=13, embed_w=13, heads=1, depth=9), reference_device())
    b = plan_inferences(ModelConfig(embed_h=13, embed_w=13, heads=1, depth=18), reference_device())
    assert b.total == 2 * a.total


def test_small_device_names_stage():
    with pytest.raises(InfeasibleError) as err:
        plan_inferences(deployment_config(), DeviceSpec(24))
    assert err.value.stage == "qkv" and err.value.capacity == 0
    with pytest.raises(InfeasibleError) as err:
        plan_inferences(deployment_config(), DeviceSpec(25 * 60))  # 60 < 65 tokens
    assert err.value.stage == "qkv"


def test_planner_rejects_multihead():
    with pytest.raises(ConfigurationError):
        plan_inferences(ModelConfig(), reference_device())


def test_table_total_row():
    plan = plan_inferences(deployment_config(), reference_device())
    table = plan_table(plan, reference_device())
    assert "total 5670, 2.835 ms" in table.splitlines()[-1]
    assert len(table.splitlines()) == 1 + 9 * 4 + 1
    assert json.loads(plan.to_json())["latency_display"] == "2.8 ms"


# simulation --------------------------------------------------------------
def small_optical_model(seed=1, bias=True):
    cfg = ModelConfig(image_size=8, patch_size=4, in_channels=1, embed_h=4, embed_w=4, heads=1,
                      depth=2, num_classes=5, bias=bias)
    model = ConvShareViT(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p[...] = 0.3 * rng.standard_normal(p.shape)
    return model


@pytest.mark.parametrize("engine", ["spectral", "canvas"])
def test_simulation_matches_electronic(rng, engine):
    model = small_optical_model()
    device = DeviceSpec(35)
    report = compare(model, rng.standard_normal((3, 1, 8, 8)), device, engine)
    assert report["max_relative_deviation"] < 1e-9
    assert report["argmax_identical"]
    assert report["inferences_per_image"] == plan_inferences(model.config, device).total


def test_engines_agree(rng):
    model = small_optical_model(bias=False)
    img = rng.standard_normal((2, 1, 8, 8))
    a = OpticalSimulator(model, DeviceSpec(35), "spectral")
    b = OpticalSimulator(model, DeviceSpec(35), "canvas")
    np.testing.assert_allclose(a.forward(img), b.forward(img), atol=1e-12)
    assert a.stage_inferences == b.stage_inferences


def test_simulation_infeasible_device():
    with pytest.raises(InfeasibleError):
        OpticalSimulator(small_optical_model(), DeviceSpec(20))
