import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from mpmath import mp, mpf

from convshare import tensor_ops as T
from convshare.errors import ConfigurationError, DimensionError
from oracles import conv2d_loops


def test_identity_kernel():
    x = np.ones((1, 3, 3))
    y = T.conv2d(x, np.ones((1, 1, 1, 1)), "valid")
    np.testing.assert_array_equal(y, np.ones((1, 3, 3)))


def test_full_extent_kernel_is_dot_product(rng):
    x = rng.standard_normal((1, 4, 4))
    k = rng.standard_normal((1, 1, 4, 4))
    y = T.conv2d(x, k, "valid")
    assert y.shape == (1, 1, 1)
    assert y[0, 0, 0] == pytest.approx(np.sum(x[0] * k[0, 0]), abs=1e-14)


@pytest.mark.parametrize("padding", ["valid", "same"])
@pytest.mark.parametrize("groups", [1, 2])
def test_conv2d_matches_loops(rng, padding, groups):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((4, 2 // groups, 3, 3))
    np.testing.assert_allclose(
        T.conv2d(x, w, padding, groups), conv2d_loops(x, w, padding, groups), atol=1e-12
    )


def test_conv2d_same_even_kernel_trailing_heavy(rng):
    x = rng.standard_normal((1, 4, 4))
    w = rng.standard_normal((1, 1, 4, 4))
    y = T.conv2d(x, w, "same")
    assert y.shape == (1, 4, 4)
    np.testing.assert_allclose(y, conv2d_loops(x, w, "same"), atol=1e-12)
    # one leading zero row/col, two trailing: output (0,0) sees x[0:3,0:3] via w[1:,1:]
    assert y[0, 0, 0] == pytest.approx(np.sum(x[0, :3, :3] * w[0, 0, 1:, 1:]))


def test_conv2d_reference_example(rng):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    np.testing.assert_allclose(T.conv2d(x, w, "same"), conv2d_loops(x, w, "same"), atol=1e-12)


def test_conv2d_batched_input_and_kernels(rng):
    x = rng.standard_normal((3, 2, 4, 5, 5))
    w = rng.standard_normal((3, 1, 4, 2, 3, 3))
    y = T.conv2d(x, w, "valid", groups=2)
    for a in range(3):
        for b in range(2):
            np.testing.assert_allclose(
                y[a, b], conv2d_loops(x[a, b], w[a, 0], "valid", 2), atol=1e-12
            )


def test_ones_kernel_sums_channel(rng):
    x = rng.standard_normal((3, 6, 7))
    w = np.zeros((3, 1, 6, 7))
    w[:] = 1.0
    y = T.conv2d(x, w, "valid", groups=3)
    np.testing.assert_allclose(y[:, 0, 0], x.sum(axis=(1, 2)), atol=1e-10)


def test_linearity(rng):
    x, z = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    a, b = rng.standard_normal(2)
    lhs = T.conv2d(a * x + b * z, w, "same")
    rhs = a * T.conv2d(x, w, "same") + b * T.conv2d(z, w, "same")
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_depthwise_never_mixes_channels(rng):
    x = rng.standard_normal((4, 5, 5))
    w = rng.standard_normal((8, 1, 3, 3))
    base = T.conv2d(x, w, "valid", groups=4)
    x2 = x.copy()
    x2[2] += 1.0
    diff = np.abs(T.conv2d(x2, w, "valid", groups=4) - base).sum(axis=(1, 2))
    assert np.all(diff[[4, 5]] > 0)
    assert np.all(diff[[0, 1, 2, 3, 6, 7]] == 0)


def test_conv2d_errors():
    with pytest.raises(ConfigurationError):
        T.conv2d(np.zeros((3, 4, 4)), np.zeros((3, 1, 2, 2)), "valid", groups=2)
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((2, 4, 4)), np.zeros((3, 1, 2, 2)), "valid")
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 3, 3)), np.zeros((1, 1, 4, 4)), "valid")
    with pytest.raises(ConfigurationError):
        T.conv2d(np.zeros((1, 3, 3)), np.zeros((1, 1, 1, 1)), "full")


@pytest.mark.parametrize(
    "shape_x,shape_w,padding,groups",
    [
        ((2, 5, 5), (4, 1, 3, 3), "valid", 2),
        ((3, 2, 4, 4), (3, 2, 4, 4), "valid", 1),
        ((2, 4, 4), (2, 2, 4, 4), "same", 1),
        ((2, 3, 5, 4), (6, 1, 2, 3), "same", 3),
    ],
)
def test_conv2d_backward_matches_finite_differences(rng, shape_x, shape_w, padding, groups):
    x = rng.standard_normal(shape_x)
    w = rng.standard_normal(shape_w)
    dy = rng.standard_normal(T.conv2d(x, w, padding, groups).shape)
    dx, dw = T.conv2d_backward(x, w, dy, padding, groups)
    f = lambda xx, ww: np.sum(T.conv2d(xx, ww, padding, groups) * dy)
    h = 1e-6
    for arr, grad, is_x in ((x, dx, True), (w, dw, False)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = f(x, w)
            arr[idx] = old - h
            fm = f(x, w)
            arr[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(grad, num, atol=1e-7)


def test_softmax_examples():
    np.testing.assert_array_equal(T.softmax(np.array([5.0])), [1.0])
    np.testing.assert_allclose(T.softmax(np.zeros(4)), [0.25] * 4)


def test_softmax_large_inputs_against_extended_precision():
    mp.dps = 50
    e0, e1 = mp.exp(mpf(1000)), mp.exp(mpf(1001))
    expected = [float(e0 / (e0 + e1)), float(e1 / (e0 + e1))]
    got = T.softmax(np.array([1000.0, 1001.0]))
    assert np.all(np.isfinite(got))
    np.testing.assert_allclose(got, expected, rtol=1e-14)


def test_softmax_axis_error():
    with pytest.raises(DimensionError):
        T.softmax(np.zeros((2, 2)), axis=2)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(x, axis=-1)
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_constant_token():
    x = np.full((1, 2, 2), 3.0)
    y = T.layer_norm(x, np.ones((2, 2)), np.zeros((2, 2)))
    np.testing.assert_array_equal(y, np.zeros((1, 2, 2)))


def test_layer_norm_definition():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2)
    y = T.layer_norm(x, np.ones((2, 2)), np.zeros((2, 2)))
    assert abs(y.mean()) < 1e-12
    assert y.var() == pytest.approx(1.0, abs=1e-5)


def test_layer_norm_matches_two_pass_statistics(rng):
    x = rng.standard_normal((3, 4, 4))
    g, b = rng.standard_normal((2, 4, 4))
    expected = np.empty_like(x)
    for t in range(3):
        vals = x[t].ravel()
        mean = sum(vals) / vals.size
        var = sum((v - mean) ** 2 for v in vals) / vals.size
        expected[t] = (x[t] - mean) / np.sqrt(var + 1e-6) * g + b
    np.testing.assert_allclose(T.layer_norm(x, g, b), expected, atol=1e-12)


def test_layer_norm_shape_error():
    with pytest.raises(DimensionError):
        T.layer_norm(np.zeros((2, 3, 3)), np.ones((2, 2)), np.zeros((2, 2)))


def test_layer_norm_backward(rng):
    x = rng.standard_normal((2, 3, 3))
    g, b = rng.standard_normal((2, 3, 3))
    dy = rng.standard_normal(x.shape)
    _, cache = T.layer_norm_cached(x, g, b)
    dx, dg, db = T.layer_norm_backward(cache, dy)
    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = np.sum((T.layer_norm(xp, g, b) - T.layer_norm(xm, g, b)) * dy) / (2 * h)
    np.testing.assert_allclose(dx, num, atol=1e-7)
    np.testing.assert_allclose(db, dy.sum(axis=0))


def test_gelu_values():
    assert T.gelu(np.array(0.0)) == 0.0
    xs = np.linspace(6, 20, 15)
    np.testing.assert_allclose(T.gelu(xs), xs, atol=1e-3)
    mp.dps = 30
    exact = float(mpf(1) * (1 + mp.erf(1 / mp.sqrt(2))) / 2)
    assert float(T.gelu(np.array(1.0))) == pytest.approx(exact, abs=2e-3)


def test_gelu_monotone_on_positive_axis():
    xs = np.linspace(0, 10, 2001)
    assert np.all(np.diff(T.gelu(xs)) > 0)


def test_gelu_backward(rng):
    x = rng.standard_normal(50) * 3
    h = 1e-6
    num = (T.gelu(x + h) - T.gelu(x - h)) / (2 * h)
    np.testing.assert_allclose(T.gelu_backward(x, np.ones_like(x)), num, atol=1e-8)


def test_reshape_and_permute_round_trips(rng):
    x = rng.standard_normal((2, 2))
    np.testing.assert_array_equal(T.reshape(T.reshape(x, [4]), [2, 2]), x)
    y = rng.standard_normal((1, 2, 3))
    order = (2, 0, 1)
    np.testing.assert_array_equal(T.permute(T.permute(y, order), np.argsort(order)), y)
    with pytest.raises(DimensionError):
        T.reshape(x, [3])
    with pytest.raises(DimensionError):
        T.permute(y, (0, 0, 1))


def test_reshape_of_pointwise_outputs_keeps_lexicographic_order(rng):
    t, m = 3, 5
    raw = rng.standard_normal((t * m, 1, 1))
    out = T.reshape(raw, [t, m])
    for a in range(t):
        for b in range(m):
            assert out[a, b] == raw[a * m + b, 0, 0]
