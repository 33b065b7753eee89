import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from platedet import numerics as nm
from platedet.errors import ContractError, DimensionError
from platedet.numerics import (
    Tape,
    Tensor,
    absolute,
    add,
    backward,
    clamp_min,
    concat_channels,
    conv2d,
    div,
    elementwise,
    global_avg_pool,
    grad_check,
    log,
    mean_all,
    mul,
    relu,
    resample,
    sigmoid,
    slice_channels,
    softmax_channels,
    sub,
    sum_all,
    sum_per_image,
)

RNG = np.random.default_rng(20240817)


def rand(*shape):
    return Tensor(RNG.normal(size=shape))


# ---------------------------------------------------------------------------
# conv2d


def test_conv_identity_kernel():
    x = Tensor(RNG.normal(size=(1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 1, 1)))
    y = conv2d(x, k)
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_dilated_window_hand_value():
    # all-ones 5x5 input, all-ones 3x3 kernel, dilation 2: the window
    # covers rows/cols {0, 2, 4}, nine ones in total.
    x = Tensor(np.ones((1, 1, 5, 5)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    y = conv2d(x, k, dilation=2)
    assert y.shape == (1, 1, 1, 1)
    assert y.item() == 9.0


def test_conv_channel_mismatch_reports_both_shapes():
    x = rand(1, 2, 4, 4)
    k = Tensor(np.ones((1, 3, 1, 1)))
    with pytest.raises(DimensionError) as exc:
        conv2d(x, k)
    assert "(1, 2, 4, 4)" in str(exc.value) and "(1, 3, 1, 1)" in str(exc.value)


def test_conv_output_size_formula():
    x = rand(2, 3, 11, 9)
    k = rand(4, 3, 3, 3)
    y = conv2d(x, k, stride=2, padding=1, dilation=2)
    ho = (11 + 2 - 2 * 2 - 1) // 2 + 1
    wo = (9 + 2 - 2 * 2 - 1) // 2 + 1
    assert y.shape == (2, 4, ho, wo)


def test_conv_matches_naive_loops():
    x = rand(2, 2, 6, 5)
    k = rand(3, 2, 3, 3)
    stride, pad, dil = 2, 1, 1
    y = conv2d(x, k, stride=stride, padding=pad, dilation=dil)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    expected = np.zeros(y.shape)
    for n in range(2):
        for co in range(3):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    acc = 0.0
                    for ci in range(2):
                        for u in range(3):
                            for v in range(3):
                                acc += xp[n, ci, i * stride + u * dil, j * stride + v * dil] * k.data[co, ci, u, v]
                    expected[n, co, i, j] = acc
    np.testing.assert_allclose(y.data, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# elementwise


def test_sigmoid_value_and_derivative_at_zero():
    x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    with Tape() as tape:
        y = sigmoid(x)
    assert y.item() == 0.5
    backward(y, tape)
    assert x.grad.reshape(()) == pytest.approx(0.25)


def test_relu_values_and_gradients():
    x = Tensor(np.array([[[[-2.0, 3.0]]]]), requires_grad=True)
    with Tape() as tape:
        y = sum_all(relu(x))
    np.testing.assert_array_equal(relu(x).data, [[[[0.0, 3.0]]]])
    backward(y, tape)
    np.testing.assert_array_equal(x.grad, [[[[0.0, 1.0]]]])


def test_mul_broadcasts_mask_over_channels():
    feats = rand(1, 4, 8, 8)
    mask = rand(1, 1, 8, 8)
    y = mul(feats, mask)
    assert y.shape == (1, 4, 8, 8)
    np.testing.assert_allclose(y.data, feats.data * mask.data)


def test_non_broadcastable_shapes_raise():
    with pytest.raises(DimensionError):
        add(rand(1, 3, 4, 4), rand(1, 2, 4, 4))


def test_elementwise_dispatch():
    a, b = rand(1, 2, 3, 3), rand(1, 2, 3, 3)
    np.testing.assert_array_equal(elementwise("add", a, b).data, (a + b).data)
    np.testing.assert_array_equal(elementwise("relu", a).data, relu(a).data)
    with pytest.raises(ContractError):
        elementwise("relu", a, b)
    with pytest.raises(ContractError):
        elementwise("add", a)
    with pytest.raises(ContractError):
        elementwise("nope", a)


# ---------------------------------------------------------------------------
# softmax / pooling / resample / concat


def test_softmax_uniform_input():
    x = Tensor(np.full((2, 5, 1, 1), 3.7))
    y = softmax_channels(x)
    np.testing.assert_allclose(y.data, 0.2)


def test_softmax_hand_value():
    x = Tensor(np.array([0.0, np.log(3.0)]).reshape(1, 2, 1, 1))
    y = softmax_channels(x)
    np.testing.assert_allclose(y.data.ravel(), [0.25, 0.75], atol=1e-15)


def test_softmax_rejects_spatial_input():
    with pytest.raises(DimensionError):
        softmax_channels(rand(1, 3, 2, 2))


@given(st.integers(2, 8), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_softmax_is_probability_vector(channels, seed):
    x = Tensor(np.random.default_rng(seed).normal(scale=20, size=(2, channels, 1, 1)))
    y = softmax_channels(x).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


def test_gap_constant_and_mean():
    c = 2.5
    np.testing.assert_allclose(global_avg_pool(Tensor(np.full((1, 3, 4, 5), c))).data, c)
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    assert global_avg_pool(x).item() == 2.5


def test_gap_gradient_is_inverse_area():
    x = Tensor(RNG.normal(size=(1, 1, 4, 4)), requires_grad=True)
    with Tape() as tape:
        y = sum_all(global_avg_pool(x))
    backward(y, tape)
    np.testing.assert_allclose(x.grad, 1.0 / 16.0)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9),
       st.sampled_from(["bilinear_up", "avg_down"]))
@settings(max_examples=40, deadline=None)
def test_resample_preserves_constants(h, w, th, tw, mode):
    c = -1.75
    y = resample(Tensor(np.full((1, 2, h, w), c)), th, tw, mode)
    assert y.shape == (1, 2, th, tw)
    np.testing.assert_allclose(y.data, c, atol=1e-12)


def test_avg_down_block_mean():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    assert resample(x, 1, 1, "avg_down").item() == 2.5


def test_upsample_then_avg_down_round_trip_constant():
    x = Tensor(np.full((1, 1, 2, 2), 0.3125))
    up = resample(x, 5, 7, "bilinear_up")
    back = resample(up, 2, 2, "avg_down")
    np.testing.assert_allclose(back.data, x.data, atol=1e-9)


def test_concat_single_tensor_is_identity():
    x = rand(1, 3, 4, 4)
    np.testing.assert_array_equal(concat_channels([x]).data, x.data)


def test_concat_shape_arithmetic():
    y = concat_channels([rand(1, 2, 4, 4), rand(1, 2, 4, 4)])
    assert y.shape == (1, 4, 4, 4)


def test_concat_spatial_mismatch():
    with pytest.raises(DimensionError):
        concat_channels([rand(1, 2, 4, 4), rand(1, 2, 5, 4)])


def test_concat_gradient_routes_to_slices():
    a = Tensor(RNG.normal(size=(1, 2, 3, 3)), requires_grad=True)
    b = Tensor(RNG.normal(size=(1, 1, 3, 3)), requires_grad=True)
    w = Tensor(RNG.normal(size=(1, 3, 3, 3)))
    with Tape() as tape:
        y = sum_all(mul(concat_channels([a, b]), w))
    backward(y, tape)
    np.testing.assert_allclose(a.grad, w.data[:, :2])
    np.testing.assert_allclose(b.grad, w.data[:, 2:])


def test_slice_channels_round_trip():
    x = Tensor(RNG.normal(size=(2, 4, 3, 3)), requires_grad=True)
    with Tape() as tape:
        y = sum_all(slice_channels(x, 1, 3))
    backward(y, tape)
    expected = np.zeros_like(x.data)
    expected[:, 1:3] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_gives_ones():
    x = Tensor(RNG.normal(size=(2, 3, 4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_backward_quadratic():
    x = Tensor(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    backward(loss, tape)
    assert x.grad.reshape(()) == pytest.approx(6.0)


def test_backward_rejects_non_scalar_loss():
    x = Tensor(RNG.normal(size=(1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_backward_accumulates_until_zeroed():
    x = Tensor(RNG.normal(size=(1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    backward(loss, tape)
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, 2.0 * np.ones_like(x.data))
    x.zero_grad()
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_backward_same_graph_twice_is_deterministic():
    x = Tensor(RNG.normal(size=(1, 2, 4, 4)), requires_grad=True)
    k = Tensor(RNG.normal(size=(2, 2, 3, 3)), requires_grad=True)

    def run():
        x.zero_grad()
        k.zero_grad()
        with Tape() as tape:
            loss = sum_all(relu(conv2d(x, k, padding=1)))
        backward(loss, tape)
        return x.grad.copy(), k.grad.copy()

    gx1, gk1 = run()
    gx2, gk2 = run()
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gk1, gk2)


def test_chained_conv_relu_gap_matches_finite_differences():
    k = Tensor(RNG.normal(size=(2, 1, 3, 3)))

    def f(t):
        return sum_all(global_avg_pool(relu(conv2d(t, k, padding=1))))

    err = grad_check(f, rand(1, 1, 6, 6), eps=1e-5)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# grad_check sweep over the op library


def test_grad_check_linear_is_exact():
    assert grad_check(sum_all, rand(2, 2, 4, 4)) < 1e-10


@pytest.mark.parametrize("name,f", [
    ("conv_input", lambda x: sum_all(conv2d(x, _FIXED_K, stride=2, padding=1, dilation=2))),
    ("relu", lambda x: sum_all(relu(x))),
    ("sigmoid", lambda x: sum_all(mul(sigmoid(x), _FIXED_W))),
    ("add", lambda x: sum_all(mul(add(x, _FIXED_B), _FIXED_W))),
    ("sub", lambda x: sum_all(mul(sub(_FIXED_B, x), _FIXED_W))),
    ("mul", lambda x: sum_all(mul(x, _FIXED_B) + mul(x, x))),
    ("div", lambda x: sum_all(div(x, _FIXED_POS))),
    ("div_denominator", lambda x: sum_all(div(_FIXED_B, clamp_min(mul(x, x), 0.5)))),
    ("neg", lambda x: sum_all(nm.neg(mul(x, x)))),
    ("log", lambda x: sum_all(log(clamp_min(mul(x, x), 0.1)))),
    ("absolute", lambda x: sum_all(absolute(x))),
    ("softmax", lambda x: sum_all(mul(softmax_channels(global_avg_pool(x)), _FIXED_C))),
    ("gap", lambda x: sum_all(mul(global_avg_pool(x), _FIXED_C))),
    ("bilinear_up", lambda x: sum_all(mul(resample(x, 13, 11, "bilinear_up"), _FIXED_UP))),
    ("avg_down", lambda x: sum_all(mul(resample(x, 3, 5, "avg_down"), _FIXED_DOWN))),
    ("concat", lambda x: sum_all(mul(concat_channels([x, x]), _FIXED_CAT))),
    ("slice", lambda x: sum_all(mul(slice_channels(x, 1, 3), _FIXED_SLC))),
    ("sum_per_image", lambda x: sum_all(mul(sum_per_image(x), _FIXED_N))),
    ("mean_all", lambda x: mean_all(mul(x, x))),
])
def test_grad_check_each_op(name, f):
    x = Tensor(np.random.default_rng(hash(name) % 2 ** 32).normal(size=(4, 4, 8, 8)))
    assert grad_check(f, x, eps=1e-5) < 1e-4, name


_FIXED_K = Tensor(np.random.default_rng(1).normal(size=(3, 4, 3, 3)))
_FIXED_W = Tensor(np.random.default_rng(2).normal(size=(4, 4, 8, 8)))
_FIXED_B = Tensor(np.random.default_rng(3).normal(size=(4, 4, 8, 8)))
_FIXED_POS = Tensor(np.random.default_rng(4).uniform(0.5, 2.0, size=(4, 4, 8, 8)))
_FIXED_C = Tensor(np.random.default_rng(5).normal(size=(4, 4, 1, 1)))
_FIXED_UP = Tensor(np.random.default_rng(6).normal(size=(4, 4, 13, 11)))
_FIXED_DOWN = Tensor(np.random.default_rng(7).normal(size=(4, 4, 3, 5)))
_FIXED_CAT = Tensor(np.random.default_rng(8).normal(size=(4, 8, 8, 8)))
_FIXED_SLC = Tensor(np.random.default_rng(9).normal(size=(4, 2, 8, 8)))
_FIXED_N = Tensor(np.random.default_rng(10).normal(size=(4, 1, 1, 1)))


def test_grad_check_kernel_side_of_conv():
    x = rand(2, 3, 6, 6)

    def f(k):
        return sum_all(relu(conv2d(x, k, padding=1)))

    assert grad_check(f, rand(2, 3, 3, 3), eps=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# misc contracts


def test_tensor_must_be_4d():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((3, 3)))


def test_debug_finite_mode():
    nm.set_debug_finite(True)
    try:
        with pytest.raises(ContractError):
            Tensor(np.array([[[[np.inf]]]]))
    finally:
        nm.set_debug_finite(False)
    Tensor(np.array([[[[np.inf]]]]))  # allowed when the debug mode is off


def test_parameter_is_grad_leaf():
    p = nm.Parameter("w", np.zeros((1, 2, 3, 3)))
    assert p.tensor.requires_grad
    assert p.grad.shape == (1, 2, 3, 3)
    assert "w" in repr(p)


def test_ops_outside_tape_record_nothing():
    x = Tensor(RNG.normal(size=(1, 1, 4, 4)), requires_grad=True)
    y = sum_all(mul(x, x))
    assert y.data.size == 1  # pure call, nothing to backward through
