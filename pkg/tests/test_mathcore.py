import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surgrl.mathcore import (
    AdamConfig, NonFiniteError, ParamStore, ShapeError, adam_step,
    conv2d_backward, conv2d_forward, conv2d_out_size, dense_backward,
    dense_forward, finite_diff_check,
)


# ---------------------------------------------------------------------------
# dense layer
# ---------------------------------------------------------------------------

def test_dense_identity_weights():
    out = dense_forward([[1.0, 2.0]], [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    assert np.array_equal(out, [[1.0, 2.0]])


def test_dense_hand_multiply():
    out = dense_forward([[1.0, 1.0]], [[2.0, 3.0], [4.0, 5.0]], [1.0, 1.0])
    assert np.array_equal(out, [[7.0, 9.0]])


def test_dense_zero_input_passes_bias():
    out = dense_forward([[0.0, 0.0]], [[2.0, 3.0], [4.0, 5.0]], [5.0, -5.0])
    assert np.array_equal(out, [[5.0, -5.0]])


def test_dense_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        dense_forward([[1.0, 2.0, 3.0]], [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    with pytest.raises(ShapeError):
        dense_forward([[1.0, 2.0]], [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0, 0.0])


def test_dense_backward_bias_is_column_sum():
    _, _, gb = dense_backward([[1.0, 1.0]], [[1.0, 2.0]],
                              [[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(gb, [1.0, 1.0])


def test_dense_backward_scalar_chain_rule():
    grad_out = np.array([[2.5]])
    gx, gw, _ = dense_backward(grad_out, np.array([[3.0]]), np.array([[2.0]]))
    assert gw[0, 0] == 2.5 * 3.0
    assert gx[0, 0] == 2.5 * 2.0


def test_dense_backward_zero_grad():
    gx, gw, gb = dense_backward(np.zeros((2, 3)), np.ones((2, 4)),
                                np.ones((4, 3)))
    assert not gx.any() and not gw.any() and not gb.any()


@settings(max_examples=30)
@given(scale=st.floats(-5, 5), seed=st.integers(0, 10_000))
def test_dense_linearity_with_zero_bias(scale, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = np.zeros(2)
    assert np.allclose(dense_forward(scale * x, w, b),
                       scale * dense_forward(x, w, b))


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_dense_nonfinite_output_rejected():
    with pytest.raises(NonFiniteError):
        dense_forward([[1e308, 1e308]], [[1e308, 0.0], [1e308, 0.0]], [0.0, 0.0])


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def test_conv_zero_kernel_zero_output():
    x = np.ones((1, 1, 3, 3))
    out = conv2d_forward(x, np.zeros((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 2, 2)
    assert not out.any()


def test_conv_delta_kernel_samples_input():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    kern = np.zeros((1, 1, 3, 3))
    kern[0, 0, 1, 1] = 1.0
    out = conv2d_forward(x, kern, np.zeros(1))
    # center tap with stride 2, pad 1 reads x[2i, 2j]
    assert np.array_equal(out[0, 0], [[x[0, 0, 0, 0], x[0, 0, 0, 2]],
                                      [x[0, 0, 2, 0], x[0, 0, 2, 2]]])


def test_conv_bias_only():
    out = conv2d_forward(np.zeros((2, 3, 5, 5)), np.zeros((4, 3, 3, 3)),
                         np.array([1.0, -2.0, 0.5, 3.0]))
    assert out.shape == (2, 4, 3, 3)
    for f, c in enumerate([1.0, -2.0, 0.5, 3.0]):
        assert np.all(out[:, f] == c)


def test_conv_output_size_is_half_rounded_up():
    for size in (3, 4, 5, 12, 24):
        assert conv2d_out_size(size, 2) == -(-size // 2)


def test_conv_channel_mismatch_rejected():
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)),
                       np.zeros(1))


@pytest.mark.parametrize("batch,chans,filters,size", [(2, 3, 4, 6), (1, 2, 3, 5)])
def test_conv_backward_matches_finite_differences(batch, chans, filters, size):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(batch, chans, size, size))
    k = rng.normal(size=(filters, chans, 3, 3))
    b = rng.normal(size=filters)
    weight = rng.normal(size=conv2d_forward(x, k, b).shape)

    def loss(x_, k_, b_):
        return float((conv2d_forward(x_, k_, b_) * weight).sum())

    gx, gk, gb = conv2d_backward(weight, x, k)
    h = 1e-6
    for arr, grad in ((x, gx), (k, gk), (b, gb)):
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for idx in rng.choice(flat.size, size=min(12, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss(x, k, b)
            flat[idx] = orig - h
            down = loss(x, k, b)
            flat[idx] = orig
            assert (up - down) / (2 * h) == pytest.approx(gflat[idx], rel=1e-5,
                                                          abs=1e-7)


def test_conv_backward_skip_input_gradient():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 6, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    g = rng.normal(size=(2, 4, 3, 3))
    gx, gk, gb = conv2d_backward(g, x, k)
    none_gx, gk2, gb2 = conv2d_backward(g, x, k, need_grad_input=False)
    assert none_gx is None
    assert np.array_equal(gk, gk2) and np.array_equal(gb, gb2)
    assert gx.shape == x.shape


# ---------------------------------------------------------------------------
# ParamStore / Adam
# ---------------------------------------------------------------------------

def _store_with(name="w", value=(1.0,)):
    store = ParamStore()
    store.add(name, np.asarray(value, dtype=np.float64))
    return store


def test_adam_first_step_hand_derived():
    store = _store_with(value=[1.0])
    store["w"].grad[:] = 1.0
    adam_step(store, AdamConfig(learning_rate=0.001))
    expected = 1.0 - 0.001 / (1.0 + 1e-8)
    assert store.value("w")[0] == pytest.approx(expected, abs=1e-15)


def test_adam_zero_gradient_leaves_parameter():
    store = _store_with(value=[2.5])
    adam_step(store, AdamConfig())
    assert store.value("w")[0] == 2.5


def test_adam_is_deterministic():
    def run():
        store = _store_with(value=[0.3, -0.7])
        for step in range(5):
            store["w"].grad[:] = [0.1 * (step + 1), -0.2]
            adam_step(store, AdamConfig())
        return store.value("w").copy()

    assert np.array_equal(run(), run())


def test_adam_zeroes_gradients_and_keeps_shapes():
    store = ParamStore()
    store.add("a", np.ones((3, 2)))
    store.add("b", np.ones(4))
    store["a"].grad[:] = 1.0
    store["b"].grad[:] = -1.0
    adam_step(store, AdamConfig())
    assert store.value("a").shape == (3, 2)
    assert store.value("b").shape == (4,)
    assert not store["a"].grad.any() and not store["b"].grad.any()


def test_adam_rejects_nonfinite_gradient_by_name():
    store = ParamStore()
    store.add("fine", np.ones(2))
    store.add("broken", np.ones(2))
    store["broken"].grad[:] = [np.nan, 0.0]
    before = store.value("fine").copy()
    with pytest.raises(NonFiniteError, match="broken"):
        adam_step(store, AdamConfig())
    assert np.array_equal(store.value("fine"), before)


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)


def test_param_store_insertion_order_and_duplicates():
    store = ParamStore()
    store.add("z", np.zeros(1))
    store.add("a", np.zeros(1))
    assert store.names() == ["z", "a"]
    with pytest.raises(ValueError):
        store.add("z", np.zeros(1))


# ---------------------------------------------------------------------------
# finite-difference checker
# ---------------------------------------------------------------------------

def test_finite_diff_quadratic_is_exact():
    store = _store_with(value=[3.0])
    store["w"].grad[:] = 6.0  # d/dw w^2 at w=3

    def loss():
        return float(store.value("w")[0] ** 2)

    report = finite_diff_check(loss, store, samples=1)
    assert report.passed
    assert report.max_rel_error < 1e-9


def test_finite_diff_constant_loss():
    store = _store_with(value=[4.0])

    report = finite_diff_check(lambda: 1.25, store, samples=1)
    assert report.passed


def test_finite_diff_flags_wrong_gradient_with_location():
    store = _store_with(name="layer.w", value=[3.0])
    store["layer.w"].grad[:] = -6.0  # sign flip

    report = finite_diff_check(lambda: float(store.value("layer.w")[0] ** 2),
                               store, samples=1)
    assert not report.passed
    assert report.worst_param == "layer.w"
    assert report.worst_index == 0
    assert report.failures
    assert "layer.w" in report.summary()


def test_finite_diff_restores_parameters():
    store = _store_with(value=[1.5, -2.5])
    store["w"].grad[:] = [3.0, -5.0]  # d/dw sum(w^2)
    before = store.value("w").copy()
    finite_diff_check(lambda: float((store.value("w") ** 2).sum()), store,
                      samples=2)
    assert np.array_equal(store.value("w"), before)
