import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from shoeprint_lab import tensor as T
from conftest import max_rel_err, naive_conv, numeric_grad


# ---------------------------------------------------------------- conv2d

def test_conv_valid_example():
    x = np.arange(1, 10, dtype=float).reshape(1, 3, 3, 1)
    k = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 2, 1, 1)
    out, _ = T.conv2d(x, k, T.ConvSpec(1, 2, 1, "valid"))
    assert out[0, :, :, 0].tolist() == [[6, 8], [12, 14]]


def test_conv_identity_kernel_same_padding(rng):
    x = rng.normal(size=(2, 7, 5, 1))
    k = np.zeros((3, 3, 1, 1))
    k[1, 1] = 1.0
    out, _ = T.conv2d(x, k, T.ConvSpec(1, 3))
    assert np.array_equal(out, x)


def test_conv_zero_input(rng):
    out, _ = T.conv2d(np.zeros((1, 6, 6, 3)), rng.normal(size=(3, 3, 3, 4)), T.ConvSpec(4, 3))
    assert not out.any()


@pytest.mark.parametrize("ks,stride,padding", [(3, 1, "same"), (3, 2, "same"), (2, 1, "valid"),
                                               (3, 2, "valid"), (1, 1, "same"), (5, 1, "same")])
def test_conv_matches_sliding_window_oracle(rng, ks, stride, padding):
    x = rng.normal(size=(2, 9, 8, 3))
    k = rng.normal(size=(ks, ks, 3, 4))
    spec = T.ConvSpec(4, ks, stride, padding)
    out, _ = T.conv2d(x, k, spec)
    ref = naive_conv(x, k, stride, spec.pad())
    assert out.shape == ref.shape == (2, *T.conv_output_hw(9, 8, spec), 4)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_shape_errors(rng):
    with pytest.raises(T.ShapeError, match="channels"):
        T.conv2d(rng.normal(size=(1, 5, 5, 2)), rng.normal(size=(3, 3, 3, 1)), T.ConvSpec(1, 3))
    with pytest.raises(T.ShapeError, match="kernel shape"):
        T.conv2d(rng.normal(size=(1, 5, 5, 2)), rng.normal(size=(3, 3, 2, 2)), T.ConvSpec(1, 3))
    with pytest.raises(ValueError):
        T.ConvSpec(1, 2, padding="same")


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
def test_conv_linear_in_input_and_kernel(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 2, 6, 6, 2))
    k, q = r.normal(size=(2, 3, 3, 2, 3))
    spec = T.ConvSpec(3, 3)
    conv = lambda u, w: T.conv2d(u, w, spec)[0]
    lhs = conv(a * x + b * y, k)
    rhs = a * conv(x, k) + b * conv(y, k)
    scale = max(1.0, np.abs(rhs).max())
    assert np.abs(lhs - rhs).max() <= 1e-9 * scale
    lhs = conv(x, a * k + b * q)
    rhs = a * conv(x, k) + b * conv(x, q)
    assert np.abs(lhs - rhs).max() <= 1e-9 * max(1.0, np.abs(rhs).max())


@pytest.mark.parametrize("ks,stride,padding", [(3, 1, "same"), (3, 2, "same"), (1, 1, "same"), (2, 2, "valid")])
def test_conv_backward_matches_finite_differences(rng, ks, stride, padding):
    x = rng.normal(size=(2, 6, 5, 2))
    k = rng.normal(size=(ks, ks, 2, 3))
    spec = T.ConvSpec(3, ks, stride, padding)
    out, cache = T.conv2d(x, k, spec)
    w = rng.normal(size=out.shape)
    dx, dk = T.conv2d_backward(w, cache)
    f = lambda: float(np.sum(T.conv2d(x, k, spec)[0] * w))
    assert max_rel_err(dx, numeric_grad(f, x)) < 1e-6
    assert max_rel_err(dk, numeric_grad(f, k)) < 1e-6


# ---------------------------------------------------------------- batchnorm

def test_batchnorm_constant_input_gives_beta():
    st_ = T.BatchNormState(np.array([2.0]), np.array([0.7]), np.zeros(1), np.ones(1), eps_bn=1e-5)
    out, _ = T.batchnorm(np.full((4, 3, 3, 1), 5.0), st_, "train")
    assert np.abs(out - 0.7).max() <= 1e-6


def test_batchnorm_two_values_to_plus_minus_one():
    st_ = T.BatchNormState(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), eps_bn=0.0)
    out, _ = T.batchnorm(np.array([0.0, 2.0]).reshape(2, 1), st_, "train")
    assert out.ravel().tolist() == [-1.0, 1.0]


def test_batchnorm_standardized_input_is_fixed(rng):
    x = rng.normal(size=(64, 3))
    x = (x - x.mean(0)) / x.std(0)
    out, _ = T.batchnorm(x, T.BatchNormState.fresh(3, eps_bn=0.0), "train")
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_batchnorm_batch_of_one_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        T.batchnorm(np.ones((1, 2, 2, 1)), T.BatchNormState.fresh(1), "train")
    out, _ = T.batchnorm(np.ones((1, 2, 2, 1)), T.BatchNormState.fresh(1), "infer")
    assert out.shape == (1, 2, 2, 1)


def test_batchnorm_running_stats_and_infer(rng):
    st_ = T.BatchNormState.fresh(2, momentum=0.9)
    x = rng.normal(3.0, 2.0, size=(10, 4, 4, 2))
    T.batchnorm(x, st_, "train")
    mu = x.reshape(-1, 2).mean(0)
    var = x.reshape(-1, 2).var(0)
    np.testing.assert_allclose(st_.running_mean, 0.1 * mu)
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * var)
    out, _ = T.batchnorm(x, st_, "infer")
    np.testing.assert_allclose(out, (x - st_.running_mean) / np.sqrt(st_.running_var + 1e-5))


def test_batchnorm_state_validation():
    with pytest.raises(T.ShapeError):
        T.BatchNormState(np.ones(2), np.zeros(3), np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        T.BatchNormState(np.ones(1), np.zeros(1), np.zeros(1), -np.ones(1))
    with pytest.raises(ValueError):
        T.BatchNormState(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), momentum=1.0)


@given(seed=st.integers(0, 2 ** 16), shift=st.floats(-50, 50), scale=st.floats(0.1, 20))
def test_batchnorm_train_output_standardized(seed, shift, scale):
    x = np.random.default_rng(seed).normal(shift, scale, size=(6, 3, 3, 2))
    out, _ = T.batchnorm(x, T.BatchNormState.fresh(2, eps_bn=1e-9), "train")
    flat = out.reshape(-1, 2)
    assert np.all(np.abs(flat.mean(0)) < 1e-6)
    assert np.all(np.abs(flat.var(0) - 1.0) < 1e-4)


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_batchnorm_backward_matches_finite_differences(rng, mode):
    x = rng.normal(size=(4, 3, 3, 2))
    gamma, beta = rng.normal(size=2), rng.normal(size=2)
    w = rng.normal(size=x.shape)

    def f():
        s = T.BatchNormState(gamma, beta, np.zeros(2), np.ones(2) * 1.5)
        return float(np.sum(T.batchnorm(x, s, mode)[0] * w))

    s = T.BatchNormState(gamma, beta, np.zeros(2), np.ones(2) * 1.5)
    _, cache = T.batchnorm(x, s, mode)
    dx, dg, db = T.batchnorm_backward(w, cache)
    assert max_rel_err(dx, numeric_grad(f, x)) < 1e-5
    assert max_rel_err(dg, numeric_grad(f, gamma)) < 1e-6
    assert max_rel_err(db, numeric_grad(f, beta)) < 1e-6


# ---------------------------------------------------------------- relu / sigmoid

@pytest.mark.parametrize("x,expected", [([-1, -5, 0], [0, 0, 0]), ([1, 2, 3], [1, 2, 3]),
                                        ([-2, 0.5, 7], [0, 0.5, 7])])
def test_relu_examples(x, expected):
    assert T.relu(np.array(x, dtype=float))[0].tolist() == expected


def test_relu_backward_subgradient_zero_at_zero():
    _, mask = T.relu(np.array([-1.0, 0.0, 2.0]))
    assert T.relu_backward(np.ones(3), mask).tolist() == [0.0, 0.0, 1.0]


def test_sigmoid_backward(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=x.shape)
    out, c = T.sigmoid(x)
    assert np.all((out > 0) & (out < 1))
    f = lambda: float(np.sum(T.sigmoid(x)[0] * w))
    assert max_rel_err(T.sigmoid_backward(w, c), numeric_grad(f, x)) < 1e-7


# ---------------------------------------------------------------- maxpool

def test_maxpool_examples():
    out, _ = T.maxpool2d(np.array([[1.0, 2], [3, 4]]).reshape(1, 2, 2, 1), 2, 2)
    assert out.ravel().tolist() == [4.0]
    out, _ = T.maxpool2d(np.full((1, 4, 4, 1), 3.0))
    assert np.all(out == 3.0)
    grid = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    out, _ = T.maxpool2d(grid)
    assert out[0, :, :, 0].tolist() == [[5, 7], [13, 15]]


def test_maxpool_routes_to_first_argmax_on_ties():
    x = np.ones((1, 2, 2, 1))
    out, cache = T.maxpool2d(x)
    dx = T.maxpool2d_backward(np.ones_like(out), cache)
    assert dx[0, :, :, 0].tolist() == [[1, 0], [0, 0]]


def test_maxpool_window_too_large():
    with pytest.raises(T.ShapeError):
        T.maxpool2d(np.ones((1, 1, 4, 1)), 2, 2)


def test_maxpool_backward_matches_finite_differences(rng):
    x = rng.permutation(2 * 6 * 6 * 2).reshape(2, 6, 6, 2).astype(float)  # distinct values, no ties
    w = rng.normal(size=(2, 3, 3, 2))
    _, cache = T.maxpool2d(x)
    f = lambda: float(np.sum(T.maxpool2d(x)[0] * w))
    assert max_rel_err(T.maxpool2d_backward(w, cache), numeric_grad(f, x)) < 1e-5


# ---------------------------------------------------------------- concat

def test_concat_examples(rng):
    a, b = rng.normal(size=(2, 4, 4, 32)), rng.normal(size=(2, 4, 4, 64))
    assert T.concat_channels([a, b])[0].shape[-1] == 96
    assert np.array_equal(T.concat_channels([a])[0], a)
    parts = [rng.normal(size=(1, 2, 2, 8)) for _ in range(3)]
    assert T.concat_channels(parts)[0].shape[-1] == 24
    with pytest.raises(T.ShapeError):
        T.concat_channels([a, rng.normal(size=(2, 3, 4, 1))])


@given(sizes=st.lists(st.integers(1, 5), min_size=1, max_size=4), seed=st.integers(0, 999))
def test_concat_then_slice_recovers_inputs(sizes, seed):
    r = np.random.default_rng(seed)
    parts = [r.normal(size=(2, 3, 3, c)) for c in sizes]
    out, sz = T.concat_channels(parts)
    for p, q in zip(parts, T.concat_channels_backward(out, sz)):
        assert np.array_equal(p, q)


# ---------------------------------------------------------------- dense

def test_dense_examples(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(T.dense(x, np.eye(4), np.zeros(4))[0], x)
    out, _ = T.dense(np.array([[1.0, 2.0]]), np.eye(2), np.array([3.0, 3.0]))
    assert out.tolist() == [[4.0, 5.0]]
    b = rng.normal(size=5)
    assert np.array_equal(T.dense(np.zeros((2, 4)), rng.normal(size=(4, 5)), b)[0], np.tile(b, (2, 1)))
    with pytest.raises(T.ShapeError):
        T.dense(x, np.eye(3), np.zeros(3))


def test_dense_backward_matches_finite_differences(rng):
    x, W, b = rng.normal(size=(3, 2, 2, 1)), rng.normal(size=(4, 3)), rng.normal(size=3)
    w = rng.normal(size=(3, 3))
    _, cache = T.dense(x, W, b)
    dx, dW, db = T.dense_backward(w, cache)
    f = lambda: float(np.sum(T.dense(x, W, b)[0] * w))
    for analytic, param in ((dx, x), (dW, W), (db, b)):
        assert max_rel_err(analytic, numeric_grad(f, param)) < 1e-7


# ---------------------------------------------------------------- dropout

def test_dropout_identities(rng):
    x = rng.normal(size=(5, 6))
    assert np.array_equal(T.dropout(x, 0.0, "train")[0], x)
    assert np.array_equal(T.dropout(x, 0.7, "infer")[0], x)
    with pytest.raises(ValueError):
        T.dropout(x, 1.0)


def test_dropout_statistics_and_determinism():
    n, rate = 10 ** 5, 0.5
    out, _ = T.dropout(np.ones(n), rate, "train", rng_seed=3)
    # each output is 0 or 2, so the mean has sd sqrt(rate / (1 - rate) / n)
    sigma = np.sqrt(rate / (1 - rate) / n)
    assert abs(out.mean() - 1.0) < 3 * sigma
    assert set(np.unique(out)) == {0.0, 2.0}
    assert np.array_equal(out, T.dropout(np.ones(n), rate, "train", rng_seed=3)[0])


def test_dropout_backward_uses_mask(rng):
    x = rng.normal(size=(4, 5))
    out, mask = T.dropout(x, 0.3, "train", 1)
    assert np.array_equal(T.dropout_backward(np.ones_like(x), mask) * x, out)


# ---------------------------------------------------------------- gap / gate

def test_gap_and_gate_backward(rng):
    x = rng.normal(size=(2, 3, 3, 4))
    g = rng.uniform(0.1, 0.9, size=(2, 4))
    w = rng.normal(size=(2, 4))
    _, sh = T.global_avg_pool(x)
    f = lambda: float(np.sum(T.global_avg_pool(x)[0] * w))
    assert max_rel_err(T.global_avg_pool_backward(w, sh), numeric_grad(f, x)) < 1e-7
    w2 = rng.normal(size=x.shape)
    _, c = T.channel_gate(x, g)
    dx, dg = T.channel_gate_backward(w2, c)
    f2 = lambda: float(np.sum(T.channel_gate(x, g)[0] * w2))
    assert max_rel_err(dx, numeric_grad(f2, x)) < 1e-7
    assert max_rel_err(dg, numeric_grad(f2, g)) < 1e-7


# ---------------------------------------------------------------- finite-difference checker

def test_fd_check_quadratic():
    p = np.array([3.0])
    rep = T.finite_difference_check(lambda: float(p[0] ** 2), p, np.array([6.0]), epsilon=1e-4)
    assert rep.n_checked == 1 and rep.max_relative_error < 1e-8
    assert p[0] == 3.0


def test_fd_check_flags_wrong_gradient_and_non_finite():
    p = np.array([3.0])
    rep = T.finite_difference_check(lambda: float(p[0] ** 2), p, np.array([5.0]), epsilon=1e-4)
    assert rep.max_relative_error > 0.05 and rep.worst_index == (0,)
    with pytest.raises(FloatingPointError):
        T.finite_difference_check(lambda: float("nan"), p, np.array([0.0]))
    with pytest.raises(ValueError):
        T.finite_difference_check(lambda: 0.0, p, np.array([0.0]), epsilon=0.0)


def test_fd_check_micro_net(rng):
    """conv -> relu -> dense micro network, gradients w.r.t. kernel and weights."""
    x = rng.normal(size=(3, 5, 5, 1))
    k = rng.normal(size=(3, 3, 1, 2))
    W, b = rng.normal(size=(50, 1)), rng.normal(size=1)
    spec = T.ConvSpec(2, 3)

    def run():
        h, c1 = T.conv2d(x, k, spec)
        r, c2 = T.relu(h)
        o, c3 = T.dense(r, W, b)
        return float(np.sum(o ** 2)), (o, c1, c2, c3)

    _, (o, c1, c2, c3) = run()
    d, dW, _ = T.dense_backward(2 * o, c3)
    _, dk = T.conv2d_backward(T.relu_backward(d, c2), c1)
    mask = lambda: T.conv2d(x, k, spec)[0].__gt__(0).tobytes()
    for param, grad in ((k, dk), (W, dW)):
        rep = T.finite_difference_check(lambda: run()[0], param, grad, 1e-6, smooth=mask)
        assert rep.n_checked > 0 and rep.max_relative_error < 1e-4


@given(x=arrays(np.float64, (2, 3), elements=st.floats(-10, 10)))
def test_ops_deterministic(x):
    assert np.array_equal(T.relu(x)[0], T.relu(x.copy())[0])
    assert np.array_equal(T.dropout(x, 0.4, "train", 9)[0], T.dropout(x.copy(), 0.4, "train", 9)[0])
