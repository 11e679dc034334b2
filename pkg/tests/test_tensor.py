import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusion_uie import tensor as T
from fusion_uie.gradcheck import relative_error
from fusion_uie.tensor import Parameter, ShapeError, Tensor

from oracles import avg_pool_sum, conv2d_loops, linear_sum, pool_pair_loops

RNG = np.random.default_rng(1234)


# -- conv2d -------------------------------------------------------------------

def test_conv_identity_kernel():
    x = RNG.standard_normal((1, 3, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x)


def test_conv_zero_kernel():
    x = RNG.standard_normal((2, 5, 4))
    out = T.conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, np.zeros((3, 5, 4)))


def test_conv_matches_loop_oracle():
    x = RNG.standard_normal((2, 5, 5))
    w = RNG.standard_normal((3, 2, 3, 3))
    b = RNG.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b))
    assert np.max(np.abs(out.data - conv2d_loops(x, w, b))) <= 1e-12


def test_conv_rejects_even_kernel_and_bad_shapes():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(ShapeError, match="channel"):
        T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from([1, 3, 5]))
def test_conv_linearity(seed, alpha, beta, k):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 6, 5))
    w = Tensor(rng.standard_normal((3, 2, k, k)))
    lhs = T.conv2d(Tensor(alpha * x + beta * y), w).data
    rhs = alpha * T.conv2d(Tensor(x), w).data + beta * T.conv2d(Tensor(y), w).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_pool_of_ones_conv_is_channel_sum_of_pools():
    x = RNG.standard_normal((4, 6, 7))
    ones = Tensor(np.ones((1, 4, 1, 1)))
    lhs = T.global_avg_pool(T.conv2d(Tensor(x), ones)).data
    rhs = T.global_avg_pool(Tensor(x)).data.sum()
    assert abs(lhs[0] - rhs) <= 1e-12


# -- linear / pooling -----------------------------------------------------------

def test_linear_examples():
    x = RNG.standard_normal(3)
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    b = np.array([0.5, -2.0])
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.zeros((2, 3))), Tensor(b)).data, b)
    w = RNG.standard_normal((2, 3))
    out = T.linear(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.max(np.abs(out - linear_sum(x, w, b))) <= 1e-12
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.zeros(4)), Tensor(w))


def test_global_avg_pool():
    assert np.allclose(T.global_avg_pool(Tensor(np.full((2, 3, 3), 0.7))).data, [0.7, 0.7], rtol=0, atol=1e-15)
    assert T.global_avg_pool(Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))).data[0] == 1.5
    x = RNG.standard_normal((4, 7, 5))
    assert np.max(np.abs(T.global_avg_pool(Tensor(x)).data - avg_pool_sum(x))) <= 1e-12


def test_spatial_pool_pair():
    x = RNG.standard_normal((1, 3, 4))
    out = T.spatial_pool_pair(Tensor(x)).data
    assert np.array_equal(out[0], x[0]) and np.array_equal(out[1], x[0])
    px = np.array([1.0, 3.0]).reshape(2, 1, 1)
    out = T.spatial_pool_pair(Tensor(px)).data
    assert out[0, 0, 0] == 2.0 and out[1, 0, 0] == 3.0
    x = RNG.standard_normal((5, 4, 4))
    assert np.max(np.abs(T.spatial_pool_pair(Tensor(x)).data - pool_pair_loops(x))) <= 1e-12


# -- activations ---------------------------------------------------------------

def test_activation_examples():
    assert T.relu(Tensor(-1.0)).item() == 0.0
    assert T.relu(Tensor(2.0)).item() == 2.0
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.prelu(Tensor(-2.0), Tensor(np.array([0.25]))).data.item() == -0.5


def test_sigmoid_strictly_inside_unit_interval():
    s = T.sigmoid(Tensor(np.array([-30.0, -5.0, 0.0, 5.0, 30.0]))).data
    assert np.all(s > 0) and np.all(s < 1)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    T.backward(T.sum_(T.relu(x)))
    assert np.array_equal(x.grad, np.zeros(3))


# -- backward --------------------------------------------------------------------

def test_backward_linear_case():
    x = RNG.standard_normal(5)
    w = Parameter(RNG.standard_normal(5))
    T.backward(T.sum_(w * Tensor(x)))
    assert np.array_equal(w.grad, x)


def test_backward_sigmoid_chain_rule():
    w = Parameter(np.array(0.3))
    c = 1.7
    T.backward(T.sigmoid(w) * c)
    s = 1 / (1 + np.exp(-0.3))
    assert abs(w.grad - s * (1 - s) * c) <= 1e-15


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        T.backward(Parameter(np.zeros(3)) * 2.0)


def test_backward_accumulates_and_zero_fills_unreached():
    w = Parameter(np.array([1.0, 2.0]))
    unused = Parameter(np.ones(4))
    T.backward(T.sum_(w * 3.0), [w, unused])
    T.backward(T.sum_(w * 3.0), [w, unused])
    assert np.array_equal(w.grad, [6.0, 6.0])
    assert np.array_equal(unused.grad, np.zeros(4))


def test_no_grad_records_nothing():
    w = Parameter(np.ones(2))
    with T.no_grad():
        y = w * 2.0
    assert not y.requires_grad and y._parents == ()


# -- per-op gradient property ---------------------------------------------------

def _numeric_grad(f, x, probe, h=1e-5):
    # difference the outputs before contracting with the probe, so roundoff
    # scales with the touched entries rather than the whole sum
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = np.sum((f(Tensor(xp)).data - f(Tensor(xm)).data) * probe) / (2 * h)
    return g


def _away_from_kinks(x, margin=1e-3):
    # keep ReLU/abs/max inputs well clear of their non-differentiable points
    return np.where(np.abs(x) < margin, np.where(x >= 0, margin, -margin), x)


def _ops(rng):
    w = rng.standard_normal((2, 3, 3, 3))
    lw = rng.standard_normal((4, 12))
    slope = rng.standard_normal(1)
    other = rng.uniform(0.5, 2.0, size=(3, 2, 1))
    ker = rng.standard_normal((3, 3))
    return {
        "add": lambda t: T.add(t, Tensor(other)),
        "mul": lambda t: T.mul(t, Tensor(other)),
        "div": lambda t: T.div(t, Tensor(other)),
        "div_denominator": lambda t: T.div(Tensor(other), T.add(T.square(t), 1.0)),
        "sqrt": lambda t: T.sqrt(T.add(T.square(t), 0.5)),
        "square": T.square,
        "abs": T.abs_,
        "relu": T.relu,
        "prelu": lambda t: T.prelu(t, Tensor(slope)),
        "sigmoid": T.sigmoid,
        "clamp_min": lambda t: T.clamp_min(t, 0.0),
        "sum_axis": lambda t: T.sum_(t, axis=1),
        "mean_keepdims": lambda t: T.mean(t, axis=(1, 2), keepdims=True),
        "reshape": lambda t: T.reshape(t, (6, 2)),
        "getitem": lambda t: t[1:, :, 1],
        "concat": lambda t: T.concat([t, T.square(t)], axis=0),
        "broadcast_to": lambda t: T.broadcast_to(T.mean(t, axis=0, keepdims=True), (4, 2, 2)),
        "conv2d": lambda t: T.conv2d(t, Tensor(w)),
        "linear": lambda t: T.linear(T.reshape(t, (12,)), Tensor(lw)),
        "global_avg_pool": T.global_avg_pool,
        "spatial_pool_pair": T.spatial_pool_pair,
        "depthwise_conv2d": lambda t: T.depthwise_conv2d(t, ker),
    }


OP_NAMES = list(_ops(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OP_NAMES)
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_op_gradient_matches_finite_difference(op, seed):
    rng = np.random.default_rng(seed)
    f = _ops(rng)[op]
    x = _away_from_kinks(rng.standard_normal((3, 2, 2)))
    if op == "spatial_pool_pair":
        x = x + np.arange(3).reshape(3, 1, 1) * 0.5  # no ties in the channel max
    probe = rng.standard_normal(f(Tensor(x)).shape)
    p = Parameter(x.copy())
    T.backward(T.sum_(f(p) * Tensor(probe)))
    num = _numeric_grad(f, x, probe)
    assert relative_error(p.grad, num).max() <= 1e-6


# -- finiteness fuzz --------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-6, 3))
def test_ops_stay_finite(seed, log_mag):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 2)) * 10.0 ** log_mag
    for name, f in _ops(rng).items():
        p = Parameter(x.copy())
        y = f(p)
        assert np.isfinite(y.data).all(), name
        T.backward(T.sum_(y))
        assert np.isfinite(p.grad).all(), name


def test_rectifiers_propagate_nan():
    # zeroing a NaN would hide it from the model's finiteness checks
    x = Tensor(np.array([np.nan, -1.0, 2.0]))
    for out in (T.relu(x), T.clamp_min(x, 0.0)):
        assert np.isnan(out.data[0]) and out.data[1] == 0.0 and out.data[2] == 2.0
