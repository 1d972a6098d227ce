import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from catrans import tensor as T
from catrans.tensor import NonFiniteError, ShapeError, Tensor, grad_check

import oracles

dims = st.integers(1, 6)


def rand(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


# ---------------------------------------------------------------- forward oracles

@settings(max_examples=30, deadline=None)
@given(m=dims, k=dims, n=dims, seed=st.integers(0, 2 ** 16))
def test_matmul_matches_loops(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    assert oracles.rel_err(T.matmul(Tensor(a), Tensor(b)).data, oracles.matmul(a, b)) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


@settings(max_examples=50, deadline=None)
@given(m=dims, n=dims, seed=st.integers(0, 2 ** 16))
def test_softmax_rows_stochastic_for_large_inputs(m, n, seed):
    x = np.random.default_rng(seed).uniform(-50, 50, size=(m, n))
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    assert oracles.rel_err(y, oracles.softmax_rows(x)) < 1e-12


def test_softmax_single_column_is_one():
    np.testing.assert_array_equal(T.softmax_rows(Tensor([[3.0], [-7.0]])).data, [[1.0], [1.0]])


def test_layer_norm_matches_loops():
    rng = np.random.default_rng(1)
    x, g, b = rng.normal(size=(5, 7)), rng.normal(size=7), rng.normal(size=7)
    out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    assert oracles.rel_err(out, oracles.layer_norm(x, g, b)) < 1e-12


def test_layer_norm_single_channel_gives_beta():
    out = T.layer_norm(Tensor([[4.0], [-2.0]]), Tensor([3.0]), Tensor([0.5])).data
    np.testing.assert_allclose(out, [[0.5], [0.5]])


def test_channel_norm_normalises_each_channel():
    x = np.random.default_rng(2).normal(3, 2, size=(4, 5, 3))
    y = T.channel_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0).data
    np.testing.assert_allclose(y.mean(axis=(0, 1)), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=(0, 1)), 1, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("h,w", [(4, 4), (5, 3), (1, 1), (7, 6)])
def test_conv_matches_loops(stride, h, w):
    rng = np.random.default_rng(h * 10 + w + stride)
    x, wt, b = rng.normal(size=(h, w, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    out = T.conv2d_3x3(Tensor(x), Tensor(wt), Tensor(b), stride).data
    ref = oracles.conv3x3(x, wt, b, stride)
    assert out.shape == ref.shape == ((h - 1) // stride + 1, (w - 1) // stride + 1, 3)
    assert oracles.rel_err(out, ref) < 1e-12


def test_conv_rejects_bad_stride_and_channels():
    x = Tensor(np.zeros((4, 4, 2)))
    with pytest.raises(ValueError):
        T.conv2d_3x3(x, Tensor(np.zeros((3, 3, 2, 1))), Tensor(np.zeros(1)), stride=3)
    with pytest.raises(ShapeError):
        T.conv2d_3x3(x, Tensor(np.zeros((3, 3, 5, 1))), Tensor(np.zeros(1)))


def test_bilinear_resize_matches_1d_weights():
    x = np.random.default_rng(3).normal(size=(3, 4, 2))
    y = T.bilinear_resize(Tensor(x), 5, 8).data
    ref = np.zeros((5, 8, 2))
    for i in range(5):
        for j in range(8):
            for a, wa in oracles.bilinear_1d(3, 5, i).items():
                for b, wb in oracles.bilinear_1d(4, 8, j).items():
                    ref[i, j] += wa * wb * x[a, b]
    assert oracles.rel_err(y, ref) < 1e-12


def test_bilinear_resize_preserves_constants_and_identity():
    c = np.full((3, 3, 1), 2.5)
    np.testing.assert_allclose(T.bilinear_resize(Tensor(c), 7, 5).data, 2.5)
    x = np.random.default_rng(4).normal(size=(4, 4, 2))
    np.testing.assert_allclose(T.bilinear_resize(Tensor(x), 4, 4).data, x)


def test_flatten_unflatten_identity():
    x = np.arange(24.0).reshape(2, 3, 4)
    t = T.flatten_tokens(Tensor(x))
    assert t.shape == (6, 4)
    np.testing.assert_array_equal(t.data[4], x[1, 1])  # row-major token order
    np.testing.assert_array_equal(T.unflatten_tokens(t, 2, 3).data, x)


def test_cross_entropy_uniform_logits_is_weighted_ln2():
    t = np.zeros((4, 4))
    t[:2] = 1
    loss = T.weighted_cross_entropy(Tensor(np.zeros((4, 4, 2))), t, 1.0, 4.0).item()
    assert loss == pytest.approx((0.5 * 1 + 0.5 * 4) * math.log(2))


def test_cross_entropy_rejects_non_binary_target():
    with pytest.raises(ValueError):
        T.weighted_cross_entropy(Tensor(np.zeros((2, 2, 2))), np.full((2, 2), 0.5))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError):
        T.mul(Tensor([np.inf]), Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        T.softmax_rows(Tensor([[np.nan, 1.0]]))


def test_no_grad_records_nothing():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(a, a)
    assert y._backward is None and not y._parents
    assert T.grad_enabled()


# ---------------------------------------------------------------- gradients

def test_grad_check_quadratic_is_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    assert grad_check(lambda: T.sum_all(T.mul(x, x)), [x]) < 1e-9


def test_grad_check_rejects_32_bit_and_non_scalar():
    x32 = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: T.sum_all(x32), [x32])
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        grad_check(lambda: T.mul(x, x), [x])


OPS = {
    "matmul": lambda r: ([rand(r, 3, 4), rand(r, 4, 2)], lambda a, b: T.matmul(a, b)),
    "transpose": lambda r: ([rand(r, 3, 4)], T.transpose),
    "add_broadcast": lambda r: ([rand(r, 3, 4), rand(r, 4)], T.add),
    "mul": lambda r: ([rand(r, 3, 4), rand(r, 3, 4)], T.mul),
    "scale": lambda r: ([rand(r, 2, 5)], lambda a: T.scale(a, -1.7)),
    "relu": lambda r: ([Tensor(r.choice([-1, 1], size=(3, 4)) * r.uniform(0.1, 2, size=(3, 4)),
                               requires_grad=True)], T.relu),
    "softmax_rows": lambda r: ([rand(r, 3, 5, scale=2.0)], T.softmax_rows),
    "layer_norm": lambda r: ([rand(r, 4, 5), rand(r, 5), rand(r, 5)], T.layer_norm),
    "channel_norm": lambda r: ([rand(r, 3, 3, 2), rand(r, 2), rand(r, 2)], T.channel_norm),
    "conv_s1": lambda r: ([rand(r, 4, 5, 2), rand(r, 3, 3, 2, 3), rand(r, 3)],
                          lambda x, w, b: T.conv2d_3x3(x, w, b, 1)),
    "conv_s2": lambda r: ([rand(r, 5, 4, 2), rand(r, 3, 3, 2, 2), rand(r, 2)],
                          lambda x, w, b: T.conv2d_3x3(x, w, b, 2)),
    "bilinear": lambda r: ([rand(r, 3, 2, 2)], lambda x: T.bilinear_resize(x, 7, 5)),
    "concat_channels": lambda r: ([rand(r, 3, 2), rand(r, 3, 4)], lambda a, b: T.concat_channels([a, b])),
    "concat_tokens": lambda r: ([rand(r, 2, 3), rand(r, 4, 3)], lambda a, b: T.concat_tokens([a, b])),
    "take_channels": lambda r: ([rand(r, 3, 6)], lambda a: T.take_channels(a, 1, 4)),
    "reshape_tokens": lambda r: ([rand(r, 2, 3, 4)], lambda x: T.unflatten_tokens(T.flatten_tokens(x), 3, 2)),
    "mean_all": lambda r: ([rand(r, 3, 4)], T.mean_all),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_20_trials(name):
    for trial in range(20):
        rng = np.random.default_rng(trial)
        inputs, fn = OPS[name](rng)
        probe_rng = np.random.default_rng(100 + trial)
        # a random linear functional, so every output coordinate matters
        w = Tensor(probe_rng.normal(size=fn(*inputs).shape))
        err = grad_check(lambda: T.sum_all(T.mul(fn(*inputs), w)), inputs)
        assert err < 1e-4, f"{name} trial {trial}: {err}"


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    logits = rand(rng, 4, 4, 2)
    target = (rng.random((4, 4)) > 0.6).astype(float)
    assert grad_check(lambda: T.weighted_cross_entropy(logits, target, 1.0, 4.0), [logits]) < 1e-6


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    y = T.mul(x, x)
    z = T.sum_all(T.add(y, T.mul(y, x)))  # x^2 + x^3
    z.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3 * x.data ** 2)


def test_deep_chain_backward_is_iterative():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x
    for _ in range(3000):
        y = T.scale(y, 1.0)
    T.sum_all(y).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_five_point_stencil_is_exact_on_quartics():
    x = Tensor(np.array([0.7, -1.3]), requires_grad=True)
    f = lambda: T.sum_all(T.mul(T.mul(x, x), T.mul(x, x)))
    assert grad_check(f, [x], eps=1e-2, order=4) < 1e-10
    assert grad_check(f, [x], eps=1e-2) > 1e-5


def test_kink_guard_shrinks_step_across_relu():
    x = Tensor(np.array([2e-4, -0.5]), requires_grad=True)
    f = lambda: T.sum_all(T.relu(x))
    # a 1e-3 step straddles the kink at 0 and halves the slope estimate
    assert grad_check(f, [x], eps=1e-3) > 0.1
    assert grad_check(f, [x], eps=1e-3, kink_guard=True) < 1e-9


def test_record_kinks_logs_relu_signs():
    with T.record_kinks() as log:
        T.relu(Tensor([-1.0, 2.0]))
    np.testing.assert_array_equal(log[0], [False, True])
    with pytest.raises(ValueError):
        grad_check(lambda: T.sum_all(T.relu(Tensor([1.0]))), [], order=3)
