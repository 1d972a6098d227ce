import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from catrans.config import ModelConfig
from catrans.tensor import Tensor
from catrans.train import OptimState, adamw_step, lr_at


def test_lr_schedule_examples():
    cfg = ModelConfig(base_lr=5e-5, decay_step=1000, steps=2000)
    assert lr_at(0, cfg) == 5e-5
    assert lr_at(999, cfg) == 5e-5
    assert lr_at(1000, cfg) == pytest.approx(5e-6)
    flat = cfg.replace(decay_step=cfg.steps)
    assert {lr_at(s, flat) for s in range(cfg.steps)} == {5e-5}
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def reference_adamw(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=1e-2):
    """Textbook AdamW with decoupled decay, written out per step."""
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        p = p - lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    st_ = OptimState.for_params([p], weight_decay=0.0)
    adamw_step([p], [np.array([0.3, -4.0, 1e-3])], st_, lr=0.01)
    np.testing.assert_allclose(p.data, [0.99, -1.99, 0.49], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 12), lr=st.floats(1e-5, 1e-1))
def test_matches_reference(seed, steps, lr):
    rng = np.random.default_rng(seed)
    init = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(steps)]
    p = Tensor(init.copy(), requires_grad=True)
    state = OptimState.for_params([p])
    for g in grads:
        adamw_step([p], [g], state, lr)
    np.testing.assert_allclose(p.data, reference_adamw(init, grads, lr), rtol=1e-10, atol=1e-12)
    assert state.step == steps


def test_zero_lr_is_a_fixed_point():
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    state = OptimState.for_params([p])
    for _ in range(5):
        adamw_step([p], [np.full((2, 2), 3.0)], state, lr=0.0)
    np.testing.assert_array_equal(p.data, 1.0)


def test_missing_gradient_still_decays():
    p = Tensor(np.full(3, 2.0), requires_grad=True)
    adamw_step([p], [None], OptimState.for_params([p], weight_decay=0.5), lr=0.1)
    np.testing.assert_allclose(p.data, 2.0 * 0.95)


def test_shape_mismatch_raises():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        adamw_step([p], [np.zeros(4)], OptimState.for_params([p]), 0.1)
    with pytest.raises(ValueError):
        adamw_step([p, p], [np.zeros(3)] * 2, OptimState.for_params([p]), 0.1)
