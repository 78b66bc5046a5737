import numpy as np
import pytest

from diffpolicy.optim import AdamWState, adamw_step, clip_grad_norm, zero_grads
from diffpolicy.tensor import ContractError, ParameterError, Tensor


def param(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def test_decoupled_decay_with_zero_grad():
    w = param([2.0, -1.0])
    w.grad = np.zeros(2)
    st = AdamWState([w], lr=0.1, weight_decay=0.01)
    adamw_step(st)
    np.testing.assert_allclose(w.data, np.array([2.0, -1.0]) * 0.999)


def test_step_count_increments():
    w = param([1.0])
    st = AdamWState([w], lr=0.01)
    for i in range(5):
        w.grad = np.ones(1)
        adamw_step(st)
        assert st.step_count == i + 1


def test_converges_on_quadratic():
    w = param([0.0])
    st = AdamWState([w], lr=0.1, weight_decay=0.0)
    for _ in range(50):
        w.grad = 2.0 * (w.data - 3.0)
        adamw_step(st)
    assert abs(float(w.data[0]) - 3.0) < 0.5


def test_shape_mismatch_rejected():
    w = param([1.0, 2.0])
    st = AdamWState([w], lr=0.1)
    w.grad = np.ones(3)
    with pytest.raises(ContractError):
        adamw_step(st)


def test_hyperparameter_validation():
    w = param([1.0])
    with pytest.raises(ParameterError):
        AdamWState([w], lr=0.0)
    with pytest.raises(ParameterError):
        AdamWState([w], lr=0.1, beta1=1.0)
    with pytest.raises(ParameterError):
        AdamWState([w], lr=0.1, weight_decay=-1.0)


def test_moment_shapes_match_params():
    a, b = param(np.ones((2, 3))), param(np.ones(4))
    st = AdamWState([a, b], lr=0.1)
    assert st.m[0].shape == (2, 3) and st.v[1].shape == (4,)


def test_clip_grad_norm():
    a, b = param(np.zeros(3)), param(np.zeros(4))
    a.grad = np.full(3, 3.0)
    b.grad = np.full(4, 4.0)
    norm = clip_grad_norm([a, b], max_norm=1.0)
    assert norm == pytest.approx(np.sqrt(9 * 3 + 16 * 4))
    total = np.sqrt((a.grad**2).sum() + (b.grad**2).sum())
    assert total == pytest.approx(1.0)


def test_zero_grads():
    a = param(np.zeros(3))
    a.grad = np.ones(3)
    zero_grads([a])
    assert a.grad is None
