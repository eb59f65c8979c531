import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gatedcil.autodiff import (
    Adam,
    GradGate,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    count_flops,
    get_dtype,
    no_grad,
    ops,
    precision,
)
from oracles import PRIMITIVE_CASES, composite_loss_instance, gradcheck, gradcheck_params

FD_SEEDS = range(8)


def test_matmul_identity():
    out = ops.matmul(Tensor(np.eye(2)), Tensor(np.array([[3.0], [4.0]])))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_sigmoid_zero_and_uniform_softmax():
    assert ops.sigmoid(Tensor(np.zeros(()))).data == 0.5
    np.testing.assert_allclose(ops.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_square_sum_gradient():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ops.sum(ops.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_sigmoid_slope_at_zero():
    w = Tensor(np.zeros(()), requires_grad=True)
    ops.sigmoid(ops.mul(w, 1.0)).backward()
    assert w.grad == 0.25


@pytest.mark.parametrize("seed", FD_SEEDS)
@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_matches_finite_differences(name, seed):
    fn, inputs = PRIMITIVE_CASES[name](np.random.default_rng([seed, len(name)]))
    assert gradcheck(fn, inputs) < 1e-4


@pytest.mark.parametrize("loss", ["bce", "ce"])
@pytest.mark.parametrize("reg", ["pfr2", "pfr1", "fd"])
def test_composite_training_loss_matches_finite_differences(loss, reg):
    loss_fn, params = composite_loss_instance(3, loss, reg)
    worst, checked = gradcheck_params(loss_fn, params, entries=3)
    assert checked == len(params)
    assert worst < 1e-4


def test_broadcast_mismatch_raises_shape_error():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))))
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_non_finite_forward_raises():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        ops.exp(Tensor(np.array([1000.0])))
    with pytest.raises(ValueError):
        ops.log(Tensor(np.array([-1.0])))


def test_backward_needs_scalar_and_runs_once():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        ops.mul(x, 2.0).backward()
    loss = ops.sum(ops.mul(x, 2.0))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.sum(ops.mul(x, x))
    assert not y.requires_grad


def test_precision_switch_and_restore():
    with precision("float32"):
        assert get_dtype() == np.float32
        assert Tensor([1.0, 2.0]).data.dtype == np.float32
    assert get_dtype() == np.float64


def test_flop_counter_matmul():
    with count_flops() as c:
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert c.total == 2 * 2 * 3 * 4


def test_gradient_accumulates_over_shared_use():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    ops.sum(ops.add(ops.mul(x, 3.0), ops.mul(x, x))).backward()
    np.testing.assert_allclose(x.grad, 3.0 + 2 * np.array([1.5, -2.0]), rtol=0, atol=1e-15)


# -- gated Adam ---------------------------------------------------------------------


def _adam_pair(gate):
    rng = np.random.default_rng(0)
    start = rng.normal(size=(2, 2))
    grads = [rng.normal(size=(2, 2)) for _ in range(3)]
    a, b = Tensor(start.copy(), requires_grad=True), Tensor(start.copy(), requires_grad=True)
    opt_a, opt_b = Adam([a], lr=0.01), Adam([b], lr=0.01)
    if gate is not None:
        opt_b.set_gates([GradGate(b, gate)])
    for g in grads:
        a.grad, b.grad = g.copy(), g.copy()
        opt_a.step()
        opt_b.step()
    return start, a, b, opt_a, opt_b


def test_all_ones_gate_equals_ungated_step():
    _, a, b, _, _ = _adam_pair(np.ones((2, 2)))
    np.testing.assert_array_equal(a.data, b.data)


def test_all_zero_gate_freezes_values_and_moments():
    start, _, b, _, opt_b = _adam_pair(np.zeros((2, 2)))
    np.testing.assert_array_equal(b.data, start)
    np.testing.assert_array_equal(opt_b.m[0], 0.0)
    np.testing.assert_array_equal(opt_b.v[0], 0.0)


def test_row_gate_single_step_hand_value():
    w = Tensor(np.zeros((2, 2)), requires_grad=True)
    opt = Adam([w], lr=0.1)
    opt.set_gates([GradGate(w, np.array([[0.0, 0.0], [1.0, 1.0]]))])
    w.grad = np.ones((2, 2))
    opt.step()
    # one Adam step on a unit gradient: m_hat = v_hat = 1, update = lr / (1 + eps)
    np.testing.assert_array_equal(w.data[0], [0.0, 0.0])
    np.testing.assert_allclose(w.data[1], [-0.1 / (1 + 1e-8)] * 2, rtol=0, atol=1e-15)


def test_gate_shape_and_range_checked():
    w = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        GradGate(w, np.ones(3))
    with pytest.raises(ValueError):
        GradGate(w, np.full((2, 2), 1.5))


# -- properties ------------------------------------------------------------------------

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = ops.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert (out >= 0).all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite))
def test_layer_norm_zero_mean(x):
    out = ops.layer_norm(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, rtol=0, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-30, 30)))
def test_sigmoid_in_unit_interval_and_symmetric(x):
    s = ops.sigmoid(Tensor(x)).data
    assert ((s >= 0) & (s <= 1)).all()
    np.testing.assert_allclose(s + ops.sigmoid(Tensor(-x)).data, 1.0, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_add_gradient_is_unbroadcast_ones(a, b):
    x = Tensor(a, requires_grad=True)
    y = Tensor(b[0], requires_grad=True)
    ops.sum(ops.add(x, y)).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(y.grad, np.full(3, 2.0))
