import numpy as np
import pytest

from core import diffcore as dc
from core.diffcore import DiffTensor
from core.errors import DomainError, GradientMissingError, GraphError, ShapeError


def leaf(values):
    return DiffTensor(np.asarray(values, dtype=float), requires_grad=True)


@pytest.mark.parametrize('seed', range(20))
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((2, 3))
    positive = rng.uniform(0.5, 2.0, size=(2, 3))
    unit = rng.uniform(-0.9, 0.9, size=(2, 3))
    away_from_zero = np.where(np.abs(a) < 0.1, 0.5, a)

    checks = [
        (dc.add, [a, b]),
        (dc.sub, [a, b]),
        (dc.mul, [a, b]),
        (dc.div, [a, positive]),
        (dc.neg, [a]),
        (lambda t: dc.pow(t, 3), [a]),
        (dc.sqrt, [positive]),
        (dc.exp, [a]),
        (dc.log, [positive]),
        (dc.tanh, [a]),
        (dc.artanh, [unit]),
        (dc.asinh, [a]),
        (dc.relu, [away_from_zero]),
        (lambda t: dc.sum(t, axis=1), [a]),
        (lambda t: dc.mean(t, axis=0), [a]),
        (lambda s, t: dc.dot(s, t), [a, b]),
        (lambda t: dc.l2_norm(t, axis=1), [a]),
        (lambda t: dc.broadcast(dc.reshape(t, (1, 2, 3)), (4, 2, 3)), [a]),
        (lambda t: dc.reshape(t, (3, 2)), [a]),
        (lambda t: dc.transpose(t), [a]),
        (lambda s, t: dc.concat([s, t], axis=1), [a, b]),
        (lambda t: dc.softmax(t, axis=-1), [a]),
        (lambda s, t: dc.mse(s, t), [a, b]),
    ]
    for fn, inputs in checks:
        passed, worst = dc.gradcheck(fn, inputs)
        assert passed, f"{fn}: relative error {worst}"


@pytest.mark.parametrize('seed', range(5))
def test_matrix_and_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    checks = [
        (dc.matmul, [rng.standard_normal((2, 3)), rng.standard_normal((3, 4))]),
        (lambda t: dc.cross_entropy(t, np.array([0, 2])), [rng.standard_normal((2, 3))]),
        (lambda x, w: dc.conv2d(x, w, stride=1, padding=1),
         [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3))]),
        (lambda x, w: dc.conv2d(x, w, stride=2, padding=1),
         [rng.standard_normal((2, 1, 4, 4)), rng.standard_normal((2, 1, 4, 4))]),
        (lambda x, w: dc.conv_transpose2d(x, w, stride=2, padding=1),
         [rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((2, 1, 4, 4))]),
    ]
    for fn, inputs in checks:
        passed, worst = dc.gradcheck(fn, inputs)
        assert passed, f"{fn}: relative error {worst}"


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    kernel = np.eye(3)[:, :, None, None]
    assert np.allclose(dc.conv2d(x, kernel).values, x, atol=1e-15)


def test_conv_transpose_doubles_resolution(rng):
    out = dc.conv_transpose2d(rng.standard_normal((1, 2, 7, 7)), rng.standard_normal((2, 3, 4, 4)),
                              stride=2, padding=1)
    assert out.shape == (1, 3, 14, 14)


def test_conv2d_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        dc.conv2d(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 1, 3, 3)))


def test_mse_of_identical_inputs():
    x = leaf([[1.0, 2.0], [3.0, 4.0]])
    loss = dc.mse(x, DiffTensor(x.values.copy()))
    assert loss.item() == 0.0
    dc.backward(loss)
    assert np.all(x.grad == 0.0)


def test_backward_of_sum_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    dc.backward(dc.sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_dot_is_twice_input():
    x = leaf([1.0, -2.0, 3.0])
    dc.backward(dc.dot(x, x))
    assert np.array_equal(x.grad, 2 * x.values)


def test_shared_subexpression_accumulates():
    x = leaf([0.5, -1.5, 2.0])
    y = x * x
    dc.backward(dc.sum(y + y * x))
    assert np.allclose(x.grad, 2 * x.values + 3 * x.values ** 2)


def test_backward_twice_is_an_error():
    x = leaf([1.0, 2.0])
    loss = dc.sum(x * x)
    dc.backward(loss)
    with pytest.raises(GraphError):
        dc.backward(loss)


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(GraphError):
        dc.backward(x * 2.0)


def test_exp_log_origin_pipeline_has_identity_jacobian(rng):
    from core import geometry as geo

    v = leaf(rng.standard_normal((4, 3)) * 0.5)
    weights = rng.standard_normal((4, 3))
    out = geo.log_map_origin_tensor(geo.exp_map_origin_tensor(v, 1.0), 1.0)
    dc.backward(dc.sum(out * weights))
    assert np.allclose(v.grad, weights, atol=1e-8)


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with dc.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert dc.is_grad_enabled()


def test_artanh_domain():
    with pytest.raises(DomainError):
        dc.artanh(DiffTensor([1.0]))
    with pytest.raises(DomainError):
        dc.log(DiffTensor([0.0]))


def test_broadcast_mismatch_raises():
    with pytest.raises(ShapeError):
        dc.add(DiffTensor(np.zeros((2, 3))), DiffTensor(np.zeros((4,))))


def test_straight_through_forward_and_gradient():
    hard = leaf([1.0, 0.0, 0.0])
    soft = leaf([0.7, 0.2, 0.1])
    out = dc.straight_through(hard, soft)
    assert np.array_equal(out.values, hard.values)
    dc.backward(dc.sum(out))
    assert np.array_equal(soft.grad, np.ones(3))
    assert hard.grad is None


def test_straight_through_shape_mismatch():
    with pytest.raises(ShapeError):
        dc.straight_through(np.zeros(3), np.zeros(2))


def test_softmax_rows(rng):
    out = dc.softmax(DiffTensor(rng.standard_normal((50, 7)) * 10)).values
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out > 0) and np.all(out < 1)


def test_adam_single_step():
    p = dc.parameter(np.array([1.0]))
    p.grad = np.array([1.0])
    dc.adam_step([p], dc.AdamState(learning_rate=1e-3))
    assert p.values[0] == pytest.approx(1.0 - 1e-3 / (1 + 1e-8), abs=1e-15)
    assert p.grad is None


def test_adam_zero_gradient_keeps_parameters():
    p = dc.parameter(np.array([0.25, -4.0]))
    p.grad = np.zeros(2)
    dc.adam_step([p], dc.AdamState())
    assert np.array_equal(p.values, [0.25, -4.0])


def test_adam_missing_gradient():
    with pytest.raises(GradientMissingError):
        dc.adam_step([dc.parameter(np.ones(2))], dc.AdamState())


def test_adam_quadratic_bowl_descends():
    x = dc.parameter(np.array([1.0]))
    optimizer = dc.Adam([x], learning_rate=1e-3)
    previous = abs(x.values[0])
    for _ in range(200):
        dc.backward(dc.sum(x * x))
        optimizer.step()
        assert abs(x.values[0]) < previous
        previous = abs(x.values[0])


def test_one_hot_and_cross_entropy():
    onehot = dc.one_hot(np.array([2, 0]), 3).values
    assert np.array_equal(onehot, [[0, 0, 1], [1, 0, 0]])
    loss = dc.cross_entropy(DiffTensor(np.zeros((2, 4))), np.array([1, 3]))
    assert loss.item() == pytest.approx(np.log(4))
