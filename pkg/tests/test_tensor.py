import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import gradcheck
from moby import tensor as T
from moby.errors import ConfigError, ContractError, NumericalError, ShapeError
from moby.tensor import Tensor

GRAD_TOL = 1e-5
SHAPES = [(2, 3), (4, 5), (3, 2, 6)]


def test_matmul_identity_and_hand_product():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    out = T.matmul(Tensor(b), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_gradient(rng):
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    assert gradcheck(T.matmul, [a, b]) < 1e-6


@pytest.mark.parametrize("shapes", [((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 2)), ((2, 2, 3, 4), (2, 2, 4, 3))])
def test_batched_matmul_gradient(rng, shapes):
    a, b = (rng.standard_normal(s) for s in shapes)
    assert gradcheck(T.matmul, [a, b]) < GRAD_TOL


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


def test_softmax_nan_fails_fast():
    with pytest.raises(NumericalError):
        T.softmax(Tensor([0.0, np.nan]))


@pytest.mark.parametrize("shape", SHAPES)
def test_softmax_gradient(rng, shape):
    assert gradcheck(lambda x: T.softmax(x, axis=-1), [rng.standard_normal(shape)]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one_and_shift_invariant(x):
    p = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    shifted = T.softmax(Tensor(x + 1000.0)).data
    assert np.max(np.abs(shifted - p)) < 1e-9


def test_cross_entropy_closed_forms():
    c = 7
    loss = T.cross_entropy(Tensor(np.zeros((4, c))), [0, 1, 2, 6])
    assert loss.item() == pytest.approx(np.log(c), abs=1e-14)
    logits = np.zeros((3, 5))
    logits[np.arange(3), [1, 4, 0]] = 50.0
    assert T.cross_entropy(Tensor(logits), [1, 4, 0]).item() < 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_gradient(rng):
    labels = rng.integers(0, 5, size=8)
    assert gradcheck(lambda x: T.cross_entropy(x, labels), [rng.standard_normal((8, 5))]) < 1e-6


def _norm_params(rng, c):
    return 1.0 + 0.1 * rng.standard_normal(c), 0.1 * rng.standard_normal(c)


def test_layer_norm_definitional(rng):
    x = rng.standard_normal((6, 10)) * 3 + 2
    out = T.layer_norm(Tensor(x), Tensor(np.ones(10)), Tensor(np.zeros(10)), 1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-9)
    const = T.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5))).data
    np.testing.assert_array_equal(const, 0.0)


def test_batch_norm_definitional(rng):
    x = rng.standard_normal((8, 4, 6)) * 2 - 1
    rm, rv = np.zeros(6), np.ones(6)
    out = T.batch_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)), rm, rv, True, eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=(0, 1)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 1)), 1.0, atol=1e-9)
    assert np.all(rm != 0)


def test_batch_norm_inference_uses_running_stats(rng):
    x = rng.standard_normal((5, 3))
    rm, rv = np.array([1.0, 2.0, 3.0]), np.array([4.0, 1.0, 0.25])
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, False, eps=1e-12).data
    np.testing.assert_allclose(out, (x - rm) / np.sqrt(rv), atol=1e-12)


def test_norm_eps_must_be_positive():
    x, g, b = Tensor(np.ones((2, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3))
    with pytest.raises(ConfigError):
        T.layer_norm(x, g, b, eps=0.0)
    with pytest.raises(ConfigError):
        T.batch_norm(x, g, b, np.zeros(3), np.ones(3), True, eps=-1.0)


def test_batch_norm_needs_more_than_one_value():
    with pytest.raises(ContractError):
        T.batch_norm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                     np.zeros(3), np.ones(3), True)


@pytest.mark.parametrize("shape", SHAPES)
def test_layer_norm_gradient(rng, shape):
    g, b = _norm_params(rng, shape[-1])
    err = gradcheck(lambda x, g_, b_: T.layer_norm(x, g_, b_), [rng.standard_normal(shape), g, b])
    assert err < GRAD_TOL


@pytest.mark.parametrize("shape", SHAPES)
@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradient(rng, shape, training):
    g, b = _norm_params(rng, shape[-1])
    rm, rv = rng.standard_normal(shape[-1]), rng.uniform(0.5, 2, shape[-1])

    def f(x, g_, b_):
        return T.batch_norm(x, g_, b_, rm.copy(), rv.copy(), training)

    assert gradcheck(f, [rng.standard_normal(shape), g, b]) < GRAD_TOL


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)
    unit = np.array([[0.0, 1.0, 0.0], [0.6, 0.0, 0.8]])
    assert np.max(np.abs(T.l2_normalize(Tensor(unit)).data - unit)) < 1e-12
    z = T.l2_normalize(Tensor(np.zeros((1, 3)))).data
    assert np.all(np.isfinite(z))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)).filter(
    lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)))
def test_l2_normalize_unit_rows(x):
    out = T.l2_normalize(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("shape", SHAPES)
def test_l2_normalize_gradient(rng, shape):
    assert gradcheck(T.l2_normalize, [rng.standard_normal(shape)]) < GRAD_TOL


def test_detach_severs_gradient(rng):
    q = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    loss = (q * T.detach(k)).sum()
    T.backward(loss)
    np.testing.assert_array_equal(q.grad, k.data)
    assert k.grad is None
    only_detached = (T.detach(q) * T.detach(k)).sum()
    T.backward(only_detached)
    np.testing.assert_array_equal(q.grad, k.data)


def test_backward_sum_and_fan_out(rng):
    x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))
    x.zero_grad()
    y = x * 1.0
    T.backward((y + y).sum())
    np.testing.assert_array_equal(x.grad, np.full((3, 2), 2.0))


@pytest.mark.parametrize("k", [2, 3, 5])
def test_fan_out_accumulates_sum_of_partials(rng, k):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    coeffs = rng.standard_normal(k)
    total = None
    for c in coeffs:
        term = (x * float(c)).sum()
        total = term if total is None else total + term
    T.backward(total)
    np.testing.assert_allclose(x.grad, np.full(4, coeffs.sum()), atol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2.0)


def test_no_grad_tensor_never_accumulates(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    c = Tensor(rng.standard_normal(3))
    T.backward((x * c).sum())
    assert c.grad is None


def test_no_grad_context_records_nothing(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with T.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


@pytest.mark.parametrize("name,fn,shapes", [
    ("add", T.add, [(3, 4), (3, 4)]),
    ("add_broadcast", T.add, [(2, 3, 4), (4,)]),
    ("sub_broadcast", T.sub, [(2, 3, 4), (3, 1)]),
    ("mul", T.mul, [(2, 3), (2, 3)]),
    ("mul_broadcast", T.mul, [(4, 2, 3), (4, 1, 1)]),
    ("gelu", T.gelu, [(3, 5)]),
    ("exp", T.exp, [(2, 3)]),
    ("scale", lambda x: T.scale(x, -2.5), [(2, 3)]),
    ("mean", lambda x: T.mean(x, axis=1), [(2, 3, 4)]),
    ("mean_all", lambda x: T.mean(x), [(2, 3)]),
    ("sum_keep", lambda x: T.sum_(x, axis=(0, 2), keepdims=True), [(2, 3, 4)]),
    ("reshape", lambda x: T.reshape(x, (6, 4)), [(2, 3, 4)]),
    ("transpose", lambda x: T.transpose(x, (2, 0, 1)), [(2, 3, 4)]),
    ("roll", lambda x: T.roll(x, (-1, 2), (1, 2)), [(2, 3, 4)]),
    ("slice", lambda x: x[:, 1::2], [(3, 5)]),
    ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 4)]),
    ("log_softmax", T.log_softmax, [(3, 4)]),
    ("gather", lambda t: T.gather(t, np.array([0, 2, 2, 1])), [(3, 4)]),
])
def test_elementwise_and_shape_op_gradients(rng, name, fn, shapes):
    inputs = [rng.standard_normal(s) for s in shapes]
    assert gradcheck(fn, inputs) < GRAD_TOL


def test_log_gradient(rng):
    assert gradcheck(T.log, [rng.uniform(0.5, 2.0, (3, 3))]) < GRAD_TOL


def test_two_sided_broadcast_is_a_shape_error():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((3, 1))), Tensor(np.zeros((1, 4))))


def test_first_nonfinite_op_is_named():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    with np.errstate(invalid="ignore"):
        y = T.log(x) * 2.0
    assert T.first_nonfinite_op(y) == "log"


def test_float32_is_preserved(rng):
    x = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    g, b = Tensor(np.ones(4, np.float32)), Tensor(np.zeros(4, np.float32))
    y = T.gelu(T.layer_norm(x, g, b)) * 0.5
    assert y.dtype == np.float32
