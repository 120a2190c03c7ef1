import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqtrans import neuralcore as nc
from seqtrans.neuralcore import Tensor

from conftest import assert_grads_match

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def rand(rng, *shape, name=None):
    return Tensor(rng.standard_normal(shape), name=name)


# ----------------------------------------------------------------- matmul / concat


def test_matmul_identity_and_hand_product():
    x = Tensor([[2.0], [-3.0]])
    np.testing.assert_array_equal(nc.matmul(Tensor(np.eye(2)), x).value, x.value)
    out = nc.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4, name="a"), rand(rng, 4, 2, name="b")
    assert_grads_match(lambda: nc.tensor_sum(a @ b), [a, b])


def test_matmul_backward_closed_form():
    rng = np.random.default_rng(1)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    g = rng.standard_normal((3, 2))
    with nc.Tape() as tape:
        root = nc.tensor_sum(nc.mul(a @ b, Tensor(g)))
    nc.backward(tape, root)
    np.testing.assert_allclose(a.grad, g @ b.value.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.value.T @ g, rtol=1e-12)


def test_concat_values_and_routing():
    np.testing.assert_array_equal(nc.concat(Tensor(np.zeros(0)), Tensor([5.0])).value, [5.0])
    np.testing.assert_array_equal(nc.concat(Tensor([1.0, 2.0]), Tensor([3.0])).value, [1, 2, 3])
    rng = np.random.default_rng(2)
    a, b = rand(rng, 2, 3, name="a"), rand(rng, 2, 2, name="b")
    w = Tensor(rng.standard_normal((2, 5)))
    assert_grads_match(lambda: nc.tensor_sum(nc.concat(a, b) * w), [a, b])


def test_concat_batch_mismatch():
    with pytest.raises(nc.DimensionError):
        nc.concat(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


# ----------------------------------------------------------------- elementwise primitives


@pytest.mark.parametrize("op", [nc.sigmoid, nc.tanh, nc.exp, lambda t: nc.log(nc.exp(t) + 1.0),
                                lambda t: nc.sqrt(nc.exp(t)), lambda t: nc.clamp_min(t, 0.3)])
def test_unary_primitives_match_finite_differences(op):
    rng = np.random.default_rng(3)
    x = rand(rng, 3, 4, name="x")
    # keep clamp inputs away from the kink
    x.value[np.abs(x.value - 0.3) < 1e-3] += 0.01
    w = Tensor(rng.standard_normal((3, 4)))
    assert_grads_match(lambda: nc.tensor_sum(op(x) * w), [x], rtol=1e-4, step=1e-3)


def test_broadcast_add_and_mul_reduce_grads():
    rng = np.random.default_rng(4)
    a, b = rand(rng, 3, 4, name="a"), rand(rng, 4, name="b")
    assert_grads_match(lambda: nc.tensor_sum((a + b) * (a - b) * b), [a, b])


def test_take_cols_and_axis_sum():
    rng = np.random.default_rng(5)
    a = rand(rng, 3, 6, name="a")
    w = Tensor(rng.standard_normal(3))
    assert_grads_match(lambda: nc.tensor_sum(nc.tensor_sum(nc.take_cols(a, 1, 4), axis=-1) * w), [a])


def test_sigmoid_saturates_without_overflow():
    with np.errstate(all="raise"):
        out = nc.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).value
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


# ----------------------------------------------------------------- embedding / dropout


def test_embedding_lookup_identity_table():
    table = Tensor(np.eye(4))
    np.testing.assert_array_equal(nc.embedding_lookup(table, 2).value, [0, 0, 1, 0])


def test_embedding_backward_sums_repeats_and_is_sparse():
    rng = np.random.default_rng(6)
    table = rand(rng, 5, 3)
    g1, g2 = rng.standard_normal(3), rng.standard_normal(3)
    with nc.Tape() as tape:
        x = nc.embedding_lookup(table, 1)
        y = nc.embedding_lookup(table, 1)
        root = nc.tensor_sum(x * Tensor(g1)) + nc.tensor_sum(y * Tensor(g2))
    nc.backward(tape, root)
    np.testing.assert_allclose(table.grad[1], g1 + g2, rtol=1e-12)
    untouched = np.delete(table.grad, 1, axis=0)
    assert np.all(untouched == 0.0)


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        nc.embedding_lookup(Tensor(np.zeros((3, 2))), 3)
    with pytest.raises(IndexError):
        nc.embedding_lookup(Tensor(np.zeros((3, 2))), [-1])


def test_dropout_identity_cases():
    x = Tensor(np.arange(6.0))
    assert nc.dropout(x, 0.0, np.random.default_rng(0), True) is x
    assert nc.dropout(x, 0.9, np.random.default_rng(0), False) is x
    with pytest.raises(ValueError):
        nc.dropout(x, 1.0, np.random.default_rng(0), True)


def test_dropout_is_unbiased():
    out = nc.dropout(Tensor(np.ones(10**6)), 0.2, np.random.default_rng(0), True).value
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out)) == {0.0, 1.25}


# ----------------------------------------------------------------- softmax cross-entropy


def test_cross_entropy_uniform_logits():
    for V in (1, 3, 17):
        assert nc.softmax_cross_entropy(Tensor(np.zeros(V)), 0).value == pytest.approx(np.log(V), abs=1e-15)


def test_cross_entropy_is_stable_at_large_logits():
    z = np.zeros(4)
    z[2] = 1000.0
    with np.errstate(over="raise", invalid="raise"):
        loss = nc.softmax_cross_entropy(Tensor(z), 2).value
    assert loss == 0.0


def test_cross_entropy_gradient():
    rng = np.random.default_rng(7)
    z = rand(rng, 3, name="z")
    assert_grads_match(lambda: nc.softmax_cross_entropy(z, 1), [z])
    with nc.Tape() as tape:
        loss = nc.softmax_cross_entropy(z, 1)
    z.grad = None
    nc.backward(tape, loss)
    expected = nc.softmax_np(z.value) - np.eye(3)[1]
    np.testing.assert_allclose(z.grad, expected, rtol=1e-12)


def test_weighted_batched_cross_entropy():
    rng = np.random.default_rng(8)
    z = rand(rng, 4, 5, name="z")
    w = np.array([1.0, 0.0, 0.5, 2.0])
    tgt = np.array([0, 4, 2, 1])
    assert_grads_match(lambda: nc.softmax_cross_entropy(z, tgt, w), [z])
    ref = -sum(w[b] * nc.log_softmax_np(z.value[b])[tgt[b]] for b in range(4))
    assert nc.softmax_cross_entropy(z, tgt, w).value == pytest.approx(ref, rel=1e-14)


def test_cross_entropy_target_range():
    with pytest.raises(IndexError):
        nc.softmax_cross_entropy(Tensor(np.zeros(3)), 3)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-700, 700)))
def test_softmax_is_a_distribution(z):
    p = nc.softmax_np(z)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9


# ----------------------------------------------------------------- backward contract


def test_backward_leaf_root_and_accumulation():
    x = Tensor(np.array(3.0))
    with nc.Tape() as tape:
        pass
    nc.backward(tape, x)
    assert x.grad == 1.0
    x.grad = None
    with nc.Tape() as tape:
        y = x + x
    nc.backward(tape, y)
    assert x.grad == 2.0


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3))
    with nc.Tape() as tape:
        y = x * 2.0
    with pytest.raises(nc.DimensionError):
        nc.backward(tape, y)


def test_unreachable_tensors_untouched():
    a, b = Tensor(np.ones(2)), Tensor(np.ones(2))
    with nc.Tape() as tape:
        root = nc.tensor_sum(a * 3.0)
        _ = b * 2.0
    nc.backward(tape, root)
    assert b.grad is None
    np.testing.assert_array_equal(a.grad, [3.0, 3.0])


def test_no_tape_records_nothing():
    tape = nc.Tape()
    nc.tanh(Tensor(np.ones(2)))
    assert tape.nodes == []


def test_tape_replay_is_bit_deterministic():
    rng = np.random.default_rng(9)
    vals = [rng.standard_normal((3, 3)) for _ in range(2)]

    def run():
        a, b = Tensor(vals[0].copy()), Tensor(vals[1].copy())
        with nc.Tape() as tape:
            root = nc.tensor_sum(nc.tanh(a @ b) * a)
        nc.backward(tape, root)
        return root.value.copy(), a.grad.copy(), b.grad.copy()

    for x, y in zip(run(), run()):
        assert np.array_equal(x, y)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_composite_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 2, 3, name="a"), rand(rng, 3, 3, name="b")
    c = rand(rng, 3, name="c")
    assert_grads_match(
        lambda: nc.tensor_sum(nc.sigmoid(a @ b + c) * nc.tanh(a) - nc.exp(a * 0.1)),
        [a, b, c], rtol=1e-4, step=1e-3,
    )


# ----------------------------------------------------------------- LSTM


def test_lstm_zero_params_give_zero_state():
    p = nc.init_lstm(np.random.default_rng(0), 3, 2)
    for t in p.tensors():
        t.value[...] = 0.0
    h, c = nc.lstm_step(p, Tensor(np.zeros(3)), Tensor(np.zeros(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(h.value, 0.0)
    np.testing.assert_array_equal(c.value, 0.0)


def test_lstm_saturated_forget_gate_keeps_cell():
    d = 3
    p = nc.init_lstm(np.random.default_rng(0), 2, d)
    for t in p.tensors():
        t.value[...] = 0.0
    p.b.value[d:2 * d] = 1000.0  # forget block
    v = np.array([0.5, -1.0, 2.0])
    _, c = nc.lstm_step(p, Tensor(np.zeros(2)), Tensor(np.zeros(d)), Tensor(v))
    np.testing.assert_allclose(c.value, v, atol=1e-12)


def test_lstm_gradients():
    rng = np.random.default_rng(10)
    p = nc.init_lstm(rng, 3, 2)
    for k, t in enumerate(p.tensors()):
        t.value += rng.normal(0, 0.5, t.value.shape)
        t.name = ("w_x", "w_h", "b")[k]
    x = rand(rng, 2, 3, name="x")
    h0, c0 = rand(rng, 2, 2, name="h0"), rand(rng, 2, 2, name="c0")

    def build():
        h, c = nc.lstm_step(p, x, h0, c0)
        h, c = nc.lstm_step(p, x * 0.5, h, c)
        return nc.tensor_sum(h)

    assert_grads_match(build, [*p.tensors(), x, h0, c0], rtol=1e-4, step=1e-5)


def test_linear_vector_matches_batched():
    rng = np.random.default_rng(12)
    x, w = rand(rng, 3, name="x"), rand(rng, 4, 3, name="w")
    np.testing.assert_allclose(nc.linear(x, w).value, nc.linear(Tensor(x.value[None]), w).value[0])
    assert_grads_match(lambda: nc.tensor_sum(nc.tanh(nc.linear(x, w))), [x, w])


def test_lstm_mask_carries_state():
    rng = np.random.default_rng(11)
    p = nc.init_lstm(rng, 2, 2)
    h0, c0 = rand(rng, 2, 2), rand(rng, 2, 2)
    h, c = nc.lstm_step(p, rand(rng, 2, 2), h0, c0, mask=[0.0, 1.0])
    np.testing.assert_array_equal(h.value[0], h0.value[0])
    np.testing.assert_array_equal(c.value[0], c0.value[0])
    assert not np.array_equal(h.value[1], h0.value[1])


def test_lstm_dimension_check():
    p = nc.init_lstm(np.random.default_rng(0), 3, 2)
    with pytest.raises(nc.DimensionError):
        nc.lstm_step(p, Tensor(np.zeros(4)), Tensor(np.zeros(2)), Tensor(np.zeros(2)))


def test_initialisation_bounds():
    rng = np.random.default_rng(0)
    p = nc.init_lstm(rng, 16, 4)
    assert np.abs(p.w_x.value).max() <= 1 / 4
    assert np.all(p.b.value == 0)
    assert p.w_x.shape == (16, 16) and p.w_h.shape == (16, 4)
    assert np.abs(nc.uniform_embedding(rng, 10, 4).value).max() <= 0.05
