import numpy as np
import pytest

import fairflow.tensor as T
from oracles import finite_difference_grads, max_relative_error


def test_tensor_basic_invariants():
    t = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.size == int(np.prod(t.shape))
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.dtype == np.float64
    assert T.Tensor([1], dtype=np.float32).dtype == np.float32


def test_softmax_uniform_on_equal_logits():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_relu_definition():
    out = T.relu(T.Tensor([-1.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_matmul_forced_arithmetic():
    out = T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 1))))
    np.testing.assert_array_equal(out.data, [[3.0], [3.0]])


def test_shape_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError) as exc:
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))
    assert exc.value.op == "add"
    assert (2, 3) in exc.value.shapes and (3, 2) in exc.value.shapes
    assert "add" in str(exc.value)


def test_softmax_rows_sum_to_one_and_positive():
    rng = np.random.default_rng(7)
    for _ in range(50):
        x = T.Tensor(rng.normal(size=(4, 6)) * 10)
        s = T.softmax(x, axis=1)
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-6)
        assert (s.data > 0).all()


def test_mask_apply_all_ones_is_bitexact_identity():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.normal(size=(5, 7)))
    out = T.mask_apply(x, np.ones((5, 7)))
    assert (out.data == x.data).all()


def test_backward_square():
    x = T.parameter(3.0)
    y = T.mul(x, x)
    T.backward(y)
    assert x.grad == pytest.approx(6.0)


def test_backward_cross_entropy_at_uniform_logits():
    c = 4
    true_class = 1
    logits = T.parameter(np.zeros((1, c)))
    loss = T.scale(T.gather(T.log_softmax(logits, axis=1), np.array([true_class])), -1.0)
    loss = T.mean(loss)
    T.backward(loss)
    expected = np.full((1, c), 1.0 / c)
    expected[0, true_class] -= 1.0
    np.testing.assert_allclose(logits.grad, expected, atol=1e-12)


def test_backward_requires_scalar():
    x = T.parameter(np.ones(3))
    y = T.relu(x)
    with pytest.raises(T.TensorError):
        T.backward(y)


def test_backward_twice_is_error():
    x = T.parameter(2.0)
    y = T.mul(x, x)
    T.backward(y)
    with pytest.raises(T.TapeError):
        T.backward(y)


def test_stale_tape_reuse_is_error():
    x = T.parameter(np.ones((2, 2)))
    h = T.relu(x)
    loss = T.mean(h)
    T.backward(loss)
    with pytest.raises(T.TapeError):
        T.relu(h)


def test_no_grad_suppresses_recording():
    x = T.parameter(np.ones((2, 2)))
    with T.no_grad():
        y = T.relu(x)
    assert not y.requires_grad
    assert y._tape is None


def _mlp_loss_arrays(arrays, x, labels):
    """Two-layer MLP + softmax CE over plain numpy, for the FD oracle."""
    w1, b1, w2, b2 = arrays
    h = np.maximum(x @ w1 + b1, 0.0)
    logits = h @ w2 + b2
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def test_mlp_grads_match_finite_differences():
    rng = np.random.default_rng(11)
    n, din, dh, c = 5, 4, 6, 3
    x = rng.normal(size=(n, din))
    labels = rng.integers(0, c, size=n)
    arrays = [
        rng.normal(size=(din, dh)) * 0.5,
        rng.normal(size=(dh,)) * 0.1,
        rng.normal(size=(dh, c)) * 0.5,
        rng.normal(size=(c,)) * 0.1,
    ]

    params = [T.parameter(a.copy()) for a in arrays]
    xt = T.constant(x)
    h = T.relu(T.add_bias(T.matmul(xt, params[0]), params[1]))
    logits = T.add_bias(T.matmul(h, params[2]), params[3])
    loss = T.scale(T.mean(T.gather(T.log_softmax(logits, axis=1), labels)), -1.0)
    T.backward(loss)

    numeric = finite_difference_grads(lambda a: _mlp_loss_arrays(a, x, labels), arrays)
    assert max_relative_error([p.grad for p in params], numeric) < 1e-6


@pytest.mark.parametrize("seed", range(6))
def test_random_graph_grads_match_finite_differences(seed):
    """Composed graphs over the primitive set vs the FD oracle (double precision)."""
    rng = np.random.default_rng(100 + seed)
    n, d = 3, 4
    a0 = rng.normal(size=(n, d))
    b0 = rng.normal(size=(d, d))
    v0 = rng.normal(size=(d,))
    mask = (rng.random((n, d)) > 0.3).astype(float)

    def build(arrays):
        a, b, v = arrays
        at, bt, vt = T.Tensor(a, requires_grad=True), T.Tensor(b, requires_grad=True), T.Tensor(v, requires_grad=True)
        h = T.matmul(at, bt)
        h = T.add_bias(h, vt)
        h = T.layernorm(h)
        h = T.mul_bias(h, vt)
        h = T.relu(T.add(h, at))
        h = T.mask_apply(h, mask)
        s = T.softmax(h, axis=1)
        p = T.powc(T.shift(T.scale(s, 0.5), 0.25), 1.7)
        out = T.mean(T.log(p))
        return out, (at, bt, vt)

    out, params = build([a0.copy(), b0.copy(), v0.copy()])
    T.backward(out)

    def fn(arrays):
        with T.no_grad():
            val, _ = build([x.copy() for x in arrays])
        return val.item()

    numeric = finite_difference_grads(fn, [a0.copy(), b0.copy(), v0.copy()])
    assert max_relative_error([p.grad for p in params], numeric) < 1e-6


def test_embedding_and_gather_grads():
    table0 = np.random.default_rng(5).normal(size=(7, 3))
    ids = np.array([[1, 2, 1], [0, 6, 3]])
    labels = np.array([0, 2])

    def fn(arrays):
        emb = arrays[0][ids]
        pooled = emb.mean(axis=1)
        z = pooled - pooled.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(2), labels].mean())

    table = T.parameter(table0.copy())
    pooled = T.mean(T.embedding_lookup(table, ids), axis=1)
    loss = T.scale(T.mean(T.gather(T.log_softmax(pooled, axis=1), labels)), -1.0)
    T.backward(loss)
    numeric = finite_difference_grads(fn, [table0.copy()])
    assert max_relative_error([table.grad], numeric) < 1e-6


def test_concat_slice_transpose_grads():
    rng = np.random.default_rng(9)
    a0 = rng.normal(size=(2, 3, 4))

    def build(arr):
        at = T.Tensor(arr, requires_grad=True)
        left = T.slice_last(at, 0, 2)
        right = T.slice_last(at, 2, 4)
        swapped = T.transpose_last2(T.concat_last([right, left]))
        stacked = T.concat_rows([swapped, swapped])
        return T.mean(T.mul(stacked, stacked)), at

    loss, at = build(a0.copy())
    T.backward(loss)

    def fn(arrays):
        with T.no_grad():
            val, _ = build(arrays[0].copy())
        return val.item()

    numeric = finite_difference_grads(fn, [a0.copy()])
    assert max_relative_error([at.grad], numeric) < 1e-6


def test_out_of_range_ids_rejected():
    table = T.parameter(np.zeros((4, 2)))
    with pytest.raises(T.TensorError):
        T.embedding_lookup(table, np.array([0, 4]))
    with pytest.raises(T.TensorError):
        T.gather(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_determinism_same_inputs_same_bits():
    def run():
        rng = np.random.default_rng(42)
        x = T.parameter(rng.normal(size=(4, 4)))
        w = T.parameter(rng.normal(size=(4, 4)))
        loss = T.mean(T.softmax(T.matmul(x, w), axis=1))
        T.backward(loss)
        return loss.data.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert (l1 == l2).all() and (g1 == g2).all()


def test_mixed_dtype_rejected():
    with pytest.raises(T.ShapeError):
        T.add(T.Tensor([1.0], dtype=np.float32), T.Tensor([1.0], dtype=np.float64))
