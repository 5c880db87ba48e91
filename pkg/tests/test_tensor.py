import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from denseqr import tensor as T
from denseqr.gradcheck import check_gradients
from denseqr.rng import make_rng
from denseqr.serialize import (
    FormatError,
    dump_container,
    load_container,
    read_tensor,
    write_tensor,
)
from denseqr.tensor import ContractError, ShapeError, Tensor, VocabIndexError

F64 = np.float64


def leaf(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True, dtype=F64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- matmul --------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)


def test_matmul_row_sums():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_matches_finite_differences(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    assert check_gradients(lambda: T.matmul(a, b).sum(), [a, b]) < 1e-6


def test_batched_matmul_grad(rng):
    a, w = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    assert check_gradients(lambda: (T.matmul(a, w) * T.matmul(a, w)).sum(), [a, w]) < 1e-4


# -- softmax -------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_softmax_is_stabilised():
    out = T.softmax(Tensor([1000.0, 1000.0]))
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_softmax_random_vector(rng):
    x = leaf(rng, 5)
    w = Tensor(rng.normal(size=5), dtype=F64)
    assert abs(T.softmax(x).data.sum() - 1) < 1e-7
    assert check_gradients(lambda: (T.softmax(x) * w).sum(), [x]) < 1e-4


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.zeros((2, 3))), axis=2)


@settings(max_examples=50, deadline=None)
@given(arrays(F64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_log_softmax_grad(rng):
    x = leaf(rng, 3, 4)
    w = Tensor(rng.normal(size=(3, 4)), dtype=F64)
    assert check_gradients(lambda: (T.log_softmax(x) * w).sum(), [x]) < 1e-4


# -- layer norm ----------------------------------------------------------

def test_layer_norm_constant_row_collapses_to_beta():
    out = T.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, [0, 0, 0])


def test_layer_norm_uses_population_variance():
    out = T.layer_norm(Tensor([1.0, 3.0], dtype=F64), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    # var = 1, so (x - 2) / sqrt(1 + 1e-5)
    np.testing.assert_allclose(out.data, [-1, 1], atol=1e-5)


def test_layer_norm_grad(rng):
    x, g, b = leaf(rng, 4), leaf(rng, 4), leaf(rng, 4)
    w = Tensor(rng.normal(size=4), dtype=F64)
    assert check_gradients(lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-5


def test_layer_norm_width_mismatch():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# -- the small ops -------------------------------------------------------

def test_relu():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_dropout_eval_is_identity():
    x = Tensor(np.arange(6.0))
    assert T.dropout(x, 0.1, training=False, rng=None) is x


def test_dropout_inverted_scaling_and_determinism():
    x = Tensor(np.ones((200, 50)), dtype=np.float32)
    a = T.dropout(x, 0.1, True, make_rng(3, "d")).data
    b = T.dropout(x, 0.1, True, make_rng(3, "d")).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, np.float32(1 / 0.9)}
    assert abs((a == 0).mean() - 0.1) < 0.01


def test_dropout_rejects_p_one():
    with pytest.raises(ContractError):
        T.dropout(Tensor([1.0]), 1.0, True, make_rng(0))


def test_concat_shape_and_roundtrip(rng):
    a, b = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(4, 3)))
    c = T.concat([a, b], axis=-1)
    assert c.shape == (4, 5)
    np.testing.assert_array_equal(c.data[:, :2], a.data)
    np.testing.assert_array_equal(c.data[:, 2:], b.data)


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 2)))], axis=-1)


def test_concat_and_index_grad(rng):
    a, b = leaf(rng, 3, 2), leaf(rng, 3, 3)
    w = Tensor(rng.normal(size=(3, 5)), dtype=F64)
    assert check_gradients(lambda: (T.concat([a, b]) * w).sum(), [a, b]) < 1e-6
    assert check_gradients(lambda: (T.concat([a, b])[:, 1:4] * w[:, :3]).sum(), [a, b]) < 1e-6


def test_embedding_lookup_scatters_gradients():
    table = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True, dtype=F64)
    out = T.embedding_lookup(table, [[1, 1], [3, 0]])
    assert out.shape == (2, 2, 2)
    out.sum().backward()
    np.testing.assert_array_equal(table.grad, [[1, 1], [2, 2], [0, 0], [1, 1]])


def test_embedding_out_of_vocab():
    with pytest.raises(VocabIndexError):
        T.embedding_lookup(Tensor(np.zeros((4, 2))), [4])


def test_l2_normalize_grad(rng):
    x = leaf(rng, 3, 4)
    w = Tensor(rng.normal(size=(3, 4)), dtype=F64)
    assert check_gradients(lambda: (T.l2_normalize(x) * w).sum(), [x]) < 1e-4


def test_transpose_reshape_grad(rng):
    x = leaf(rng, 2, 3, 4)
    w = Tensor(rng.normal(size=(4, 6)), dtype=F64)
    fn = lambda: (x.transpose(0, 2, 1).reshape(4, 6) * w).sum()  # noqa: E731
    assert check_gradients(fn, [x]) < 1e-6


def test_broadcast_add_mul_grad(rng):
    x, b = leaf(rng, 3, 4), leaf(rng, 4)
    s = leaf(rng, 3, 1)
    assert check_gradients(lambda: ((x + b) * s * (x + b)).sum(), [x, b, s]) < 1e-5


# -- backward ------------------------------------------------------------

def test_backward_of_sum_is_ones(rng):
    x = leaf(rng, 2, 3, 2)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 2)))


def test_backward_of_square_is_2x(rng):
    x = leaf(rng, 5)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates(rng):
    x = leaf(rng, 3)
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_backward_needs_scalar(rng):
    with pytest.raises(ContractError):
        (leaf(rng, 3) * 2.0).backward()


def test_no_grad_leaf_never_accumulates(rng):
    x, c = leaf(rng, 3), Tensor(np.ones(3), dtype=F64)
    (x * c).sum().backward()
    assert c.grad is None


def test_shared_subexpression_visited_once(rng):
    x = leaf(rng, 4)
    y = x * x
    loss = (y + y).sum()
    tape = T.Tape.from_output(loss)
    ids = [op.output_id for op in tape.ops]
    assert len(ids) == len(set(ids))
    loss.backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_tape_topological_order(rng):
    x = leaf(rng, 2, 2)
    loss = T.softmax(T.matmul(x, x) + x).sum()
    tape = T.Tape.from_output(loss)
    pos = {op.output_id: i for i, op in enumerate(tape.ops)}
    for op in tape.ops:
        for inp in op.inputs:
            if inp._op is not None:
                assert pos[inp.node_id] < pos[op.output_id]


def test_attention_block_gradients(rng):
    """Composed attention + FFN + layer norm at float64 against finite differences."""
    n, d = 4, 6
    x = leaf(rng, n, d)
    wq, wk, wv = leaf(rng, d, d), leaf(rng, d, d), leaf(rng, d, d)
    w1, w2 = leaf(rng, d, 8), leaf(rng, 8, d)
    g, b = leaf(rng, d), leaf(rng, d)
    mask = Tensor(np.where(np.arange(n) == n - 1, -1e9, 0.0), dtype=F64)

    def fn():
        att = T.softmax(T.matmul(x @ wq, (x @ wk).transpose()) * (1 / np.sqrt(d)) + mask)
        h = T.layer_norm(att @ (x @ wv) + x, g, b)
        out = T.relu(h @ w1) @ w2 + h
        return (T.l2_normalize(out) * out).sum()

    assert check_gradients(fn, [x, wq, wk, wv, w1, w2, g, b]) < 1e-4


# -- serialization -------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64, np.uint8, np.int32])
def test_tensor_record_roundtrip(dtype, rng):
    arr = (rng.normal(size=(3, 2, 4)) * 10).astype(dtype)
    buf = io.BytesIO()
    write_tensor(buf, arr)
    buf.seek(0)
    back = read_tensor(buf)
    assert back.dtype == arr.dtype
    np.testing.assert_array_equal(back, arr)


def test_container_roundtrip_and_determinism(rng):
    tensors = {"a": rng.normal(size=(2, 3)).astype(np.float32), "b": np.arange(5)}
    blob = dump_container(tensors, {"mode": "dense", "d": 8})
    assert blob == dump_container(tensors, {"mode": "dense", "d": 8})
    back, meta = load_container(blob)
    assert list(back) == ["a", "b"]
    assert meta == {"mode": "dense", "d": "8"}
    np.testing.assert_array_equal(back["a"], tensors["a"])


def test_truncated_container_rejected(rng):
    blob = dump_container({"a": np.ones(4)})
    with pytest.raises(FormatError):
        load_container(blob[:-3])


def test_rng_streams_named_and_reproducible():
    a = make_rng(7, "train", "dropout").random(4)
    np.testing.assert_array_equal(a, make_rng(7, "train", "dropout").random(4))
    assert not np.array_equal(a, make_rng(7, "train", "sampling").random(4))
    assert not np.array_equal(a, make_rng(8, "train", "dropout").random(4))
