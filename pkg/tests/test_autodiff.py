import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from denoising_ger.autodiff import (
    Graph,
    NondeterministicFunction,
    NonFiniteError,
    ShapeError,
    Tensor,
    grad_check,
    grad_check_leaves,
    ops,
)

RNG = np.random.default_rng(1234)


def rand(*shape):
    return Tensor(RNG.normal(size=shape), requires_grad=True)


def away_from_zero(*shape):
    x = RNG.normal(size=shape)
    x = np.where(np.abs(x) < 0.1, 0.3 * np.sign(x) + 0.01, x)
    return Tensor(x, requires_grad=True)


def weighted(out):
    # random fixed projection turns any output into a scalar with a generic gradient
    w = np.random.default_rng(out.data.size).normal(size=out.shape)
    return ops.sum(ops.mul(out, w))


def _cases():
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    pool = ops.segment_pool_matrix(7, 3)
    return {
        "add": lambda: ([rand(3, 4), rand(4)], lambda a, b: ops.add(a, b)),
        "sub": lambda: ([rand(3, 4), rand(3, 4)], lambda a, b: ops.sub(a, b)),
        "mul": lambda: ([rand(2, 3), rand(2, 3)], lambda a, b: ops.mul(a, b)),
        "mul-by-scalar": lambda: ([rand(5)], lambda a: ops.scale(a, -2.5)),
        "matmul": lambda: ([rand(3, 4), rand(4, 5)], lambda a, b: ops.matmul(a, b)),
        "batched-matmul": lambda: ([rand(2, 3, 4), rand(2, 4, 2)], lambda a, b: ops.matmul(a, b)),
        "concat-last-dim": lambda: ([rand(2, 3), rand(2, 5)], lambda a, b: ops.concat([a, b])),
        "relu": lambda: ([away_from_zero(4, 3)], ops.relu),
        "tanh": lambda: ([rand(4, 3)], ops.tanh),
        "sigmoid": lambda: ([rand(4, 3)], ops.sigmoid),
        "softmax-last-dim": lambda: ([rand(3, 6)], ops.softmax),
        "log-softmax": lambda: ([rand(3, 6)], ops.log_softmax),
        "layer-norm": lambda: ([rand(3, 6), rand(6), rand(6)], lambda x, g, b: ops.layer_norm(x, g, b)),
        "mean": lambda: ([rand(3, 4)], lambda a: ops.mean(a, axis=0)),
        "l1-distance": lambda: ([rand(3, 4), rand(3, 4)], ops.l1_distance),
        "cross-entropy-with-logits": lambda: ([rand(2, 3, 5)], lambda a: ops.cross_entropy(a, np.array([[0, 4, 2], [1, 1, 3]]))),
        "cosine-similarity": lambda: ([rand(4, 6), rand(4, 6)], ops.cosine_similarity),
        "embedding-lookup": lambda: ([rand(4, 3)], lambda t: ops.embedding(t, ids)),
        "conv1d": lambda: ([rand(2, 8, 3), rand(4, 3, 2), rand(2)], lambda x, w, b: ops.conv1d(x, w, b, stride=2, padding=1)),
        "conv1d-stride1": lambda: ([rand(2, 7, 3), rand(3, 3, 4), rand(4)], lambda x, w, b: ops.conv1d(x, w, b, stride=1, padding=1)),
        "transpose-conv1d": lambda: ([rand(2, 4, 3), rand(4, 3, 2), rand(2)], lambda x, w, b: ops.conv_transpose1d(x, w, b, stride=2, padding=1)),
        "mean-pool-segments": lambda: ([rand(7, 5)], lambda x: ops.mean_pool_segments(x, pool)),
        "reshape": lambda: ([rand(2, 6)], lambda a: ops.reshape(a, (3, 4))),
        "transpose": lambda: ([rand(2, 3, 4)], lambda a: ops.transpose(a, (1, 0, 2))),
        "getitem": lambda: ([rand(5, 4)], lambda a: a[1:4, ::2]),
        "pick": lambda: ([rand(3, 5)], lambda a: ops.pick(a, np.array([4, 0, 2]))),
        "exp": lambda: ([rand(3, 3)], ops.exp),
        "log": lambda: ([Tensor(RNG.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)], ops.log),
    }


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_every_op_passes_grad_check(name):
    leaves, fn = CASES[name]()
    err = grad_check_leaves(lambda: weighted(fn(*leaves)), leaves, step=1e-4)
    assert err < 1e-4, f"{name}: {err}"


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_cosine_with_itself_is_one():
    v = Tensor([0.3, -1.2, 2.0])
    assert ops.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-15)


def test_cosine_zero_norm_row_is_zero_with_zero_grad():
    a = Tensor(np.zeros((1, 3)), requires_grad=True)
    b = Tensor(np.ones((1, 3)), requires_grad=True)
    with Graph() as g:
        loss = ops.sum(ops.cosine_similarity(a, b))
    grads = g.backward(loss)
    assert loss.item() == 0.0
    assert not grads[a].any() and not grads[b].any()


def test_matmul_identity():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ops.matmul(m, np.eye(2)).data, m.data)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    with Graph() as g:
        loss = x * x
    assert g.backward(loss)[x] == pytest.approx(6.0)


def test_mean_softmax_gradient_vanishes():
    v = rand(6)
    with Graph() as g:
        loss = ops.mean(ops.softmax(v))
    np.testing.assert_allclose(g.backward(loss)[v], 0.0, atol=1e-15)


def test_matmul_chain_matches_finite_differences():
    a, b, c = rand(3, 4), rand(4, 4), rand(4, 2)
    err = grad_check_leaves(lambda: ops.sum(ops.tanh(a @ b @ c)), [a, b, c], step=1e-4)
    assert err < 1e-4


def test_grad_check_sum_of_squares():
    x = Tensor(RNG.normal(size=5))
    assert grad_check(lambda t: ops.sum(ops.mul(t, t)), x, step=1e-4) < 1e-6


def test_grad_check_constant_function_is_exact_zero():
    x = Tensor(RNG.normal(size=4))
    assert grad_check(lambda t: ops.sum(Tensor(np.ones(3))), x, step=1e-4) == 0.0


def test_grad_check_rejects_nondeterministic_function():
    counter = iter(range(100))
    x = Tensor(np.ones(2))
    with pytest.raises(NondeterministicFunction):
        grad_check(lambda t: ops.scale(ops.sum(t), float(next(counter))), x)


def test_grad_check_step_range():
    with pytest.raises(ValueError):
        grad_check(lambda t: ops.sum(t), Tensor(np.ones(2)), step=1e-2)


def test_backward_requires_scalar():
    x = rand(3)
    with Graph() as g:
        y = ops.tanh(x)
    with pytest.raises(ShapeError):
        g.backward(y)


def test_non_participating_leaf_gets_zero():
    x, unused = rand(3), rand(2, 2)
    with Graph() as g:
        loss = ops.sum(x)
    grads = g.backward(loss, wrt=[x, unused])
    assert grads[unused].shape == (2, 2) and not grads[unused].any()


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert info.value.op == "matmul"
    assert info.value.shapes == ((2, 3), (2, 3))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        ops.softmax(Tensor([0.0, np.nan]))


def test_no_graph_means_no_recording():
    x = rand(3)
    y = ops.tanh(x)
    assert not y.requires_grad and y.parents == ()


def test_backward_visits_shared_node_once_and_accumulates():
    x = Tensor(2.0, requires_grad=True)
    with Graph() as g:
        y = x * x
        loss = y + y
    assert g.backward(loss)[x] == pytest.approx(8.0)


def test_backward_is_linear_in_the_loss():
    a, b = rand(3, 4), rand(4, 2)

    def f1():
        return ops.sum(ops.tanh(a @ b))

    def f2():
        return ops.mean(ops.mul(a, a))

    with Graph() as g:
        total = f1() + f2()
    both = g.backward(total, wrt=[a, b])
    with Graph() as g1:
        l1 = f1()
    s1 = g1.backward(l1, wrt=[a, b])
    with Graph() as g2:
        l2 = f2()
    s2 = g2.backward(l2, wrt=[a, b])
    for leaf in (a, b):
        np.testing.assert_allclose(both[leaf], s1[leaf] + s2[leaf], rtol=0, atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv():
    x = RNG.normal(size=(1, 8, 3))
    w = RNG.normal(size=(4, 3, 2))
    y = RNG.normal(size=(1, 4, 2))
    fwd = ops.conv1d(Tensor(x), Tensor(w), stride=2, padding=1).data
    # transpose conv uses the weight with in/out channels swapped
    adj = ops.conv_transpose1d(Tensor(y), Tensor(np.transpose(w, (0, 2, 1))), stride=2, padding=1).data
    assert np.sum(fwd * y) == pytest.approx(np.sum(x * adj))


def test_segment_sizes_remainder_to_earliest():
    assert ops.segment_sizes(7, 3) == [3, 2, 2]
    assert ops.segment_sizes(6, 3) == [2, 2, 2]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    y = ops.softmax(Tensor(x)).data
    assert np.all(y > 0) and np.all(y <= 1)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40))
def test_segment_sizes_partition(total, parts):
    sizes = ops.segment_sizes(total, parts)
    assert sum(sizes) == total
    assert max(sizes) - min(sizes) <= 1
