import itertools
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fullpoint import tensor as T
from fullpoint.errors import ContractError, DimensionError, NumericError
from fullpoint.rng import Rng
from fullpoint.tensor import Tape, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def triple_loop(a, b):
    m, k = a.shape
    _, p = b.shape
    out = np.zeros((m, p))
    for i, j in itertools.product(range(m), range(p)):
        acc = 0.0
        for r in range(k):
            acc += a[i, r] * b[r, j]
        out[i, j] = acc
    return out


class TestTensorType:
    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            Tensor([1.0, np.nan])

    def test_op_producing_inf_is_an_error(self):
        with pytest.raises(NumericError):
            T.exp(Tensor([1000.0]))

    def test_storage_is_f64(self):
        assert Tensor([1, 2]).data.dtype == np.float64


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
        np.testing.assert_array_equal(out.data, [[3], [4]])

    def test_row_times_column(self):
        assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_random_matches_triple_loop(self):
        rng = np.random.default_rng(42)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
        np.testing.assert_allclose(T.matmul(a, b).data, triple_loop(a, b), rtol=1e-12)

    @pytest.mark.parametrize("m,k,p", [(1, 1, 1), (8, 8, 8), (3, 7, 5), (8, 1, 8)])
    def test_shapes_up_to_8(self, m, k, p):
        rng = np.random.default_rng(m * 100 + k * 10 + p)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, p))
        np.testing.assert_allclose(T.matmul(a, b).data, triple_loop(a, b), rtol=1e-12, atol=1e-15)

    def test_batched(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        out = T.matmul(a, b).data
        for i in range(2):
            np.testing.assert_allclose(out[i], triple_loop(a[i], b), rtol=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 1\)"):
            T.matmul(np.zeros((2, 3)), np.zeros((4, 1)))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        assert T.grad_check(lambda xs: T.sum(T.matmul(xs[0], xs[1])), [a, b]) < 1e-8


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_array_equal(T.softmax(Tensor([0, 0, 0, 0]), 0).data, [0.25] * 4)

    def test_large_logits_do_not_overflow(self):
        np.testing.assert_array_equal(T.softmax(Tensor([1000, 1000]), 0).data, [0.5, 0.5])

    def test_matches_extended_precision(self):
        getcontext().prec = 50
        exps = [Decimal(v).exp() for v in (1, 2, 3)]
        total = sum(exps)
        expected = [float(e / total) for e in exps]
        np.testing.assert_allclose(T.softmax(Tensor([1, 2, 3]), 0).data, expected, rtol=1e-12)

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            T.softmax(Tensor(np.zeros((2, 0))), 1)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.integers(1, 4))
    def test_slices_sum_to_one(self, values, rows):
        x = np.tile(np.asarray(values), (rows, 1))
        out = T.softmax(x, axis=1).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out > 0) and np.all(out < 1 + 1e-15)

    def test_strictly_inside_unit_interval(self):
        out = T.softmax(Tensor([[0.0, 5.0, -5.0]]), 1).data
        assert np.all(out > 0) and np.all(out < 1)


class TestReduce:
    def test_max_rows(self):
        np.testing.assert_array_equal(T.reduce(Tensor([[1, 5], [2, 2]]), 1, "max").data, [5, 2])

    def test_sum_zeros(self):
        assert T.reduce(Tensor(np.zeros(4)), None, "sum").item() == 0.0

    def test_mean(self):
        assert T.reduce(Tensor([1, 2, 3, 4]), 0, "mean").item() == 2.5

    def test_max_gradient_goes_to_first_argmax(self):
        x = leaf([[2.0, 7.0, 7.0]])
        T.backward(T.sum(T.max(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            T.reduce(Tensor(np.zeros((3, 0))), 1, "max")


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self):
        x = leaf([1.0, -2.0, 3.0])
        T.backward(T.sum(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            T.backward(leaf([1.0, 2.0]) * 2.0)

    def test_tape_records_and_replays(self):
        x = leaf([1.0, 2.0])
        with Tape() as tape:
            y = T.sum(T.exp(x))
        assert len(tape) >= 2
        T.backward(y, tape)
        np.testing.assert_allclose(x.grad, np.exp([1.0, 2.0]))

    def test_shared_subexpression_accumulates(self):
        x = leaf([3.0])
        y = x * 2.0
        T.backward(T.sum(y + y))
        np.testing.assert_array_equal(x.grad, [4.0])

    def test_no_grad_builds_no_graph(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 3.0
        assert y._backward is None


class TestGradCheck:
    def test_sum(self):
        assert T.grad_check(T.sum, leaf(np.random.default_rng(0).normal(size=(3, 4)))) <= 1e-10

    def test_sum_of_squares(self):
        assert T.grad_check(lambda x: T.sum(x * x), leaf([1.0, 2.0])) <= 1e-8

    def test_detects_wrong_gradient(self):
        def bad(x):
            return T.sum(T._make(x.data**2, (x,), lambda g: (g * 3.0 * x.data,), "bad"))

        assert T.grad_check(bad, leaf([1.0, 2.0])) > 0.1

    def test_non_finite_names_coordinate(self):
        x = leaf([1.0, 1e-300])

        def f(v):
            return T.sum(T.log(v))

        with pytest.raises(NumericError, match="coordinate 1"):
            T.grad_check(f, x, eps=1e-5)

    def test_restores_leaf_state(self):
        x = Tensor([1.0, 2.0])
        T.grad_check(T.sum, x)
        assert x.requires_grad is False and x.grad is None


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (T.abs(b) + 1.0),
    "matmul": lambda a, b: T.matmul(a, T.reshape(b, (3, 2))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_binary_ops_grad_check(name):
    rng = np.random.default_rng(7)
    a = leaf(rng.normal(size=(2, 3)))
    b = leaf(rng.normal(size=(2, 3)) + 0.5)
    probe = None

    def f(xs):
        nonlocal probe
        out = OPS[name](xs[0], xs[1])
        if probe is None:
            probe = rng.normal(size=out.shape)
        return T.sum(out * probe)

    assert T.grad_check(f, [a, b]) <= 1e-6


UNARY = {
    "relu": T.relu,
    "sqrt": lambda x: T.sqrt(T.abs(x) + 0.5),
    "exp": T.exp,
    "log": lambda x: T.log(T.abs(x) + 0.5),
    "softmax0": lambda x: T.softmax(x, 0),
    "softmax1": lambda x: T.softmax(x, 1),
    "max": lambda x: T.max(x, axis=1),
    "mean": lambda x: T.mean(x, axis=0),
    "transpose": lambda x: T.transpose(x, (1, 0)),
    "broadcast": lambda x: T.broadcast_to(T.reshape(x, (1, 3, 4)), (2, 3, 4)),
    "concat": lambda x: T.concat([x, x * 2.0], axis=0),
    "gather": lambda x: T.gather(x, np.array([[0, 2], [2, 2], [1, 0]])),
    "cross_entropy": lambda x: T.cross_entropy(x, np.array([0, 3, 1])),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_grad_check(name):
    rng = np.random.default_rng(11)
    # well-separated values keep relu/abs/max away from their kinks
    base = rng.permutation(12).reshape(3, 4) * 0.37 - 2.0 + 0.05
    x = leaf(base)
    probe = None

    def f(v):
        nonlocal probe
        out = UNARY[name](v)
        if probe is None:
            probe = rng.normal(size=out.shape)
        return T.sum(out * probe)

    assert T.grad_check(f, x) <= 1e-6


def test_gather_out_of_range():
    with pytest.raises(ContractError):
        T.gather(Tensor(np.zeros((3, 2))), np.array([3]))


def test_gather_backward_accumulates_repeats():
    x = leaf(np.ones((3, 2)))
    T.backward(T.sum(T.gather(x, np.array([[0, 0], [2, 0]]))))
    np.testing.assert_array_equal(x.grad, [[3, 3], [0, 0], [1, 1]])


def test_determinism_same_seed_same_bits():
    def run():
        rng = Rng(5)
        a = Tensor(rng.normal(size=(8, 8)))
        b = Tensor(rng.normal(size=(8, 8)))
        return T.softmax(T.matmul(a, b), 1).data.tobytes()

    assert run() == run()


class TestRng:
    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng(9).raw(16), Rng(9).raw(16))

    def test_raw_stream_is_philox(self):
        expected = np.random.Philox(key=123).random_raw(4)
        np.testing.assert_array_equal(Rng(123).raw(4), expected)

    def test_uniform_from_top_53_bits(self):
        w = np.random.Philox(key=1).random_raw(3)
        expected = (w >> np.uint64(11)).astype(np.float64) * 2.0**-53
        np.testing.assert_array_equal(Rng(1).uniform(size=3), expected)

    def test_integers_in_range(self):
        v = Rng(2).integers(7, size=1000)
        assert v.min() >= 0 and v.max() < 7 and len(set(v.tolist())) == 7

    def test_permutation(self):
        assert sorted(Rng(3).permutation(20).tolist()) == list(range(20))

    def test_normal_moments(self):
        z = Rng(4).normal(size=20000)
        assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03

    def test_fork_is_independent_and_deterministic(self):
        a, b = Rng(6), Rng(6)
        assert np.array_equal(a.fork().raw(4), b.fork().raw(4))
        assert not np.array_equal(Rng(6).fork().raw(4), Rng(6).raw(4))
