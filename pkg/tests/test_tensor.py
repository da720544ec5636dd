import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lightmdetr import tensor as T
from lightmdetr.params import Adam, ParamRegistry, adam_step
from lightmdetr.tensor import ContractError, DimensionError, DomainError, Tensor

from fd import numeric_grad, rel_error


def grad_of(fn, *arrays):
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*ts)
    out.backward()
    return [t.grad for t in ts]


class TestMatmul:
    def test_identity(self):
        out = T.matmul(np.eye(2), [[3, 4], [5, 6]])
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        assert T.matmul([[1, 2]], [[3], [4]]).data.tolist() == [[11.0]]

    def test_gradient_wrt_left(self):
        (ga,) = grad_of(lambda a: T.matmul(a, Tensor([[3.0], [4.0]])).sum(), [[1.0, 2.0]])
        fd = numeric_grad(lambda a: (a @ np.array([[3.0], [4.0]])).sum(), [[1.0, 2.0]])
        np.testing.assert_allclose(ga, [[3.0, 4.0]])
        np.testing.assert_allclose(fd, [[3.0, 4.0]], atol=1e-8)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_batched_leading_axes(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(4, 5))
        np.testing.assert_allclose(T.matmul(a, b).data, a @ b)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-15)

    def test_log_weights(self):
        out = T.softmax(np.log([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_no_overflow(self):
        out = T.softmax([1000.0, 0.0, 0.0]).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_probability_vector(self, xs):
        p = T.softmax(np.array(xs)).data
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) < 1e-12


class TestLayernorm:
    def test_constant_row_is_zero(self):
        out = T.layernorm([[5.0, 5.0, 5.0]], np.ones(3), np.zeros(3)).data
        np.testing.assert_array_equal(out, np.zeros((1, 3)))

    def test_two_values(self):
        out = T.layernorm([1.0, 3.0], np.ones(2), np.zeros(2)).data
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-4)

    def test_zero_gain_gives_bias(self):
        out = T.layernorm([[1.0, -2.0, 7.0]], np.zeros(3), [0.5, 1.5, -2.0]).data
        np.testing.assert_array_equal(out, [[0.5, 1.5, -2.0]])

    def test_gain_shape_checked(self):
        with pytest.raises(DimensionError):
            T.layernorm(np.zeros((2, 3)), np.ones(2), np.zeros(3))


class TestElementwise:
    def test_add_zero(self):
        x = np.array([[1.5, -2.0]])
        np.testing.assert_array_equal(T.add(x, 0.0).data, x)

    def test_sigmoid_zero(self):
        assert T.sigmoid(0.0).item() == 0.5

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid([-800.0, 800.0]).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 1.0])

    def test_row_broadcast(self):
        out = T.add([[1.0, 2.0], [3.0, 4.0]], [10.0, 20.0]).data
        np.testing.assert_array_equal(out, [[11, 22], [13, 24]])

    def test_row_broadcast_gradient_reduces(self):
        gx, gv = grad_of(lambda x, v: (x + v).sum(), np.ones((3, 2)), [0.0, 0.0])
        np.testing.assert_array_equal(gv, [3.0, 3.0])
        np.testing.assert_array_equal(gx, np.ones((3, 2)))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log([1.0, 0.0])
        with pytest.raises(DomainError):
            T.log([-1.0])

    def test_relu_subgradient_zero(self):
        (g,) = grad_of(lambda x: T.relu(x).sum(), [-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])

    def test_incompatible_broadcast(self):
        with pytest.raises(DimensionError):
            T.add(np.zeros((2, 3)), np.zeros(2))


class TestBackward:
    def test_square_sum(self):
        (g,) = grad_of(lambda x: (x * x).sum(), [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])

    def test_unconnected_input_has_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0], requires_grad=True)
        (x * x).sum().backward()
        assert y.grad is None or not np.any(y.grad)

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_frozen_gets_no_buffer(self):
        frozen = Tensor([1.0, 2.0])
        w = Tensor([0.5, 0.5], requires_grad=True)
        (frozen * w).sum().backward()
        assert frozen.grad is None
        np.testing.assert_array_equal(w.grad, [1.0, 2.0])

    def test_shared_subexpression_accumulates(self):
        (g,) = grad_of(lambda x: (x * x + x).sum(), [2.0])
        np.testing.assert_allclose(g, [5.0])

    def test_tape_order(self):
        x = Tensor([1.0], requires_grad=True)
        a = x * 2.0
        b = a + 1.0
        c = (b * a).sum()
        tape = T.Tape(c)
        seqs = [n._seq for n in tape.nodes]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(tape) == 4


def _composite(x, w, g, b):
    h = T.layernorm(T.matmul(x, w), g, b)
    s = T.softmax(h, axis=-1)
    return (T.sigmoid(h) * s + T.exp(h * 0.1)).sum() + T.log(s + 1.0).mean()


# op name -> (fn over Tensors, shapes); fn must return a scalar
GRAD_CASES = {
    "matmul": (lambda a, b, c: (T.matmul(a, b) * c).sum(), [(3, 4), (4, 2), (3, 2)]),
    "softmax": (lambda a, c: (T.softmax(a, axis=-1) * c).sum(), [(3, 5), (3, 5)]),
    "log_softmax": (lambda a, c: (T.log_softmax(a, axis=0) * c).sum(), [(4, 3), (4, 3)]),
    "layernorm": (lambda x, g, b, c: (T.layernorm(x, g, b) * c).sum(), [(3, 4), (4,), (4,), (3, 4)]),
    "sigmoid": (lambda a: (T.sigmoid(a) * T.sigmoid(a)).sum(), [(5,)]),
    "exp_log": (lambda a: T.log(T.exp(a) + 1.0).sum(), [(2, 3)]),
    "mul_div": (lambda a, b: (a * b / (b * b + 1.0)).sum(), [(2, 3), (3,)]),
    "l2_normalize": (lambda a, c: (T.l2_normalize(a) * c).sum(), [(3, 4), (3, 4)]),
    "swap_reshape": (lambda a, c: (a.swapaxes(0, 1).reshape(6, 2) * c).sum(), [(3, 2, 2), (6, 2)]),
    "concat_getitem": (lambda a, b: (T.concat([a, b], axis=0)[1:4] * 2.0).sum() + a[[0, 0, 1]].sum(), [(2, 3), (3, 3)]),
    "composite": (_composite, [(2, 3), (3, 4), (4,), (4,)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_random_gradchecks_match_finite_differences(name):
    fn, shapes = GRAD_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        arrays = [rng.uniform(-2, 2, size=s) for s in shapes]
        analytic = grad_of(fn, *arrays)
        for k in range(len(arrays)):
            def f(v, k=k):
                args = [Tensor(a) for a in arrays]
                args[k] = Tensor(v)
                return fn(*args).item()
            numeric = numeric_grad(f, arrays[k])
            assert rel_error(analytic[k], numeric) < 1e-5, (name, k)


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    arrays = [rng.uniform(-2, 2, size=s) for s in [(2, 3), (3, 4), (4,), (4,)]]
    a = _composite(*[Tensor(x) for x in arrays]).data
    b = _composite(*[Tensor(x) for x in arrays]).data
    assert a.tobytes() == b.tobytes()


class TestAdam:
    def test_frozen_entry_unchanged(self):
        reg = ParamRegistry()
        w = reg.add("w", [1.0, 2.0], trainable=False)
        w.grad = np.array([5.0, -5.0])
        before = w.data.tobytes()
        Adam(lr=0.1).step(reg)
        assert w.data.tobytes() == before

    def test_first_step_moves_by_lr(self):
        reg = ParamRegistry()
        w = reg.add("w", [0.0])
        w.grad = np.array([1.0])
        adam_step(reg, 0.1, (0.9, 0.999), 1e-8, 1, {}, {})
        assert w.data[0] == pytest.approx(-0.1, rel=1e-6)

    def test_zero_gradient_no_change(self):
        reg = ParamRegistry()
        a = reg.add("a", [1.0, 2.0])
        b = reg.add("b", [[3.0]])
        a.grad, b.grad = np.zeros(2), np.zeros((1, 1))
        Adam(lr=0.1).step(reg)
        np.testing.assert_array_equal(a.data, [1.0, 2.0])
        np.testing.assert_array_equal(b.data, [[3.0]])

    def test_moments_persist(self):
        reg = ParamRegistry()
        w = reg.add("w", [0.0])
        opt = Adam(lr=0.1)
        for _ in range(3):
            w.grad = np.array([1.0])
            opt.step(reg)
        assert opt.step_index == 3
        assert opt.m["w"][0] == pytest.approx(1 - 0.9 ** 3)

    def test_defaults(self):
        opt = Adam()
        assert (opt.lr, opt.betas, opt.eps) == (1e-4, (0.9, 0.999), 1e-8)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 3), st.booleans()), min_size=1, max_size=6),
           st.integers(0, 2**31 - 1))
    def test_never_mutates_frozen(self, layout, seed):
        rng = np.random.default_rng(seed)
        reg = ParamRegistry()
        for i, (r, c, trainable) in enumerate(layout):
            t = reg.add(f"p{i}", rng.normal(size=(r, c)), trainable=trainable)
            t.grad = rng.normal(size=(r, c))
        frozen_before = {n: t.data.tobytes() for n, t in reg.frozen()}
        opt = Adam(lr=0.5)
        for _ in range(3):
            opt.step(reg)
        assert {n: t.data.tobytes() for n, t in reg.frozen()} == frozen_before


def test_registry_counts():
    reg = ParamRegistry()
    reg.add("a", np.zeros((3, 4)))
    reg.add("b", np.zeros(5), trainable=False)
    assert reg.count() == 17 and reg.count(True) == 12 and reg.count(False) == 5
    with pytest.raises(KeyError):
        reg.add("a", np.zeros(1))


def test_scalar_item():
    assert Tensor(2.5).item() == 2.5
    assert math.isclose(T.mean([1.0, 2.0, 3.0]).item(), 2.0)
