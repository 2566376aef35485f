import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from brnet import autodiff as ad
from brnet.autodiff import Adam, Tape, Tensor, backward, gradcheck
from brnet.errors import ContractViolation


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grads_of(f, *arrays):
    leaves = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
    return out, backward(tape, out, leaves)


class TestBackward:
    def test_identity(self):
        _, (g,) = grads_of(lambda x: x, 5.0)
        assert g == 1.0

    def test_product(self):
        _, (gx, gy) = grads_of(lambda x, y: x * y, 2.0, 3.0)
        assert (gx, gy) == (3.0, 2.0)

    def test_non_scalar_seed_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractViolation):
            backward(tape, y, [x])

    def test_unreached_input_gets_zeros(self):
        x = Tensor(np.ones(3), requires_grad=True)
        z = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_all(x)
        gx, gz = backward(tape, y, [x, z])
        np.testing.assert_array_equal(gx, np.ones(3))
        np.testing.assert_array_equal(gz, np.zeros((2, 2)))

    def test_shared_subexpression_accumulates(self):
        _, (g,) = grads_of(lambda x: x * x + x, 3.0)
        assert g == 7.0

    def test_tape_is_topological(self):
        x = Tensor(np.ones(4), requires_grad=True)
        with Tape() as tape:
            ad.sum_all(ad.square(x * 2.0))
        produced = set()
        for node in tape.nodes:
            for inp in node.inputs:
                if inp is not x and inp.requires_grad:
                    assert id(inp) in produced
            produced.add(id(node.output))

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = ad.square(x)
        with Tape() as tape:
            pass
        assert len(tape) == 0
        np.testing.assert_array_equal(y.data, np.ones(3))

    def test_constants_are_not_recorded(self):
        with Tape() as tape:
            ad.square(Tensor(np.ones(3)))
        assert len(tape) == 0

    def test_linearity(self, rng):
        x0 = rng.standard_normal(6)
        f = lambda x: ad.sum_all(ad.tanh(x))  # noqa: E731
        g = lambda x: ad.sum_all(ad.square(x))  # noqa: E731
        a, b = 0.7, -1.3
        _, (gf,) = grads_of(f, x0)
        _, (gg,) = grads_of(g, x0)
        _, (gc,) = grads_of(lambda x: f(x) * a + g(x) * b, x0)
        np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-12, atol=1e-14)

    def test_deterministic(self, rng):
        x0 = rng.standard_normal((2, 1, 4, 4))
        k0 = rng.standard_normal((3, 1, 2, 2))
        f = lambda x, k: ad.sum_all(ad.maxpool2x2(ad.conv2x2(x, k, Tensor(np.zeros(3)))))  # noqa: E731
        _, g1 = grads_of(f, x0, k0)
        _, g2 = grads_of(f, x0, k0)
        for a, b in zip(g1, g2):
            assert np.array_equal(a, b)


class TestConv:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 5, 4))
        k = np.array([[[[1.0, 0.0], [0.0, 0.0]]]])
        out = ad.conv2x2(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_constant_field(self):
        out = ad.conv2x2(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
        assert out.data[0, 0, 0, 0] == 4.0
        # replicate padding keeps the constant field constant
        np.testing.assert_array_equal(out.data, 4.0)

    def test_matches_direct_loop(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        k = rng.standard_normal((2, 3, 2, 2))
        b = rng.standard_normal(2)
        padded = np.pad(x, ((0, 0), (0, 0), (0, 1), (0, 1)), mode="edge")
        want = np.zeros((2, 2, 4, 5))
        for n in range(2):
            for o in range(2):
                for i in range(4):
                    for j in range(5):
                        want[n, o, i, j] = b[o] + np.sum(k[o] * padded[n, :, i:i + 2, j:j + 2])
        got = ad.conv2x2(Tensor(x), Tensor(k), Tensor(b)).data
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("shape", [(1, 1, 4, 4), (2, 2, 3, 5)])
    def test_gradcheck(self, rng, shape):
        c = shape[1]
        x = rng.standard_normal(shape)
        k = rng.standard_normal((3, c, 2, 2))
        b = rng.standard_normal(3)
        assert gradcheck(ad.conv2x2, [x, k, b]) < 1e-6

    @pytest.mark.parametrize(
        "xs, ks, bs",
        [((1, 1, 4, 4), (1, 2, 2, 2), (1,)), ((1, 1, 4, 4), (1, 1, 3, 3), (1,)),
         ((1, 1, 4, 4), (2, 1, 2, 2), (1,)), ((1, 1, 1, 4), (1, 1, 2, 2), (1,))],
    )
    def test_shape_errors(self, xs, ks, bs):
        with pytest.raises(ContractViolation):
            ad.conv2x2(Tensor(np.zeros(xs)), Tensor(np.zeros(ks)), Tensor(np.zeros(bs)))


class TestMaxPool:
    def test_window_max(self):
        out = ad.maxpool2x2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert out.data.item() == 4.0

    def test_tie_goes_to_first_cell(self):
        x = Tensor(np.full((1, 1, 4, 4), 2.5), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_all(ad.maxpool2x2(x))
        (g,) = backward(tape, y, [x])
        np.testing.assert_array_equal(y.data, 4 * 2.5)
        want = np.zeros((4, 4))
        want[::2, ::2] = 1.0
        np.testing.assert_array_equal(g[0, 0], want)

    def test_matches_reshape_oracle(self, rng):
        x = rng.standard_normal((2, 3, 6, 8))
        want = x.reshape(2, 3, 3, 2, 4, 2).max(axis=(3, 5))
        np.testing.assert_array_equal(ad.maxpool2x2(Tensor(x)).data, want)

    def test_gradcheck(self, rng):
        # a permutation of well-separated values has no ties
        x = rng.permutation(64).reshape(1, 1, 8, 8).astype(float) * 0.1
        assert gradcheck(ad.maxpool2x2, [x]) < 1e-6

    def test_odd_size_rejected(self):
        with pytest.raises(ContractViolation):
            ad.maxpool2x2(Tensor(np.zeros((1, 1, 3, 4))))


class TestDense:
    def test_identity(self, rng):
        x = rng.standard_normal((4, 3))
        out = ad.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight(self, rng):
        v = np.array([1.0, -2.0])
        out = ad.dense(Tensor(rng.standard_normal((4, 3))), Tensor(np.zeros((2, 3))), Tensor(v))
        np.testing.assert_array_equal(out.data, np.tile(v, (4, 1)))

    def test_gradcheck(self, rng):
        x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((2, 3)), rng.standard_normal(2)
        assert gradcheck(ad.dense, [x, w, b]) < 1e-6

    def test_mismatch(self):
        with pytest.raises(ContractViolation):
            ad.dense(Tensor(np.zeros((4, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_derivative_at_zero(self):
        _, (g,) = grads_of(lambda x: ad.sum_all(ad.relu(x)), [0.0, 1.0])
        np.testing.assert_array_equal(g, [0.0, 1.0])

    def test_tanh_sigmoid_at_zero(self):
        assert ad.tanh(Tensor(0.0)).item() == 0.0
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_saturates_without_overflow(self):
        with np.errstate(over="raise"):
            out = ad.sigmoid(Tensor([-800.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    @pytest.mark.parametrize("fn", ["relu", "tanh", "sigmoid"])
    def test_gradcheck(self, rng, fn):
        x = rng.standard_normal(20)
        if fn == "relu":
            x = x[np.abs(x) > 1e-4]
        assert gradcheck(lambda t: ad.elementwise(t, fn), [x]) < 1e-6

    def test_unknown(self):
        with pytest.raises(ContractViolation):
            ad.elementwise(Tensor([1.0]), "gelu")


class TestReductions:
    def test_gap_constant(self):
        out = ad.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 1.5)))
        np.testing.assert_array_equal(out.data, 1.5)

    def test_gap_small(self):
        assert ad.global_avg_pool(Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))).data.item() == 4.0

    def test_gap_gradient_uniform(self, rng):
        x = rng.standard_normal((1, 1, 3, 5))
        _, (g,) = grads_of(lambda t: ad.sum_all(ad.global_avg_pool(t)), x)
        np.testing.assert_allclose(g, 1.0 / 15.0, rtol=1e-15)
        assert gradcheck(ad.global_avg_pool, [rng.standard_normal((2, 3, 2, 2))]) < 1e-6

    def test_batch_stats_examples(self):
        m, s = ad.batch_stats(Tensor([1.0, 1.0, 1.0, 1.0]), 0.0)
        assert (m.item(), s.item()) == (1.0, 0.0)
        m, s = ad.batch_stats(Tensor([0.0, 2.0]), 0.0)
        assert (m.item(), s.item()) == (1.0, 1.0)

    def test_batch_stats_gradcheck(self, rng):
        x = rng.standard_normal(9)
        assert gradcheck(lambda t: ad.batch_stats(t, 1e-8)[1], [x]) < 1e-6
        assert gradcheck(lambda t: ad.batch_stats(t, 1e-8)[0], [x]) < 1e-6

    def test_batch_stats_size(self):
        with pytest.raises(ContractViolation):
            ad.batch_stats(Tensor([1.0]))
        with pytest.raises(ContractViolation):
            ad.batch_stats(Tensor(np.ones((2, 2))))


class TestCrossEntropy:
    def test_saturated(self):
        out = ad.softmax_cross_entropy(Tensor([[1000.0, -1000.0]]), Tensor([[1.0, 0.0]]))
        assert out.item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform(self):
        out = ad.softmax_cross_entropy(Tensor([[0.3, 0.3]]), Tensor([[0.0, 1.0]]))
        assert out.item() == pytest.approx(np.log(2.0), rel=1e-14)

    def test_gradient_is_softmax_minus_target(self, rng):
        z = rng.standard_normal((5, 3))
        y = np.eye(3)[rng.integers(0, 3, 5)]
        _, (g,) = grads_of(lambda t: ad.softmax_cross_entropy(t, Tensor(y)), z)
        np.testing.assert_allclose(g, ad.softmax(z) - y, rtol=1e-12, atol=1e-15)
        assert gradcheck(lambda t: ad.softmax_cross_entropy(t, Tensor(y)), [z]) < 1e-6

    def test_mean_reduction(self, rng):
        z = rng.standard_normal((4, 2))
        y = np.eye(2)[[0, 1, 1, 0]]
        s = ad.softmax_cross_entropy(Tensor(z), Tensor(y), "sum").item()
        m = ad.softmax_cross_entropy(Tensor(z), Tensor(y), "mean").item()
        assert m == pytest.approx(s / 4, rel=1e-14)

    @pytest.mark.parametrize("target", [[[0.5, 0.6]], [[1.5, -0.5]]])
    def test_bad_targets(self, target):
        with pytest.raises(ContractViolation):
            ad.softmax_cross_entropy(Tensor([[0.0, 0.0]]), Tensor(target))

    def test_needs_two_classes(self):
        with pytest.raises(ContractViolation):
            ad.softmax_cross_entropy(Tensor([[0.0]]), Tensor([[1.0]]))


class TestIndexing:
    def test_column_and_rows_gradcheck(self, rng):
        x = rng.standard_normal((6, 3))
        assert gradcheck(lambda t: ad.column(t, 1), [x]) < 1e-6
        assert gradcheck(lambda t: ad.take_rows(t, np.array([0, 2, 2, 5])), [x]) < 1e-6

    def test_repeated_rows_accumulate(self):
        _, (g,) = grads_of(lambda t: ad.sum_all(ad.take_rows(t, np.array([1, 1, 0]))), np.zeros((3, 2)))
        np.testing.assert_array_equal(g, [[1, 1], [2, 2], [0, 0]])


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = Adam()
        opt.step(p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert opt.t == 1

    @given(g=st.floats(min_value=1e-3, max_value=1e3) | st.floats(min_value=-1e3, max_value=-1e-3))
    def test_first_step_magnitude(self, g):
        # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        p = {"w": np.array([0.0])}
        opt = Adam(lr=1e-3)
        opt.step(p, {"w": np.array([g])})
        assert p["w"][0] == pytest.approx(-1e-3 * np.sign(g), rel=1e-5)

    def test_hand_computed_two_steps(self):
        p = {"w": np.array([0.5])}
        opt = Adam(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        opt.step(p, {"w": np.array([2.0])})
        opt.step(p, {"w": np.array([-1.0])})
        m = 0.9 * (0.1 * 2.0) + 0.1 * -1.0
        v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0
        step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        want = 0.5 - 0.1 * 2.0 / (2.0 + 1e-8) - step2
        assert p["w"][0] == pytest.approx(want, rel=1e-12)

    def test_determinism(self, rng):
        g = [rng.standard_normal(4) for _ in range(5)]
        results = []
        for _ in range(2):
            p, opt = {"w": np.ones(4)}, Adam()
            for gi in g:
                opt.step(p, {"w": gi})
            results.append(p["w"])
        assert np.array_equal(*results)

    def test_mismatch(self):
        with pytest.raises(ContractViolation):
            Adam().step({"w": np.ones(2)}, {"w": np.ones(3)})
        with pytest.raises(ContractViolation):
            Adam().step({"w": np.ones(2)}, {"v": np.ones(2)})


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-5, 5)))
def test_std_matches_numpy(x):
    m, s = ad.batch_stats(Tensor(x), 1e-8)
    assert m.item() == pytest.approx(x.mean(), abs=1e-12)
    assert s.item() == pytest.approx(np.sqrt(x.var() + 1e-8), rel=1e-10)
