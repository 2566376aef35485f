import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from brnet import losses
from brnet.autodiff import Tensor, gradcheck
from brnet.errors import ContractViolation
from brnet.losses import LossVariant


def col(v):
    return Tensor(np.asarray(v, dtype=float).reshape(-1, 1))


def corr_sq_reference(b, h, eps):
    """Straightforward two-pass recomputation."""
    b, h = np.asarray(b, float), np.asarray(h, float)
    n = len(b)
    mb, mh = sum(b) / n, sum(h) / n
    cov = sum((x - mb) * (y - mh) for x, y in zip(b, h)) / n
    vb = sum((x - mb) ** 2 for x in b) / n
    vh = sum((y - mh) ** 2 for y in h) / n
    return cov * cov / ((vb + eps) * (vh + eps))


class TestLossVariant:
    def test_defaults(self):
        v = LossVariant()
        assert (v.name, v.lam, v.eps_std) == ("br_net", 1.0, 1e-8)
        assert v.adversarial

    def test_spelling(self):
        assert LossVariant("BR-Net").name == "br_net"

    @pytest.mark.parametrize("kw", [{"lam": -0.1}, {"eps_std": 0.0}, {"name": "gan"}])
    def test_invalid(self, kw):
        with pytest.raises(ContractViolation):
            LossVariant(**kw)


class TestPearson:
    def test_perfect(self):
        b = Tensor([1.0, 2.0, 3.0, 4.0])
        assert losses.pearson_corr_sq(b, b, 1e-15).item() == pytest.approx(1.0, abs=1e-12)

    def test_anti(self):
        v = losses.pearson_corr_sq(Tensor([1.0, 2.0, 3.0]), Tensor([3.0, 2.0, 1.0]), 1e-15).item()
        assert v == pytest.approx(1.0, abs=1e-12)

    def test_constant_prediction(self):
        v = losses.pearson_corr_sq(Tensor([1.0, 2.0, 3.0]), Tensor([5.0, 5.0, 5.0]))
        assert v.item() == 0.0

    def test_too_small(self):
        with pytest.raises(ContractViolation):
            losses.pearson_corr_sq(Tensor([1.0]), Tensor([1.0]))

    def test_gradcheck(self):
        rng = np.random.default_rng(0)
        b = Tensor(rng.standard_normal(16))
        assert gradcheck(lambda h: losses.pearson_corr_sq(b, h), [rng.standard_normal(16)]) < 1e-5

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, 8, elements=st.floats(-100, 100)),
        arrays(np.float64, 8, elements=st.floats(-100, 100)),
    )
    def test_bounded(self, b, h):
        v = losses.pearson_corr_sq(Tensor(b), Tensor(h)).item()
        assert 0.0 <= v <= 1.0 + 1e-12

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, 10, elements=st.floats(-10, 10)),
        arrays(np.float64, 10, elements=st.floats(-10, 10)),
        st.floats(0.1, 10) | st.floats(-10, -0.1),
        st.floats(-10, 10),
    )
    def test_affine_invariance(self, b, h, a, c):
        assume(b.std() > 1e-2 and h.std() > 1e-2)
        v1 = losses.pearson_corr_sq(Tensor(b), Tensor(h), 1e-12).item()
        v2 = losses.pearson_corr_sq(Tensor(b), Tensor(a * h + c), 1e-12).item()
        assert v1 == pytest.approx(v2, abs=1e-6)


class TestAdvCorr:
    def test_self(self):
        b = col([1.0, 3.0, 2.0, 5.0])
        assert losses.adv_corr_loss(b, b, 1e-15).item() == pytest.approx(-1.0, abs=1e-12)

    def test_two_columns(self):
        b = Tensor(np.array([[1.0, 1.0], [2.0, 5.0], [3.0, 2.0], [4.0, 7.0]]))
        h = Tensor(np.array([[1.0, 4.0], [2.0, 4.0], [3.0, 4.0], [4.0, 4.0]]))
        assert losses.adv_corr_loss(b, h, 1e-15).item() == pytest.approx(-1.0, abs=1e-12)

    def test_matches_reference(self):
        rng = np.random.default_rng(3)
        b, h = rng.standard_normal((32, 3)), rng.standard_normal((32, 3))
        want = -sum(corr_sq_reference(b[:, j], h[:, j], 1e-8) for j in range(3))
        assert losses.adv_corr_loss(Tensor(b), Tensor(h)).item() == pytest.approx(want, abs=1e-12)

    def test_range(self):
        rng = np.random.default_rng(4)
        v = losses.adv_corr_loss(Tensor(rng.standard_normal((20, 3))), Tensor(rng.standard_normal((20, 3)))).item()
        assert -3.0 <= v <= 0.0

    def test_row_permutation(self):
        rng = np.random.default_rng(5)
        b, h = rng.standard_normal((12, 2)), rng.standard_normal((12, 2))
        p = rng.permutation(12)
        v1 = losses.adv_corr_loss(Tensor(b), Tensor(h)).item()
        v2 = losses.adv_corr_loss(Tensor(b[p]), Tensor(h[p])).item()
        assert v1 == pytest.approx(v2, abs=1e-13)

    def test_gradcheck(self):
        rng = np.random.default_rng(6)
        b = Tensor(rng.standard_normal((10, 2)))
        assert gradcheck(lambda h: losses.adv_corr_loss(b, h), [rng.standard_normal((10, 2))]) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            losses.adv_corr_loss(Tensor(np.zeros((4, 1))), Tensor(np.zeros((4, 2))))
        with pytest.raises(ContractViolation):
            losses.adv_corr_loss(Tensor(np.zeros(4)), Tensor(np.zeros(4)))


class TestAdvMse:
    def test_exact(self):
        b = col([1.0, 2.0, 3.0])
        assert losses.adv_mse_loss(b, b).item() == 0.0

    def test_shift(self):
        b = col([1.0, 2.0, 3.0])
        assert losses.adv_mse_loss(b, b + 0.5).item() == pytest.approx(0.25, rel=1e-14)

    def test_reference(self):
        rng = np.random.default_rng(7)
        b, h = rng.standard_normal((9, 2)), rng.standard_normal((9, 2))
        want = sum((x - y) ** 2 for x, y in zip(b.ravel(), h.ravel())) / b.size
        assert losses.adv_mse_loss(Tensor(b), Tensor(h)).item() == pytest.approx(want, abs=1e-12)

    def test_mismatch(self):
        with pytest.raises(ContractViolation):
            losses.adv_mse_loss(Tensor(np.zeros((4, 1))), Tensor(np.zeros((3, 1))))


class TestZafar:
    def test_constant_logits(self):
        b = col([1.0, 2.0, 3.0, 4.0])
        assert losses.zafar_penalty(b, Tensor(np.tile([0.3, -0.2], (4, 1)))).item() == 0.0

    def test_logit_difference_equals_b(self):
        bv = np.array([1.0, 2.0, 4.0, 8.0])
        logits = np.stack([np.zeros(4), bv], axis=1)
        assert losses.zafar_penalty(col(bv), Tensor(logits), 1e-15).item() == pytest.approx(1.0, abs=1e-12)

    def test_reference(self):
        rng = np.random.default_rng(8)
        b, z = rng.standard_normal((15, 2)), rng.standard_normal((15, 2))
        d = z[:, 1] - z[:, 0]
        want = sum(corr_sq_reference(b[:, j], d, 1e-8) for j in range(2))
        assert losses.zafar_penalty(Tensor(b), Tensor(z)).item() == pytest.approx(want, abs=1e-12)

    def test_needs_binary(self):
        with pytest.raises(ContractViolation):
            losses.zafar_penalty(col([1.0, 2.0]), Tensor(np.zeros((2, 3))))

    def test_needs_two_samples(self):
        with pytest.raises(ContractViolation):
            losses.zafar_penalty(col([1.0]), Tensor(np.zeros((1, 2))))


class TestTotalObjective:
    def test_br_net_example(self):
        loss, bp = losses.total_objective(LossVariant("br_net", 1.0), Tensor(0.5), Tensor(-1.0))
        assert loss.item() == 1.5
        assert bp.item() == -1.0

    def test_lambda_zero(self):
        loss, _ = losses.total_objective(LossVariant("br_net", 0.0), Tensor(0.5), Tensor(-0.7))
        assert loss.item() == 0.5

    def test_vanilla(self):
        lc = Tensor(0.4)
        loss, bp = losses.total_objective(LossVariant("vanilla"), lc, Tensor(-1.0))
        assert loss is lc and bp is None

    def test_multi_task(self):
        b = col([1.0, 2.0, 3.0])
        mse = losses.adv_mse_loss(b, b + 1.0)
        loss, bp = losses.total_objective(LossVariant("multi_task", 1.0), Tensor(0.25), mse)
        assert loss.item() == pytest.approx(1.25)
        assert bp is None

    def test_adv_mse_maximizes_mse(self):
        loss, bp = losses.total_objective(LossVariant("adv_mse", 2.0), Tensor(0.25), Tensor(3.0))
        assert loss.item() == pytest.approx(0.25 - 6.0)
        assert bp.item() == 3.0


# ---------------------------------------------------------------------------
# Mean independence on exactly enumerated discrete joints


def expect(outcomes, fn):
    return sum(p * fn(o) for o, p in outcomes)


def cov(outcomes, g, h):
    return expect(outcomes, lambda o: g(o) * h(o)) - expect(outcomes, g) * expect(outcomes, h)


def all_maps(domain, values):
    for image in itertools.product(values, repeat=len(domain)):
        yield dict(zip(domain, image))


VALUES = [Fraction(v) for v in (-3, -1, 0, Fraction(1, 2), 2, 5)]


class TestMeanIndependence:
    def test_mean_independent_not_independent(self):
        q = Fraction(1, 4)
        outcomes = [((f, z * (1 + f)), q) for f in (0, 1) for z in (-1, 1)]
        for f0 in (0, 1):
            given_f = [(o, p) for o, p in outcomes if o[0] == f0]
            assert sum(p * o[1] for o, p in given_f) == 0
        # not independent: |B| is determined by F
        assert cov(outcomes, lambda o: abs(o[1]), lambda o: o[0]) != 0
        for phi in all_maps((0, 1), VALUES):
            assert cov(outcomes, lambda o: o[1], lambda o: phi[o[0]]) == 0

    def test_quadratic_dependence(self):
        q = Fraction(1, 3)
        outcomes = [((f, f * f), q) for f in (-1, 0, 1)]
        assert cov(outcomes, lambda o: o[1], lambda o: o[0]) == 0
        assert cov(outcomes, lambda o: o[1], lambda o: o[0] ** 2) == Fraction(2, 9)
        witnesses = [phi for phi in all_maps((-1, 0, 1), VALUES)
                     if cov(outcomes, lambda o: o[1], lambda o: phi[o[0]]) != 0]
        assert witnesses

    def test_independent(self):
        pf = {0: Fraction(1, 2), 1: Fraction(1, 3), 2: Fraction(1, 6)}
        pb = {-2: Fraction(1, 4), 1: Fraction(1, 2), 7: Fraction(1, 4)}
        outcomes = [((f, b), pf[f] * pb[b]) for f in pf for b in pb]
        for phi in all_maps((0, 1, 2), VALUES):
            assert cov(outcomes, lambda o: o[1], lambda o: phi[o[0]]) == 0
