import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstl import autodiff as ad
from mstl.autodiff import Tensor
from mstl.losses import (
    ClassWeights,
    cbce_loss,
    ce_loss,
    class_balanced_weights,
    effective_number_weights,
    normalize_weights,
    softmax,
)
from gradcheck import check_gradients


def decimal_weight(beta: str, n: int) -> float:
    """(1 - beta) / (1 - beta**n) at 50 significant digits."""
    getcontext().prec = 50
    b = Decimal(beta)
    return float((1 - b) / (1 - b ** n))


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert ce_loss(Tensor(np.zeros(5)), 0).item() == pytest.approx(math.log(5), rel=1e-15)

    def test_confident_logits(self):
        expected = math.log1p(4 * math.exp(-10))
        assert expected == pytest.approx(1.8158e-4, rel=1e-4)
        got = ce_loss(Tensor([10.0, 0, 0, 0, 0]), 0).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_gradient_is_softmax_minus_onehot(self):
        z = Tensor(ad.randn([5], seed=4).data, requires_grad=True)
        ad.backward(ce_loss(z, 3))
        expected = softmax(z.data)
        expected[3] -= 1.0
        np.testing.assert_allclose(z.grad, expected, atol=1e-15)

    def test_batch_is_mean(self):
        Z = ad.randn([4, 3], seed=0).data
        y = [0, 2, 1, 1]
        singles = [ce_loss(Tensor(Z[i]), y[i]).item() for i in range(4)]
        assert ce_loss(Tensor(Z), y).item() == pytest.approx(np.mean(singles), rel=1e-14)

    def test_large_logits_stay_finite(self):
        assert math.isfinite(ce_loss(Tensor([1000.0, -1000.0]), 1).item())

    @pytest.mark.parametrize("y", [-1, 5])
    def test_target_out_of_range(self, y):
        with pytest.raises(ValueError):
            ce_loss(Tensor(np.zeros(5)), y)


class TestEffectiveNumberWeights:
    def test_beta_zero_is_all_ones(self):
        assert effective_number_weights([50, 3, 7], beta=0.0).weights == (1.0, 1.0, 1.0)

    @pytest.mark.parametrize("beta", [0.0, 0.5, 0.9, 0.9999, 1 - 1e-12])
    def test_single_sample_weight_is_one(self, beta):
        assert effective_number_weights([1], beta).weights[0] == pytest.approx(1.0, rel=1e-12)

    def test_closed_form_value(self):
        w = effective_number_weights([132], beta=0.9999).weights[0]
        assert w == pytest.approx(7.6255e-3, rel=1e-4)
        assert w == pytest.approx(decimal_weight("0.9999", 132), rel=1e-12)

    def test_beta_one_limit(self):
        assert effective_number_weights([4, 10], beta=1.0).weights == (0.25, 0.1)

    def test_near_one_approaches_inverse_frequency(self):
        counts = [1, 10, 100, 1000, 10000]
        w = effective_number_weights(counts, beta=1 - 1e-10)
        products = [wi * n for wi, n in zip(w.weights, counts)]
        np.testing.assert_allclose(products, products[0], rtol=1e-4)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError, match="class 1"):
            effective_number_weights([3, 0, 2], beta=0.9)

    @pytest.mark.parametrize("beta", [-0.1, 1.5, float("nan")])
    def test_beta_out_of_range(self, beta):
        with pytest.raises(ValueError):
            effective_number_weights([3, 2], beta=beta)

    def test_rarer_class_weighs_more(self):
        w = effective_number_weights([32, 5, 33, 18, 12], beta=0.9999).weights
        assert w[1] == max(w)
        assert w[2] == min(w)


class TestNormalize:
    def test_sums_to_num_classes(self):
        w = class_balanced_weights([32, 5, 33, 18, 12])
        assert sum(w.weights) == pytest.approx(5.0, abs=1e-12)
        assert w.normalized

    def test_idempotent(self):
        w = class_balanced_weights([32, 5, 33, 18, 12])
        np.testing.assert_allclose(normalize_weights(w).weights, w.weights, atol=1e-12)

    def test_equal_weights_become_one(self):
        w = normalize_weights(ClassWeights(0.5, (2, 2, 2), (0.3, 0.3, 0.3)))
        np.testing.assert_allclose(w.weights, 1.0, rtol=1e-15)

    def test_ratios_preserved(self):
        raw = effective_number_weights([32, 5, 33, 18, 12], beta=0.99)
        norm = normalize_weights(raw)
        np.testing.assert_allclose(np.divide.outer(norm.as_array(), norm.as_array()),
                                   np.divide.outer(raw.as_array(), raw.as_array()), rtol=1e-13)


class TestClassBalancedCE:
    def test_beta_zero_equals_ce(self):
        Z = Tensor(ad.randn([6, 5], seed=1).data)
        y = [0, 1, 4, 2, 2, 3]
        w = class_balanced_weights([10, 2, 7, 4, 1], beta=0.0)
        assert abs(cbce_loss(Z, y, w).item() - ce_loss(Z, y).item()) < 1e-12

    def test_single_sample_scales_by_weight(self):
        z = Tensor(ad.randn([5], seed=2).data)
        w = [0.5, 2.0, 1.0, 1.0, 0.5]
        assert cbce_loss(z, 1, w).item() == pytest.approx(2.0 * ce_loss(z, 1).item(), rel=1e-14)

    def test_constant_weights_cancel_in_batch(self):
        Z = Tensor(ad.randn([5, 5], seed=3).data)
        y = [0, 1, 2, 3, 4]
        assert cbce_loss(Z, y, [2.0] * 5).item() == pytest.approx(ce_loss(Z, y).item(), rel=1e-14)

    def test_weight_length_mismatch(self):
        with pytest.raises(ValueError):
            cbce_loss(Tensor(np.zeros((2, 5))), [0, 1], [1.0, 1.0, 1.0])

    def test_gradcheck(self):
        Z = Tensor(ad.randn([7, 5], seed=5).data, requires_grad=True)
        y = [0, 1, 4, 2, 2, 3, 1]
        w = class_balanced_weights([32, 5, 33, 18, 12], beta=0.9999)
        assert check_gradients(lambda: cbce_loss(Z, y, w), [Z]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(counts=st.lists(st.integers(1, 10**6), min_size=2, max_size=8), beta=st.floats(0.0, 1.0))
def test_weights_positive_and_normalized(counts, beta):
    w = class_balanced_weights(counts, beta=beta)
    assert all(v > 0 for v in w.weights)
    assert sum(w.weights) == pytest.approx(len(counts), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 10**5), beta=st.floats(0.0, 0.999999))
def test_weight_matches_decimal_oracle(n, beta):
    got = effective_number_weights([n], beta=beta).weights[0]
    assert got == pytest.approx(decimal_weight(repr(beta), n), rel=1e-9)
