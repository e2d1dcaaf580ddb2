from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uplam.evidential import (
    DegenerateEvidenceError,
    epistemic_uncertainty,
    normalized_entropy,
    peak_probability_for_entropy,
    probabilities,
    softmax,
    total_evidence,
)


def _entropy_oracle(p) -> float:
    """Normalised entropy in 40-digit decimal arithmetic."""
    getcontext().prec = 40
    ps = [Decimal(str(x)) for x in p]
    h = -sum(x * x.ln() for x in ps if x > 0)
    return float(h / Decimal(len(ps)).ln())


# frozen from _entropy_oracle([0.625, 0.125, 0.125, 0.125])
PEAKED_ENTROPY = 0.7743974703476993

evidence = st.integers(2, 8).flatmap(
    lambda k: arrays(np.float64, k, elements=st.floats(1.0, 1000.0)))


class TestProbabilities:
    def test_uniform(self):
        np.testing.assert_allclose(probabilities([1, 1, 1, 1]), [0.25] * 4)

    def test_peaked(self):
        np.testing.assert_allclose(probabilities([5, 1, 1, 1]), [0.625, 0.125, 0.125, 0.125], rtol=0, atol=1e-15)

    def test_two_classes(self):
        np.testing.assert_allclose(probabilities([2, 2]), [0.5, 0.5])

    def test_batch(self):
        p = probabilities(np.array([[5, 1, 1, 1], [1, 1, 1, 5]]))
        assert p.shape == (2, 4)
        assert p[1, 3] == 0.625

    @pytest.mark.parametrize("bad", [[0, 0, 0, 0], [-1, 2, 1, 1], [np.nan, 1, 1, 1], [np.inf, 1, 1, 1]])
    def test_degenerate(self, bad):
        with pytest.raises(DegenerateEvidenceError):
            probabilities(bad)

    @given(evidence)
    def test_normalised(self, a):
        p = probabilities(a)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-9

    @given(evidence, st.floats(0.01, 100.0))
    def test_scale_invariance(self, a, c):
        np.testing.assert_allclose(probabilities(c * a), probabilities(a), rtol=1e-12)


class TestEpistemic:
    def test_examples(self):
        assert epistemic_uncertainty([1, 1, 1, 1]) == 1.0
        assert epistemic_uncertainty([97, 1, 1, 1]) == pytest.approx(0.04, abs=1e-15)
        assert epistemic_uncertainty([1, 1]) == 1.0

    def test_clamped(self):
        assert epistemic_uncertainty([0.5, 0.5, 0.5, 0.5]) == 1.0

    @given(evidence)
    def test_bounds_and_joint_consistency(self, a):
        u = epistemic_uncertainty(a)
        assert 0 < u <= 1
        assert u == pytest.approx(min(len(a) / total_evidence(a), 1.0), rel=1e-12)
        assert abs(probabilities(a).sum() - 1) <= 1e-9

    @given(evidence, st.floats(1.0, 50.0))
    def test_scaling_divides(self, a, c):
        # exact 1/c scaling holds wherever the clamp is inactive
        assert epistemic_uncertainty(c * a) == pytest.approx(epistemic_uncertainty(a) / c, rel=1e-12)


class TestNormalizedEntropy:
    def test_uniform(self):
        assert normalized_entropy([0.25] * 4) == pytest.approx(1.0, abs=1e-15)

    def test_one_hot(self):
        assert normalized_entropy([0.0, 1.0, 0.0, 0.0]) == 0.0

    def test_golden(self):
        assert _entropy_oracle([0.625, 0.125, 0.125, 0.125]) == pytest.approx(PEAKED_ENTROPY, abs=1e-15)
        assert normalized_entropy([0.625, 0.125, 0.125, 0.125]) == pytest.approx(PEAKED_ENTROPY, abs=1e-14)

    def test_single_class(self):
        assert normalized_entropy([1.0]) == 0.0

    @given(evidence)
    def test_bounds_and_oracle(self, a):
        p = probabilities(a)
        h = normalized_entropy(p)
        assert 0.0 <= h <= 1.0
        assert h == pytest.approx(_entropy_oracle(p), abs=1e-9)

    @given(evidence, st.randoms())
    def test_permutation_invariant(self, a, r):
        p = probabilities(a)
        q = p.copy()
        r.shuffle(q)
        assert normalized_entropy(q) == pytest.approx(normalized_entropy(p), abs=1e-12)

    @given(st.integers(2, 8), st.integers(0, 7))
    def test_extremes(self, k, hot):
        one = np.zeros(k)
        one[hot % k] = 1.0
        assert normalized_entropy(one) == 0.0
        assert normalized_entropy(np.full(k, 1.0 / k)) == pytest.approx(1.0, abs=1e-12)

    @given(evidence)
    def test_one_only_at_uniform(self, a):
        p = probabilities(a)
        if np.ptp(p) > 1e-3:
            assert normalized_entropy(p) < 1.0
        if p.max() < 1.0 - 1e-6:
            assert normalized_entropy(p) > 0.0


def test_softmax_matches_definition():
    z = np.array([1.0, 2.0, 3.0, 1000.0])
    np.testing.assert_allclose(softmax(z), [0, 0, 0, 1], atol=1e-300)
    z = np.array([0.1, -0.3, 0.7])
    np.testing.assert_allclose(softmax(z), np.exp(z) / np.exp(z).sum(), rtol=1e-14)


@given(st.floats(0.0, 1.0), st.integers(2, 6))
def test_peak_probability_inverts_entropy(target, k):
    q = float(peak_probability_for_entropy(np.array(target), k))
    p = np.array([q] + [(1 - q) / (k - 1)] * (k - 1))
    assert 1.0 / k - 1e-12 <= q <= 1.0
    assert normalized_entropy(p) == pytest.approx(target, abs=1e-8)
