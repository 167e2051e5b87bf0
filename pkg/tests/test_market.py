"""Parameter validation, coefficient functions and derived constants."""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stackmv import ModelParams, derive_constants, gamma_term

from conftest import BENCHMARK


def make_params(**overrides):
    return ModelParams(**{**BENCHMARK, **overrides})


class TestTheta:
    def test_endpoints(self, params):
        assert params.theta(0.0) == params.mu2
        assert params.theta(1.0) == params.mu1

    def test_midpoint(self, params):
        assert params.theta(0.5) == pytest.approx(0.06, abs=1e-15)

    @given(
        p=st.floats(0, 1), q=st.floats(0, 1), alpha=st.floats(0, 1)
    )
    def test_affine(self, p, q, alpha):
        prm = ModelParams(**BENCHMARK)
        mix = alpha * p + (1 - alpha) * q
        assert prm.theta(mix) == pytest.approx(
            alpha * prm.theta(p) + (1 - alpha) * prm.theta(q), abs=1e-12
        )

    def test_domain_error(self, params):
        with pytest.raises(ValueError):
            params.theta(-0.01)
        with pytest.raises(ValueError):
            params.theta(1.01)
        with pytest.raises(ValueError):
            params.theta(float("nan"))

    def test_vectorized(self, params):
        p = np.linspace(0, 1, 5)
        np.testing.assert_allclose(
            params.theta(p), (params.mu1 - params.mu2) * p + params.mu2
        )


class TestBeta:
    def test_endpoints_zero(self, params):
        assert params.beta(0.0) == 0.0
        assert params.beta(1.0) == 0.0

    def test_hand_computed_value(self, params):
        # (0.08 / 0.2) * 0.25 computed by hand
        assert params.beta(0.5) == pytest.approx(0.1, abs=1e-15)

    @given(p=st.floats(0, 1))
    def test_symmetry(self, p):
        prm = ModelParams(**BENCHMARK)
        assert prm.beta(p) == pytest.approx(prm.beta(1 - p), abs=1e-15)

    def test_maximum_at_half(self, params):
        p = np.linspace(0, 1, 1001)
        values = params.beta(p)
        assert values.max() == pytest.approx(
            (params.mu1 - params.mu2) / (4 * params.sigma), abs=1e-12
        )
        assert p[np.argmax(values)] == pytest.approx(0.5, abs=1e-3)
        assert np.all(values >= 0)

    def test_domain_error(self, params):
        with pytest.raises(ValueError):
            params.beta(1.5)


class TestValidation:
    @pytest.mark.parametrize(
        "overrides",
        [
            dict(mu1=0.02, mu2=0.02),
            dict(mu1=0.01, mu2=0.02),
            dict(sigma=0.0),
            dict(r=-0.01),
            dict(T=0.0),
            dict(gamma1=0.0),
            dict(gamma2=-1.0),
            dict(lambda1=1.0),
            dict(lambda2=-0.1),
            dict(lambda0=-0.5),
        ],
    )
    def test_rejects(self, overrides):
        with pytest.raises(ValueError):
            make_params(**overrides)

    def test_unchecked_allows_degenerate(self):
        prm = ModelParams.unchecked(**{**BENCHMARK, "mu1": 0.02, "mu2": 0.02})
        assert prm.mu1 == prm.mu2
        assert prm.beta(0.5) == 0.0


class TestDerivedConstants:
    def test_no_concern_reduces_to_single_investor(self):
        c = derive_constants(make_params(lambda1=0.0, lambda2=0.0))
        assert c.kappa == 0.0
        assert c.chi == 1.0
        assert c.l == 1.0 / BENCHMARK["gamma1"]

    def test_direct_substitution(self):
        c = derive_constants(make_params(lambda2=0.0, lambda1=0.5))
        assert c.kappa == 0.0
        assert c.chi == pytest.approx(0.75, abs=1e-15)

    def test_rational_arithmetic_oracle(self):
        # independent evaluation of the three formulas in exact arithmetic
        cases = [
            (Fraction(1, 2), Fraction(1, 2), Fraction(2), Fraction(2)),
            (Fraction(1, 3), Fraction(2, 5), Fraction(3, 2), Fraction(5, 2)),
            (Fraction(0), Fraction(9, 10), Fraction(1), Fraction(4)),
            (Fraction(7, 10), Fraction(0), Fraction(5), Fraction(1, 2)),
        ]
        for lam1, lam2, g1, g2 in cases:
            kappa = lam2 / (2 - lam2)
            chi = (2 - lam2 - lam1) / (2 - lam2)
            l = (2 * g2 - lam2 * g2 + lam1 * g1) / ((2 - lam2 - lam1) * g1 * g2)
            c = derive_constants(
                make_params(
                    lambda1=float(lam1), lambda2=float(lam2),
                    gamma1=float(g1), gamma2=float(g2),
                )
            )
            assert c.kappa == pytest.approx(float(kappa), rel=1e-14)
            assert c.chi == pytest.approx(float(chi), rel=1e-14)
            assert c.l == pytest.approx(float(l), rel=1e-14)

    def test_benchmark_l_is_one(self, params):
        # (2*2 - 0.5*2 + 0.5*2) / ((2 - 1) * 2 * 2) = 4/4
        assert derive_constants(params).l == pytest.approx(1.0, rel=1e-15)

    @given(
        lam1=st.floats(0, 0.99),
        lam2=st.floats(0, 0.99),
        g1=st.floats(0.1, 10),
        g2=st.floats(0.1, 10),
    )
    def test_invariant_ranges(self, lam1, lam2, g1, g2):
        c = derive_constants(make_params(lambda1=lam1, lambda2=lam2, gamma1=g1, gamma2=g2))
        assert 0 <= c.kappa < 1
        assert 0 < c.chi <= 1
        assert c.l > 0

    def test_lambda1_zero_gives_inverse_gamma1(self):
        for lam2 in (0.0, 0.3, 0.8):
            for g1 in (0.5, 2.0, 7.0):
                c = derive_constants(make_params(lambda1=0.0, lambda2=lam2, gamma1=g1))
                assert c.l == pytest.approx(1.0 / g1, rel=1e-14)


class TestGammaTerm:
    def test_lambda2_zero_equals_single_investor(self, params):
        prm = make_params(lambda2=0.0)
        p, da2 = 0.4, 0.7
        expected = (prm.theta(p) - prm.r) / (prm.sigma**2 * prm.gamma2) - prm.beta(
            p
        ) * da2 / prm.sigma
        assert gamma_term(p, da2, prm) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("p", [0.0, 1.0])
    def test_boundary_hedging_vanishes(self, params, p):
        # beta(p) = 0 kills the hedging term regardless of the derivative
        expected = (params.theta(p) - params.r) / (
            params.sigma**2 * params.gamma2 * (1 - params.lambda2 / 2)
        )
        assert gamma_term(p, 123.0, params) == pytest.approx(expected, rel=1e-14)

    def test_terminal_derivative_zero(self, params):
        # at t = T the stored derivative is zero, leaving only the myopic part
        p = 0.3
        expected = (params.theta(p) - params.r) / (
            params.sigma**2 * params.gamma2 * (1 - params.lambda2 / 2)
        )
        assert gamma_term(p, 0.0, params) == pytest.approx(expected, rel=1e-14)

    def test_vectorized_rows(self, params):
        p = np.linspace(0, 1, 7)
        da = np.linspace(-1, 1, 7)
        out = gamma_term(p, da, params)
        assert out.shape == (7,)
        assert math.isfinite(out.sum())
