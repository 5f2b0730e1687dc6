import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from ovrosr.distributions import (
    WeibullParams,
    fit_weibull,
    student_t_sf,
    weibull_cdf,
    weibull_logpdf,
    weibull_loglik,
    weibull_sample,
)
from ovrosr.exceptions import (
    ContractError,
    DegenerateTailError,
    DomainError,
    InsufficientTailError,
)

E_INV = 1 - math.exp(-1)


def brute_force_grid(data, nu, lams, kappas):
    best = (-math.inf, None)
    for lam in lams:
        for k in kappas:
            ll = weibull_loglik(WeibullParams(nu, lam, k), data)
            if ll > best[0]:
                best = (ll, (lam, k))
    return best


class TestCdf:
    def test_at_location_is_zero(self):
        assert weibull_cdf(WeibullParams(0.3, 1.7, 2.2), 0.3) == 0.0

    def test_below_location_is_zero(self):
        assert weibull_cdf(WeibullParams(0.3, 1.7, 2.2), -5.0) == 0.0

    def test_one_scale_above_location(self):
        assert weibull_cdf(WeibullParams(0.3, 1.7, 2.2), 2.0) == pytest.approx(E_INV, abs=1e-12)

    def test_exponential_hand_value(self):
        assert weibull_cdf(WeibullParams(0.0, 2.0, 1.0), 2.0) == pytest.approx(0.632121, abs=1e-6)

    def test_invalid_parameters(self):
        with pytest.raises(ContractError):
            WeibullParams(0.0, 0.0, 1.0)
        with pytest.raises(ContractError):
            WeibullParams(0.0, 1.0, -1.0)

    @given(st.floats(-5, 5), st.floats(0.05, 10), st.floats(0.1, 8),
           st.floats(-20, 20), st.floats(0, 5))
    def test_monotone_and_bounded(self, nu, lam, k, x, dx):
        p = WeibullParams(nu, lam, k)
        a, b = weibull_cdf(p, x), weibull_cdf(p, x + dx)
        assert 0.0 <= a <= b <= 1.0

    def test_dict_round_trip(self):
        p = WeibullParams(-0.125, 0.75, 1.5)
        assert p.to_dict() == {"nu": -0.125, "lambda": 0.75, "kappa": 1.5}
        assert WeibullParams.from_dict(p.to_dict()) == p


class TestLoglik:
    def test_exponential_at_origin(self):
        p = WeibullParams(0.0, 1.0, 1.0)
        assert weibull_loglik(p, [1e-12]) == pytest.approx(0.0, abs=1e-9)

    def test_single_datum(self):
        assert weibull_loglik(WeibullParams(0.0, 1.0, 1.0), [1.0]) == pytest.approx(-1.0, abs=1e-15)

    def test_at_location_raises(self):
        with pytest.raises(DomainError):
            weibull_logpdf(WeibullParams(0.0, 1.0, 2.0), [0.5, 0.0])

    def test_matches_scipy(self):
        from scipy.stats import weibull_min

        x = np.linspace(0.2, 4.0, 17)
        p = WeibullParams(0.1, 1.3, 2.4)
        np.testing.assert_allclose(weibull_logpdf(p, x),
                                   weibull_min.logpdf(x, 2.4, loc=0.1, scale=1.3), rtol=1e-12)


class TestFit:
    def test_recovery_1000(self):
        rng = np.random.default_rng(2024)
        data = weibull_sample(WeibullParams(0.0, 1.0, 1.5), 1000, rng)
        fit = fit_weibull(data)
        assert 0.9 <= fit.lam <= 1.1
        assert 1.35 <= fit.kappa <= 1.65
        # brute-force likelihood grid over the same location finds the same region
        lams = np.linspace(0.5, 2.0, 61)
        kappas = np.linspace(0.5, 3.0, 101)
        _, (lam_g, k_g) = brute_force_grid(data, fit.nu, lams, kappas)
        assert abs(lam_g - fit.lam) <= 0.03
        assert abs(k_g - fit.kappa) <= 0.03

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_beats_scale_perturbation(self, seed):
        rng = np.random.default_rng(seed)
        data = weibull_sample(WeibullParams(0.5, 2.0, 2.5), 300, rng)
        fit = fit_weibull(data)
        for f in (0.9, 1.1):
            other = WeibullParams(fit.nu, fit.lam * f, fit.kappa)
            assert fit.loglik >= weibull_loglik(other, data)

    def test_loglik_consistent(self):
        data = weibull_sample(WeibullParams(0.0, 1.0, 2.0), 200, np.random.default_rng(4))
        fit = fit_weibull(data)
        assert fit.loglik == pytest.approx(weibull_loglik(fit.params(), data), rel=1e-12)
        assert fit.nu < data.min()

    def test_scale_equivariance(self):
        base = fit_weibull([1.0, 2.0, 3.0])
        for c in (0.01, 7.0, 250.0):
            f = fit_weibull([c, 2 * c, 3 * c])
            assert f.lam == pytest.approx(c * base.lam, rel=1e-6)
            assert f.kappa == pytest.approx(base.kappa, rel=1e-6)

    def test_degenerate_spread(self):
        with pytest.raises(DegenerateTailError):
            fit_weibull([1.0, 1.0 + 1e-10, 1.0])

    def test_two_close_points(self):
        with pytest.raises((InsufficientTailError, DegenerateTailError)):
            fit_weibull([1.0, 1.000001])

    def test_insufficient(self):
        with pytest.raises(InsufficientTailError):
            fit_weibull([1.0, 2.0], min_n=3)

    def test_non_finite(self):
        with pytest.raises(ContractError):
            fit_weibull([1.0, 2.0, np.inf])

    def test_deterministic(self):
        data = weibull_sample(WeibullParams(0, 1, 1), 50, np.random.default_rng(9))
        assert fit_weibull(data) == fit_weibull(data)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=40))
    def test_arbitrary_tails_fit_below_min(self, xs):
        assume(max(xs) - min(xs) > 1e-6)
        fit = fit_weibull(xs)
        assert fit.nu < min(xs)
        assert math.isfinite(fit.loglik)
        assert fit.lam > 0 and fit.kappa > 0


class TestStudentT:
    @pytest.mark.parametrize("df", [1, 2, 5, 30])
    def test_zero_is_half(self, df):
        assert student_t_sf(0.0, df) == 0.5

    def test_df2_closed_form(self):
        t = 3.4641
        closed = 0.5 - t / (2 * math.sqrt(2 + t * t))
        assert student_t_sf(t, 2) == pytest.approx(closed, abs=1e-12)
        assert student_t_sf(t, 2) == pytest.approx(0.03709, abs=5e-6)

    def test_limits(self):
        assert student_t_sf(math.inf, 3) == 0.0
        assert student_t_sf(1e300, 3) == pytest.approx(0.0, abs=1e-300)
        assert student_t_sf(-math.inf, 3) == 1.0

    @given(st.floats(-50, 50), st.integers(1, 200))
    def test_symmetry(self, t, df):
        assert student_t_sf(t, df) + student_t_sf(-t, df) == pytest.approx(1.0, abs=1e-12)

    def test_df1_is_cauchy(self):
        for t in (-3.0, 0.4, 2.0):
            assert student_t_sf(t, 1) == pytest.approx(0.5 - math.atan(t) / math.pi, abs=1e-12)

    def test_bad_df(self):
        with pytest.raises(ContractError):
            student_t_sf(1.0, 0)
