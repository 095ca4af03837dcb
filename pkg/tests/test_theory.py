import math

import numpy as np
import pytest

from wmunlearn.errors import RegimeError
from wmunlearn.theory import (
    MixtureSpec,
    WatermarkSpec,
    canonical_reduction,
    input_gap_profile,
    input_smoothness_closed,
    mixture_params,
    normal_cdf,
    optimal_eta,
    param_smoothness_closed,
    random_mixture_spec,
    random_valid_spec,
    risk,
    stationarity_residual,
    sweep_conditions,
    theorem_conditions,
    verify_discrepancy,
)

SPEC = WatermarkSpec(d=2, mu_pos=1.0, mu_neg=-1.0, mu_wm=1.5, sigma=1.0, sigma_wm=2.0, p=1.0)


def test_normal_cdf():
    assert normal_cdf(1.96) == pytest.approx(0.975002, abs=1e-6)
    assert normal_cdf(0.0) == 0.5


class TestOptimalOffset:
    def test_known_value(self):
        assert optimal_eta(2.0, 1.0, 2.0 / 3.0, 4) == pytest.approx(4.0 / 3.0)

    def test_equal_variances(self):
        assert optimal_eta(1.0, 1.0, 0.5, 3) == pytest.approx(0.0)
        assert optimal_eta(1.5, 1.5, 0.8, 3) == pytest.approx(0.5 * 2.25 * math.log(4.0))

    def test_is_a_risk_minimum(self, rng):
        for _ in range(200):
            spec = random_mixture_spec(rng)
            eta = optimal_eta(spec.sigma_pos, spec.sigma_neg, spec.alpha, spec.d)
            assert abs(stationarity_residual(eta, spec)) < 1e-8
            h = 1e-3 * max(1.0, abs(eta))
            assert risk(eta, spec) <= min(risk(eta - h, spec), risk(eta + h, spec)) + 1e-12

    def test_no_stationary_point(self):
        with pytest.raises(RegimeError):
            optimal_eta(3.0, 0.1, 0.99, 1)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            MixtureSpec(0, 1.0, 1.0, 0.5)
        with pytest.raises(ValueError):
            MixtureSpec(1, 1.0, 1.0, 1.0)


class TestClosedForms:
    def test_input_smoothness_without_noise_is_class_accuracy(self):
        assert input_smoothness_closed(0.0, 1.0, 0.0, 4, 1) == pytest.approx(normal_cdf(2.0))
        with pytest.raises(ValueError):
            input_smoothness_closed(0.0, 1.0, 0.0, 4, 0)

    def test_param_smoothness(self):
        assert param_smoothness_closed(1.0, 1.0, 0.0, 3, -1) == 1.0
        assert param_smoothness_closed(1.0, 3.0, 0.0, 3, -1) == 0.5
        assert param_smoothness_closed(2.0, 0.0, 1.0, 3, 1) == pytest.approx(normal_cdf(3.0))
        with pytest.raises(ValueError):
            param_smoothness_closed(0.0, 0.0, 1.0, 3, 1)

    def test_mixture_params(self):
        assert mixture_params(0.0, 2.0, 1.0, 1.0, 0.5) == pytest.approx((1.0, 2.0))
        with pytest.raises(ValueError):
            mixture_params(0.0, 2.0, 1.0, 1.0, 0.0)

    def test_canonical_reduction_puts_means_at_unit_distance(self):
        canon = canonical_reduction(SPEC)
        mu, var = mixture_params(SPEC.mu_pos, SPEC.mu_wm, SPEC.sigma, SPEC.sigma_wm, SPEC.p)
        scale = 2.0 / (mu - SPEC.mu_neg)
        assert canon.sigma_pos == pytest.approx(scale * math.sqrt(var))
        assert canon.sigma_neg == pytest.approx(scale * SPEC.sigma)
        assert canon.alpha == pytest.approx(1.5 / 2.0)

    def test_degenerate_reduction(self):
        spec = WatermarkSpec(d=1, mu_pos=0.0, mu_neg=0.0, mu_wm=0.0, sigma=1.0, sigma_wm=1.0, p=0.5)
        with pytest.raises(RegimeError):
            canonical_reduction(spec)


class TestDiscrepancy:
    def test_conditions(self):
        assert theorem_conditions(SPEC) == (True, True)
        narrow = WatermarkSpec(d=2, mu_pos=1.0, mu_neg=-1.0, mu_wm=1.0, sigma=1.0, sigma_wm=0.5, p=1.0)
        assert theorem_conditions(narrow)[0] is False

    def test_monte_carlo_agrees_with_closed_forms(self):
        report = verify_discrepancy(SPEC, 0.5, 0.5, draws=20_000, seed=0)
        assert report.claimed
        assert report.mc_consistent(k=4.0)
        assert report.input_holds and report.param_holds
        payload = report.to_dict()
        assert payload["claimed"] is True and payload["draws"] == 20_000

    def test_zero_draws_skips_sampling(self):
        report = verify_discrepancy(SPEC, 0.5, 0.5, draws=0)
        assert report.mc_input_pos is None and report.mc_consistent()

    @pytest.mark.parametrize("sigma_input", [0.0, 0.5, 2.0])
    def test_inequalities_hold_inside_the_condition_region(self, sigma_input):
        rng = np.random.default_rng(7)
        for _ in range(30):
            report = verify_discrepancy(random_valid_spec(rng), sigma_input, 0.3, draws=0)
            assert report.claimed
            assert report.input_holds and report.param_holds

    def test_gap_profile_is_positive_for_claimed_canonical_spec(self):
        canon = canonical_reduction(SPEC)
        assert all(gap > 0 for _, gap in input_gap_profile(canon, [0.1, 1.0, 10.0]))

    def test_sweep_rows(self):
        rows = sweep_conditions(15, seed=3)
        assert len(rows) == 15
        assert all(row["claimed"] == (row["cond1"] and row["cond2"]) for row in rows)
        assert all(row["input_holds"] and row["param_holds"] for row in rows if row["claimed"])
