import math
from unittest.mock import patch

import numpy as np
import pytest

from retromc.exceptions import NumericalError
from retromc.models.params import GridSpec, ModelParams, OptionType, PayoffSpec, StrikeStyle
from retromc.services.baseline_mc import (
    control_variate_expectation,
    discrete_geometric_moments,
    trap_kv_price,
    trap_underlying_samples,
    trapezoid_weights,
)

MIXED = ModelParams(S0=100.0, r=0.05, delta=0.0, sigma=0.3, T=1.0, alpha=0.6, beta=0.4, K=100.0)
ASIAN = ModelParams(S0=100.0, r=0.1, delta=0.0, sigma=0.2, T=1.0, alpha=0.0, beta=1.0, K=100.0)


def joint_gaussian_oracle(params, payoff, grid, n=1_000_000, seed=0):
    """MC of the control payoff from the joint law of (log S_T, G); returns (mean, se)"""
    mom = discrete_geometric_moments(params, grid)
    var_l = params.sigma ** 2 * params.T
    cov = np.array([[var_l, mom.covariance], [mom.covariance, mom.variance]])
    rng = np.random.default_rng(seed)
    draws = rng.multivariate_normal([params.gamma * params.T, mom.mean], cov, size=n, method="eigh")
    proxy = (params.alpha * params.S0 * np.exp(draws[:, 0])
             + params.beta * params.T * params.S0 * np.exp(draws[:, 1]))
    if payoff.option_type == OptionType.CALL:
        values = np.maximum(proxy - payoff.strike, 0.0)
    else:
        values = np.maximum(payoff.strike - proxy, 0.0)
    values *= params.discount
    return values.mean(), values.std(ddof=1) / math.sqrt(n)


@pytest.mark.unit
class TestGeometricMoments:

    def test_trapezoid_weights(self):
        assert trapezoid_weights(1).tolist() == [0.5, 0.5]
        assert trapezoid_weights(4).sum() == 4.0

    @pytest.mark.parametrize("M", [1, 2, 7, 1000])
    @pytest.mark.parametrize("T", [1.0, 2.0])
    def test_closed_forms(self, M, T):
        params = ASIAN.model_copy(update={"T": T})
        mom = discrete_geometric_moments(params, GridSpec(M=M))
        s2 = params.sigma ** 2
        assert mom.mean == pytest.approx(0.5 * params.gamma * T)
        assert mom.variance == pytest.approx(s2 * T / 3.0 - s2 * T / (12.0 * M * M), rel=1e-12)
        assert mom.covariance == pytest.approx(s2 * T / 2.0, rel=1e-12)

    def test_continuous_limit(self):
        mom = discrete_geometric_moments(ASIAN, GridSpec(M=100_000))
        assert mom.variance == pytest.approx(ASIAN.sigma ** 2 / 3.0, rel=1e-9)


@pytest.mark.unit
class TestControlVariateExpectation:

    @pytest.mark.parametrize("M", [1, 10, 50])
    @pytest.mark.parametrize("option_type", [OptionType.CALL, OptionType.PUT])
    def test_matches_joint_gaussian_oracle(self, M, option_type):
        payoff = PayoffSpec(option_type=option_type, strike=100.0)
        grid = GridSpec(M=M)
        expected, se = joint_gaussian_oracle(MIXED, payoff, grid)
        assert abs(control_variate_expectation(MIXED, payoff, grid) - expected) < 4.0 * se

    def test_zero_alpha_matches_oracle(self):
        payoff = PayoffSpec(strike=100.0)
        grid = GridSpec(M=20)
        expected, se = joint_gaussian_oracle(ASIAN, payoff, grid)
        assert abs(control_variate_expectation(ASIAN, payoff, grid) - expected) < 4.0 * se

    @pytest.mark.parametrize("params, M", [(MIXED, 1), (MIXED, 50), (ASIAN, 50)])
    def test_put_call_parity(self, params, M):
        grid = GridSpec(M=M)
        mom = discrete_geometric_moments(params, grid)
        call = control_variate_expectation(params, PayoffSpec(strike=90.0), grid)
        put = control_variate_expectation(params, PayoffSpec(option_type=OptionType.PUT, strike=90.0), grid)
        forward = (params.alpha * params.S0 * math.exp((params.gamma + 0.5 * params.sigma ** 2) * params.T)
                   + params.beta * params.T * params.S0 * math.exp(mom.mean + 0.5 * mom.variance))
        assert call - put == pytest.approx(params.discount * (forward - 90.0), rel=1e-8)

    def test_reference_value_with_small_conditional_variance(self):
        """Undiscounted value at M = 10; Gauss-Hermite sums only reach it near 256 nodes"""
        value = control_variate_expectation(MIXED, PayoffSpec(), GridSpec(M=10))
        assert value / MIXED.discount == pytest.approx(11.85602, abs=2e-5)

    @pytest.mark.parametrize("M", [2, 3, 8, 25, 49, 50])
    @pytest.mark.parametrize("option_type", [OptionType.CALL, OptionType.PUT])
    def test_every_grid_size_converges(self, M, option_type):
        payoff = PayoffSpec(option_type=option_type, strike=100.0)
        value = control_variate_expectation(MIXED, payoff, GridSpec(M=M))
        assert math.isfinite(value)
        assert value > 0.0

    def test_unconverged_quadrature_raises(self):
        with patch('retromc.services.baseline_mc.QUAD_RTOL', -1.0):
            with pytest.raises(NumericalError):
                control_variate_expectation(MIXED, PayoffSpec(), GridSpec(M=50))


@pytest.mark.unit
class TestTrapezoidalPricing:

    def test_deterministic_limit(self):
        params = MIXED.model_copy(update={"sigma": 1e-6})
        result = trap_kv_price(params, PayoffSpec(), GridSpec(M=50), n=1000, seed=1)
        g = params.r
        exact = params.discount * (params.alpha * params.S0 * math.exp(g)
                                   + params.beta * params.S0 * math.expm1(g) / g - params.K)
        assert result.price == pytest.approx(exact, abs=1e-3)

    def test_control_variate_shrinks_interval(self):
        raw = trap_kv_price(MIXED, PayoffSpec(), GridSpec(M=20), n=20000, seed=2, control_variate=False)
        adjusted = trap_kv_price(MIXED, PayoffSpec(), GridSpec(M=20), n=20000, seed=2)
        assert raw.price == pytest.approx(adjusted.diagnostics["raw_price"])
        assert "cv_lambda" not in raw.diagnostics
        assert adjusted.half_width * 4.0 <= raw.half_width
        assert adjusted.overlaps(raw)

    def test_fitted_coefficient(self):
        result = trap_kv_price(MIXED, PayoffSpec(), GridSpec(M=10), n=5000, seed=3, fitted_lambda=True)
        assert result.diagnostics["cv_lambda"] != 1.0
        assert result.diagnostics["steps"] == 10.0

    def test_workers_are_deterministic(self):
        a = trap_kv_price(MIXED, PayoffSpec(), GridSpec(M=10), n=3001, seed=4, workers=2)
        b = trap_kv_price(MIXED, PayoffSpec(), GridSpec(M=10), n=3001, seed=4, workers=2)
        assert a.n == 3001
        assert a.price == b.price
        assert a.std_error == b.std_error

    def test_chunking_keeps_draws(self):
        whole = trap_underlying_samples(MIXED, 16, 500, seed=5)
        with patch('retromc.services.baseline_mc.CHUNK_CELLS', 160):
            chunked = trap_underlying_samples(MIXED, 16, 500, seed=5)
        assert chunked.size == 500
        np.testing.assert_allclose(chunked, whole, rtol=1e-12)

    def test_floating_strike_parity(self):
        params = ASIAN.model_copy(update={"delta": 0.02})
        call = trap_kv_price(params, PayoffSpec(style=StrikeStyle.FLOATING), GridSpec(M=50), n=20000, seed=6)
        put = trap_kv_price(params, PayoffSpec(option_type=OptionType.PUT, style=StrikeStyle.FLOATING),
                            GridSpec(M=50), n=20000, seed=6)
        assert "cv_lambda" not in call.diagnostics
        g = params.r - params.delta
        forward_gap = params.discount * params.S0 * (math.expm1(g * params.T) / (g * params.T)
                                                     - math.exp(g * params.T))
        assert abs((call.price - put.price) - forward_gap) < 5.0 * (call.std_error + put.std_error) + 1e-3

    @pytest.mark.parametrize("option_type", [OptionType.CALL, OptionType.PUT])
    def test_floating_strike_deterministic_limit(self, option_type):
        """sigma -> 0: the put pays S0 e^{-delta T} (1 - (1 - e^{-gT}) / (gT)), g = r - delta; the call nothing"""
        params = ASIAN.model_copy(update={"sigma": 1e-5, "delta": 0.02})
        payoff = PayoffSpec(option_type=option_type, style=StrikeStyle.FLOATING)
        result = trap_kv_price(params, payoff, GridSpec(M=50), n=500, seed=7)
        g = params.r - params.delta
        put = params.S0 * math.exp(-params.delta * params.T) * (1.0 + math.expm1(-g * params.T) / (g * params.T))
        expected = put if option_type == OptionType.PUT else 0.0
        assert result.price == pytest.approx(expected, abs=1e-3)


@pytest.mark.integration
class TestReferenceValues:

    @pytest.mark.parametrize("M", [10, 20, 50])
    def test_mixed_call(self, M):
        result = trap_kv_price(MIXED, PayoffSpec(), GridSpec(M=M), n=200_000, seed=42, workers=4)
        assert abs(result.price - 11.46) < 4.0 * result.std_error + 0.03

    def test_asian_call(self):
        result = trap_kv_price(ASIAN, PayoffSpec(), GridSpec(M=100), n=200_000, seed=42, workers=4)
        assert abs(result.price - 7.042) < 4.0 * result.std_error + 0.01
