import math
from unittest.mock import patch

import mpmath
import numpy as np
import pytest
from scipy import integrate, stats

from retromc.exceptions import DomainError
from retromc.models.params import GridSpec, HybridConfig, ModelParams, OptionType, PayoffSpec, StrikeStyle
from retromc.services.asian_zero import (
    A_t_z,
    HybridTrajectory,
    TailIntensity,
    ZeroAlphaModel,
    em1z,
    heavy_tail_diagnostic,
    hybrid_price_sample,
    kv_control_variate_price,
    phi_plus_interval_bound,
    near_zero_tail_intensity,
    phi_minus,
    phi_plus,
    phi_t_z,
    price_asian_hybrid,
    z_lower_bound,
)
from retromc.services.baseline_mc import trap_kv_price
from retromc.services.runner import SampleBatch
from retromc.services.stochastic_core import RngStream

ASIAN = ModelParams(S0=100.0, r=0.1, delta=0.0, sigma=0.2, T=1.0, alpha=0.0, beta=1.0, K=100.0)
SIGMA, GAMMA = 0.2, 0.08

mpmath.mp.dps = 50


def phi_reference(t, z, sigma=SIGMA, gamma=GAMMA):
    t, z, sigma, gamma = (mpmath.mpf(x) for x in (t, z, sigma, gamma))
    s2 = sigma * sigma
    e = mpmath.exp(-z)
    e1 = e - 1 + z
    return ((e1 - z * z / 2) / (s2 * t * t) + (1 - e) / (2 * t)
            + e1 / (s2 * t) * (e1 / (2 * t) + gamma - z / t))


def a_reference(t, z, sigma=SIGMA):
    t, z, sigma = (mpmath.mpf(x) for x in (t, z, sigma))
    return (1 - z + z * z / 2 - mpmath.exp(-z)) / (sigma * sigma * t)


def terminal_expectation(fn, params):
    """E[fn(Z_T)] for Z_T ~ N(gamma T/2, sigma^2 T/3)"""
    mean = 0.5 * params.gamma * params.T
    sd = params.sigma * math.sqrt(params.T / 3.0)
    value, _ = integrate.quad(lambda z: fn(z) * stats.norm.pdf(z, mean, sd), mean - 12.0 * sd, mean + 12.0 * sd,
                              epsabs=1e-12, epsrel=1e-10, limit=200)
    return value


@pytest.mark.unit
class TestPotential:

    @pytest.mark.parametrize("t", [1e-6, 0.1, 0.5, 1.0, 7.0])
    def test_vanishes_at_zero(self, t):
        assert phi_t_z(t, 0.0, SIGMA, GAMMA) == 0.0
        assert A_t_z(t, 0.0, SIGMA) == 0.0

    @pytest.mark.parametrize("z", [-30.0, -5.0, -1.0, -0.999, -1e-3, -1e-7, 1e-9, 1e-5, 0.3, 0.999, 1.0, 2.5, 40.0])
    @pytest.mark.parametrize("t", [0.01, 0.5, 1.0])
    def test_matches_extended_precision(self, t, z):
        assert phi_t_z(t, z, SIGMA, GAMMA) == pytest.approx(float(phi_reference(t, z)), rel=1e-10, abs=1e-300)
        assert A_t_z(t, z, SIGMA) == pytest.approx(float(a_reference(t, z)), rel=1e-10, abs=1e-300)

    @pytest.mark.parametrize("z", [-2.0, -0.5, 1e-6, 0.7, 3.0])
    def test_em1z(self, z):
        expected = mpmath.exp(-mpmath.mpf(z)) - 1 + mpmath.mpf(z)
        assert em1z(z) == pytest.approx(float(expected), rel=1e-12)

    def test_large_negative_argument(self):
        assert phi_t_z(0.5, -10.0, SIGMA, GAMMA) > 1e9
        assert math.isinf(phi_t_z(0.5, -800.0, SIGMA, GAMMA))

    def test_rejects_non_positive_time(self):
        with pytest.raises(DomainError):
            phi_t_z(0.0, 0.1, SIGMA, GAMMA)
        with pytest.raises(DomainError):
            A_t_z(-1.0, 0.1, SIGMA)

    def test_parts_partition_phi(self):
        rng = np.random.default_rng(2)
        for t, z in zip(rng.uniform(1e-3, 1.0, 2000), rng.normal(0.0, 1.0, 2000)):
            plus, minus = phi_plus(t, z, SIGMA, GAMMA), phi_minus(t, z, SIGMA, GAMMA)
            assert plus >= 0.0 and minus >= 0.0
            assert plus * minus == 0.0
            assert plus - minus == pytest.approx(phi_t_z(t, z, SIGMA, GAMMA), abs=1e-12)


@pytest.mark.unit
class TestBounds:

    def test_bound_without_negative_part(self):
        assert phi_plus_interval_bound(0.5, 1.0, 0.0, SIGMA, 0.0) == pytest.approx(1.0)

    def test_bound_against_grid(self):
        t = np.linspace(0.5, 1.0, 200)
        z = np.linspace(-0.3, 5.0, 200)
        grid_sup = max(phi_plus(a, b, SIGMA, GAMMA) for a in t for b in z)
        bound = phi_plus_interval_bound(0.5, 1.0, -0.3, SIGMA, GAMMA)
        assert grid_sup <= bound <= 10.0 * max(grid_sup, 1e-12)

    def test_bound_dominates_random_points(self):
        rng = np.random.default_rng(3)
        for _ in range(10000):
            t_l = rng.uniform(1e-3, 0.5)
            t_u = 2.0 * t_l
            m_j = rng.uniform(-1.0, 1.0)
            bound = phi_plus_interval_bound(t_l, t_u, m_j, SIGMA, GAMMA)
            t = rng.uniform(t_l, t_u)
            z = m_j + rng.exponential(0.5)
            assert phi_plus(t, z, SIGMA, GAMMA) <= bound * (1.0 + 1e-12)

    def test_bound_needs_ordered_interval(self):
        with pytest.raises(DomainError):
            phi_plus_interval_bound(1.0, 0.5, 0.0, SIGMA, GAMMA)
        with pytest.raises(DomainError):
            phi_plus_interval_bound(0.0, 0.5, 0.0, SIGMA, GAMMA)

    def test_z_lower_bound_example(self):
        assert z_lower_bound(0.25, 0.5, -0.05, SIGMA, GAMMA) == pytest.approx(-0.03)
        assert z_lower_bound(0.25, 0.5, 0.2, SIGMA, GAMMA) == pytest.approx(0.01)
        assert z_lower_bound(0.25, 0.5, 0.2, SIGMA, -0.08) == pytest.approx(-0.02)

    def test_tail_intensity_constant(self):
        tail = near_zero_tail_intensity(0.1, SIGMA, GAMMA)
        assert tail.kappa == pytest.approx(0.08853, abs=2e-5)
        assert tail.exponent == pytest.approx(-0.6)
        negative = near_zero_tail_intensity(0.1, SIGMA, -0.5)
        c = SIGMA / 3.0 ** (0.5 - 0.1 / 3.0)
        assert negative.kappa == pytest.approx(2.0 * c ** 3 / (3.0 * SIGMA ** 2) + 0.5 * c)

    @pytest.mark.parametrize("eta", [0.0, 0.25, -0.1])
    def test_tail_intensity_range(self, eta):
        with pytest.raises(DomainError):
            near_zero_tail_intensity(eta, SIGMA, GAMMA)

    def test_tail_times_follow_cumulative(self):
        """Time marks have CDF Lambda(t) / Lambda(eps) = (t / eps)^(1/2 - eta)"""
        tail = TailIntensity(kappa=0.09, eta=0.1)
        eps = 1e-3
        rng = RngStream(4)
        sample = [tail.sample_time(eps, rng) for _ in range(20000)]
        statistic = stats.kstest(sample, lambda x: np.clip(np.asarray(x) / eps, 0.0, 1.0) ** 0.4).statistic
        assert statistic < 0.015
        assert tail.cumulative(eps) == pytest.approx(0.09 * eps ** 0.4 / 0.4)
        assert tail.cumulative(1e-12) < tail.cumulative(eps)


@pytest.mark.unit
class TestHybridSampler:

    def test_model_requires_zero_alpha(self):
        with pytest.raises(DomainError):
            ZeroAlphaModel(ASIAN.model_copy(update={"alpha": 0.5}))

    def test_trajectory_structure(self):
        model = ZeroAlphaModel(ASIAN)
        config = HybridConfig(J=4)
        traj = HybridTrajectory(model, config, RngStream(5))
        assert len(traj.nodes) == 6
        assert traj.nodes[0] == 1.0
        assert traj.epsilon == pytest.approx(1.0 / 32.0)
        assert len(traj.segments) == 5
        assert traj.path.span[0] == 0.0
        for j in range(config.J + 1):
            t_l, t_u = traj.interval(j)
            m_j, bound = traj.interval_bound(j)
            for t in np.linspace(t_l, t_u, 9):
                assert traj.z(t) >= m_j - 1e-12
            assert bound > 0.0

    def test_z_is_consistent_on_requery(self):
        traj = HybridTrajectory(ZeroAlphaModel(ASIAN), HybridConfig(J=3), RngStream(6))
        first = [traj.z(t) for t in (0.9, 0.3, 0.05, 0.01)]
        assert [traj.z(t) for t in (0.9, 0.3, 0.05, 0.01)] == first
        assert traj.z(1.0) == pytest.approx(traj.z_T)

    def test_tiny_times_are_clamped(self):
        traj = HybridTrajectory(ZeroAlphaModel(ASIAN), HybridConfig(J=2), RngStream(7))
        traj.z(1e-15)
        assert traj.clamped == 1

    def test_forced_zero_potential(self):
        """phi == 0 and payoff 1: the mean weight is e^{-rT} E[e^{A(T, Z_T)}]"""
        model = ZeroAlphaModel(ASIAN)
        config = HybridConfig(J=3)
        with patch('retromc.services.asian_zero.phi_t_z', return_value=0.0):
            weights = np.array([hybrid_price_sample(model, config, lambda x: 1.0, RngStream(8, 0, i)).weight
                                for i in range(6000)])
        expected = math.exp(-ASIAN.r) * terminal_expectation(lambda z: math.exp(A_t_z(1.0, z, SIGMA)), ASIAN)
        se = weights.std(ddof=1) / math.sqrt(weights.size)
        assert abs(weights.mean() - expected) < 5.0 * se

    def test_call_weights_are_non_negative(self):
        model = ZeroAlphaModel(ASIAN)
        config = HybridConfig(J=3)
        for i in range(300):
            sample = hybrid_price_sample(model, config, PayoffSpec(), RngStream(9, 0, i))
            assert sample.weight >= 0.0
            assert sample.control >= 0.0
            if not sample.accepted:
                assert sample.weight == 0.0

    def test_small_run_reports_diagnostics(self):
        result = price_asian_hybrid(ASIAN, PayoffSpec(), HybridConfig(J=3), n=400, seed=10)
        assert result.method == "hybrid"
        assert 0.0 < result.acceptance_rate <= 1.0
        assert result.diagnostics["cv_expectation"] == pytest.approx(kv_control_variate_price(ASIAN, 100.0))
        assert result.diagnostics["cv_lambda"] == 1.0
        assert "raw_price" in result.diagnostics

    def test_zero_strike_skips_control_variate(self):
        params = ASIAN.model_copy(update={"K": 0.0})
        with patch('retromc.services.asian_zero.logger') as mock_logger:
            result = price_asian_hybrid(params, PayoffSpec(strike=0.0), HybridConfig(J=2), n=100, seed=13)
        assert "cv_lambda" not in result.diagnostics
        assert result.price == result.diagnostics["raw_price"]
        mock_logger.warning.assert_any_call("hybrid: zero strike has no lognormal control price, control variate skipped")

    def test_floating_strike_is_reduced(self):
        payoff = PayoffSpec(style=StrikeStyle.FLOATING)
        result = price_asian_hybrid(ASIAN, payoff, HybridConfig(J=2), n=200, seed=11, control_variate=False)
        assert result.price >= 0.0
        assert "cv_lambda" not in result.diagnostics


@pytest.mark.unit
class TestControlVariate:

    def test_reference_value(self):
        assert kv_control_variate_price(ASIAN, 100.0) == pytest.approx(6.77, abs=0.01)

    def test_matches_quadrature(self):
        for K in (80.0, 100.0, 120.0):
            for option_type in (OptionType.CALL, OptionType.PUT):
                sign = 1.0 if option_type == OptionType.CALL else -1.0
                payoff = lambda z: max(sign * (100.0 * math.exp(z) - K), 0.0)
                expected = math.exp(-ASIAN.r) * terminal_expectation(payoff, ASIAN)
                assert kv_control_variate_price(ASIAN, K, option_type) == pytest.approx(expected, rel=1e-7)

    def test_put_call_parity(self):
        call = kv_control_variate_price(ASIAN, 95.0)
        put = kv_control_variate_price(ASIAN, 95.0, OptionType.PUT)
        forward = math.exp(-ASIAN.r) * terminal_expectation(lambda z: 100.0 * math.exp(z), ASIAN)
        assert call - put == pytest.approx(forward - 95.0 * math.exp(-ASIAN.r), rel=1e-9)

    def test_positive_strike_required(self):
        with pytest.raises(DomainError):
            kv_control_variate_price(ASIAN, 0.0)


@pytest.mark.unit
class TestHeavyTailDiagnostic:

    def test_empty_report(self):
        report = heavy_tail_diagnostic(ZeroAlphaModel(ASIAN), 0)
        assert report.n == 0
        assert report.running_means == []

    def test_checkpoints(self):
        report = heavy_tail_diagnostic(ZeroAlphaModel(ASIAN), 100, seed=12)
        assert report.checkpoints == [1, 2, 4, 8, 16, 32, 64, 100]
        assert len(report.running_means) == len(report.checkpoints)
        assert report.running_means[-1] == pytest.approx(report.mean)
        assert report.max_share is None or 0.0 < report.max_share <= 1.0

    def test_unknown_estimator(self):
        with pytest.raises(DomainError):
            heavy_tail_diagnostic(ZeroAlphaModel(ASIAN), 10, estimator="other")

    def test_single_dominant_weight_is_flagged(self):
        weights = np.linspace(0.01, 0.02, 1000)
        weights[700] = 50.0
        with patch('retromc.services.asian_zero.run_samples', return_value=[SampleBatch(0, weights)]):
            report = heavy_tail_diagnostic(ZeroAlphaModel(ASIAN), 1000)
        assert report.max_share > 0.5
        assert report.dominated
        assert report.stable is False


@pytest.mark.integration
class TestReferenceValues:

    def test_hybrid_asian_call(self):
        result = price_asian_hybrid(ASIAN, PayoffSpec(), HybridConfig(J=9), n=100_000, seed=42, workers=4,
                                    control_variate=False)
        assert abs(result.price - 7.042) < 3.0 * result.std_error

    def test_control_variate_shrinks_error(self):
        result = price_asian_hybrid(ASIAN, PayoffSpec(), HybridConfig(J=9), n=20_000, seed=42, workers=4,
                                    fitted_lambda=True)
        assert result.std_error <= result.diagnostics["raw_std_error"]

    def test_hybrid_weights_are_stable(self):
        report = heavy_tail_diagnostic(ZeroAlphaModel(ASIAN), 20_000, seed=21, estimator="hybrid",
                                       config=HybridConfig(J=5), workers=4)
        assert 0.7 <= report.variance_ratio <= 1.4
        assert report.stable
        assert not report.dominated

    def test_floating_strike_matches_trapezoidal(self):
        params = ASIAN.model_copy(update={"delta": 0.02})
        payoff = PayoffSpec(style=StrikeStyle.FLOATING)
        hybrid = price_asian_hybrid(params, payoff, HybridConfig(J=9), n=20_000, seed=42, workers=4,
                                    control_variate=False)
        trap = trap_kv_price(params, payoff, GridSpec(M=100), n=200_000, seed=42, workers=4)
        combined = math.hypot(hybrid.std_error, trap.std_error)
        assert abs(hybrid.price - trap.price) < 4.0 * combined + 0.02
