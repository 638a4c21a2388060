"""Tests for distance estimators, moment checks, rate fits and mixing fits."""

import math

import numpy as np
import pytest
import scipy.stats

from lorentz_lab.constants import make_constants
from lorentz_lab.errors import DomainError
from lorentz_lab.limit_chain import LagCovariance, calibrate_surrogate
from lorentz_lab.paths import Decomposition, TrajectoryBatch, TruncationParams, decompose, truncate
from lorentz_lab.rng import derive_stream
from lorentz_lab.stats import (
    Metric,
    RateModel,
    compare_models,
    is_strictly_decreasing,
    ks_marginals,
    ks_orthant,
    max_displacement_ratio,
    mixing_fit,
    moment_suite,
    orthant_grid,
    random_directions,
    rate_fit,
    second_moment_ratio,
    sliced_w1,
    w1_1d,
)


def _gaussian(size: int, d: int, seed: int = 0) -> np.ndarray:
    return derive_stream(seed, 77).standard_normal((size, d))


class TestW1:
    def test_gaussian_sample_is_close(self) -> None:
        report = w1_1d(_gaussian(10_000, 1)[:, 0])
        assert report.metric is Metric.W1_1D
        assert report.value < 0.05
        assert report.stderr > 0
        assert report.replicas == 10_000

    def test_shift_is_detected(self) -> None:
        report = w1_1d(_gaussian(10_000, 1)[:, 0] + 1.0)
        assert report.value == pytest.approx(1.0, abs=0.05)

    def test_two_sample(self) -> None:
        report = w1_1d([0.0, 1.0], [1.0, 2.0], n_bootstrap=0)
        assert report.value == pytest.approx(1.0)
        assert report.stderr == 0.0

    def test_single_point_at_median(self) -> None:
        report = w1_1d([0.0])
        assert report.value == pytest.approx(0.0, abs=1e-12)
        assert report.stderr == 0.0

    def test_default_rng_is_deterministic(self) -> None:
        x = _gaussian(200, 1)[:, 0]
        assert w1_1d(x).stderr == w1_1d(x).stderr

    def test_rejects_empty(self) -> None:
        with pytest.raises(DomainError):
            w1_1d([])
        with pytest.raises(DomainError, match="reference"):
            w1_1d([1.0], [])

    def test_carries_horizon(self) -> None:
        assert w1_1d([0.1, -0.2], n_or_t=1000).n_or_t == 1000

    def test_triangle_inequality(self) -> None:
        rng = derive_stream(3, 77)
        x = rng.standard_normal(500)
        y = rng.standard_t(3, 500)
        z = rng.exponential(1.0, 500) - 1.0

        def dist(a: np.ndarray, b: np.ndarray | None = None) -> float:
            return w1_1d(a, b, n_bootstrap=0).value

        assert dist(x, z) <= dist(x, y) + dist(y, z) + 1e-12
        assert dist(y, x) == pytest.approx(dist(x, y), abs=1e-12)
        # Equal sizes share the same normal quantile reference.
        assert dist(x) <= dist(x, y) + dist(y) + 1e-12
        assert dist(z) <= dist(z, x) + dist(x) + 1e-12


class TestSlicedW1:
    def test_single_projection_matches_w1(self) -> None:
        samples = _gaussian(500, 3) * 1.3
        report = sliced_w1(samples, n_proj=1, rng=derive_stream(1, 0), n_bootstrap=0)
        direction = random_directions(derive_stream(1, 0), 1, 3)[0]
        assert report.value == pytest.approx(w1_1d(samples @ direction, n_bootstrap=0).value)

    def test_gaussian_sample_is_close(self) -> None:
        report = sliced_w1(_gaussian(5000, 2), n_bootstrap=20)
        assert report.metric is Metric.SLICED_W1
        assert report.value < 0.05
        assert report.stderr > 0

    def test_scaled_sample_is_far(self) -> None:
        assert sliced_w1(_gaussian(5000, 2) * 2.0, n_bootstrap=0).value > 0.5

    def test_rejects_bad_shapes(self) -> None:
        with pytest.raises(DomainError):
            sliced_w1(np.zeros(10))
        with pytest.raises(DomainError):
            sliced_w1(np.zeros((10, 1)))
        with pytest.raises(DomainError, match="n_proj"):
            sliced_w1(np.zeros((10, 2)), n_proj=0)


class TestKsOrthant:
    def test_grid(self) -> None:
        grid = orthant_grid(2, points_per_axis=5, span=2.0)
        assert grid.shape == (25, 2)
        assert grid.min() == -2.0 and grid.max() == 2.0

    def test_gaussian_sample_is_close(self) -> None:
        report = ks_orthant(_gaussian(5000, 2), n_bootstrap=20)
        assert report.metric is Metric.KS_ORTHANT
        assert report.value < 0.05
        assert 0 < report.stderr < 0.05

    def test_shift_is_detected(self) -> None:
        assert ks_orthant(_gaussian(5000, 2) + 2.0, n_bootstrap=0).value > 0.5

    def test_single_sample_exact(self) -> None:
        report = ks_orthant(np.array([[0.0]]), np.array([[0.0]]))
        assert report.value == pytest.approx(0.5)
        assert report.stderr == 0.0

    def test_one_dimensional_input(self) -> None:
        report = ks_orthant(np.array([-1.0, 1.0]), np.array([0.0]), n_bootstrap=0)
        assert report.value == pytest.approx(0.0)

    def test_rejects_mismatched_grid(self) -> None:
        with pytest.raises(DomainError, match="columns"):
            ks_orthant(np.zeros((5, 2)), np.zeros((3, 3)))
        with pytest.raises(DomainError):
            ks_orthant(np.zeros((0, 2)))

    def test_marginals_match_scipy(self) -> None:
        samples = _gaussian(300, 3)
        expected = [scipy.stats.kstest(samples[:, k], "norm").statistic for k in range(3)]
        np.testing.assert_allclose(ks_marginals(samples), expected)


class TestMomentSuite:
    def test_exact_values(self) -> None:
        params = TruncationParams(n=100)
        xi = np.array([1.0, 2.0, 3.0, 4.0])
        m = np.full(4, 2.5)
        dec = Decomposition(xi_trunc=xi, m=m, xi_tilde=xi - m, params=params, cond_second=np.ones(4))
        c = make_constants(2)
        report = moment_suite(dec, params, c)
        assert report.e_xi2 == pytest.approx(7.5)
        assert report.e_xi3 == pytest.approx(25.0)
        assert report.e_xi4 == pytest.approx(88.5)
        assert report.e_m == pytest.approx(2.5)
        assert report.e_m2 == pytest.approx(6.25)
        assert report.e_tilde2 == pytest.approx(1.25)
        assert report.e_tilde4 == pytest.approx(2.5625)
        assert report.pred_xi2 == pytest.approx(2 * c.sigma2_d * math.log(100))
        assert report.pred_m == pytest.approx(0.5)
        assert report.ratio_xi2 == pytest.approx(7.5 / report.pred_xi2)
        assert report.scaled_xi4 == pytest.approx(88.5 / params.r_n**2)
        assert set(report.to_dict()) >= {"ratio_xi2", "scaled_tilde4"}

    def test_surrogate_second_moment(self) -> None:
        c = make_constants(2)
        backend = calibrate_surrogate(c)
        params = TruncationParams(n=100)
        xi = truncate(backend.ppf(derive_stream(2, 0).random(100_000)), params)
        report = moment_suite(decompose(xi, backend, params), params, c)
        assert report.e_xi2 == pytest.approx(backend.truncated_moment(2, params.r_n), rel=0.1)
        assert report.e_m == pytest.approx(backend.truncated_moment(1, params.r_n))


class TestDisplacementRatios:
    def test_second_moment_ratio(self) -> None:
        c = make_constants(2)
        Q = np.array([[3.0, 4.0], [0.0, 1.0]])
        batch = TrajectoryBatch(n=100, replicas=2, Q=Q)
        expected = 13.0 / (2 * c.sigma2_d * 100 * math.log(100))
        assert second_moment_ratio(batch, c) == pytest.approx(expected)

    def test_second_moment_needs_horizon(self) -> None:
        batch = TrajectoryBatch(n=1, replicas=1, Q=np.zeros((1, 2)))
        with pytest.raises(DomainError):
            second_moment_ratio(batch, make_constants(2))

    def test_max_displacement_ratio(self) -> None:
        c = make_constants(2)
        expected = 2.0 / (c.sigma_d * math.sqrt(50 * math.log(50)))
        assert max_displacement_ratio([1.0, 3.0], 50, c) == pytest.approx(expected)
        with pytest.raises(DomainError):
            max_displacement_ratio([1.0], 1, c)


class TestRateFit:
    def test_exact_model_recovered(self) -> None:
        points = [(n, 2.0 / math.sqrt(math.log(n))) for n in (10, 100, 1000, 10_000)]
        fit = rate_fit(points, RateModel.INV_SQRT_LOG)
        assert fit.c == pytest.approx(2.0)
        assert fit.residual == pytest.approx(0.0, abs=1e-12)

    def test_compare_ranks_true_model_first(self) -> None:
        points = [(n, 0.7 * math.sqrt(math.log(math.log(n)) / math.log(n))) for n in (10, 100, 1000)]
        fits = compare_models(points)
        assert fits[0].model is RateModel.SQRT_LOGLOG_OVER_LOG
        assert [f.residual for f in fits] == sorted(f.residual for f in fits)
        assert len(fits) == len(RateModel)

    def test_scale_equivariant(self) -> None:
        points = [(100, 0.31), (1000, 0.24), (10_000, 0.22), (100_000, 0.17)]
        for model in RateModel:
            fit = rate_fit(points, model)
            scaled = rate_fit([(n, 4.0 * y) for n, y in points], model)
            assert scaled.c == pytest.approx(4.0 * fit.c, rel=1e-12)
            assert scaled.residual == pytest.approx(4.0 * fit.residual, rel=1e-12)

    def test_model_by_name(self) -> None:
        fit = rate_fit([(4, 0.5), (16, 0.25), (64, 0.125)], "c/sqrt(n)")
        assert fit.model is RateModel.INV_SQRT
        assert fit.c == pytest.approx(1.0)

    def test_needs_three_points(self) -> None:
        with pytest.raises(DomainError, match="3 points"):
            rate_fit([(10, 1.0), (100, 0.5)], RateModel.INV_SQRT)

    def test_needs_horizon_above_two(self) -> None:
        with pytest.raises(DomainError, match="horizon"):
            rate_fit([(2, 1.0), (10, 0.5), (100, 0.2)], RateModel.INV_SQRT_LOG)

    def test_strictly_decreasing(self) -> None:
        assert is_strictly_decreasing([3.0, 2.0, 1.0])
        assert not is_strictly_decreasing([3.0, 3.0, 1.0])
        assert not is_strictly_decreasing([1.0, 2.0])
        assert is_strictly_decreasing([1.0])


class TestMixingFit:
    def test_geometric_decay(self) -> None:
        fit = mixing_fit(0.8 ** np.arange(9))
        assert fit.omega == pytest.approx(0.8)
        assert fit.C == pytest.approx(1.0)
        assert fit.decay_detected
        assert fit.lags_used == 8

    def test_noise_floor_limits_lags(self) -> None:
        assert mixing_fit(0.8 ** np.arange(9), noise_floor=0.3).lags_used == 5

    def test_lag_covariance_floor(self) -> None:
        cov = 0.5 ** np.arange(7)
        series = LagCovariance(np.arange(7), cov, np.zeros(7), 0.2)
        fit = mixing_fit(series)
        assert fit.lags_used == 2
        assert fit.omega == pytest.approx(0.5)

    def test_growth_is_not_decay(self) -> None:
        fit = mixing_fit(1.1 ** np.arange(6))
        assert not fit.decay_detected
        assert fit.omega == 1.0

    def test_no_usable_lags(self) -> None:
        fit = mixing_fit([1.0, 0.0, 0.0, 0.0, 0.0])
        assert not fit.decay_detected
        assert fit.C == 1.0
        assert fit.lags_used == 0

    def test_needs_four_lags(self) -> None:
        with pytest.raises(DomainError, match="K >= 4"):
            mixing_fit([1.0, 0.5, 0.25, 0.125])
