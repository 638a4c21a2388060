"""Tests for the Stein solver, derivative bounds and the exchangeable pair."""

import math

import numpy as np
import pytest

from lorentz_lab.constants import make_constants
from lorentz_lab.errors import DomainError, QuadratureError
from lorentz_lab.limit_chain import calibrate_surrogate, run_chain
from lorentz_lab.paths import FlightPath, TruncationParams
from lorentz_lab.rng import Stage, derive_stream, replica_stream
from lorentz_lab.smooth_functions import (
    TestFunction,
    battery,
    coordinate,
    coordinate_square,
    gaussian_bump_mixture,
    sine_coordinate,
)
from lorentz_lab.stein import (
    PairBatch,
    PairSource,
    QuadratureSpec,
    antisymmetry_check,
    build_pair,
    check_derivative_bounds,
    default_probes,
    leading_error_term,
    pair_source,
    solve_stein,
    verify_pair_identities,
)

_SMALL = QuadratureSpec(n_legendre=16, n_hermite=8)


def _surrogate_sources(n: int, replicas: int, seed: int = 0) -> list[PairSource]:
    constants = make_constants(2)
    backend = calibrate_surrogate(constants)
    params = TruncationParams(n=n)
    sources = []
    for r in range(replicas):
        run = run_chain(backend, n, replica_stream(seed, Stage.CHAIN, r))
        path = FlightPath.from_chain_run(run)
        sources.append(pair_source(path, backend, params, replica_stream(seed, Stage.PAIR, r)))
    return sources


def _pairs(n: int, replicas: int, seed: int = 0) -> PairBatch:
    constants = make_constants(2)
    return build_pair(
        _surrogate_sources(n, replicas, seed), constants, derive_stream(seed, 12345)
    )


class TestQuadratureSpec:
    def test_s_nodes_on_unit_interval(self) -> None:
        s, w = QuadratureSpec(n_legendre=10).s_nodes()
        assert np.all((s > 0) & (s < 1))
        assert w.sum() == pytest.approx(1.0)
        assert np.dot(w, s**3) == pytest.approx(0.25)

    def test_hermite_nodes_are_standard_normal(self) -> None:
        z, w = QuadratureSpec(n_hermite=10).z_nodes(2)
        assert z.shape == (100, 2)
        assert w.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(w @ z**2, [1.0, 1.0])
        np.testing.assert_allclose(w @ z**4, [3.0, 3.0])

    def test_monte_carlo_beyond_tensor_dimension(self) -> None:
        z, w = QuadratureSpec(mc_draws=1000).z_nodes(4)
        assert z.shape == (1000, 4)
        assert w.sum() == pytest.approx(1.0)

    def test_default_probes(self) -> None:
        probes = default_probes(3, 10)
        assert probes.shape == (10, 3)
        np.testing.assert_array_equal(probes, default_probes(3, 10))


class TestSolveStein:
    def test_linear_closed_form(self) -> None:
        solution = solve_stein(coordinate(2, 0), _SMALL)
        w = default_probes(2, 20, seed=3)
        np.testing.assert_allclose(solution.value(w), -w[:, 0], atol=1e-6)
        np.testing.assert_allclose(solution.gradient(w), np.tile([-1.0, 0.0], (20, 1)), atol=1e-6)
        np.testing.assert_allclose(solution.hessian(w), 0.0, atol=1e-12)
        assert solution.eh_z == pytest.approx(0.0, abs=1e-12)
        assert solution.max_residual < 1e-6

    def test_quadratic_closed_form(self) -> None:
        solution = solve_stein(coordinate_square(2, 0), _SMALL)
        w = default_probes(2, 20, seed=4)
        np.testing.assert_allclose(solution.value(w), (1 - w[:, 0] ** 2) / 2, atol=1e-6)
        expected_grad = np.column_stack([-w[:, 0], np.zeros(20)])
        np.testing.assert_allclose(solution.gradient(w), expected_grad, atol=1e-6)
        np.testing.assert_allclose(
            solution.hessian(w), np.broadcast_to(np.diag([-1.0, 0.0]), (20, 2, 2)), atol=1e-6
        )
        assert solution.eh_z == pytest.approx(1.0)

    @pytest.mark.parametrize(
        "h",
        [
            sine_coordinate(2, 1),
            gaussian_bump_mixture(np.array([[0.3, -0.5]]), np.ones(1), np.ones(1)),
        ],
        ids=lambda h: h.name,
    )
    def test_residual_small(self, h: TestFunction) -> None:
        solution = solve_stein(h, QuadratureSpec(n_legendre=32, n_hermite=16))
        assert solution.max_residual < 1e-3
        assert np.all(np.abs(solution.residual(default_probes(2, 20, seed=9))) < 1e-3)

    def test_sine_has_closed_gradient(self) -> None:
        # E cos(ws + sqrt(1 - s^2) Z) = cos(ws) exp(-(1 - s^2) / 2)
        solution = solve_stein(sine_coordinate(2, 0), QuadratureSpec(n_legendre=32, n_hermite=16))
        w = np.array([[0.7, 0.0]])
        s, ws = QuadratureSpec(n_legendre=32).s_nodes()
        expected = -np.sum(ws * np.cos(0.7 * s) * np.exp(-(1 - s**2) / 2))
        assert solution.gradient(w)[0, 0] == pytest.approx(expected, abs=1e-8)

    def test_residual_failure_raises(self) -> None:
        steep = gaussian_bump_mixture(np.array([[0.0, 0.0]]), np.array([0.05]), np.ones(1))
        with pytest.raises(QuadratureError) as excinfo:
            solve_stein(steep, QuadratureSpec(n_legendre=4, n_hermite=4), np.zeros((1, 2)))
        assert excinfo.value.max_residual > 1e-3
        assert len(excinfo.value.worst_probe) == 2

    def test_rejects_unbounded_gradient(self) -> None:
        h = coordinate(2, 0)
        unbounded = TestFunction(h.name, 2, h.value, h.grad, h.hess, math.inf, 0.0)
        with pytest.raises(DomainError, match="finite"):
            solve_stein(unbounded, _SMALL)


class TestDerivativeBounds:
    @pytest.mark.parametrize("h", [coordinate(2, 0), coordinate_square(2, 1)], ids=lambda h: h.name)
    def test_polynomials_pass(self, h: TestFunction) -> None:
        report = check_derivative_bounds(h, solve_stein(h, _SMALL))
        assert report.passed
        assert report.sup_d3 < 1e-6
        assert report.to_dict()["passed"] is True

    def test_bump_passes(self) -> None:
        h = gaussian_bump_mixture(np.array([[0.0, 0.0]]), np.ones(1), np.ones(1))
        solution = solve_stein(h, QuadratureSpec(n_legendre=32, n_hermite=16))
        report = check_derivative_bounds(h, solution)
        assert report.passed
        assert report.sup_hess_hs == pytest.approx(math.sqrt(2) / 4, rel=0.05)

    def test_violation_is_reported(self) -> None:
        h = coordinate(2, 0)
        understated = TestFunction(h.name, 2, h.value, h.grad, h.hess, 0.1, 0.0)
        report = check_derivative_bounds(understated, solve_stein(h, _SMALL))
        assert not report.passed_df
        assert not report.passed


class TestExchangeablePair:
    def test_deterministic_pair(self) -> None:
        constants = make_constants(2)
        source = PairSource(
            xi_tilde=np.array([1.0, -1.0]),
            velocities=np.array([[1.0, 0.0], [0.0, 1.0]]),
            cond_second=np.array([0.5, 0.5]),
            copies=np.array([0.0, 0.0]),
        )
        pairs = build_pair([source, source], constants, derive_stream(0, 0))
        assert pairs.n == 2
        assert pairs.replicas == 2
        np.testing.assert_allclose(pairs.W[0] * pairs.scale, [1.0, -1.0])
        np.testing.assert_allclose(pairs.cond_mean_delta, -pairs.W / 2)
        np.testing.assert_allclose(pairs.sum_outer[0], 1.5 * np.eye(2))
        np.testing.assert_allclose(pairs.W_prime, pairs.W + pairs.delta)
        report = verify_pair_identities(pairs)
        assert report.slope == pytest.approx(-0.5)

    def test_conditional_mean_uses_realized_copies(self) -> None:
        source = PairSource(
            xi_tilde=np.array([1.0, -1.0]),
            velocities=np.array([[1.0, 0.0], [0.0, 1.0]]),
            cond_second=np.array([0.5, 0.5]),
            copies=np.array([3.0, 1.0]),
        )
        pairs = build_pair([source], make_constants(2), derive_stream(0, 1))
        np.testing.assert_allclose(pairs.cond_mean_delta[0] * pairs.scale, [1.0, 1.0])

    def test_degenerate_copies(self) -> None:
        source = PairSource(
            xi_tilde=np.array([1.0, -1.0, 0.5]),
            velocities=np.eye(3)[:, :2],
            cond_second=np.zeros(3),
            copies=np.array([1.0, -1.0, 0.5]),
        )
        pairs = build_pair([source] * 5, make_constants(2), derive_stream(0, 1))
        report = verify_pair_identities(pairs)
        assert report.degenerate
        assert not report.linear_passed
        assert not report.quadratic_passed

    def test_rejects_bad_sources(self) -> None:
        constants = make_constants(2)
        rng = derive_stream(0, 2)
        with pytest.raises(DomainError, match="at least one"):
            build_pair([], constants, rng)
        short = PairSource(np.ones(1), np.ones((1, 2)), np.ones(1), np.ones(1))
        with pytest.raises(DomainError, match="n >= 2"):
            build_pair([short], constants, rng)
        a = PairSource(np.ones(2), np.ones((2, 2)), np.ones(2), np.ones(2))
        b = PairSource(np.ones(3), np.ones((3, 2)), np.ones(3), np.ones(3))
        with pytest.raises(DomainError, match="same length"):
            build_pair([a, b], constants, rng)

    def test_identities_hold_for_surrogate(self) -> None:
        pairs = _pairs(n=100, replicas=2000)
        report = verify_pair_identities(pairs, tolerance_sigma=4.0)
        assert report.expected_slope == pytest.approx(-0.01)
        assert report.linear_passed
        assert report.quadratic_passed
        assert not report.degenerate

    def test_antisymmetry(self) -> None:
        pairs = _pairs(n=100, replicas=2000, seed=1)
        solution = solve_stein(coordinate_square(2, 0), _SMALL)
        assert antisymmetry_check(pairs, solution, tolerance_sigma=4.0).passed


class TestLeadingError:
    def test_identity_sum_vanishes(self) -> None:
        pairs = _pairs(n=50, replicas=50)
        solutions = [solve_stein(h, _SMALL) for h in (coordinate(2, 0), coordinate_square(2, 0))]
        for record in leading_error_term(pairs, solutions, make_constants(2), identity_sum=True):
            assert record.estimate == pytest.approx(0.0, abs=1e-9)

    def test_linear_function_has_no_leading_error(self) -> None:
        pairs = _pairs(n=50, replicas=50)
        [record] = leading_error_term(pairs, [solve_stein(coordinate(2, 0), _SMALL)], make_constants(2))
        assert record.estimate == pytest.approx(0.0, abs=1e-12)
        assert record.name == "w1"

    def test_quadratic_matches_truncated_variance(self) -> None:
        constants = make_constants(2)
        backend = calibrate_surrogate(constants)
        n = 1000
        params = TruncationParams(n=n)
        pairs = _pairs(n=n, replicas=500, seed=2)
        [record] = leading_error_term(
            pairs, [solve_stein(coordinate_square(2, 0), _SMALL)], constants
        )
        m = backend.truncated_moment(1, params.r_n)
        variance = backend.truncated_moment(2, params.r_n) - m * m
        expected = variance / (2 * constants.sigma2_d * math.log(n)) - 1
        assert expected == pytest.approx(0.0727, abs=2e-3)
        assert abs(record.estimate - expected) <= 4 * record.stderr
        assert record.direct_gap >= 0

    def test_direct_gap_within_leading_term(self) -> None:
        pairs = _pairs(n=1000, replicas=500, seed=3)
        [record] = leading_error_term(
            pairs, [solve_stein(coordinate_square(2, 0), _SMALL)], make_constants(2)
        )
        noise = math.hypot(record.stderr, record.direct_stderr)
        assert record.direct_gap <= record.estimate + 3 * noise + 1e-3

    @pytest.mark.slow
    def test_estimate_does_not_grow_with_n(self) -> None:
        solution = solve_stein(coordinate_square(2, 0), _SMALL)
        constants = make_constants(2)
        [small] = leading_error_term(_pairs(n=1000, replicas=500, seed=4), [solution], constants)
        [large] = leading_error_term(_pairs(n=10_000, replicas=500, seed=5), [solution], constants)
        assert large.estimate <= small.estimate + 3 * math.hypot(small.stderr, large.stderr)
        noise = math.hypot(large.stderr, large.direct_stderr)
        assert large.direct_gap <= large.estimate + 3 * noise + 1e-3


@pytest.mark.slow
class TestBatteryAcceptance:
    def test_full_battery_solves_within_bounds(self) -> None:
        for h in battery(2):
            solution = solve_stein(h)
            assert solution.max_residual < 1e-3
            assert check_derivative_bounds(h, solution).passed, h.name
