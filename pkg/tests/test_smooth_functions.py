"""Tests for the smooth test-function battery."""

import numpy as np
import pytest

from lorentz_lab.errors import DomainError
from lorentz_lab.rng import derive_stream
from lorentz_lab.smooth_functions import (
    TestFunction,
    battery,
    coordinate,
    coordinate_square,
    gaussian_bump_mixture,
    random_bump_mixture,
    sine_coordinate,
    smoothed_orthant,
)

_STEP = 1e-5


def _fd_grad(h: TestFunction, w: np.ndarray) -> np.ndarray:
    out = np.empty_like(w)
    for k in range(h.d):
        e = np.zeros(h.d)
        e[k] = _STEP
        out[:, k] = (h.value(w + e) - h.value(w - e)) / (2 * _STEP)
    return out


def _fd_hess(h: TestFunction, w: np.ndarray) -> np.ndarray:
    out = np.empty((len(w), h.d, h.d))
    for k in range(h.d):
        e = np.zeros(h.d)
        e[k] = _STEP
        out[:, k] = (h.grad(w + e) - h.grad(w - e)) / (2 * _STEP)
    return out


def _points(d: int, count: int = 40) -> np.ndarray:
    return derive_stream(11, d).standard_normal((count, d))


def _cases() -> list[TestFunction]:
    rng = derive_stream(12, 0)
    return [
        coordinate(3, 1),
        coordinate_square(2, 0),
        sine_coordinate(3, 2),
        gaussian_bump_mixture(np.array([[0.5, -0.2]]), np.array([0.7]), np.array([1.3])),
        random_bump_mixture(rng, 3),
        smoothed_orthant(np.array([0.3, -0.4]), 0.5),
        smoothed_orthant(np.array([0.1, 0.2, 0.0]), 0.8),
    ]


class TestDerivatives:
    @pytest.mark.parametrize("h", _cases(), ids=lambda h: h.name)
    def test_gradient_matches_finite_differences(self, h: TestFunction) -> None:
        w = _points(h.d)
        np.testing.assert_allclose(h.grad(w), _fd_grad(h, w), atol=1e-7)

    @pytest.mark.parametrize("h", _cases(), ids=lambda h: h.name)
    def test_hessian_matches_finite_differences(self, h: TestFunction) -> None:
        w = _points(h.d)
        np.testing.assert_allclose(h.hess(w), _fd_hess(h, w), atol=1e-6)

    @pytest.mark.parametrize("h", _cases(), ids=lambda h: h.name)
    def test_hessian_symmetric(self, h: TestFunction) -> None:
        H = h.hess(_points(h.d))
        np.testing.assert_allclose(H, np.swapaxes(H, 1, 2))


class TestDeclaredBounds:
    @pytest.mark.parametrize("h", _cases()[3:], ids=lambda h: h.name)
    def test_sampled_norms_within_bounds(self, h: TestFunction) -> None:
        w = 2.0 * _points(h.d, 500)
        assert np.max(np.linalg.norm(h.grad(w), axis=1)) <= h.dh_sup + 1e-12
        assert np.max(np.linalg.norm(h.hess(w), ord=2, axis=(1, 2))) <= h.d2h_sup + 1e-12

    def test_square_bounds_on_region(self) -> None:
        h = coordinate_square(2, 0)
        w = np.array([[3.0, 0.0], [-3.0, 1.0]])
        assert np.max(np.linalg.norm(h.grad(w), axis=1)) == pytest.approx(h.dh_sup)


class TestBattery:
    def test_twelve_functions(self) -> None:
        functions = battery(2)
        assert len(functions) == 12
        names = [h.name for h in functions]
        assert names[:4] == ["w1", "w2", "w1^2", "w2^2"]
        assert names[4:8] == ["bump1", "bump2", "bump3", "bump4"]
        assert names[8:] == ["orthant1", "orthant2", "orthant3", "orthant4"]
        assert all(h.d == 2 for h in functions)

    def test_seeded(self) -> None:
        w = _points(3)
        a = [h.value(w) for h in battery(3, seed=5)]
        b = [h.value(w) for h in battery(3, seed=5)]
        c = [h.value(w) for h in battery(3, seed=6)]
        for x, y in zip(a, b, strict=True):
            np.testing.assert_array_equal(x, y)
        assert not np.allclose(a[-1], c[-1])

    def test_rejects_one_dimension(self) -> None:
        with pytest.raises(DomainError):
            battery(1)


class TestBumpValidation:
    def test_length_mismatch(self) -> None:
        with pytest.raises(DomainError, match="equal length"):
            gaussian_bump_mixture(np.zeros((2, 2)), np.ones(1), np.ones(2))

    def test_non_positive_width(self) -> None:
        with pytest.raises(DomainError, match="positive"):
            gaussian_bump_mixture(np.zeros((1, 2)), np.zeros(1), np.ones(1))

    def test_peak_value(self) -> None:
        h = gaussian_bump_mixture(np.array([[1.0, 2.0]]), np.ones(1), np.array([0.5]))
        assert h.value(np.array([[1.0, 2.0]]))[0] == pytest.approx(0.5)
