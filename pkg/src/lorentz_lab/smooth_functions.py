"""Smooth test functions with analytic derivatives for the Stein solver."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import scipy.stats

from lorentz_lab.errors import DomainError
from lorentz_lab.rng import Stage, derive_stream, stream_id

Field = Callable[[np.ndarray], np.ndarray]

# Region over which the non-Lipschitz squares declare their sup-norms.
SQUARE_REGION_RADIUS = 3.0

_PHI0 = 1 / math.sqrt(2 * math.pi)
# max |a phi(a)|, attained at |a| = 1
_MAX_A_PHI = math.exp(-0.5) * _PHI0


@dataclass(frozen=True)
class TestFunction:
    """``h : R^d -> R`` evaluated row-wise on ``(m, d)`` arrays.

    ``dh_sup`` and ``d2h_sup`` are upper bounds for ``sup |Dh|`` and the
    operator norm ``sup ||D^2 h||``.
    """

    __test__ = False  # not a pytest class

    name: str
    d: int
    value: Field
    grad: Field
    hess: Field
    dh_sup: float
    d2h_sup: float


def coordinate(d: int, k: int) -> TestFunction:
    def value(w: np.ndarray) -> np.ndarray:
        return w[:, k].copy()

    def grad(w: np.ndarray) -> np.ndarray:
        g = np.zeros_like(w)
        g[:, k] = 1.0
        return g

    def hess(w: np.ndarray) -> np.ndarray:
        return np.zeros((len(w), d, d))

    return TestFunction(f"w{k + 1}", d, value, grad, hess, dh_sup=1.0, d2h_sup=0.0)


def coordinate_square(d: int, k: int) -> TestFunction:
    """``w_k**2``; sup-norms taken over ``|w| <= SQUARE_REGION_RADIUS``."""

    def value(w: np.ndarray) -> np.ndarray:
        return w[:, k] ** 2

    def grad(w: np.ndarray) -> np.ndarray:
        g = np.zeros_like(w)
        g[:, k] = 2 * w[:, k]
        return g

    def hess(w: np.ndarray) -> np.ndarray:
        h = np.zeros((len(w), d, d))
        h[:, k, k] = 2.0
        return h

    return TestFunction(
        f"w{k + 1}^2", d, value, grad, hess, dh_sup=2 * SQUARE_REGION_RADIUS, d2h_sup=2.0
    )


def sine_coordinate(d: int, k: int) -> TestFunction:
    def value(w: np.ndarray) -> np.ndarray:
        return np.sin(w[:, k])

    def grad(w: np.ndarray) -> np.ndarray:
        g = np.zeros_like(w)
        g[:, k] = np.cos(w[:, k])
        return g

    def hess(w: np.ndarray) -> np.ndarray:
        h = np.zeros((len(w), d, d))
        h[:, k, k] = -np.sin(w[:, k])
        return h

    return TestFunction(f"sin(w{k + 1})", d, value, grad, hess, dh_sup=1.0, d2h_sup=1.0)


def gaussian_bump_mixture(
    centers: np.ndarray,
    widths: np.ndarray,
    amplitudes: np.ndarray,
    name: str = "bumps",
) -> TestFunction:
    """``sum_i a_i exp(-|w - c_i|^2 / (2 s_i^2))``."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    widths = np.asarray(widths, dtype=float).ravel()
    amplitudes = np.asarray(amplitudes, dtype=float).ravel()
    if not (len(centers) == len(widths) == len(amplitudes)):
        raise DomainError("bump centers, widths and amplitudes must have equal length")
    if np.any(widths <= 0):
        raise DomainError("bump widths must be positive")
    d = centers.shape[1]

    def _parts(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        diff = w[:, None, :] - centers[None, :, :]
        weights = amplitudes * np.exp(-np.sum(diff**2, axis=-1) / (2 * widths**2))
        return diff, weights

    def value(w: np.ndarray) -> np.ndarray:
        return np.sum(_parts(w)[1], axis=1)

    def grad(w: np.ndarray) -> np.ndarray:
        diff, weights = _parts(w)
        return -np.einsum("mi,mik->mk", weights / widths**2, diff)

    def hess(w: np.ndarray) -> np.ndarray:
        diff, weights = _parts(w)
        outer = np.einsum("mi,mik,mil->mkl", weights / widths**4, diff, diff)
        trace_part = np.sum(weights / widths**2, axis=1)
        return outer - trace_part[:, None, None] * np.eye(d)

    return TestFunction(
        name,
        d,
        value,
        grad,
        hess,
        dh_sup=float(np.sum(np.abs(amplitudes) * math.exp(-0.5) / widths)),
        d2h_sup=float(np.sum(np.abs(amplitudes) / widths**2)),
    )


def smoothed_orthant(z: np.ndarray, eps: float, name: str = "orthant") -> TestFunction:
    """``prod_k Phi((z_k - w_k) / eps)``, a smoothed ``1{w <= z}``."""
    z = np.asarray(z, dtype=float).ravel()
    d = z.size

    def _parts(w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = (z[None, :] - w) / eps
        return a, scipy.stats.norm.cdf(a), scipy.stats.norm.pdf(a)

    def _others(cdf: np.ndarray, skip: tuple[int, ...]) -> np.ndarray:
        keep = [j for j in range(d) if j not in skip]
        return np.prod(cdf[:, keep], axis=1) if keep else np.ones(len(cdf))

    def value(w: np.ndarray) -> np.ndarray:
        return np.prod(_parts(w)[1], axis=1)

    def grad(w: np.ndarray) -> np.ndarray:
        _, cdf, pdf = _parts(w)
        return np.column_stack([-pdf[:, k] / eps * _others(cdf, (k,)) for k in range(d)])

    def hess(w: np.ndarray) -> np.ndarray:
        a, cdf, pdf = _parts(w)
        h = np.empty((len(w), d, d))
        for k in range(d):
            h[:, k, k] = -a[:, k] * pdf[:, k] / eps**2 * _others(cdf, (k,))
            for j in range(k + 1, d):
                off = pdf[:, k] * pdf[:, j] / eps**2 * _others(cdf, (k, j))
                h[:, k, j] = off
                h[:, j, k] = off
        return h

    d2h = math.sqrt(d * _MAX_A_PHI**2 + d * (d - 1) * _PHI0**4) / eps**2
    return TestFunction(
        name, d, value, grad, hess, dh_sup=math.sqrt(d) * _PHI0 / eps, d2h_sup=d2h
    )


def random_bump_mixture(rng: np.random.Generator, d: int, k: int = 3, name: str = "mix") -> TestFunction:
    return gaussian_bump_mixture(
        centers=rng.normal(0.0, 1.0, size=(k, d)),
        widths=rng.uniform(0.5, 1.5, size=k),
        amplitudes=rng.uniform(-1.0, 1.0, size=k),
        name=name,
    )


def battery(d: int, seed: int = 0) -> list[TestFunction]:
    """The fixed twelve-function battery.

    Coordinates and coordinate squares of the first two axes, four unit
    Gaussian bumps and four smoothed orthant indicators at seeded random
    locations.
    """
    if d < 2:
        raise DomainError(f"the test battery needs d >= 2, got {d}")
    rng = derive_stream(seed, stream_id(Stage.BATTERY))
    functions = [coordinate(d, 0), coordinate(d, 1), coordinate_square(d, 0), coordinate_square(d, 1)]
    for i in range(4):
        center = rng.normal(0.0, 1.0, size=(1, d))
        functions.append(gaussian_bump_mixture(center, np.ones(1), np.ones(1), name=f"bump{i + 1}"))
    for i in range(4):
        functions.append(smoothed_orthant(rng.normal(0.0, 0.5, size=d), 0.5, name=f"orthant{i + 1}"))
    return functions
