"""Distances to the Gaussian, moment checks, rate models and mixing fits."""

from __future__ import annotations

import enum
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import scipy.stats

from lorentz_lab.constants import ModelConstants
from lorentz_lab.errors import DomainError
from lorentz_lab.limit_chain import LagCovariance
from lorentz_lab.paths import Decomposition, TrajectoryBatch, TruncationParams
from lorentz_lab.rng import Stage, derive_stream, stream_id

log = logging.getLogger(__name__)

DEFAULT_BOOTSTRAP = 200
DEFAULT_PROJECTIONS = 16


class Metric(enum.StrEnum):
    W1_1D = "w1_1d"
    SLICED_W1 = "sliced_w1"
    KS_ORTHANT = "ks_orthant"


@dataclass(frozen=True)
class DistanceReport:
    metric: Metric
    n_or_t: float
    value: float
    stderr: float
    replicas: int


def _default_rng() -> np.random.Generator:
    return derive_stream(0, stream_id(Stage.BOOTSTRAP))


def _normal_quantiles(m: int) -> np.ndarray:
    return scipy.stats.norm.ppf((np.arange(m) + 0.5) / m)


def _w1_normal_sorted(sorted_rows: np.ndarray) -> np.ndarray:
    """W1 against the standard normal for each row of presorted samples."""
    q = _normal_quantiles(sorted_rows.shape[-1])
    return np.mean(np.abs(sorted_rows - q), axis=-1)


def w1_1d(
    sample: Sequence[float] | np.ndarray,
    reference: Sequence[float] | np.ndarray | None = None,
    *,
    rng: np.random.Generator | None = None,
    n_bootstrap: int = DEFAULT_BOOTSTRAP,
    n_or_t: float = math.nan,
) -> DistanceReport:
    """One-dimensional Wasserstein-1 distance with a bootstrap standard error.

    Without ``reference`` the sample is coupled to standard normal
    quantiles at the midpoints ``(i + 1/2)/m``; otherwise the two samples
    are compared directly.
    """
    x = np.asarray(sample, dtype=float).ravel()
    if x.size == 0:
        raise DomainError("w1_1d needs a non-empty sample")
    rng = rng or _default_rng()
    if reference is None:
        value = float(_w1_normal_sorted(np.sort(x)))
        boot: np.ndarray = np.empty(0)
        if n_bootstrap > 0 and x.size > 1:
            idx = rng.integers(x.size, size=(n_bootstrap, x.size))
            boot = _w1_normal_sorted(np.sort(x[idx], axis=1))
    else:
        y = np.asarray(reference, dtype=float).ravel()
        if y.size == 0:
            raise DomainError("w1_1d needs a non-empty reference sample")
        value = float(scipy.stats.wasserstein_distance(x, y))
        boot = np.array(
            [
                scipy.stats.wasserstein_distance(
                    x[rng.integers(x.size, size=x.size)],
                    y[rng.integers(y.size, size=y.size)],
                )
                for _ in range(n_bootstrap if min(x.size, y.size) > 1 else 0)
            ]
        )
    stderr = float(np.std(boot, ddof=1)) if boot.size > 1 else 0.0
    return DistanceReport(Metric.W1_1D, n_or_t, value, stderr, int(x.size))


def random_directions(rng: np.random.Generator, n_proj: int, d: int) -> np.ndarray:
    """``n_proj`` uniform unit vectors in ``R^d`` (rows)."""
    g = rng.standard_normal((n_proj, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _sliced_value(samples: np.ndarray, directions: np.ndarray) -> float:
    projected = np.sort(samples @ directions.T, axis=0).T
    return float(np.mean(_w1_normal_sorted(projected)))


def sliced_w1(
    samples: np.ndarray,
    n_proj: int = DEFAULT_PROJECTIONS,
    rng: np.random.Generator | None = None,
    *,
    n_bootstrap: int = DEFAULT_BOOTSTRAP,
    n_or_t: float = math.nan,
) -> DistanceReport:
    """Average 1-D W1 to the standard normal over random projections.

    Directions are drawn from ``rng`` before any bootstrap resampling, so
    a single projection reproduces ``w1_1d`` of the projected sample.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] < 2:
        raise DomainError(f"sliced_w1 needs a (replicas, d >= 2) array, got {samples.shape}")
    if samples.shape[0] == 0:
        raise DomainError("sliced_w1 needs at least one replica")
    if n_proj < 1:
        raise DomainError(f"n_proj must be >= 1, got {n_proj}")
    rng = rng or _default_rng()
    directions = random_directions(rng, n_proj, samples.shape[1])
    value = _sliced_value(samples, directions)
    boot = np.array(
        [
            _sliced_value(samples[rng.integers(len(samples), size=len(samples))], directions)
            for _ in range(n_bootstrap if len(samples) > 1 else 0)
        ]
    )
    stderr = float(np.std(boot, ddof=1)) if boot.size > 1 else 0.0
    return DistanceReport(Metric.SLICED_W1, n_or_t, value, stderr, len(samples))


def orthant_grid(d: int, points_per_axis: int = 21, span: float = 3.0) -> np.ndarray:
    """Tensor grid on ``[-span, span]^d``."""
    axis = np.linspace(-span, span, points_per_axis)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def ks_orthant(
    samples: np.ndarray,
    grid: np.ndarray | None = None,
    *,
    rng: np.random.Generator | None = None,
    n_bootstrap: int = DEFAULT_BOOTSTRAP,
    n_or_t: float = math.nan,
) -> DistanceReport:
    """``sup_z |P(W <= z coordinatewise) - prod_k Phi(z_k)|`` over ``grid``."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] == 0:
        raise DomainError("ks_orthant needs at least one sample")
    d = samples.shape[1]
    grid = orthant_grid(d) if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[0] == 0:
        raise DomainError("ks_orthant needs a non-empty grid")
    if grid.shape[1] != d:
        raise DomainError(f"grid has {grid.shape[1]} columns, samples have {d}")

    below = np.ones((samples.shape[0], grid.shape[0]), dtype=bool)
    for k in range(d):
        below &= samples[:, k, None] <= grid[None, :, k]
    target = np.prod(scipy.stats.norm.cdf(grid), axis=1)
    indicator = below.astype(float)
    value = float(np.max(np.abs(indicator.mean(axis=0) - target)))

    rng = rng or _default_rng()
    stderr = 0.0
    if n_bootstrap > 1 and samples.shape[0] > 1:
        weights = rng.multinomial(
            samples.shape[0], np.full(samples.shape[0], 1 / samples.shape[0]), size=n_bootstrap
        )
        boot = np.max(np.abs(weights @ indicator / samples.shape[0] - target), axis=1)
        stderr = float(np.std(boot, ddof=1))
    return DistanceReport(Metric.KS_ORTHANT, n_or_t, min(value, 1.0), stderr, len(samples))


def ks_marginals(samples: np.ndarray) -> np.ndarray:
    """One-sample KS statistic of every coordinate against ``N(0, 1)``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise DomainError("ks_marginals needs at least one sample")
    return np.array(
        [scipy.stats.kstest(samples[:, k], "norm").statistic for k in range(samples.shape[1])]
    )


@dataclass(frozen=True)
class MomentReport:
    """Empirical truncated moments next to their leading-order predictions.

    ``ratio_xi2`` is ``E[(xi')^2] / (d sigma_d^2 log n)``; the ``scaled_*``
    fields divide higher moments by ``r_n^(k-2)``.
    """

    n: float
    r_n: float
    e_xi2: float
    e_xi3: float
    e_xi4: float
    e_m: float
    e_m2: float
    e_tilde2: float
    e_tilde4: float
    pred_xi2: float
    pred_m: float
    ratio_xi2: float
    scaled_xi3: float
    scaled_xi4: float
    scaled_tilde4: float

    def to_dict(self) -> dict[str, float]:
        return dict(vars(self))


def moment_suite(
    decomposition: Decomposition,
    params: TruncationParams,
    constants: ModelConstants,
) -> MomentReport:
    """Moments of ``xi'``, ``m`` and ``xi_tilde`` against constants-only predictions."""
    xi = decomposition.xi_trunc.ravel()
    if xi.size < 1000:
        log.warning("Moment suite on only %d samples", xi.size)
    m = decomposition.m.ravel()
    tilde = decomposition.xi_tilde.ravel()
    r_n = params.r_n
    pred_xi2 = constants.d * constants.sigma2_d * math.log(params.n)
    e_xi2 = float(np.mean(xi**2))
    e_xi3 = float(np.mean(xi**3))
    e_xi4 = float(np.mean(xi**4))
    e_tilde4 = float(np.mean(tilde**4))
    return MomentReport(
        n=params.n,
        r_n=r_n,
        e_xi2=e_xi2,
        e_xi3=e_xi3,
        e_xi4=e_xi4,
        e_m=float(np.mean(m)),
        e_m2=float(np.mean(m**2)),
        e_tilde2=float(np.mean(tilde**2)),
        e_tilde4=e_tilde4,
        pred_xi2=pred_xi2,
        pred_m=constants.xi_bar,
        ratio_xi2=e_xi2 / pred_xi2,
        scaled_xi3=e_xi3 / r_n,
        scaled_xi4=e_xi4 / r_n**2,
        scaled_tilde4=e_tilde4 / r_n**2,
    )


def second_moment_ratio(batch: TrajectoryBatch, constants: ModelConstants) -> float:
    """``E||Q'_n||^2 / (d sigma_d^2 n log n)``."""
    if batch.replicas < 100:
        log.warning("Second-moment ratio from only %d replicas", batch.replicas)
    if batch.n < 2:
        raise DomainError(f"second-moment ratio needs n >= 2, got {batch.n}")
    mean_sq = float(np.mean(np.sum(batch.Q**2, axis=1)))
    return mean_sq / (constants.d * constants.sigma2_d * batch.n * math.log(batch.n))


def max_displacement_ratio(
    maxima: Sequence[float] | np.ndarray, n: int, constants: ModelConstants
) -> float:
    """``E max_k ||Q_k|| / (sigma_d sqrt(n log n))``."""
    if n < 2:
        raise DomainError(f"maximum ratio needs n >= 2, got {n}")
    return float(np.mean(maxima)) / (constants.sigma_d * math.sqrt(n * math.log(n)))


class RateModel(enum.StrEnum):
    INV_SQRT_LOG = "c/sqrt(log n)"
    SQRT_LOGLOG_OVER_LOG = "c*sqrt(loglog n/log n)"
    INV_SQRT = "c/sqrt(n)"
    QUARTIC_LOGLOG_OVER_LOG = "c*(loglog t)^(1/4)/(log t)^(1/4)"
    INV_QUARTIC_LOG = "c/(log t)^(1/4)"


_RATE_SHAPES: dict[RateModel, Callable[[np.ndarray], np.ndarray]] = {
    RateModel.INV_SQRT_LOG: lambda n: 1 / np.sqrt(np.log(n)),
    RateModel.SQRT_LOGLOG_OVER_LOG: lambda n: np.sqrt(np.log(np.log(n)) / np.log(n)),
    RateModel.INV_SQRT: lambda n: 1 / np.sqrt(n),
    RateModel.QUARTIC_LOGLOG_OVER_LOG: lambda n: (np.log(np.log(n)) / np.log(n)) ** 0.25,
    RateModel.INV_QUARTIC_LOG: lambda n: np.log(n) ** -0.25,
}


@dataclass(frozen=True)
class RateFit:
    model: RateModel
    c: float
    residual: float


def rate_fit(points: Iterable[tuple[float, float]], model: RateModel | str) -> RateFit:
    """Least-squares ``c`` for ``distance ~ c * shape(n)`` with RMS residual."""
    model = RateModel(model)
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or len(pts) < 3:
        raise DomainError(f"rate fit needs at least 3 points, got {len(pts)}")
    n, y = pts[:, 0], pts[:, 1]
    if np.any(n < 3):
        raise DomainError(f"rate fit needs every horizon >= 3, got {n.min()}")
    g = _RATE_SHAPES[model](n)
    c = float(np.dot(y, g) / np.dot(g, g))
    residual = float(np.sqrt(np.mean((y - c * g) ** 2)))
    return RateFit(model, c, residual)


def compare_models(
    points: Iterable[tuple[float, float]],
    models: Sequence[RateModel] | None = None,
) -> list[RateFit]:
    """Fits for every model, best (smallest residual) first."""
    pts = list(points)
    fits = [rate_fit(pts, m) for m in (models or list(RateModel))]
    return sorted(fits, key=lambda f: f.residual)


def is_strictly_decreasing(values: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(values, values[1:], strict=False))


@dataclass(frozen=True)
class MixingFit:
    C: float
    omega: float
    decay_detected: bool
    lags_used: int

    def to_dict(self) -> dict[str, Any]:
        return dict(vars(self))


def mixing_fit(
    series: LagCovariance | Sequence[float] | np.ndarray, noise_floor: float | None = None
) -> MixingFit:
    """Fit ``|cov(k)| ~ C omega^k`` over lags ``k >= 1`` above the noise floor.

    Fewer than two usable lags (or a non-decaying fit) yields
    ``decay_detected=False`` with ``omega = 1``.
    """
    if isinstance(series, LagCovariance):
        cov = np.asarray(series.cov, dtype=float)
        floor = series.noise_floor if noise_floor is None else noise_floor
    else:
        cov = np.asarray(series, dtype=float)
        floor = 0.0 if noise_floor is None else noise_floor
    if cov.size < 5:
        raise DomainError(f"mixing fit needs lags 0..K with K >= 4, got {cov.size - 1}")
    lags = np.arange(cov.size)
    magnitude = np.abs(cov)
    usable = (lags >= 1) & (magnitude > floor) & (magnitude > 0)
    if usable.sum() < 2:
        log.warning("No covariance decay detected above noise floor %.3g", floor)
        return MixingFit(C=float(magnitude[0]), omega=1.0, decay_detected=False, lags_used=int(usable.sum()))
    slope, intercept = np.polyfit(lags[usable], np.log(magnitude[usable]), 1)
    omega = float(np.exp(slope))
    detected = omega < 1.0
    if not detected:
        log.warning("Fitted covariance ratio %.3g does not decay", omega)
    return MixingFit(
        C=float(np.exp(intercept)),
        omega=min(omega, 1.0),
        decay_detected=detected,
        lags_used=int(usable.sum()),
    )
