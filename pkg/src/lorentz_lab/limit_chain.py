"""The Boltzmann-Grad limit flight process and its kernel backends.

Two backends stand in for the limiting transition kernel:

* ``surrogate_iid``: free paths from a plateau density with the exact
  ``Θ_d x⁻³`` tail and mean ``ξ̄``, velocities redrawn uniformly on the
  sphere at every step;
* ``empirical``: ``(free path, deflection)`` pairs resampled from billiard
  output, the deflection applied about a uniform azimuth.
"""

from __future__ import annotations

import enum
import functools
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np
import scipy.optimize

from lorentz_lab.billiard import CollisionEvent, FlightSequence
from lorentz_lab.constants import ModelConstants
from lorentz_lab.errors import CalibrationError, DomainError

log = logging.getLogger(__name__)

_CALIBRATION_TOL = 1e-10
_PERMUTATIONS = 20


class BackendVariant(enum.StrEnum):
    SURROGATE_IID = "surrogate_iid"
    EMPIRICAL = "empirical"


@dataclass(frozen=True, eq=False)
class KernelBackend:
    """Free-path law and deflection model of the limit chain.

    ``table`` holds ``(xi, deflection)`` rows for the empirical variant and
    is ``None`` for the surrogate; ``x0``/``c0`` are NaN for the empirical
    variant.
    """

    variant: BackendVariant
    d: int
    theta: float
    xi_bar: float
    x0: float = math.nan
    c0: float = math.nan
    table: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", BackendVariant(self.variant))
        if self.variant is BackendVariant.EMPIRICAL:
            if self.table is None or len(self.table) == 0:
                raise CalibrationError("empirical backend needs a non-empty table")
            table = np.asarray(self.table, dtype=float)
            if table.ndim != 2 or table.shape[1] != 2:
                raise CalibrationError(
                    f"empirical table must have shape (m, 2), got {table.shape}"
                )
            if not np.all(table[:, 0] > 0):
                raise CalibrationError("empirical table holds non-positive free paths")
            object.__setattr__(self, "table", table)
        elif not (self.x0 > 0 and self.c0 > 0):
            raise CalibrationError(
                f"surrogate backend needs positive x0, c0; got x0={self.x0}, c0={self.c0}"
            )

    @property
    def is_surrogate(self) -> bool:
        return self.variant is BackendVariant.SURROGATE_IID

    @property
    def xi_table(self) -> np.ndarray:
        assert self.table is not None
        return self.table[:, 0]

    @functools.cached_property
    def sorted_xi(self) -> np.ndarray:
        return np.sort(self.xi_table)

    @property
    def deflection_table(self) -> np.ndarray:
        assert self.table is not None
        return self.table[:, 1]

    def pdf(self, x: np.ndarray | float) -> np.ndarray:
        """Surrogate density ``c0`` on ``(0, x0]`` and ``Θ x⁻³`` beyond."""
        self._require_surrogate("pdf")
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            tail = self.theta / x**3
        return np.where(x <= 0, 0.0, np.where(x <= self.x0, self.c0, tail))

    def cdf(self, x: np.ndarray | float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.is_surrogate:
            sorted_xi = self.sorted_xi
            return np.searchsorted(sorted_xi, x, side="right") / sorted_xi.size
        with np.errstate(divide="ignore"):
            tail = 1.0 - self.theta / (2.0 * x * x)
        return np.where(x <= 0, 0.0, np.where(x <= self.x0, self.c0 * x, tail))

    def survival(self, x: np.ndarray | float) -> np.ndarray:
        return 1.0 - self.cdf(x)

    def ppf(self, u: np.ndarray | float) -> np.ndarray:
        """Inverse CDF; the empirical variant maps ``u`` to a table row."""
        u = np.asarray(u, dtype=float)
        if not self.is_surrogate:
            sorted_xi = self.sorted_xi
            idx = np.minimum((u * sorted_xi.size).astype(np.int64), sorted_xi.size - 1)
            return sorted_xi[idx]
        knee = self.c0 * self.x0
        with np.errstate(divide="ignore", invalid="ignore"):
            tail = np.sqrt(self.theta / (2.0 * (1.0 - u)))
        return np.where(u <= knee, u / self.c0, tail)

    def truncated_moment(self, k: int, upper: float = math.inf) -> float:
        """``E[ξ^k 1{ξ <= upper}]``, analytic for the surrogate.

        Diverges (returns ``inf``) for ``k >= 2`` with an infinite upper
        limit on the surrogate.
        """
        if k < 0:
            raise DomainError(f"moment order must be non-negative, got {k}")
        if not self.is_surrogate:
            xi = self.xi_table
            return float(np.mean(np.where(xi <= upper, xi**k, 0.0)))
        if upper <= 0:
            return 0.0
        m = min(upper, self.x0)
        plateau = self.c0 * m ** (k + 1) / (k + 1)
        if upper <= self.x0:
            return plateau
        if math.isinf(upper):
            if k >= 2:
                return math.inf
            return plateau + self.theta * self.x0 ** (k - 2) / (2 - k)
        if k == 2:
            return plateau + self.theta * math.log(upper / self.x0)
        return plateau + self.theta * (upper ** (k - 2) - self.x0 ** (k - 2)) / (k - 2)

    @property
    def mean(self) -> float:
        return self.truncated_moment(1)

    def to_dict(self) -> dict[str, Any]:
        """Calibration summary for experiment records."""
        summary: dict[str, Any] = {
            "variant": str(self.variant),
            "d": self.d,
            "theta_d": self.theta,
            "xi_bar": self.xi_bar,
        }
        if self.is_surrogate:
            summary |= {"x0": self.x0, "c0": self.c0}
        else:
            summary |= {
                "table_size": int(len(self.xi_table)),
                "table_mean_xi": float(np.mean(self.xi_table)),
            }
        return summary

    def _require_surrogate(self, what: str) -> None:
        if not self.is_surrogate:
            raise DomainError(f"{what} is only defined for the surrogate backend")


def calibrate_surrogate(constants: ModelConstants) -> KernelBackend:
    """Fit the plateau ``(x0, c0)`` to unit mass and mean ``ξ̄``.

    Eliminating ``c0`` leaves ``x0/2 + 3Θ/(4 x0) = ξ̄``; the admissible
    root (the one with ``c0 > 0``) is the larger one, found by bisection.
    """
    theta = constants.theta_d
    xi_bar = constants.xi_bar

    def mean_gap(x0: float) -> float:
        return x0 / 2 + 3 * theta / (4 * x0) - xi_bar

    lo = math.sqrt(1.5 * theta)
    hi = 2 * xi_bar + 1
    if mean_gap(lo) >= 0:
        raise CalibrationError(
            f"no plateau surrogate for d={constants.d}: "
            f"min mean {lo:.6g} exceeds xi_bar {xi_bar:.6g}"
        )
    x0 = float(scipy.optimize.bisect(mean_gap, lo, hi, xtol=1e-15, maxiter=200))
    c0 = (1 - theta / (2 * x0 * x0)) / x0

    mass_residual = abs(c0 * x0 + theta / (2 * x0 * x0) - 1)
    mean_residual = abs(c0 * x0 * x0 / 2 + theta / x0 - xi_bar)
    if c0 <= 0 or max(mass_residual, mean_residual) > _CALIBRATION_TOL:
        raise CalibrationError(
            f"surrogate calibration failed for d={constants.d}: x0={x0}, c0={c0}, "
            f"mass residual {mass_residual:.3g}, mean residual {mean_residual:.3g}"
        )
    log.info("Calibrated surrogate for d=%d: x0=%.12g c0=%.12g", constants.d, x0, c0)
    return KernelBackend(
        variant=BackendVariant.SURROGATE_IID,
        d=constants.d,
        theta=theta,
        xi_bar=xi_bar,
        x0=x0,
        c0=c0,
    )


def harvest_table(events: Sequence[CollisionEvent]) -> np.ndarray:
    """``(xi, deflection)`` rows of real collisions, horizon caps dropped."""
    if isinstance(events, FlightSequence):
        keep = ~events.horizon_exceeded
        table = np.column_stack([events.xi[keep], events.deflection_angle[keep]])
    else:
        rows = [
            (e.free_path, e.deflection_angle) for e in events if not e.horizon_exceeded
        ]
        table = np.array(rows, dtype=float).reshape(-1, 2)
    dropped = len(events) - len(table)
    if dropped:
        log.warning("Dropped %d horizon-capped flights from the empirical table", dropped)
    return table


def empirical_backend(table: np.ndarray, constants: ModelConstants) -> KernelBackend:
    backend = KernelBackend(
        variant=BackendVariant.EMPIRICAL,
        d=constants.d,
        theta=constants.theta_d,
        xi_bar=constants.xi_bar,
        table=table,
    )
    log.info(
        "Empirical backend: %d rows, mean free path %.6g",
        len(backend.xi_table),
        float(np.mean(backend.xi_table)),
    )
    return backend


def sample_free_path(backend: KernelBackend, rng: np.random.Generator) -> float:
    if backend.is_surrogate:
        u = max(rng.random(), np.finfo(float).tiny)
        return float(backend.ppf(u))
    return float(backend.xi_table[rng.integers(len(backend.xi_table))])


@dataclass(frozen=True)
class ChainState:
    """One step of the limit chain.

    ``eta_proxy`` describes the deflection that produced ``V``: a signed
    angle in ``d = 2``, ``(polar angle, azimuth)`` for ``d >= 3``.
    """

    xi: float
    eta_proxy: tuple[float, ...]
    V: np.ndarray


def uniform_directions(rng: np.random.Generator, size: int, d: int) -> np.ndarray:
    g = rng.standard_normal((size, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def rotate_about(
    V: np.ndarray, angle: float, rng: np.random.Generator
) -> np.ndarray:
    """Deflect unit ``V`` by ``angle`` towards a uniformly random normal direction."""
    d = V.shape[0]
    while True:
        g = rng.standard_normal(d)
        u = g - g.dot(V) * V
        norm = np.linalg.norm(u)
        if norm > 1e-12:
            break
    u /= norm
    c = math.cos(angle)
    s = math.sqrt(max(0.0, 1.0 - c * c))
    out = c * V + s * u
    return out / np.linalg.norm(out)


def eta_descriptor(v_prev: np.ndarray, v_next: np.ndarray) -> np.ndarray:
    """Deflection descriptors for rows of consecutive velocities.

    ``d = 2`` gives one column (signed angle); ``d >= 3`` gives the polar
    angle and the azimuth measured from the tangent direction of the
    least-aligned axis.
    """
    v_prev = np.atleast_2d(v_prev)
    v_next = np.atleast_2d(v_next)
    c = np.clip(np.sum(v_prev * v_next, axis=1), -1.0, 1.0)
    polar = np.arccos(c)
    d = v_prev.shape[1]
    if d == 2:
        cross = v_prev[:, 0] * v_next[:, 1] - v_prev[:, 1] * v_next[:, 0]
        return np.where(cross < 0, -polar, polar)[:, None]
    u = v_next - c[:, None] * v_prev
    u_norm = np.linalg.norm(u, axis=1)
    k = np.argmin(np.abs(v_prev), axis=1)
    rows = np.arange(len(v_prev))
    ref = -v_prev[rows, k][:, None] * v_prev
    ref[rows, k] += 1.0
    ref /= np.linalg.norm(ref, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_az = np.sum(u * ref, axis=1) / u_norm
    azimuth = np.where(u_norm > 1e-12, np.arccos(np.clip(cos_az, -1.0, 1.0)), 0.0)
    return np.column_stack([polar, azimuth])


def step_chain(
    state: ChainState, backend: KernelBackend, rng: np.random.Generator
) -> ChainState:
    """Advance the chain by one flight.

    The returned ``xi`` is the free path flown with the incoming velocity
    ``state.V`` and ``V`` is the velocity after the collision ending it.
    """
    d = state.V.shape[0]
    if backend.is_surrogate:
        xi = sample_free_path(backend, rng)
        v_next = uniform_directions(rng, 1, d)[0]
    else:
        row = backend.table[rng.integers(len(backend.xi_table))]  # type: ignore[index]
        xi = float(row[0])
        v_next = rotate_about(state.V, float(row[1]), rng)
    eta = eta_descriptor(state.V, v_next)[0]
    return ChainState(xi=xi, eta_proxy=tuple(float(e) for e in eta), V=v_next)


@dataclass(frozen=True, eq=False)
class ChainRun:
    """A chain of ``n`` flights.

    ``xi[j]`` is flown with velocity ``V[j]`` and ends in a collision with
    polar deflection ``deflection[j]``, after which the velocity is
    ``V[j + 1]``.
    """

    xi: np.ndarray
    V: np.ndarray
    deflection: np.ndarray
    variant: BackendVariant

    @property
    def n(self) -> int:
        return int(self.xi.shape[0])

    @property
    def d(self) -> int:
        return int(self.V.shape[1])

    def eta(self) -> np.ndarray:
        return eta_descriptor(self.V[:-1], self.V[1:])

    def states(self) -> list[ChainState]:
        eta = self.eta()
        return [
            ChainState(
                xi=float(self.xi[j]),
                eta_proxy=tuple(float(e) for e in eta[j]),
                V=self.V[j + 1].copy(),
            )
            for j in range(self.n)
        ]


def _default_v0(d: int) -> np.ndarray:
    v0 = np.zeros(d)
    v0[0] = 1.0
    return v0


def run_chain(
    backend: KernelBackend,
    n_steps: int,
    rng: np.random.Generator,
    v0: np.ndarray | None = None,
) -> ChainRun:
    """Run ``n_steps`` chain steps in one go.

    Same law as repeated :func:`step_chain`; the surrogate is vectorized
    outright, the empirical variant composes rotations (complex products
    in ``d = 2``).
    """
    if n_steps < 0:
        raise DomainError(f"n_steps must be non-negative, got {n_steps}")
    d = backend.d
    v0 = _default_v0(d) if v0 is None else np.asarray(v0, dtype=float)
    V = np.empty((n_steps + 1, d))
    V[0] = v0 / np.linalg.norm(v0)

    if backend.is_surrogate:
        u = np.maximum(rng.random(n_steps), np.finfo(float).tiny)
        xi = backend.ppf(u)
        V[1:] = uniform_directions(rng, n_steps, d)
        c = np.clip(np.sum(V[:-1] * V[1:], axis=1), -1.0, 1.0)
        return ChainRun(xi=xi, V=V, deflection=np.arccos(c), variant=backend.variant)

    assert backend.table is not None
    rows = rng.integers(len(backend.table), size=n_steps)
    xi = backend.table[rows, 0].copy()
    deflection = backend.table[rows, 1].copy()
    if d == 2:
        signs = rng.choice(np.array([-1.0, 1.0]), size=n_steps)
        c = np.cos(deflection)
        s = signs * np.sqrt(np.maximum(0.0, 1.0 - c * c))
        z = np.cumprod(np.concatenate([[complex(V[0, 0], V[0, 1])], c + 1j * s]))
        z /= np.abs(z)
        V[:, 0] = z.real
        V[:, 1] = z.imag
    else:
        for j in range(n_steps):
            V[j + 1] = rotate_about(V[j], float(deflection[j]), rng)
    return ChainRun(xi=xi, V=V, deflection=deflection, variant=backend.variant)


Observable = Callable[[ChainRun], np.ndarray]


def velocity_coordinate(k: int = 0) -> Observable:
    """``f = <e_k, V_{j-1}>`` for each flight ``j``."""

    def observable(run: ChainRun) -> np.ndarray:
        return run.V[:-1, k]

    return observable


def flight_projection(k: int = 0) -> Observable:
    """``f = <e_k, V_{j-1}> xi_j``, the coordinate increment of flight ``j``."""

    def observable(run: ChainRun) -> np.ndarray:
        return run.V[:-1, k] * run.xi

    return observable


class LagCovariance(NamedTuple):
    lags: np.ndarray
    cov: np.ndarray
    stderr: np.ndarray
    noise_floor: float


def _lagged_cov(y: np.ndarray, max_lag: int) -> np.ndarray:
    centred = y - y.mean()
    n = centred.size
    return np.array(
        [np.mean(centred[: n - k] * centred[k:]) for k in range(max_lag + 1)]
    )


def mixing_series(
    run: ChainRun | np.ndarray,
    observable: Observable | None = None,
    max_lag: int = 8,
    rng: np.random.Generator | None = None,
) -> LagCovariance:
    """Lagged autocovariances ``Cov(f_i, f_{i+k})`` for ``k = 0..max_lag``.

    ``stderr`` is the iid standard error of each lag; with ``rng`` the
    noise floor is three times the spread of lagged covariances over
    random permutations of the series, otherwise three times the iid
    standard error.
    """
    if isinstance(run, ChainRun):
        y = (observable or velocity_coordinate(0))(run)
    else:
        y = np.asarray(run, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if max_lag < 1:
        raise DomainError(f"max_lag must be >= 1, got {max_lag}")
    if y.size < 10 * max_lag:
        raise DomainError(
            f"series of length {y.size} too short for {max_lag} lags "
            f"(need >= {10 * max_lag})"
        )
    cov = _lagged_cov(y, max_lag)
    lags = np.arange(max_lag + 1)
    stderr = cov[0] / np.sqrt(y.size - lags)
    if rng is None:
        floor = 3.0 * float(stderr[1])
    else:
        permuted = np.array(
            [_lagged_cov(rng.permutation(y), max_lag)[1:] for _ in range(_PERMUTATIONS)]
        )
        floor = 3.0 * float(np.std(permuted))
    log.debug("Lagged covariances %s (noise floor %.3g)", cov, floor)
    return LagCovariance(lags=lags, cov=cov, stderr=stderr, noise_floor=floor)
