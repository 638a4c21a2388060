"""Displacements, collision times and the truncation/decomposition of flights."""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np

from lorentz_lab.billiard import FlightSequence
from lorentz_lab.constants import ModelConstants
from lorentz_lab.errors import DomainError, EmptyBinError, InsufficientFlightsError
from lorentz_lab.limit_chain import ChainRun, KernelBackend

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.5
DEFAULT_BINS = 32


@dataclass(frozen=True, eq=False)
class FlightPath:
    """Free paths ``xi[j]`` flown with velocities ``velocities[j]`` (``V_j``).

    ``deflection[j]`` is the polar deflection at the collision ending
    flight ``j``; it is the conditioning descriptor of the empirical
    decomposition.
    """

    xi: np.ndarray
    velocities: np.ndarray
    deflection: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.velocities.ndim != 2 or len(self.velocities) != len(self.xi):
            raise DomainError(
                f"velocities shape {self.velocities.shape} does not match "
                f"{len(self.xi)} free paths"
            )

    @classmethod
    def from_events(cls, events: FlightSequence) -> FlightPath:
        return cls(
            xi=events.xi.copy(),
            velocities=events.v_in.copy(),
            deflection=events.deflection_angle.copy(),
        )

    @classmethod
    def from_chain_run(cls, run: ChainRun) -> FlightPath:
        return cls(xi=run.xi, velocities=run.V[:-1], deflection=run.deflection)

    @property
    def n(self) -> int:
        return int(self.xi.shape[0])

    @property
    def d(self) -> int:
        return int(self.velocities.shape[1])

    def with_xi(self, xi: np.ndarray) -> FlightPath:
        return dataclasses.replace(self, xi=np.asarray(xi, dtype=float))

    def increments(self) -> np.ndarray:
        return self.xi[:, None] * self.velocities


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """End-point displacements ``Q_n`` of ``replicas`` independent paths."""

    n: int
    replicas: int
    Q: np.ndarray
    partial: np.ndarray | None = None

    def csv_header(self) -> list[str]:
        return ["replica", "n", *(f"q_{k + 1}" for k in range(self.Q.shape[1]))]

    def csv_rows(self) -> Iterator[list[str]]:
        for i, q in enumerate(self.Q):
            yield [str(i), str(self.n), *(repr(float(c)) for c in q)]


def _as_paths(flights: FlightPath | Sequence[FlightPath]) -> list[FlightPath]:
    if isinstance(flights, FlightPath):
        return [flights]
    return list(flights)


def _exact_sum(increments: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(increments[:, k]) for k in range(increments.shape[1])])


def displacement(
    flights: FlightPath | Sequence[FlightPath], *, keep_partial: bool = False
) -> TrajectoryBatch:
    """``Q_n = sum_j xi_j V_{j-1}`` for each path, summed with exact rounding."""
    paths = _as_paths(flights)
    if not paths or paths[0].n == 0:
        raise DomainError("displacement needs at least one non-empty flight path")
    n = paths[0].n
    if any(p.n != n for p in paths):
        raise DomainError("all replicas must share the same number of flights")
    Q = np.array([_exact_sum(p.increments()) for p in paths])
    partial = None
    if keep_partial:
        d = paths[0].d
        partial = np.zeros((len(paths), n + 1, d))
        for i, p in enumerate(paths):
            partial[i, 1:] = np.cumsum(p.increments(), axis=0)
    return TrajectoryBatch(n=n, replicas=len(paths), Q=Q, partial=partial)


def compensated_cumsum(values: np.ndarray) -> np.ndarray:
    """Neumaier-compensated running sums with a leading zero."""
    out = np.empty(len(values) + 1)
    out[0] = 0.0
    total = 0.0
    carry = 0.0
    for i, x in enumerate(values.tolist(), start=1):
        t = total + x
        if abs(total) >= abs(x):
            carry += (total - t) + x
        else:
            carry += (x - t) + total
        total = t
        out[i] = total + carry
    return out


def flight_times(flights: FlightPath | np.ndarray | Sequence[float]) -> np.ndarray:
    """Collision times ``tau_0 = 0 < tau_1 < ...``."""
    xi = flights.xi if isinstance(flights, FlightPath) else np.asarray(flights, dtype=float)
    if xi.size and not np.all(xi > 0):
        bad = float(xi[~(xi > 0)][0])
        raise DomainError(f"free paths must be positive, got {bad}")
    return compensated_cumsum(xi)


def collisions_before(t: float, tau: np.ndarray) -> int:
    """Largest ``n`` with ``tau_n <= t``."""
    if t < 0:
        raise DomainError(f"time must be non-negative, got {t}")
    if t > tau[-1]:
        raise InsufficientFlightsError(
            f"time {t} lies beyond the last collision at {tau[-1]} "
            f"({len(tau) - 1} flights)"
        )
    return int(np.searchsorted(tau, t, side="right")) - 1


@dataclass(frozen=True, eq=False)
class ContinuousSample:
    t: float
    tau: np.ndarray
    nu_t: int
    X_t: np.ndarray


def partial_displacement(path: FlightPath, k: int) -> np.ndarray:
    """``Q_k`` for ``0 <= k <= n``."""
    if k == 0:
        return np.zeros(path.d)
    return _exact_sum(path.increments()[:k])


def continuous_sample(
    t: float, path: FlightPath, tau: np.ndarray | None = None
) -> ContinuousSample:
    tau = flight_times(path) if tau is None else tau
    nu = collisions_before(t, tau)
    X = partial_displacement(path, nu)
    if nu < path.n:
        X = X + (t - tau[nu]) * path.velocities[nu]
    return ContinuousSample(t=t, tau=tau, nu_t=nu, X_t=X)


def continuous_position(
    t: float, path: FlightPath, tau: np.ndarray | None = None
) -> np.ndarray:
    """``X_t = Q_{nu_t} + (t - tau_{nu_t}) V_{nu_t}``."""
    return continuous_sample(t, path, tau).X_t


@dataclass(frozen=True)
class TruncationParams:
    """Truncation level ``r_n = sqrt(n (log n)^gamma)``."""

    n: float
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self) -> None:
        if not 0 < self.gamma < 1:
            raise DomainError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.n < 2:
            raise DomainError(f"truncation horizon must be >= 2, got {self.n}")

    @property
    def r_n(self) -> float:
        return math.sqrt(self.n * math.log(self.n) ** self.gamma)


def truncate(xi: np.ndarray, params: TruncationParams) -> np.ndarray:
    """Zero every free path above ``r_n``."""
    xi = np.asarray(xi, dtype=float)
    return np.where(xi <= params.r_n, xi, 0.0)


@dataclass(frozen=True, eq=False)
class Decomposition:
    """``xi_trunc = m + xi_tilde`` with ``m`` the conditional mean given the deflection.

    ``cond_second`` holds ``E(xi_tilde**2 | eta)`` per element; ``bins`` and
    ``edges`` describe the equal-count binning of the empirical variant.
    """

    xi_trunc: np.ndarray
    m: np.ndarray
    xi_tilde: np.ndarray
    params: TruncationParams
    cond_second: np.ndarray
    bins: np.ndarray | None = None
    edges: np.ndarray | None = None
    bin_means: np.ndarray | None = None

    @property
    def r_n(self) -> float:
        return self.params.r_n

    @property
    def gamma(self) -> float:
        return self.params.gamma

    def summary(self) -> dict[str, Any]:
        return {
            "gamma": self.gamma,
            "r_n": self.r_n,
            "mean_m": float(np.mean(self.m)),
            "var_xi_tilde": float(np.var(self.xi_tilde)),
        }


def _equal_count_bins(
    descriptor: np.ndarray, n_bins: int
) -> tuple[np.ndarray, np.ndarray]:
    edges = np.quantile(descriptor, np.linspace(0.0, 1.0, n_bins + 1))
    return _assign_bins(descriptor, edges), edges


def _assign_bins(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    n_bins = len(edges) - 1
    return np.clip(np.searchsorted(edges, values, side="right") - 1, 0, n_bins - 1)


def decompose(
    xi_trunc: np.ndarray,
    backend: KernelBackend,
    params: TruncationParams,
    descriptor: np.ndarray | None = None,
    *,
    n_bins: int = DEFAULT_BINS,
) -> Decomposition:
    """Split truncated free paths into conditional mean and centred part.

    The surrogate's ``m`` is the analytic ``E[xi 1{xi <= r_n}]``.  The
    empirical variant regresses ``xi_trunc`` on equal-count bins of
    ``descriptor`` (the deflection angles); any array shape is accepted
    and bins are pooled over all elements.
    """
    xi_trunc = np.asarray(xi_trunc, dtype=float)
    if backend.is_surrogate:
        m_value = backend.truncated_moment(1, params.r_n)
        second = backend.truncated_moment(2, params.r_n) - m_value * m_value
        m = np.full_like(xi_trunc, m_value)
        return Decomposition(
            xi_trunc=xi_trunc,
            m=m,
            xi_tilde=xi_trunc - m,
            params=params,
            cond_second=np.full_like(xi_trunc, second),
        )

    if descriptor is None:
        raise DomainError("empirical decomposition needs the deflection descriptor")
    descriptor = np.asarray(descriptor, dtype=float)
    if descriptor.shape != xi_trunc.shape:
        raise DomainError(
            f"descriptor shape {descriptor.shape} != free-path shape {xi_trunc.shape}"
        )
    flat_xi = xi_trunc.ravel()
    bins, edges = _equal_count_bins(descriptor.ravel(), n_bins)
    counts = np.bincount(bins, minlength=n_bins)
    if np.any(counts == 0):
        raise EmptyBinError(
            f"{int(np.sum(counts == 0))} of {n_bins} deflection bins are empty; "
            "use fewer bins",
            counts.tolist(),
        )
    bin_means = np.bincount(bins, weights=flat_xi, minlength=n_bins) / counts
    m = bin_means[bins]
    tilde = flat_xi - m
    bin_second = np.bincount(bins, weights=tilde * tilde, minlength=n_bins) / counts
    shape = xi_trunc.shape
    log.debug("Empirical decomposition over %d bins, counts %s", n_bins, counts)
    return Decomposition(
        xi_trunc=xi_trunc,
        m=m.reshape(shape),
        xi_tilde=tilde.reshape(shape),
        params=params,
        cond_second=bin_second[bins].reshape(shape),
        bins=bins.reshape(shape),
        edges=edges,
        bin_means=bin_means,
    )


def draw_tilde_copy(
    decomposition: Decomposition,
    backend: KernelBackend,
    rng: np.random.Generator,
) -> np.ndarray:
    """Conditionally independent copies ``xi_tilde'`` of every element.

    The surrogate draws fresh truncated free paths and subtracts the same
    analytic ``m`` as the original element.  The empirical variant draws
    table rows from the same deflection bin and centres each draw on the
    truncated table mean of that bin.
    """
    shape = decomposition.xi_trunc.shape
    params = decomposition.params
    if backend.is_surrogate:
        u = np.maximum(rng.random(shape), np.finfo(float).tiny)
        fresh = truncate(backend.ppf(u), params)
        return fresh - decomposition.m

    assert decomposition.bins is not None and decomposition.edges is not None
    n_bins = len(decomposition.edges) - 1
    table_bins = _assign_bins(backend.deflection_table, decomposition.edges)
    counts = np.bincount(table_bins, minlength=n_bins)
    if np.any(counts == 0):
        raise EmptyBinError(
            f"empirical table leaves {int(np.sum(counts == 0))} deflection bins empty",
            counts.tolist(),
        )
    order = np.argsort(table_bins, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    b = decomposition.bins.ravel()
    pick = starts[b] + (rng.random(b.size) * counts[b]).astype(np.int64)
    table_xi = truncate(backend.xi_table, params)
    table_means = np.bincount(table_bins, weights=table_xi, minlength=n_bins) / counts
    fresh = table_xi[order[pick]]
    return (fresh - table_means[b]).reshape(shape)


def _require_horizon(n: float) -> None:
    if n < 2:
        raise DomainError(f"normalization needs n >= 2, got {n}")


def discrete_scale(n: float, constants: ModelConstants) -> float:
    _require_horizon(n)
    return constants.sigma_d * math.sqrt(n * math.log(n))


def continuous_scale(t: float, constants: ModelConstants) -> float:
    if not t > 1:
        raise DomainError(f"continuous normalization needs t > 1, got {t}")
    return constants.Sigma_d * math.sqrt(t * math.log(t))


def normalize_discrete(
    batch: TrajectoryBatch | np.ndarray,
    constants: ModelConstants,
    n: float | None = None,
) -> np.ndarray:
    """``W_n = Q_n / (sigma_d sqrt(n log n))`` per replica."""
    if isinstance(batch, TrajectoryBatch):
        Q, horizon = batch.Q, batch.n if n is None else n
    else:
        if n is None:
            raise DomainError("raw displacement arrays need an explicit n")
        Q, horizon = np.asarray(batch, dtype=float), n
    return Q / discrete_scale(horizon, constants)


def normalize_continuous(
    X_t: np.ndarray, t: float, constants: ModelConstants
) -> np.ndarray:
    """``W_t = X_t / (Sigma_d sqrt(t log t))``."""
    return np.asarray(X_t, dtype=float) / continuous_scale(t, constants)


class RenewalRecord(NamedTuple):
    t: float
    nu_t: int
    n_t: int
    deviation: int


def renewal_compare(
    t: float,
    flights: FlightPath | np.ndarray | Sequence[float],
    constants: ModelConstants,
    *,
    tau: np.ndarray | None = None,
) -> RenewalRecord:
    """Compare the collision count ``nu_t`` with ``n_t = floor(t / xi_bar)``.

    ``flights`` is read as free paths, as in :func:`flight_times`; pass
    ``tau`` to reuse collision times already computed for it.
    """
    tau = flight_times(flights) if tau is None else tau
    nu = collisions_before(t, tau)
    n_t = math.floor(t / constants.xi_bar)
    return RenewalRecord(t=t, nu_t=nu, n_t=n_t, deviation=abs(nu - n_t))


class GapEstimate(NamedTuple):
    mean: float
    stderr: float


def truncation_gap(
    batch_full: TrajectoryBatch,
    batch_truncated: TrajectoryBatch,
    constants: ModelConstants,
) -> GapEstimate:
    """Monte-Carlo ``E||W_n - W'_n||`` from paired full and truncated batches."""
    if batch_full.Q.shape != batch_truncated.Q.shape:
        raise DomainError("full and truncated batches must be paired replica by replica")
    gaps = np.linalg.norm(
        normalize_discrete(batch_full, constants)
        - normalize_discrete(batch_truncated, constants),
        axis=1,
    )
    stderr = float(np.std(gaps, ddof=1) / math.sqrt(gaps.size)) if gaps.size > 1 else 0.0
    return GapEstimate(float(np.mean(gaps)), stderr)


def truncation_gap_bound(
    n: float,
    backend: KernelBackend,
    params: TruncationParams,
    constants: ModelConstants,
) -> float:
    """First-moment bound ``n E[xi 1{xi > r_n}] / (sigma_d sqrt(n log n))``."""
    excess = backend.truncated_moment(1) - backend.truncated_moment(1, params.r_n)
    return n * max(excess, 0.0) / discrete_scale(n, constants)


def running_maximum(path: FlightPath) -> float:
    """``max_{k <= n} ||Q_k||``."""
    partial = np.cumsum(path.increments(), axis=0)
    if partial.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(partial, axis=1)))


class GapTerms(NamedTuple):
    overshoot: float
    renewal: float
    scale: float


def continuous_gap_terms(
    t: float, path: FlightPath, constants: ModelConstants
) -> GapTerms:
    """The three pieces separating ``W_t`` from ``W_{n_t}``.

    Overshoot and renewal displacement are divided by
    ``Sigma_d sqrt(t log t)``; the scale mismatch multiplies ``||Q_{n_t}||``
    by the difference of the two normalizations.
    """
    tau = flight_times(path)
    sample = continuous_sample(t, path, tau)
    n_t = math.floor(t / constants.xi_bar)
    if n_t > path.n:
        raise InsufficientFlightsError(
            f"n_t = {n_t} exceeds the {path.n} recorded flights"
        )
    scale_t = continuous_scale(t, constants)
    q_nu = partial_displacement(path, sample.nu_t)
    q_nt = partial_displacement(path, n_t)
    overshoot = (t - float(tau[sample.nu_t])) / scale_t
    renewal = float(np.linalg.norm(q_nu - q_nt)) / scale_t
    mismatch = abs(1.0 / scale_t - 1.0 / discrete_scale(n_t, constants))
    return GapTerms(overshoot, renewal, mismatch * float(np.linalg.norm(q_nt)))
