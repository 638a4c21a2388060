"""Exact free flights and specular reflections in the periodic Lorentz gas.

Scatterers are radius-``r`` spheres centred on a scaled integer lattice.
Rays are traced by marching through lattice cells in the order the ray
crosses them; since ``2r`` is below the lattice spacing every sphere lies
strictly inside its own cell, so the first hit found is the nearest one.
"""

from __future__ import annotations

import enum
import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple, overload

import numpy as np

from lorentz_lab.constants import make_constants
from lorentz_lab.errors import ConfigurationError, DomainError
from lorentz_lab.rng import Stage, replica_stream

log = logging.getLogger(__name__)

DEFAULT_L_MAX_FACTOR = 1e4

# Relative to r**2; discriminants at or below this are tangencies (misses).
_TANGENCY_RTOL = 1e-12
_UNIT_TOL = 1e-9
# Relative slack for deciding that a position sits on a scatterer surface.
_SURFACE_RTOL = 1e-9


class Scaling(enum.StrEnum):
    RAW = "raw"
    BOLTZMANN_GRAD = "boltzmann_grad"


@dataclass(frozen=True)
class LatticeConfig:
    """Scatterer geometry.

    ``l_max`` defaults to ``1e4`` mean free paths of the Boltzmann-Grad
    limit in dimension ``d``.
    """

    d: int
    r: float
    scaling: Scaling = Scaling.BOLTZMANN_GRAD
    l_max: float | None = None

    def __post_init__(self) -> None:
        if isinstance(self.d, bool) or not isinstance(self.d, int) or self.d < 2:
            raise ConfigurationError(
                f"lattice dimension must be an integer >= 2, got {self.d!r}",
                {"d": f"expected integer >= 2, got {self.d!r}"},
            )
        if not self.r > 0:
            raise ConfigurationError(
                f"scatterer radius must be positive, got {self.r}",
                {"r": f"expected > 0, got {self.r}"},
            )
        object.__setattr__(self, "scaling", Scaling(self.scaling))
        if self.l_max is None:
            object.__setattr__(
                self, "l_max", DEFAULT_L_MAX_FACTOR * make_constants(self.d).xi_bar
            )
        assert self.l_max is not None
        if not self.l_max > 0:
            raise ConfigurationError(
                f"l_max must be positive, got {self.l_max}",
                {"l_max": f"expected > 0, got {self.l_max}"},
            )
        if not 2 * self.r < self.spacing:
            raise ConfigurationError(
                f"scatterers overlap: 2r = {2 * self.r} >= spacing {self.spacing}",
                {"r": f"2r must be below the lattice spacing {self.spacing}"},
            )

    @property
    def spacing(self) -> float:
        if self.scaling is Scaling.RAW:
            return 1.0
        return float(self.r ** ((self.d - 1) / self.d))

    @property
    def horizon(self) -> float:
        assert self.l_max is not None
        return self.l_max


@dataclass(frozen=True)
class ParticleState:
    position: np.ndarray
    velocity: np.ndarray


@dataclass(frozen=True)
class CollisionEvent:
    """One free flight ending at a scatterer (or at the horizon cap).

    Horizon-capped flights have ``horizon_exceeded`` set, ``free_path``
    equal to ``l_max``, no scatterer, a NaN impact parameter and zero
    deflection.
    """

    free_path: float
    hit_point: np.ndarray
    scatterer: np.ndarray | None
    v_in: np.ndarray
    v_out: np.ndarray
    impact_parameter: float
    deflection_angle: float
    cell: tuple[int, ...] | None = None
    horizon_exceeded: bool = False

    def exit_state(self) -> ParticleState:
        return ParticleState(self.hit_point, self.v_out)


class HorizonExceeded(NamedTuple):
    """No scatterer within ``l_max`` of the starting point."""

    l_max: float


@dataclass(eq=False)
class FlightSequence(Sequence[CollisionEvent]):
    """Columnar storage for a chain of flights.

    Indexing yields :class:`CollisionEvent` views; the arrays are what the
    rest of the lab consumes.
    """

    xi: np.ndarray
    hit_point: np.ndarray
    scatterer: np.ndarray
    v_in: np.ndarray
    v_out: np.ndarray
    impact_parameter: np.ndarray
    deflection_angle: np.ndarray
    horizon_exceeded: np.ndarray
    spacing: float = field(default=1.0)

    @classmethod
    def empty(cls, n: int, d: int, spacing: float = 1.0) -> FlightSequence:
        return cls(
            xi=np.zeros(n),
            hit_point=np.zeros((n, d)),
            scatterer=np.full((n, d), np.nan),
            v_in=np.zeros((n, d)),
            v_out=np.zeros((n, d)),
            impact_parameter=np.full(n, np.nan),
            deflection_angle=np.zeros(n),
            horizon_exceeded=np.zeros(n, dtype=bool),
            spacing=spacing,
        )

    @property
    def d(self) -> int:
        return int(self.hit_point.shape[1])

    def __len__(self) -> int:
        return int(self.xi.shape[0])

    @overload
    def __getitem__(self, index: int) -> CollisionEvent: ...

    @overload
    def __getitem__(self, index: slice) -> FlightSequence: ...

    def __getitem__(self, index: int | slice) -> CollisionEvent | FlightSequence:
        if isinstance(index, slice):
            return FlightSequence(
                xi=self.xi[index],
                hit_point=self.hit_point[index],
                scatterer=self.scatterer[index],
                v_in=self.v_in[index],
                v_out=self.v_out[index],
                impact_parameter=self.impact_parameter[index],
                deflection_angle=self.deflection_angle[index],
                horizon_exceeded=self.horizon_exceeded[index],
                spacing=self.spacing,
            )
        capped = bool(self.horizon_exceeded[index])
        scatterer = None if capped else self.scatterer[index].copy()
        cell = (
            None
            if scatterer is None
            else tuple(int(c) for c in np.rint(scatterer / self.spacing))
        )
        return CollisionEvent(
            free_path=float(self.xi[index]),
            hit_point=self.hit_point[index].copy(),
            scatterer=scatterer,
            v_in=self.v_in[index].copy(),
            v_out=self.v_out[index].copy(),
            impact_parameter=float(self.impact_parameter[index]),
            deflection_angle=float(self.deflection_angle[index]),
            cell=cell,
            horizon_exceeded=capped,
        )

    def __iter__(self) -> Iterator[CollisionEvent]:
        for i in range(len(self)):
            yield self[i]


class _Hit(NamedTuple):
    t: float
    cell: list[int]
    perp2: float


def _as_floats(vector: np.ndarray | Sequence[float], d: int, name: str) -> list[float]:
    values = [float(c) for c in np.asarray(vector, dtype=float).ravel()]
    if len(values) != d:
        raise DomainError(f"{name} must have {d} components, got {len(values)}")
    return values


def _check_unit(v: list[float], name: str) -> None:
    norm = math.sqrt(math.fsum(c * c for c in v))
    if abs(norm - 1.0) > _UNIT_TOL:
        raise DomainError(f"{name} must be a unit vector, got norm {norm!r}")


def _departure_cell(
    x: list[float], v: list[float], a: float, r: float
) -> tuple[int, ...] | None:
    """Return the cell of the scatterer whose surface ``x`` sits on, if any."""
    cell = [math.floor(xk / a + 0.5) for xk in x]
    w = [xk - a * ck for xk, ck in zip(x, cell, strict=True)]
    dist = math.sqrt(math.fsum(c * c for c in w))
    if dist < r * (1 - _SURFACE_RTOL):
        raise DomainError(
            f"position lies inside the scatterer at cell {tuple(cell)} "
            f"(distance {dist!r} < r = {r})"
        )
    if dist > r * (1 + _SURFACE_RTOL):
        return None
    if math.fsum(wk * vk for wk, vk in zip(w, v, strict=True)) < 0:
        raise DomainError(
            f"velocity points into the scatterer at cell {tuple(cell)} it departs from"
        )
    return tuple(cell)


def _trace(
    x: list[float],
    v: list[float],
    excluded: tuple[int, ...] | None,
    a: float,
    r: float,
    l_max: float,
) -> _Hit | None:
    """March the ray ``x + t v`` through lattice cells up to ``t = l_max``."""
    d = len(x)
    r2 = r * r
    cell = [math.floor(xk / a + 0.5) for xk in x]
    step = [0] * d
    t_max = [math.inf] * d
    t_delta = [math.inf] * d
    for k in range(d):
        if v[k] > 0:
            step[k] = 1
            t_max[k] = ((cell[k] + 0.5) * a - x[k]) / v[k]
            t_delta[k] = a / v[k]
        elif v[k] < 0:
            step[k] = -1
            t_max[k] = ((cell[k] - 0.5) * a - x[k]) / v[k]
            t_delta[k] = -a / v[k]

    skip = excluded is not None and tuple(cell) == excluded
    while True:
        if not skip:
            # Shifted frame centred on the candidate sphere.
            w = [xk - a * ck for xk, ck in zip(x, cell, strict=True)]
            b = sum(wk * vk for wk, vk in zip(w, v, strict=True))
            perp2 = sum((wk - b * vk) ** 2 for wk, vk in zip(w, v, strict=True))
            disc = r2 - perp2
            if disc > _TANGENCY_RTOL * r2:
                t = -b - math.sqrt(disc)
                if 0 < t <= l_max:
                    return _Hit(t, cell, perp2)
        skip = False
        axis = min(range(d), key=t_max.__getitem__)
        if t_max[axis] > l_max:
            return None
        cell[axis] += step[axis]
        t_max[axis] += t_delta[axis]


def _reflect(v: list[float], n: list[float]) -> list[float]:
    vn = sum(vk * nk for vk, nk in zip(v, n, strict=True))
    out = [vk - 2 * vn * nk for vk, nk in zip(v, n, strict=True)]
    norm = math.sqrt(sum(c * c for c in out))
    return [c / norm for c in out]


def _normal(hit: list[float], center: list[float]) -> list[float]:
    w = [hk - ck for hk, ck in zip(hit, center, strict=True)]
    norm = math.sqrt(sum(c * c for c in w))
    return [c / norm for c in w]


def _angle(u: list[float], w: list[float]) -> float:
    c = sum(a * b for a, b in zip(u, w, strict=True))
    return math.acos(max(-1.0, min(1.0, c)))


def reflect(v_in: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Specular reflection ``v_in - 2 (v_in . n) n`` of an incoming ray.

    Raises ``DomainError`` unless both vectors are unit length and the
    ray is entering the surface (``v_in . n < 0``).
    """
    v = [float(c) for c in np.asarray(v_in, dtype=float).ravel()]
    n = [float(c) for c in np.asarray(normal, dtype=float).ravel()]
    if len(v) != len(n):
        raise DomainError(f"dimension mismatch: {len(v)} vs {len(n)}")
    _check_unit(v, "v_in")
    _check_unit(n, "normal")
    vn = math.fsum(a * b for a, b in zip(v, n, strict=True))
    if vn >= 0:
        raise DomainError(f"ray is not entering the surface: v_in . normal = {vn!r}")
    return np.array(_reflect(v, n))


def _validated_state(
    state: ParticleState, config: LatticeConfig
) -> tuple[list[float], list[float], tuple[int, ...] | None]:
    x = _as_floats(state.position, config.d, "position")
    v = _as_floats(state.velocity, config.d, "velocity")
    _check_unit(v, "velocity")
    excluded = _departure_cell(x, v, config.spacing, config.r)
    return x, v, excluded


def next_collision(
    state: ParticleState, config: LatticeConfig
) -> CollisionEvent | HorizonExceeded:
    """Trace one free flight from ``state``.

    A scatterer whose surface the state sits on is excluded, so a
    post-reflection state leaves its own scatterer cleanly.
    """
    x, v, excluded = _validated_state(state, config)
    a = config.spacing
    hit = _trace(x, v, excluded, a, config.r, config.horizon)
    if hit is None:
        return HorizonExceeded(config.horizon)
    point = [xk + hit.t * vk for xk, vk in zip(x, v, strict=True)]
    center = [a * ck for ck in hit.cell]
    v_out = _reflect(v, _normal(point, center))
    return CollisionEvent(
        free_path=hit.t,
        hit_point=np.array(point),
        scatterer=np.array(center),
        v_in=np.array(v),
        v_out=np.array(v_out),
        impact_parameter=math.sqrt(hit.perp2),
        deflection_angle=_angle(v, v_out),
        cell=tuple(hit.cell),
    )


def surface_start(rng: np.random.Generator, config: LatticeConfig) -> ParticleState:
    """Draw a post-collision state from the billiard-map invariant measure.

    The outward normal is uniform on the sphere and the velocity is
    cosine-weighted on the outgoing hemisphere, drawn as a uniform point of
    the tangent unit ball lifted onto the hemisphere.
    """
    d = config.d
    n = rng.standard_normal(d)
    n /= np.linalg.norm(n)
    g = rng.standard_normal(d)
    g -= g.dot(n) * n
    g /= np.linalg.norm(g)
    rho = rng.random() ** (1.0 / (d - 1))
    velocity = rho * g + math.sqrt(max(0.0, 1.0 - rho * rho)) * n
    velocity /= np.linalg.norm(velocity)
    return ParticleState(position=config.r * n, velocity=velocity)


def sample_flight_sequence(
    seed: int,
    n_flights: int,
    config: LatticeConfig,
    init: ParticleState | None = None,
    *,
    replica: int = 0,
) -> FlightSequence:
    """Chain ``n_flights`` flights, each starting from the previous exit state.

    Without ``init`` the trajectory starts from :func:`surface_start` drawn
    from the ``(seed, replica)`` billiard stream.  Flights reaching
    ``l_max`` are recorded as capped and continue from the cap point.
    """
    if n_flights < 0:
        raise DomainError(f"n_flights must be non-negative, got {n_flights}")
    if init is None:
        init = surface_start(replica_stream(seed, Stage.BILLIARD, replica), config)
    d = config.d
    a = config.spacing
    l_max = config.horizon
    out = FlightSequence.empty(n_flights, d, spacing=a)
    x, v, excluded = _validated_state(init, config)
    capped = 0
    for i in range(n_flights):
        hit = _trace(x, v, excluded, a, config.r, l_max)
        out.v_in[i] = v
        if hit is None:
            x = [xk + l_max * vk for xk, vk in zip(x, v, strict=True)]
            out.xi[i] = l_max
            out.hit_point[i] = x
            out.v_out[i] = v
            out.horizon_exceeded[i] = True
            excluded = None
            capped += 1
            continue
        x = [xk + hit.t * vk for xk, vk in zip(x, v, strict=True)]
        center = [a * ck for ck in hit.cell]
        v_out = _reflect(v, _normal(x, center))
        out.xi[i] = hit.t
        out.hit_point[i] = x
        out.scatterer[i] = center
        out.v_out[i] = v_out
        out.impact_parameter[i] = math.sqrt(hit.perp2)
        out.deflection_angle[i] = _angle(v, v_out)
        v = v_out
        excluded = tuple(hit.cell)
    if capped:
        log.warning(
            "%d of %d flights reached the horizon cap l_max=%g", capped, n_flights, l_max
        )
    log.debug("Traced %d flights (replica %d)", n_flights, replica)
    return out


def _free_paths(flights: Sequence[CollisionEvent] | np.ndarray) -> np.ndarray:
    if isinstance(flights, FlightSequence):
        return flights.xi
    if isinstance(flights, np.ndarray):
        return flights.astype(float).ravel()
    return np.array([e.free_path for e in flights], dtype=float)


def free_path_survival(
    flights: Sequence[CollisionEvent] | np.ndarray, grid: Sequence[float] | np.ndarray
) -> np.ndarray:
    """Empirical survival function ``P(xi > x)`` at each grid point."""
    xi = np.sort(_free_paths(flights))
    if xi.size == 0:
        raise DomainError("survival estimate needs at least one flight")
    x = np.asarray(grid, dtype=float)
    return 1.0 - np.searchsorted(xi, x, side="right") / xi.size


class TailFit(NamedTuple):
    slope: float
    tail_constant: float
    x_ref: float
    n_points: int


def tail_fit(
    flights: Sequence[CollisionEvent] | np.ndarray,
    x_lo: float,
    x_hi: float,
    *,
    x_ref: float | None = None,
    n_points: int = 20,
) -> TailFit:
    """Log-log slope of the survival function over ``[x_lo, x_hi]``.

    Also reports ``x_ref**2 * P(xi > x_ref)``, which tends to half the
    density's tail constant for an ``x**-3`` tail.
    """
    if not 0 < x_lo < x_hi:
        raise DomainError(f"need 0 < x_lo < x_hi, got [{x_lo}, {x_hi}]")
    grid = np.geomspace(x_lo, x_hi, n_points)
    survival = free_path_survival(flights, grid)
    mask = survival > 0
    if mask.sum() < 2:
        raise DomainError(f"fewer than two flights exceed the fit window [{x_lo}, {x_hi}]")
    slope, _ = np.polyfit(np.log(grid[mask]), np.log(survival[mask]), 1)
    ref = math.sqrt(x_lo * x_hi) if x_ref is None else x_ref
    tail = ref * ref * float(free_path_survival(flights, [ref])[0])
    return TailFit(float(slope), tail, ref, int(mask.sum()))


def csv_header(d: int) -> list[str]:
    return [
        "index",
        "xi",
        *(f"hit_{k + 1}" for k in range(d)),
        *(f"v_out_{k + 1}" for k in range(d)),
        "impact_parameter",
        "deflection_angle",
        "horizon_flag",
    ]


def csv_rows(flights: FlightSequence) -> Iterator[list[str]]:
    """Yield export rows; floats use ``repr`` so values round-trip."""
    for i in range(len(flights)):
        yield [
            str(i),
            repr(float(flights.xi[i])),
            *(repr(float(c)) for c in flights.hit_point[i]),
            *(repr(float(c)) for c in flights.v_out[i]),
            repr(float(flights.impact_parameter[i])),
            repr(float(flights.deflection_angle[i])),
            str(int(flights.horizon_exceeded[i])),
        ]
