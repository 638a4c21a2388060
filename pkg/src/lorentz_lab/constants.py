"""Closed-form constants of the superdiffusive limit and their identities."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import asdict, dataclass

import scipy.special

from lorentz_lab.errors import DomainError

log = logging.getLogger(__name__)

_IDENTITY_RTOL = 1e-12


@dataclass(frozen=True)
class ModelConstants:
    """Dimension-indexed constants of the scaling limit.

    ``theta_d`` is the tail constant of the free path density
    (``Θ_d x⁻³``), ``sigma2_d``/``Sigma2_d`` the discrete/continuous time
    variances and ``xi_bar`` the mean free path.
    """

    d: int
    zeta_d: float
    theta_d: float
    sigma2_d: float
    Sigma2_d: float
    xi_bar: float

    @property
    def sigma_d(self) -> float:
        return math.sqrt(self.sigma2_d)

    @property
    def Sigma_d(self) -> float:
        return math.sqrt(self.Sigma2_d)

    def to_dict(self) -> dict[str, float | int]:
        """Return the six fields for JSON summaries."""
        return asdict(self)


def zeta(s: int) -> float:
    """Riemann zeta at an integer ``s >= 2``."""
    if s < 2:
        raise DomainError(f"zeta requires s >= 2, got {s}")
    return float(scipy.special.zeta(s))


def unit_ball_volume(k: int) -> float:
    """Volume of the unit ball in ``k`` dimensions."""
    return math.pi ** (k / 2) / math.gamma(k / 2 + 1)


@functools.lru_cache(maxsize=None)
def make_constants(d: int) -> ModelConstants:
    """Compute every constant for dimension ``d`` and check their identities.

    Raises ``DomainError`` for ``d < 2``.
    """
    if isinstance(d, bool) or not isinstance(d, int) or d < 2:
        raise DomainError(f"dimension must be an integer >= 2, got {d!r}")

    zeta_d = zeta(d)
    theta_d = 2.0 ** (2 - d) / (d * (d + 1) * zeta_d)
    sigma2_d = theta_d / (2 * d)
    xi_bar = math.gamma((d + 1) / 2) / math.pi ** ((d - 1) / 2)
    Sigma2_d = sigma2_d / xi_bar

    # The two published forms of sigma^2 and the mean-free-path identity.
    _check_identity("sigma2 (2^{2-d} form)", sigma2_d, 2.0 ** (2 - d) / (2 * d * d * (d + 1) * zeta_d))
    _check_identity("sigma2 (2^{1-d} form)", sigma2_d, 2.0 ** (1 - d) / (d * d * (d + 1) * zeta_d))
    _check_identity("xi_bar * v_{d-1}", xi_bar * unit_ball_volume(d - 1), 1.0)
    _check_identity("Sigma2 * xi_bar", Sigma2_d * xi_bar, sigma2_d)

    constants = ModelConstants(
        d=d,
        zeta_d=zeta_d,
        theta_d=theta_d,
        sigma2_d=sigma2_d,
        Sigma2_d=Sigma2_d,
        xi_bar=xi_bar,
    )
    log.debug("Constants for d=%d: %s", d, constants)
    return constants


def _check_identity(name: str, lhs: float, rhs: float) -> None:
    if not math.isclose(lhs, rhs, rel_tol=_IDENTITY_RTOL):
        raise RuntimeError(f"constant identity {name} violated: {lhs!r} != {rhs!r}")
