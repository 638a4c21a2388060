"""Stein-equation solver, derivative-bound checks and the exchangeable pair.

The Stein equation ``Δf(w) - w·∇f(w) = h(w) - E h(Z)`` is solved through
the Ornstein-Uhlenbeck semigroup with ``s = e^{-u}``::

    f(w)    = -∫₀¹ (E h(ws + √(1-s²) Z) - E h(Z)) ds / s
    ∇f(w)   = -∫₀¹ E ∇h(ws + √(1-s²) Z) ds
    D²f(w)  = -∫₀¹ s E D²h(ws + √(1-s²) Z) ds

with Gauss-Legendre nodes in ``s`` and tensor Gauss-Hermite (or Monte
Carlo) nodes in ``Z``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from lorentz_lab.constants import ModelConstants
from lorentz_lab.errors import DomainError, QuadratureError
from lorentz_lab.limit_chain import KernelBackend
from lorentz_lab.paths import (
    FlightPath,
    TruncationParams,
    decompose,
    discrete_scale,
    draw_tilde_copy,
    truncate,
)
from lorentz_lab.rng import Stage, derive_stream, stream_id
from lorentz_lab.smooth_functions import TestFunction

log = logging.getLogger(__name__)

RESIDUAL_LIMIT = 1e-3
BOUND_SLACK = 0.05
FD_STEP = 1e-3
DEFAULT_PROBES = 100

# Quadrature points evaluated per numpy call.
_BLOCK = 1 << 20


@dataclass(frozen=True)
class QuadratureSpec:
    """Node counts for the ``s`` and ``Z`` integrals.

    Tensor Gauss-Hermite is used up to ``max_tensor_d`` dimensions and
    Monte-Carlo draws beyond.
    """

    n_legendre: int = 64
    n_hermite: int = 32
    mc_draws: int = 100_000
    max_tensor_d: int = 3
    seed: int = 0

    def s_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        x, w = np.polynomial.legendre.leggauss(self.n_legendre)
        return (x + 1) / 2, w / 2

    def z_nodes(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        if d <= self.max_tensor_d:
            x, w = np.polynomial.hermite.hermgauss(self.n_hermite)
            x = math.sqrt(2.0) * x
            w = w / math.sqrt(math.pi)
            grids = np.meshgrid(*([x] * d), indexing="ij")
            weights = np.meshgrid(*([w] * d), indexing="ij")
            nodes = np.column_stack([g.ravel() for g in grids])
            return nodes, np.prod(np.column_stack([g.ravel() for g in weights]), axis=1)
        rng = derive_stream(self.seed, stream_id(Stage.PROBES, d))
        return rng.standard_normal((self.mc_draws, d)), np.full(self.mc_draws, 1 / self.mc_draws)


@dataclass(frozen=True, eq=False)
class SteinSolution:
    """Quadrature representation of ``f_h`` and its derivatives."""

    h: TestFunction
    quad: QuadratureSpec
    s: np.ndarray
    s_weights: np.ndarray
    z: np.ndarray
    z_weights: np.ndarray
    eh_z: float
    max_residual: float = math.nan

    @property
    def d(self) -> int:
        return self.h.d

    def _integrate(
        self, w: np.ndarray, fn: Callable[[np.ndarray], np.ndarray], kernel: np.ndarray
    ) -> np.ndarray:
        """``sum_s kernel(s) * E fn(ws + √(1-s²) Z)`` for each row of ``w``."""
        w = np.atleast_2d(np.asarray(w, dtype=float))
        k = len(self.z)
        chunk = max(1, _BLOCK // k)
        out: np.ndarray | None = None
        for start in range(0, len(w), chunk):
            block = w[start : start + chunk]
            acc: np.ndarray | None = None
            for s, weight in zip(self.s, kernel, strict=True):
                points = block[:, None, :] * s + math.sqrt(1 - s * s) * self.z[None, :, :]
                values = fn(points.reshape(-1, self.d))
                values = values.reshape(len(block), k, *values.shape[1:])
                expect = np.tensordot(self.z_weights, values, axes=([0], [1]))
                acc = weight * expect if acc is None else acc + weight * expect
            assert acc is not None
            out = acc if out is None else np.concatenate([out, acc])
        assert out is not None
        return out

    def value(self, w: np.ndarray) -> np.ndarray:
        def centred(x: np.ndarray) -> np.ndarray:
            return self.h.value(x) - self.eh_z

        return -self._integrate(w, centred, self.s_weights / self.s)

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return -self._integrate(w, self.h.grad, self.s_weights)

    def hessian(self, w: np.ndarray) -> np.ndarray:
        return -self._integrate(w, self.h.hess, self.s_weights * self.s)

    def third(self, w: np.ndarray, step: float = FD_STEP) -> np.ndarray:
        """``D³f`` by central differences of the Hessian, shape ``(m, d, d, d)``."""
        w = np.atleast_2d(np.asarray(w, dtype=float))
        out = np.empty((len(w), self.d, self.d, self.d))
        for i in range(self.d):
            e = np.zeros(self.d)
            e[i] = step
            out[:, i] = (self.hessian(w + e) - self.hessian(w - e)) / (2 * step)
        return out

    def residual(self, w: np.ndarray) -> np.ndarray:
        """``Δf - w·∇f - (h - E h(Z))`` at each row of ``w``."""
        w = np.atleast_2d(np.asarray(w, dtype=float))
        laplacian = np.trace(self.hessian(w), axis1=1, axis2=2)
        drift = np.sum(w * self.gradient(w), axis=1)
        return laplacian - drift - (self.h.value(w) - self.eh_z)


def default_probes(d: int, count: int = DEFAULT_PROBES, seed: int = 0) -> np.ndarray:
    return derive_stream(seed, stream_id(Stage.PROBES)).standard_normal((count, d))


def solve_stein(
    h: TestFunction,
    quad: QuadratureSpec | None = None,
    probes: np.ndarray | None = None,
) -> SteinSolution:
    """Build ``f_h`` and check the Stein residual at the probes.

    Raises ``QuadratureError`` when the largest residual exceeds
    ``RESIDUAL_LIMIT``.
    """
    if not math.isfinite(h.dh_sup):
        raise DomainError(f"{h.name}: declared sup |Dh| must be finite")
    quad = quad or QuadratureSpec()
    s, s_weights = quad.s_nodes()
    z, z_weights = quad.z_nodes(h.d)
    eh_z = float(np.dot(z_weights, h.value(z)))
    solution = SteinSolution(h, quad, s, s_weights, z, z_weights, eh_z)

    probes = default_probes(h.d, seed=quad.seed) if probes is None else np.atleast_2d(probes)
    residuals = np.abs(solution.residual(probes))
    worst = int(np.argmax(residuals))
    max_residual = float(residuals[worst])
    if max_residual > RESIDUAL_LIMIT:
        raise QuadratureError(
            f"{h.name}: Stein residual {max_residual:.3g} exceeds {RESIDUAL_LIMIT}",
            max_residual,
            probes[worst].tolist(),
        )
    log.debug("Solved Stein equation for %s (max residual %.3g)", h.name, max_residual)
    return SteinSolution(h, quad, s, s_weights, z, z_weights, eh_z, max_residual)


@dataclass(frozen=True)
class DerivativeBoundReport:
    name: str
    sup_df: float
    sup_hess_hs: float
    sup_d3: float
    bound_df: float
    bound_hess_hs: float
    bound_d3: float
    slack: float
    passed_df: bool
    passed_hess_hs: bool
    passed_d3: bool

    @property
    def passed(self) -> bool:
        return self.passed_df and self.passed_hess_hs and self.passed_d3

    def to_dict(self) -> dict[str, Any]:
        return dict(vars(self)) | {"passed": self.passed}


def _symmetric_op_norm(tensors: np.ndarray, n_dirs: int = 64) -> np.ndarray:
    """``max_u |T(u, u, u)|`` over sampled unit vectors, per tensor."""
    d = tensors.shape[-1]
    rng = derive_stream(0, stream_id(Stage.PROBES, 1))
    dirs = rng.standard_normal((n_dirs, d))
    dirs = np.vstack([np.eye(d), dirs / np.linalg.norm(dirs, axis=1, keepdims=True)])
    values = np.einsum("mijk,ui,uj,uk->mu", tensors, dirs, dirs, dirs)
    return np.max(np.abs(values), axis=1)


def check_derivative_bounds(
    h: TestFunction,
    solution: SteinSolution,
    probes: np.ndarray | None = None,
    *,
    slack: float = BOUND_SLACK,
) -> DerivativeBoundReport:
    """Compare sup-norms of ``Df``, ``Hess f`` (Hilbert-Schmidt) and ``D³f`` with their bounds.

    Bounds are ``√(π/2) sup|Dh|``, ``sup|Dh|`` and ``(√(2π)/4) sup|D²h|``,
    each inflated by ``slack``; violations are reported, never raised.
    """
    probes = default_probes(h.d) if probes is None else np.atleast_2d(probes)
    if len(probes) < DEFAULT_PROBES:
        log.warning("Derivative bounds checked at only %d probes", len(probes))
    sup_df = float(np.max(np.linalg.norm(solution.gradient(probes), axis=1)))
    sup_hs = float(np.max(np.linalg.norm(solution.hessian(probes), axis=(1, 2))))
    sup_d3 = float(np.max(_symmetric_op_norm(solution.third(probes))))
    bound_df = math.sqrt(math.pi / 2) * h.dh_sup
    bound_hs = h.dh_sup
    bound_d3 = math.sqrt(2 * math.pi) / 4 * h.d2h_sup
    factor = 1 + slack
    # Finite differences of an exactly quadratic f leave rounding noise only.
    tiny = 1e-6
    report = DerivativeBoundReport(
        name=h.name,
        sup_df=sup_df,
        sup_hess_hs=sup_hs,
        sup_d3=sup_d3,
        bound_df=bound_df,
        bound_hess_hs=bound_hs,
        bound_d3=bound_d3,
        slack=slack,
        passed_df=sup_df <= bound_df * factor,
        passed_hess_hs=sup_hs <= bound_hs * factor,
        passed_d3=sup_d3 <= bound_d3 * factor + tiny,
    )
    if not report.passed:
        log.warning("Derivative bound violated for %s: %s", h.name, report)
    return report


@dataclass(frozen=True, eq=False)
class PairSource:
    """One replica's centred free paths, velocities and resampled copies.

    ``velocities[i]`` is the velocity of flight ``i`` (``V_{i-1}`` in
    one-based notation); ``copies`` is a conditionally independent copy of
    the whole ``xi_tilde`` sequence.
    """

    xi_tilde: np.ndarray
    velocities: np.ndarray
    cond_second: np.ndarray
    copies: np.ndarray


def pair_source(
    path: FlightPath,
    backend: KernelBackend,
    params: TruncationParams,
    rng: np.random.Generator,
    *,
    n_bins: int = 32,
) -> PairSource:
    """Truncate, decompose and copy one replica's free paths."""
    decomposition = decompose(
        truncate(path.xi, params), backend, params, path.deflection, n_bins=n_bins
    )
    return PairSource(
        xi_tilde=decomposition.xi_tilde,
        velocities=path.velocities,
        cond_second=decomposition.cond_second,
        copies=draw_tilde_copy(decomposition, backend, rng),
    )


@dataclass(frozen=True, eq=False)
class PairBatch:
    """Exchangeable pairs ``(W, W')`` with the data behind both identities.

    ``delta`` is ``V_I (xi'_I - xi_I) / scale`` for the uniform index
    ``I``; ``W_prime = W + delta``.  ``cond_mean_delta`` averages ``delta``
    over all ``n`` choices of ``I``; ``sum_outer`` is
    ``sum_i V_i V_iᵀ (E(xi_tilde²|eta) + xi_tilde_i²)``.
    """

    n: int
    replicas: int
    scale: float
    W: np.ndarray
    W_prime: np.ndarray
    delta: np.ndarray
    index: np.ndarray
    xi_old: np.ndarray
    xi_new: np.ndarray
    V_index: np.ndarray
    cond_mean_delta: np.ndarray
    sum_outer: np.ndarray
    sigma2: float = field(default=math.nan)

    @property
    def d(self) -> int:
        return int(self.W.shape[1])

    @property
    def quadratic_rhs(self) -> np.ndarray:
        """``sum_outer / (sigma² n² log n)`` per replica."""
        return self.sum_outer / (self.sigma2 * self.n**2 * math.log(self.n))


def build_pair(
    sources: Iterable[PairSource],
    constants: ModelConstants,
    rng: np.random.Generator,
) -> PairBatch:
    """Draw a uniform index per replica and assemble ``W``, ``W'``.

    Sources are consumed in order, one index draw each.
    """
    rows: list[tuple[Any, ...]] = []
    n = -1
    scale = math.nan
    for source in sources:
        if n < 0:
            n = len(source.xi_tilde)
            if n < 2:
                raise DomainError(f"exchangeable pair needs n >= 2 flights, got {n}")
            scale = discrete_scale(n, constants)
        elif len(source.xi_tilde) != n:
            raise DomainError("all pair sources must share the same length")
        V = source.velocities
        i = int(rng.integers(n))
        W = np.einsum("i,ik->k", source.xi_tilde, V) / scale
        delta = V[i] * (source.copies[i] - source.xi_tilde[i]) / scale
        cond_mean = np.einsum("i,ik->k", source.copies - source.xi_tilde, V) / (n * scale)
        weights = source.cond_second + source.xi_tilde**2
        outer = np.einsum("i,ik,il->kl", weights, V, V)
        rows.append((W, delta, i, source.xi_tilde[i], source.copies[i], V[i].copy(), cond_mean, outer))
    if not rows:
        raise DomainError("exchangeable pair needs at least one replica")

    W_all = np.array([r[0] for r in rows])
    delta_all = np.array([r[1] for r in rows])
    return PairBatch(
        n=n,
        replicas=len(rows),
        scale=scale,
        W=W_all,
        W_prime=W_all + delta_all,
        delta=delta_all,
        index=np.array([r[2] for r in rows]),
        xi_old=np.array([r[3] for r in rows]),
        xi_new=np.array([r[4] for r in rows]),
        V_index=np.array([r[5] for r in rows]),
        cond_mean_delta=np.array([r[6] for r in rows]),
        sum_outer=np.array([r[7] for r in rows]),
        sigma2=constants.sigma2_d,
    )


@dataclass(frozen=True)
class PairIdentityReport:
    slope: float
    expected_slope: float
    slope_rel_error: float
    linear_passed: bool
    quadratic_mean_diff: list[list[float]]
    quadratic_stderr: list[list[float]]
    quadratic_passed: bool
    degenerate: bool

    def to_dict(self) -> dict[str, Any]:
        return dict(vars(self))


def verify_pair_identities(
    pairs: PairBatch, *, tolerance_sigma: float = 3.0, slope_tolerance: float = 0.1
) -> PairIdentityReport:
    """Check ``E(W' - W | data) = -W/n`` and the conditional second-moment identity.

    The linear identity regresses the index-averaged ``W' - W`` built from
    the realized copies (``cond_mean_delta``) on ``W``, pooling
    coordinates.  The quadratic identity compares ``(W' - W)(W' - W)ᵀ``
    with its predicted conditional mean componentwise.
    """
    if pairs.replicas < 1000:
        log.warning("Pair identities checked on only %d replicas", pairs.replicas)
    expected = -1.0 / pairs.n
    x = pairs.W.ravel()
    y = pairs.cond_mean_delta.ravel()
    degenerate = bool(np.all(pairs.delta == 0))
    xc = x - x.mean()
    denom = float(np.dot(xc, xc))
    slope = float(np.dot(xc, y - y.mean()) / denom) if denom > 0 else 0.0
    rel_error = abs(slope - expected) / abs(expected)

    lhs = np.einsum("rk,rl->rkl", pairs.delta, pairs.delta)
    diff = lhs - pairs.quadratic_rhs
    mean_diff = diff.mean(axis=0)
    stderr = diff.std(axis=0, ddof=1) / math.sqrt(pairs.replicas) if pairs.replicas > 1 else np.zeros_like(mean_diff)
    quadratic_ok = bool(np.all(np.abs(mean_diff) <= tolerance_sigma * stderr))
    return PairIdentityReport(
        slope=slope,
        expected_slope=expected,
        slope_rel_error=rel_error,
        linear_passed=(not degenerate) and rel_error <= slope_tolerance,
        quadratic_mean_diff=mean_diff.tolist(),
        quadratic_stderr=stderr.tolist(),
        quadratic_passed=(not degenerate) and quadratic_ok,
        degenerate=degenerate,
    )


@dataclass(frozen=True)
class AntisymmetryReport:
    mean: float
    stderr: float
    passed: bool


def antisymmetry_check(
    pairs: PairBatch, solution: SteinSolution, *, tolerance_sigma: float = 3.0
) -> AntisymmetryReport:
    """Mean of ``<W' - W, ∇f(W') + ∇f(W)>``, zero for an exchangeable pair."""
    terms = np.sum(
        pairs.delta * (solution.gradient(pairs.W_prime) + solution.gradient(pairs.W)), axis=1
    )
    mean = float(terms.mean())
    stderr = float(terms.std(ddof=1) / math.sqrt(len(terms))) if len(terms) > 1 else 0.0
    return AntisymmetryReport(mean, stderr, abs(mean) <= tolerance_sigma * stderr)


@dataclass(frozen=True)
class LeadingErrorRecord:
    name: str
    estimate: float
    stderr: float
    direct_gap: float
    direct_stderr: float
    quadrature_residual: float

    def to_dict(self) -> dict[str, Any]:
        return dict(vars(self))


def leading_error_term(
    pairs: PairBatch,
    solutions: Sequence[SteinSolution],
    constants: ModelConstants,
    *,
    identity_sum: bool = False,
) -> list[LeadingErrorRecord]:
    """``E<Id - S, Hess f_h(W)>`` with ``S = sum_outer / (2 sigma² n log n)``.

    Reported next to the measured ``|E h(W) - E h(Z)|``.  With
    ``identity_sum`` the sum is replaced by the identity, which must give
    zero.
    """
    n = pairs.n
    if identity_sum:
        S = np.broadcast_to(np.eye(pairs.d), pairs.sum_outer.shape)
    else:
        S = pairs.sum_outer / (2 * constants.sigma2_d * n * math.log(n))
    records = []
    for solution in solutions:
        H = solution.hessian(pairs.W)
        per_replica = np.trace(H, axis1=1, axis2=2) - np.einsum("rkl,rkl->r", S, H)
        h_values = solution.h.value(pairs.W)
        count = len(per_replica)
        records.append(
            LeadingErrorRecord(
                name=solution.h.name,
                estimate=float(per_replica.mean()),
                stderr=float(per_replica.std(ddof=1) / math.sqrt(count)) if count > 1 else 0.0,
                direct_gap=abs(float(h_values.mean()) - solution.eh_z),
                direct_stderr=float(h_values.std(ddof=1) / math.sqrt(count)) if count > 1 else 0.0,
                quadrature_residual=solution.max_residual,
            )
        )
    return records

