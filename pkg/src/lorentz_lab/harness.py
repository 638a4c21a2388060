"""Experiment pipelines: one per mode, all driven through :func:`run`.

Replicas are independent and may run in worker processes; every random
stream is derived from ``(seed, stage, slot, replica)`` and every
aggregation walks replicas in index order, so output files do not depend
on the worker count.
"""

from __future__ import annotations

import logging
import math
import os
import re
import subprocess
import time
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import UTC, datetime
from functools import partial
from pathlib import Path
from typing import Any, TypeVar

import numpy as np

from lorentz_lab.billiard import (
    FlightSequence,
    LatticeConfig,
    csv_header,
    csv_rows,
    free_path_survival,
    sample_flight_sequence,
    surface_start,
    tail_fit,
)
from lorentz_lab.config import ExperimentConfig, Mode
from lorentz_lab.constants import ModelConstants, make_constants
from lorentz_lab.errors import DomainError, QuadratureError
from lorentz_lab.limit_chain import (
    BackendVariant,
    KernelBackend,
    calibrate_surrogate,
    empirical_backend,
    flight_projection,
    harvest_table,
    mixing_series,
    run_chain,
    velocity_coordinate,
)
from lorentz_lab.paths import (
    FlightPath,
    TrajectoryBatch,
    TruncationParams,
    continuous_gap_terms,
    continuous_sample,
    decompose,
    discrete_scale,
    displacement,
    normalize_continuous,
    normalize_discrete,
    partial_displacement,
    renewal_compare,
    running_maximum,
    truncate,
    truncation_gap,
    truncation_gap_bound,
)
from lorentz_lab.persistence import Ledger, LedgerRow, sha256_file, write_csv, write_json
from lorentz_lab.rng import Stage, replica_stream
from lorentz_lab.smooth_functions import battery
from lorentz_lab.stats import (
    DistanceReport,
    RateModel,
    compare_models,
    is_strictly_decreasing,
    ks_marginals,
    ks_orthant,
    max_displacement_ratio,
    mixing_fit,
    moment_suite,
    second_moment_ratio,
    sliced_w1,
    w1_1d,
)
from lorentz_lab.stein import (
    PairSource,
    QuadratureSpec,
    SteinSolution,
    antisymmetry_check,
    build_pair,
    check_derivative_bounds,
    default_probes,
    leading_error_term,
    pair_source,
    solve_stein,
    verify_pair_identities,
)

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

LEDGER_FILE = "ledger.csv"
SUMMARY_FILE = "summary.json"
MANIFEST_FILE = "manifest.json"

# Replica slots are packed below this many bits of the stream index.
_REPLICA_BITS = 32
# Continuous-time grid points use slots above the discrete ones.
_T_SLOT_BASE = 1 << 15
# Replica slot of the per-grid-point stream that is not tied to a replica.
_SHARED = (1 << _REPLICA_BITS) - 1

_DISCRETE_MODELS = (RateModel.INV_SQRT_LOG, RateModel.SQRT_LOGLOG_OVER_LOG, RateModel.INV_SQRT)
_CONTINUOUS_MODELS = (RateModel.QUARTIC_LOGLOG_OVER_LOG, RateModel.INV_QUARTIC_LOG)


@dataclass
class RunManifest:
    """What was run, with which constants, and the hash of every output."""

    config: dict[str, Any]
    constants: dict[str, Any]
    git_revision: str
    started_at: str
    wall_clock_seconds: float = 0.0
    stage_seconds: dict[str, float] = field(default_factory=dict)
    outputs: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return dict(vars(self))


def _replica_index(slot: int, replica: int) -> int:
    return (slot << _REPLICA_BITS) | replica


def _git_revision() -> str:
    try:
        out = subprocess.check_output(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            stderr=subprocess.DEVNULL,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.strip() or "unknown"


def _map_replicas(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    """Map ``fn`` over ``items``, results in item order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunksize = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=chunksize))


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name).strip("_")


def _stderr_of_mean(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


class _Run:
    """State shared by the pipeline of a single :func:`run` call."""

    def __init__(self, config: ExperimentConfig, manifest: RunManifest) -> None:
        self.config = config
        self.manifest = manifest
        self.constants = make_constants(config.d)
        self.ledger = Ledger()
        self.written: list[Path] = []
        self.results: dict[str, Any] = {}
        self._backend: KernelBackend | None = None

    @property
    def out(self) -> Path:
        return self.config.output_dir

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        log.info("Stage %s started", name)
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.manifest.stage_seconds[name] = self.manifest.stage_seconds.get(name, 0.0) + elapsed
            log.info("Stage %s finished in %.2fs", name, elapsed)

    def json(self, name: str, payload: dict[str, Any]) -> None:
        path = self.out / name
        write_json(path, payload)
        self.written.append(path)

    def csv(self, name: str, header: Sequence[str], rows: Any) -> None:
        path = self.out / name
        write_csv(path, header, rows)
        self.written.append(path)

    def row(self, metric: str, n_or_t: float, value: float, stderr: float) -> None:
        cfg = self.config
        self.ledger.append(
            LedgerRow(
                metric=metric,
                backend=str(cfg.backend),
                d=cfg.d,
                gamma=cfg.gamma,
                n_or_t=float(n_or_t),
                value=float(value),
                stderr=float(stderr),
                seed=cfg.seed,
            )
        )

    def report(self, report: DistanceReport, suffix: str = "") -> None:
        self.row(f"{report.metric}{suffix}", report.n_or_t, report.value, report.stderr)

    def lattice(self) -> LatticeConfig:
        cfg = self.config
        return LatticeConfig(
            d=cfg.d,
            r=cfg.r,
            scaling=cfg.scaling,
            l_max=cfg.l_max_factor * self.constants.xi_bar,
        )

    def backend(self) -> KernelBackend:
        if self._backend is not None:
            return self._backend
        cfg = self.config
        with self.stage("backend"):
            if cfg.backend is BackendVariant.SURROGATE_IID:
                backend = calibrate_surrogate(self.constants)
            else:
                lattice = self.lattice()
                init = surface_start(replica_stream(cfg.seed, Stage.TABLE, 0), lattice)
                events = sample_flight_sequence(cfg.seed, cfg.table_flights, lattice, init)
                table = harvest_table(events)
                self.csv(
                    "empirical_table.csv",
                    ["xi", "deflection"],
                    ([repr(float(x)), repr(float(a))] for x, a in table),
                )
                backend = empirical_backend(table, self.constants)
        self._backend = backend
        return backend

    def summary(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "mode": str(self.config.mode),
            "config": self.config.experiment_dict(),
            "constants": self.constants.to_dict(),
            "results": self.results,
        }
        if self._backend is not None:
            payload["backend"] = self._backend.to_dict()
        return payload


# -- replica workers (module level so they pickle) ---------------------------


def _billiard_replica(replica: int, *, seed: int, n_flights: int, lattice: LatticeConfig) -> FlightSequence:
    return sample_flight_sequence(seed, n_flights, lattice, replica=replica)


@dataclass(frozen=True, eq=False)
class _ChainResult:
    Q: np.ndarray
    Q_trunc: np.ndarray
    maximum: float
    xi_trunc: np.ndarray | None
    deflection: np.ndarray | None


def _chain_replica(
    replica: int,
    *,
    backend: KernelBackend,
    n: int,
    params: TruncationParams,
    seed: int,
    slot: int,
    keep_flights: bool,
) -> _ChainResult:
    rng = replica_stream(seed, Stage.CHAIN, _replica_index(slot, replica))
    path = FlightPath.from_chain_run(run_chain(backend, n, rng))
    trunc = path.with_xi(truncate(path.xi, params))
    return _ChainResult(
        Q=displacement(path).Q[0],
        Q_trunc=displacement(trunc).Q[0],
        maximum=running_maximum(trunc),
        xi_trunc=trunc.xi if keep_flights else None,
        deflection=path.deflection if keep_flights else None,
    )


def covering_path(
    backend: KernelBackend, t: float, n_min: int, rng: np.random.Generator
) -> FlightPath:
    """Chain flights until the path outlasts ``t`` and holds ``n_min`` flights."""
    chunk = max(n_min, 16)
    runs = []
    v0 = None
    total = 0.0
    count = 0
    while total < t + backend.xi_bar or count < n_min:
        run = run_chain(backend, chunk, rng, v0)
        runs.append(run)
        v0 = run.V[-1]
        total += float(np.sum(run.xi))
        count += run.n
    return FlightPath(
        xi=np.concatenate([r.xi for r in runs]),
        velocities=np.concatenate([r.V[:-1] for r in runs]),
        deflection=np.concatenate([r.deflection for r in runs]),
    )


@dataclass(frozen=True, eq=False)
class _ContinuousResult:
    W_t: np.ndarray
    W_nt: np.ndarray
    nu_t: int
    n_t: int
    deviation: int
    overshoot: float
    renewal: float
    scale: float


def _continuous_replica(
    replica: int,
    *,
    backend: KernelBackend,
    t: float,
    constants: ModelConstants,
    seed: int,
    slot: int,
) -> _ContinuousResult:
    rng = replica_stream(seed, Stage.CHAIN, _replica_index(slot, replica))
    n_t = math.floor(t / constants.xi_bar)
    path = covering_path(backend, t, n_t + 1, rng)
    sample = continuous_sample(t, path)
    record = renewal_compare(t, path, constants, tau=sample.tau)
    terms = continuous_gap_terms(t, path, constants)
    q_nt = partial_displacement(path, n_t)
    return _ContinuousResult(
        W_t=normalize_continuous(sample.X_t, t, constants),
        W_nt=q_nt / discrete_scale(n_t, constants),
        nu_t=record.nu_t,
        n_t=n_t,
        deviation=record.deviation,
        overshoot=terms.overshoot,
        renewal=terms.renewal,
        scale=terms.scale,
    )


def _pair_replica(
    replica: int,
    *,
    backend: KernelBackend,
    n: int,
    params: TruncationParams,
    seed: int,
    slot: int,
    n_bins: int,
) -> PairSource:
    index = _replica_index(slot, replica)
    path = FlightPath.from_chain_run(
        run_chain(backend, n, replica_stream(seed, Stage.CHAIN, index))
    )
    return pair_source(
        path, backend, params, replica_stream(seed, Stage.PAIR, index), n_bins=n_bins
    )


# -- pipelines ---------------------------------------------------------------


def _chain_batch(state: _Run, slot: int, n: int, *, keep_flights: bool) -> list[_ChainResult]:
    cfg = state.config
    worker = partial(
        _chain_replica,
        backend=state.backend(),
        n=n,
        params=TruncationParams(n, cfg.gamma),
        seed=cfg.seed,
        slot=slot,
        keep_flights=keep_flights,
    )
    with state.stage(f"chains n={n}"):
        return _map_replicas(worker, range(cfg.replicas), cfg.workers)


def _continuous_batch(state: _Run, slot: int, t: float) -> list[_ContinuousResult]:
    cfg = state.config
    worker = partial(
        _continuous_replica,
        backend=state.backend(),
        t=t,
        constants=state.constants,
        seed=cfg.seed,
        slot=_T_SLOT_BASE + slot,
    )
    with state.stage(f"continuous t={t:g}"):
        return _map_replicas(worker, range(cfg.replicas), cfg.workers)


def _run_billiard(state: _Run) -> None:
    cfg = state.config
    lattice = state.lattice()
    worker = partial(_billiard_replica, seed=cfg.seed, n_flights=cfg.n_flights, lattice=lattice)
    with state.stage("billiard"):
        sequences = _map_replicas(worker, range(cfg.replicas), cfg.workers)
    state.csv("flights.csv", csv_header(cfg.d), csv_rows(sequences[0]))

    xi = np.concatenate([s.xi[~s.horizon_exceeded] for s in sequences])
    capped = int(sum(int(np.sum(s.horizon_exceeded)) for s in sequences))
    if xi.size == 0:
        raise DomainError("every traced flight reached the horizon cap")
    mean = float(np.mean(xi))
    grid = np.geomspace(0.01 * mean, 1000 * mean, 61)
    survival = free_path_survival(xi, grid)
    state.csv(
        "survival.csv",
        ["x", "survival"],
        ([repr(float(x)), repr(float(s))] for x, s in zip(grid, survival, strict=True)),
    )
    results: dict[str, Any] = {
        "flights": int(xi.size),
        "horizon_capped": capped,
        "lattice_spacing": lattice.spacing,
        "l_max": lattice.horizon,
        "mean_free_path": mean,
        "mean_free_path_stderr": _stderr_of_mean(xi),
        "mean_over_xi_bar": mean / state.constants.xi_bar,
        "mean_impact_parameter_over_r": float(
            np.mean(np.concatenate([s.impact_parameter[~s.horizon_exceeded] for s in sequences]))
        )
        / cfg.r,
    }
    try:
        fit = tail_fit(xi, 10 * mean, 100 * mean, x_ref=40 * mean)
    except DomainError as exc:
        log.warning("Tail fit skipped: %s", exc)
        results["tail_fit"] = None
    else:
        results["tail_fit"] = fit._asdict() | {
            "predicted_slope": -2.0,
            "predicted_tail_constant": state.constants.theta_d / 2,
        }
    state.results = results


def _run_limit(state: _Run) -> None:
    cfg = state.config
    constants = state.constants
    backend = state.backend()
    per_n: dict[str, Any] = {}
    for slot, n in enumerate(cfg.n_grid):
        params = TruncationParams(n, cfg.gamma)
        results = _chain_batch(state, slot, n, keep_flights=True)
        full = TrajectoryBatch(n, len(results), np.array([r.Q for r in results]))
        trunc = TrajectoryBatch(n, len(results), np.array([r.Q_trunc for r in results]))
        state.csv(f"trajectories_n{n}.csv", trunc.csv_header(), trunc.csv_rows())

        xi_trunc = np.stack([r.xi_trunc for r in results])  # type: ignore[arg-type]
        deflection = np.stack([r.deflection for r in results])  # type: ignore[arg-type]
        decomposition = decompose(xi_trunc, backend, params, deflection, n_bins=cfg.n_bins)
        moments = moment_suite(decomposition, params, constants)

        norm = constants.d * constants.sigma2_d * n * math.log(n)
        ratio = second_moment_ratio(trunc, constants)
        ratio_err = _stderr_of_mean(np.sum(trunc.Q**2, axis=1) / norm)
        gap = truncation_gap(full, trunc, constants)
        bound = truncation_gap_bound(n, backend, params, constants)
        maxima = np.array([r.maximum for r in results])
        max_ratio = max_displacement_ratio(maxima, n, constants)
        max_err = _stderr_of_mean(maxima) / discrete_scale(n, constants)

        state.row("second_moment_ratio", n, ratio, ratio_err)
        state.row("truncation_gap", n, gap.mean, gap.stderr)
        state.row("truncation_gap_bound", n, bound, 0.0)
        state.row("max_displacement_ratio", n, max_ratio, max_err)
        state.row("moment_ratio_xi2", n, moments.ratio_xi2, math.nan)
        per_n[str(n)] = {
            "decomposition": decomposition.summary(),
            "moments": moments.to_dict(),
            "analytic_xi2": backend.truncated_moment(2, params.r_n) if backend.is_surrogate else None,
            "second_moment_ratio": ratio,
            "truncation_gap": gap._asdict(),
            "truncation_gap_bound": bound,
            "max_displacement_ratio": max_ratio,
        }

    state.results = {"per_n": per_n, "mixing": _mixing(state)}


def _mixing(state: _Run) -> dict[str, Any]:
    """Lagged covariances of the velocity and increment observables."""
    cfg = state.config
    n = cfg.n_grid[-1]
    slot = len(cfg.n_grid) - 1
    if n < 10 * cfg.mixing_lags:
        log.warning("Mixing check skipped: n=%d is too short for %d lags", n, cfg.mixing_lags)
        return {}
    run = run_chain(
        state.backend(), n, replica_stream(cfg.seed, Stage.CHAIN, _replica_index(slot, 0))
    )
    out: dict[str, Any] = {}
    for name, observable in (
        ("velocity", velocity_coordinate(0)),
        ("increment", flight_projection(0)),
    ):
        rng = replica_stream(cfg.seed, Stage.PERMUTATION, _replica_index(slot, len(out)))
        series = mixing_series(run, observable, cfg.mixing_lags, rng)
        out[name] = {
            "cov": series.cov,
            "stderr": series.stderr,
            "noise_floor": series.noise_floor,
            "fit": mixing_fit(series).to_dict(),
        }
    return out


def _distance_reports(
    state: _Run, samples: np.ndarray, n_or_t: float, slot: int, suffix: str = ""
) -> dict[str, Any]:
    cfg = state.config
    index = _replica_index(slot, _SHARED)
    reports = [
        w1_1d(
            samples[:, 0],
            rng=replica_stream(cfg.seed, Stage.BOOTSTRAP, index),
            n_bootstrap=cfg.n_bootstrap,
            n_or_t=n_or_t,
        ),
        sliced_w1(
            samples,
            cfg.n_proj,
            replica_stream(cfg.seed, Stage.PROJECTIONS, index),
            n_bootstrap=cfg.n_bootstrap,
            n_or_t=n_or_t,
        ),
        ks_orthant(
            samples,
            rng=replica_stream(cfg.seed, Stage.PERMUTATION, index),
            n_bootstrap=cfg.n_bootstrap,
            n_or_t=n_or_t,
        ),
    ]
    for report in reports:
        state.report(report, suffix)
    return {
        **{str(r.metric): {"value": r.value, "stderr": r.stderr} for r in reports},
        "ks_marginals": ks_marginals(samples),
    }


def _fit_rates(
    state: _Run,
    series: dict[str, list[tuple[float, float]]],
    models: Sequence[RateModel],
    suffix: str = "",
) -> dict[str, Any]:
    fits: dict[str, Any] = {}
    for metric, points in series.items():
        if len(points) < 3:
            log.warning("Rate fit for %s skipped: %d grid points", metric, len(points))
            continue
        ranked = compare_models(points, models)
        for fit in ranked:
            # The stderr column of a rate row holds the RMS fit residual.
            state.row(f"rate:{metric}{suffix}:{fit.model}", math.nan, fit.c, fit.residual)
        fits[metric] = [{"model": str(f.model), "c": f.c, "residual": f.residual} for f in ranked]
    return fits


def _discrete_distances(state: _Run) -> tuple[dict[str, Any], dict[str, list[tuple[float, float]]]]:
    cfg = state.config
    per_n: dict[str, Any] = {}
    series: dict[str, list[tuple[float, float]]] = {}
    for slot, n in enumerate(cfg.n_grid):
        results = _chain_batch(state, slot, n, keep_flights=False)
        W = normalize_discrete(np.array([r.Q for r in results]), state.constants, n)
        with state.stage(f"distances n={n}"):
            per_n[str(n)] = _distance_reports(state, W, n, slot)
        for metric, entry in per_n[str(n)].items():
            if metric != "ks_marginals":
                series.setdefault(metric, []).append((float(n), entry["value"]))
    decreasing = {m: is_strictly_decreasing([v for _, v in pts]) for m, pts in series.items()}
    return {"per_n": per_n, "strictly_decreasing": decreasing}, series


def _run_distances(state: _Run) -> None:
    state.results, _ = _discrete_distances(state)


def _run_rates(state: _Run) -> None:
    cfg = state.config
    discrete, series = _discrete_distances(state)
    per_t: dict[str, Any] = {}
    t_series: dict[str, list[tuple[float, float]]] = {}
    for slot, t in enumerate(cfg.t_grid):
        results = _continuous_batch(state, slot, t)
        W_t = np.array([r.W_t for r in results])
        per_t[f"{t:g}"] = _distance_reports(state, W_t, t, _T_SLOT_BASE + slot, "_continuous")
        for metric, entry in per_t[f"{t:g}"].items():
            if metric != "ks_marginals":
                t_series.setdefault(metric, []).append((t, entry["value"]))
    state.results = {
        "discrete": discrete,
        "continuous": {"per_t": per_t},
        "discrete_fits": _fit_rates(state, series, _DISCRETE_MODELS),
        "continuous_fits": _fit_rates(state, t_series, _CONTINUOUS_MODELS, "_continuous"),
    }


def _run_renewal(state: _Run) -> None:
    cfg = state.config
    per_t: dict[str, Any] = {}
    for slot, t in enumerate(cfg.t_grid):
        results = _continuous_batch(state, slot, t)
        deviations = np.array([r.deviation for r in results])
        exceed = (deviations >= t**0.75).astype(float)
        prob = float(exceed.mean())
        bound = 5 * t * math.log(t) / t**1.5
        n_t = results[0].n_t
        W_t = np.array([r.W_t for r in results])
        W_nt = np.array([r.W_nt for r in results])
        index = _replica_index(_T_SLOT_BASE + slot, _SHARED)
        ks_t = ks_orthant(
            W_t,
            rng=replica_stream(cfg.seed, Stage.BOOTSTRAP, index),
            n_bootstrap=cfg.n_bootstrap,
            n_or_t=t,
        )
        ks_n = ks_orthant(
            W_nt,
            rng=replica_stream(cfg.seed, Stage.PERMUTATION, index),
            n_bootstrap=cfg.n_bootstrap,
            n_or_t=n_t,
        )
        state.row("renewal_tail_prob", t, prob, _stderr_of_mean(exceed))
        state.row("renewal_tail_bound", t, bound, 0.0)
        state.report(ks_t, "_continuous")
        state.report(ks_n, "_discrete")
        terms = {
            name: np.array([getattr(r, name) for r in results])
            for name in ("overshoot", "renewal", "scale")
        }
        for name, values in terms.items():
            state.row(f"gap_{name}", t, float(values.mean()), _stderr_of_mean(values))
        per_t[f"{t:g}"] = {
            "n_t": n_t,
            "mean_nu_t": float(np.mean([r.nu_t for r in results])),
            "mean_deviation": float(deviations.mean()),
            "tail_prob": prob,
            "tail_bound": bound,
            "tail_within_bound": prob <= bound,
            "ks_continuous": ks_t.value,
            "ks_discrete": ks_n.value,
            "ks_ratio": ks_t.value / ks_n.value if ks_n.value > 0 else math.inf,
            "gap_terms": {name: float(values.mean()) for name, values in terms.items()},
        }
    state.results = {"per_t": per_t}


def _run_stein(state: _Run) -> None:
    cfg = state.config
    constants = state.constants
    quad = QuadratureSpec(n_legendre=cfg.n_legendre, n_hermite=cfg.n_hermite, seed=cfg.seed)
    probes = default_probes(cfg.d, cfg.probes, cfg.seed)
    solutions: list[SteinSolution] = []
    records: dict[str, dict[str, Any]] = {}
    with state.stage("stein solve"):
        for h in battery(cfg.d, cfg.seed):
            try:
                solution = solve_stein(h, quad, probes)
            except QuadratureError as exc:
                log.warning("Stein solve failed for %s: %s", h.name, exc)
                records[h.name] = {
                    "function": h.name,
                    "solved": False,
                    "residual": exc.max_residual,
                    "worst_probe": exc.worst_probe,
                }
                continue
            solutions.append(solution)
            records[h.name] = {
                "function": h.name,
                "solved": True,
                "residual": solution.max_residual,
                "bounds": check_derivative_bounds(h, solution, probes).to_dict(),
                "leading_error": {},
                "antisymmetry": {},
            }

    identities: dict[str, Any] = {}
    for slot, n in enumerate(cfg.n_grid):
        worker = partial(
            _pair_replica,
            backend=state.backend(),
            n=n,
            params=TruncationParams(n, cfg.gamma),
            seed=cfg.seed,
            slot=slot,
            n_bins=cfg.n_bins,
        )
        with state.stage(f"pairs n={n}"):
            sources = _map_replicas(worker, range(cfg.replicas), cfg.workers)
            pairs = build_pair(
                sources,
                constants,
                replica_stream(cfg.seed, Stage.PAIR, _replica_index(slot, _SHARED)),
            )
        identities[str(n)] = verify_pair_identities(pairs).to_dict()
        for record in leading_error_term(pairs, solutions, constants):
            records[record.name]["leading_error"][str(n)] = record.to_dict()
        for solution in solutions:
            check = antisymmetry_check(pairs, solution)
            records[solution.h.name]["antisymmetry"][str(n)] = dict(vars(check))
        state.row("pair_linear_slope", n, identities[str(n)]["slope"], math.nan)

    for name, record in records.items():
        state.json(f"stein/{_slug(name)}.json", record)
    state.results = {
        "functions": sorted(records),
        "solved": sum(1 for r in records.values() if r["solved"]),
        "bounds_passed": all(r["bounds"]["passed"] for r in records.values() if r["solved"]),
        "pair_identities": identities,
    }


_PIPELINES: dict[Mode, Callable[[_Run], None]] = {
    Mode.BILLIARD: _run_billiard,
    Mode.LIMIT: _run_limit,
    Mode.DISTANCES: _run_distances,
    Mode.STEIN_CHECK: _run_stein,
    Mode.RATES: _run_rates,
    Mode.RENEWAL: _run_renewal,
}


def run(config: ExperimentConfig) -> RunManifest:
    """Execute ``config.mode`` and write its outputs under ``config.output_dir``.

    Outputs are the ledger, the JSON summary and mode-specific CSV/JSON
    files; ``manifest.json`` lists each with its SHA-256.
    """
    started = time.perf_counter()
    constants = make_constants(config.d)
    manifest = RunManifest(
        config=config.to_dict(),
        constants=constants.to_dict(),
        git_revision=_git_revision(),
        started_at=datetime.now(UTC).isoformat(timespec="seconds"),
    )
    log.info(
        "Running %s (d=%d, backend=%s, seed=%d, workers=%d) into %s",
        config.mode,
        config.d,
        config.backend,
        config.seed,
        config.workers,
        config.output_dir,
    )
    state = _Run(config, manifest)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    _PIPELINES[config.mode](state)

    if len(state.ledger):
        ledger_path = config.output_dir / LEDGER_FILE
        state.ledger.write(ledger_path)
        state.written.append(ledger_path)
    state.json(SUMMARY_FILE, state.summary())

    manifest.outputs = [
        {
            "path": os.path.relpath(path, config.output_dir),
            "sha256": sha256_file(path),
            "bytes": path.stat().st_size,
        }
        for path in sorted(state.written)
    ]
    manifest.wall_clock_seconds = time.perf_counter() - started
    write_json(config.output_dir / MANIFEST_FILE, manifest.to_dict())
    log.info(
        "Wrote %d outputs in %.2fs", len(manifest.outputs), manifest.wall_clock_seconds
    )
    return manifest
