"""Experiment configuration: defaults, config file, environment and flags."""

from __future__ import annotations

import dataclasses
import enum
import os
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from lorentz_lab.billiard import Scaling
from lorentz_lab.errors import ConfigurationError
from lorentz_lab.limit_chain import BackendVariant

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "LORENTZ_LAB_OUTPUT_ROOT"
WORKERS_ENV = "LORENTZ_LAB_WORKERS"
DEFAULT_OUTPUT_DIR = Path("lorentz_lab_out")


class Mode(enum.StrEnum):
    BILLIARD = "billiard"
    LIMIT = "limit"
    DISTANCES = "distances"
    STEIN_CHECK = "stein-check"
    RATES = "rates"
    RENEWAL = "renewal"


@dataclass(frozen=True)
class ExperimentConfig:
    mode: Mode
    d: int = 2
    r: float = 0.005
    scaling: Scaling = Scaling.BOLTZMANN_GRAD
    backend: BackendVariant = BackendVariant.SURROGATE_IID
    gamma: float = 0.5
    n_grid: tuple[int, ...] = (100, 1000)
    t_grid: tuple[float, ...] = (10_000.0,)
    replicas: int = 100
    seed: int = 0
    workers: int = 1
    output_dir: Path = field(default=DEFAULT_OUTPUT_DIR)
    n_flights: int = 100_000
    table_flights: int = 100_000
    l_max_factor: float = 1e4
    n_proj: int = 16
    n_bootstrap: int = 200
    n_bins: int = 32
    n_legendre: int = 64
    n_hermite: int = 32
    mixing_lags: int = 8
    probes: int = 100

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, Path):
                value = str(value)
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    def experiment_dict(self) -> dict[str, Any]:
        """Fields that determine the outputs; worker count and location do not."""
        out = self.to_dict()
        del out["workers"], out["output_dir"]
        return out


def _int(text: str) -> int:
    return int(text.replace("_", ""))


def _float(text: str) -> float:
    return float(text.replace("_", ""))


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(float(p)) for p in text.split(",") if p.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


_PARSERS: dict[str, Callable[[str], Any]] = {
    "mode": Mode,
    "d": _int,
    "r": _float,
    "scaling": Scaling,
    "backend": BackendVariant,
    "gamma": _float,
    "n_grid": _int_list,
    "t_grid": _float_list,
    "replicas": _int,
    "seed": _int,
    "workers": _int,
    "output_dir": Path,
    "n_flights": _int,
    "table_flights": _int,
    "l_max_factor": _float,
    "n_proj": _int,
    "n_bootstrap": _int,
    "n_bins": _int,
    "n_legendre": _int,
    "n_hermite": _int,
    "mixing_lags": _int,
    "probes": _int,
}


def read_config_file(path: Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file with ``#`` comments.

    The file must declare ``schema_version = 1``.
    """
    raw: dict[str, str] = {}
    diagnostics: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                diagnostics[f"line {lineno}"] = f"expected 'key = value', got {text!r}"
                continue
            key, value = (part.strip() for part in text.split("=", 1))
            raw[key] = value
    version = raw.pop("schema_version", None)
    if version is None:
        diagnostics["schema_version"] = "missing; expected schema_version = 1"
    elif version != str(SCHEMA_VERSION):
        diagnostics["schema_version"] = f"unsupported version {version!r}"
    if diagnostics:
        raise ConfigurationError(f"invalid config file {path}", diagnostics)
    return raw


def _env_overrides(environ: Mapping[str, str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    root = environ.get(OUTPUT_ROOT_ENV)
    if root:
        overrides["output_dir"] = root
    workers = environ.get(WORKERS_ENV)
    if workers:
        overrides["workers"] = workers
    return overrides


def _validate(cfg: ExperimentConfig) -> dict[str, str]:
    problems: dict[str, str] = {}
    if cfg.d < 2:
        problems["d"] = f"must be >= 2, got {cfg.d}"
    if not 0 < cfg.gamma < 1:
        problems["gamma"] = f"must lie in (0, 1), got {cfg.gamma}"
    if not cfg.n_grid:
        problems["n_grid"] = "must not be empty"
    elif any(n < 2 for n in cfg.n_grid):
        problems["n_grid"] = f"every horizon must be >= 2, got {list(cfg.n_grid)}"
    elif list(cfg.n_grid) != sorted(set(cfg.n_grid)):
        problems["n_grid"] = f"must be strictly ascending, got {list(cfg.n_grid)}"
    if not cfg.t_grid or any(t <= 1 for t in cfg.t_grid):
        problems["t_grid"] = f"every time must be > 1, got {list(cfg.t_grid)}"
    elif list(cfg.t_grid) != sorted(set(cfg.t_grid)):
        problems["t_grid"] = f"must be strictly ascending, got {list(cfg.t_grid)}"
    if not 0 <= cfg.seed < 1 << 64:
        problems["seed"] = f"must fit in 64 bits, got {cfg.seed}"
    if cfg.r <= 0:
        problems["r"] = f"must be positive, got {cfg.r}"
    elif cfg.mode is Mode.BILLIARD or cfg.backend is BackendVariant.EMPIRICAL:
        spacing = 1.0 if cfg.scaling is Scaling.RAW else cfg.r ** ((cfg.d - 1) / cfg.d)
        if 2 * cfg.r >= spacing:
            problems["r"] = f"scatterers overlap: 2r = {2 * cfg.r} >= spacing {spacing:.6g}"
    positive = (
        "replicas workers n_flights table_flights l_max_factor n_proj "
        "n_bins n_legendre n_hermite probes"
    ).split()
    for name in positive:
        if getattr(cfg, name) <= 0:
            problems[name] = f"must be positive, got {getattr(cfg, name)}"
    if cfg.n_bootstrap < 0:
        problems["n_bootstrap"] = f"must be non-negative, got {cfg.n_bootstrap}"
    if cfg.mixing_lags < 4:
        problems["mixing_lags"] = f"must be >= 4, got {cfg.mixing_lags}"
    return problems


def load_config(
    mode: Mode | str | None = None,
    config_file: Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Merge defaults, file, environment and flag overrides, then validate.

    Every unparsable or invalid field is collected into a single
    ``ConfigurationError``.
    """
    environ = os.environ if environ is None else environ
    layered: dict[str, Any] = {}
    if config_file is not None:
        layered.update(read_config_file(config_file))
    layered.update(_env_overrides(environ))
    layered.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if mode is not None:
        layered["mode"] = mode

    diagnostics: dict[str, str] = {}
    values: dict[str, Any] = {}
    for key, raw in layered.items():
        parser = _PARSERS.get(key)
        if parser is None:
            diagnostics[key] = "unknown field"
            continue
        if not isinstance(raw, str):
            values[key] = tuple(raw) if isinstance(raw, list) else raw
            continue
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            diagnostics[key] = f"cannot parse {raw!r}: {exc}"
    if "mode" not in values and "mode" not in diagnostics:
        diagnostics["mode"] = "missing"
    if diagnostics:
        raise ConfigurationError("invalid experiment configuration", diagnostics)

    cfg = ExperimentConfig(**values)
    problems = _validate(cfg)
    if problems:
        raise ConfigurationError("invalid experiment configuration", problems)
    return cfg
