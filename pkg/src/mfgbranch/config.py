"""Run configuration: experiment presets, key=value config files, overrides.

Precedence is CLI > config file > preset defaults. Config files are flat
``key = value`` lines (``#`` comments allowed); keys map one-to-one onto
RunConfig fields and are listed in the README.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .continuation import ContinuationPolicy
from .errors import ConfigError
from .model import CouplingSpec, HamiltonianSpec, ModelSpec
from .solver import NewtonOptions

DESK_GRID = 100
PAPER_GRID = 400

#: paper parameter blocks for the five experiments
_PRESETS = {
    1: dict(coupling="LinearAggregation", a=2.0, M=10.0,
            hamiltonian="Quadratic", sigma=1.0 / math.pi,
            branches="1,1;2,1;3,1", eps=0.1),
    2: dict(coupling="LinearAggregation", a=5.0, M=10.0,
            hamiltonian="Quadratic", sigma=1.0 / math.pi,
            branches="1,1;1,2", eps=0.1),
    3: dict(coupling="LinearAggregation", a=2.0, M=10.0,
            hamiltonian="PowerLaw", gamma=2.1, sigma=1.0 / math.pi,
            branches="1,1", eps=0.1, warmstart_t=1.5),
    4: dict(coupling="Schelling", K1=5.0, K2=3.0, alpha1=0.7, alpha2=0.55,
            eta=1e-3, hamiltonian="Quadratic", sigma=1.0 / math.pi,
            branches="1,1;2,1;3,1", eps=0.01),
    5: dict(coupling="Schelling", K1=8.0, K2=8.0, alpha1=0.8, alpha2=0.4,
            eta=1e-3, hamiltonian="Quadratic", sigma=1.0 / math.pi,
            branches="1,1", eps=0.05),
}

_FLOAT_KEYS = {"a", "M", "K1", "K2", "alpha1", "alpha2", "eta", "gamma",
               "kappa1", "kappa2", "sigma", "eps", "t", "t_min", "t_max",
               "t_limit_offset", "warmstart_t", "tol_residual",
               "step_initial", "step_max", "collapse_tol",
               "a11", "a12", "a21", "a22"}
_INT_KEYS = {"nx", "nt", "workers", "n_max", "k_max", "max_iters",
             "experiment"}
_STR_KEYS = {"coupling", "hamiltonian", "branches", "branch", "out"}

KNOWN_KEYS = _FLOAT_KEYS | _INT_KEYS | _STR_KEYS | {"paper_grid"}


@dataclass
class RunConfig:
    """Materialized settings for one library or CLI run."""

    model: ModelSpec
    nx: int = DESK_GRID
    nt: int = DESK_GRID
    experiment: int | None = None
    branches: list = field(default_factory=lambda: [(1, 1)])
    eps: float = 0.1
    t: float | None = None
    t_min: float | None = None
    t_max: float | None = None
    t_limit_offset: float = 2.0      # per-branch T_limit = T*_n,k + offset
    warmstart_t: float = 1.5         # quadratic warmstart horizon (exp 3)
    out_dir: str = "out"
    workers: int = 1
    n_max: int = 6
    k_max: int = 4
    newton: NewtonOptions = field(default_factory=NewtonOptions)
    policy: ContinuationPolicy = field(default_factory=ContinuationPolicy)


def parse_config_file(path: str) -> dict:
    """Read flat key=value pairs; unknown keys are a config error."""
    out = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for ln, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key=value")
                key, val = (s.strip() for s in line.split("=", 1))
                if key not in KNOWN_KEYS:
                    raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
                out[key] = val
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return out


def _parse_branches(text: str) -> list:
    branches = []
    for chunk in str(text).split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(",")]
        try:
            n = int(parts[0])
            k = int(parts[1]) if len(parts) > 1 else 1
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"bad branch spec {chunk!r}") from exc
        if n < 1 or k < 1:
            raise ConfigError(f"branch indices must be positive: {chunk!r}")
        branches.append((n, k))
    if not branches:
        raise ConfigError("empty branch list")
    return branches


def _coerce(key: str, val):
    try:
        if key in _FLOAT_KEYS:
            return float(val)
        if key in _INT_KEYS:
            return int(val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {val!r}") from exc
    return val


def build_config(preset_id: int | None = None, file_values: dict | None = None,
                 cli_values: dict | None = None) -> RunConfig:
    """Merge preset defaults, config-file values and CLI overrides."""
    values: dict = {}
    if preset_id is not None:
        if preset_id not in _PRESETS:
            raise ConfigError(f"experiment id must be 1..5, got {preset_id}")
        values.update(_PRESETS[preset_id])
        values["experiment"] = preset_id
    for source in (file_values or {}), (cli_values or {}):
        for key, val in source.items():
            if val is None:
                continue
            values[key] = _coerce(key, val)

    if values.pop("paper_grid", False):
        values.setdefault("nx", PAPER_GRID)
        values.setdefault("nt", PAPER_GRID)
        values["nx"] = values.get("nx") or PAPER_GRID
        values["nt"] = values.get("nt") or PAPER_GRID

    kind = values.get("coupling", "LinearAggregation")
    try:
        if kind == "LinearAggregation":
            coupling = CouplingSpec.linear_aggregation(
                a=values.get("a", 2.0), M=values.get("M", 10.0))
        elif kind == "Schelling":
            coupling = CouplingSpec.schelling(
                K1=values.get("K1", 1.0), K2=values.get("K2", 1.0),
                alpha1=values.get("alpha1", 0.5),
                alpha2=values.get("alpha2", 0.5),
                eta=values.get("eta", 1e-3))
        elif kind == "ExplicitLinear":
            coupling = CouplingSpec.explicit_linear(np.array([
                [values.get("a11", 0.0), values.get("a12", 0.0)],
                [values.get("a21", 0.0), values.get("a22", 0.0)]]))
        else:
            raise ConfigError(f"unknown coupling kind {kind!r}")

        hkind = values.get("hamiltonian", "Quadratic")
        if hkind == "Quadratic":
            ham = HamiltonianSpec.quadratic(values.get("kappa1", 1.0),
                                            values.get("kappa2", 1.0))
        elif hkind == "PowerLaw":
            ham = HamiltonianSpec.power_law(values.get("gamma", 2.0))
        else:
            raise ConfigError(f"unknown Hamiltonian kind {hkind!r}")

        model = ModelSpec(coupling=coupling, hamiltonian=ham,
                          sigma=values.get("sigma", 1.0 / math.pi))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    branches = values.get("branch") or values.get("branches") or "1,1"
    newton = NewtonOptions()
    if "tol_residual" in values:
        newton.tol_residual = values["tol_residual"]
    if "max_iters" in values:
        newton.max_iters = values["max_iters"]
    policy = ContinuationPolicy()
    for pk in ("step_initial", "step_max", "collapse_tol"):
        if pk in values:
            setattr(policy, pk, values[pk])

    try:
        return RunConfig(
            model=model,
            nx=values.get("nx", DESK_GRID), nt=values.get("nt", DESK_GRID),
            experiment=values.get("experiment"),
            branches=_parse_branches(branches),
            eps=values.get("eps", 0.1),
            t=values.get("t"), t_min=values.get("t_min"),
            t_max=values.get("t_max"),
            t_limit_offset=values.get("t_limit_offset", 2.0),
            warmstart_t=values.get("warmstart_t", 1.5),
            out_dir=values.get("out", "out"),
            workers=values.get("workers", 1),
            n_max=values.get("n_max", 6), k_max=values.get("k_max", 4),
            newton=newton, policy=policy)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
