"""Run configuration files (JSON)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError, UnknownScenario
from .problem import builtin_scenario, spec_from_custom

_TOP = {"scenario", "custom", "grid", "n_particles", "eps_ladder", "seed", "output_dir",
        "dump_every", "solver"}
_GRID = {"n_steps"}
_SOLVER = {"tol", "max_picard", "continuation", "basis_degree", "damping"}


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_picard: int = 200
    continuation: str = "off"
    basis_degree: int = 3
    damping: float = 0.5


@dataclass
class RunConfig:
    """Validated contents of a run configuration file."""

    scenario: str = None
    custom: dict = None
    n_steps: int = 64
    n_particles: int = 4096
    eps_ladder: list = field(default_factory=lambda: [0.5, 0.25, 0.125, 0.0625])
    seed: int = 0
    output_dir: str = "mfvv-output"
    dump_every: int = 0
    solver: SolverOptions = field(default_factory=SolverOptions)

    def build_spec(self):
        if self.custom is not None:
            return spec_from_custom(self.custom)
        try:
            return builtin_scenario(self.scenario)
        except UnknownScenario as exc:
            raise ConfigError(str(exc)) from exc

    def solver_kwargs(self):
        s = self.solver
        return {"tol": s.tol, "max_picard": s.max_picard, "damping": s.damping,
                "continuation": s.continuation, "basis_degree": s.basis_degree}


def _unknown(block, allowed, where):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(block) - allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {extra}")


def _positive_int(v, name):
    if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
        raise ConfigError(f"{name} must be a positive integer, got {v!r}")
    return v


def _positive_float(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(f"{name} must be a positive number, got {v!r}")
    return float(v)


def parse_config(data):
    """Validate a decoded JSON object and return a :class:`RunConfig`."""
    _unknown(data, _TOP, "config")
    if ("scenario" in data) == ("custom" in data):
        raise ConfigError("exactly one of 'scenario' and 'custom' is required")
    cfg = RunConfig()
    if "scenario" in data:
        if not isinstance(data["scenario"], str):
            raise ConfigError("scenario must be a string")
        cfg.scenario = data["scenario"]
    else:
        cfg.custom = data["custom"]
        cfg.build_spec()
    if "grid" in data:
        _unknown(data["grid"], _GRID, "grid")
        if "n_steps" in data["grid"]:
            cfg.n_steps = _positive_int(data["grid"]["n_steps"], "grid.n_steps")
    if "n_particles" in data:
        cfg.n_particles = _positive_int(data["n_particles"], "n_particles")
    if "eps_ladder" in data:
        ladder = data["eps_ladder"]
        if not isinstance(ladder, list):
            raise ConfigError("eps_ladder must be a list")
        ladder = [_positive_float(e, "eps_ladder entry") for e in ladder]
        if not ladder:
            raise ConfigError("eps_ladder is empty")
        if any(e > 1 for e in ladder):
            raise ConfigError("eps_ladder entries must not exceed 1")
        if any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ConfigError("eps_ladder must be strictly decreasing")
        cfg.eps_ladder = ladder
    if "seed" in data:
        s = data["seed"]
        if isinstance(s, bool) or not isinstance(s, int) or s < 0:
            raise ConfigError("seed must be a nonnegative integer")
        cfg.seed = s
    if "output_dir" in data:
        if not isinstance(data["output_dir"], str) or not data["output_dir"]:
            raise ConfigError("output_dir must be a non-empty string")
        cfg.output_dir = data["output_dir"]
    if "dump_every" in data:
        d = data["dump_every"]
        if isinstance(d, bool) or not isinstance(d, int) or d < 0:
            raise ConfigError("dump_every must be a nonnegative integer")
        cfg.dump_every = d
    if "solver" in data:
        block = data["solver"]
        _unknown(block, _SOLVER, "solver")
        s = cfg.solver
        if "tol" in block:
            s.tol = _positive_float(block["tol"], "solver.tol")
        if "max_picard" in block:
            s.max_picard = _positive_int(block["max_picard"], "solver.max_picard")
        if "basis_degree" in block:
            s.basis_degree = _positive_int(block["basis_degree"], "solver.basis_degree")
        if "damping" in block:
            s.damping = _positive_float(block["damping"], "solver.damping")
            if s.damping > 1:
                raise ConfigError("solver.damping must lie in (0, 1]")
        if "continuation" in block:
            if block["continuation"] not in ("on", "off"):
                raise ConfigError("solver.continuation must be 'on' or 'off'")
            s.continuation = block["continuation"]
    return cfg


def load_config(path):
    """Read and validate a JSON run configuration."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_config(data)
