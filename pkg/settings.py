# settings.py

"""
Experiment configuration: environment variables from .env plus a YAML file
validated into a tree of pydantic models.
"""

import itertools
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import ConfigError
from kernels import KernelModel
from stationary import IndexWindow

logger = logging.getLogger(__name__)

KINDS = ("stationary", "simulate", "moments", "linear", "stability", "verify-bounds")

# Load environment variables from the .env file
load_dotenv()


@dataclass(frozen=True)
class EnvSettings:
    out: str | None
    log_level: str
    threads: int


def env_settings() -> EnvSettings:
    """Reads PEAKDYN_* at call time so that a .env loaded later still counts."""
    threads = os.environ.get("PEAKDYN_THREADS", "1")
    try:
        n_threads = int(threads)
    except ValueError:
        raise ConfigError(f"PEAKDYN_THREADS must be an integer, got {threads!r}") from None
    if n_threads < 1:
        raise ConfigError("PEAKDYN_THREADS must be at least 1")
    return EnvSettings(
        out=os.environ.get("PEAKDYN_OUT") or None,
        log_level=os.environ.get("PEAKDYN_LOG_LEVEL", "INFO").upper(),
        threads=n_threads,
    )


######################################################################################
############################ CONFIG SECTIONS #########################################
######################################################################################

class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class SimulationSection(_Section):
    cells_per_interval: int = 32
    n_trunc: int | None = None
    dt_safety: float = Field(0.2, gt=0.0, le=1.0)
    scheme: Literal["rk4", "strang"] = "rk4"
    blob_width: float = Field(0.0, ge=0.0)
    t_end: float = Field(5.0, gt=0.0)
    samples: int = Field(51, ge=2)
    closure: Literal["leading", "gaussian"] = "leading"
    compare_grid: bool = True


class PerturbationSection(_Section):
    """Random initial perturbation y0_n = amplitude * 2^-n * U(-1, 1), plus optional shift noise."""

    amplitude: float = Field(0.0, ge=0.0)
    shift_amplitude: float = Field(0.0, ge=0.0)
    A_offset: float = 0.0


class LinearSection(_Section):
    theta_pairs: list[tuple[float, float]] = [(0.0, 0.75), (-0.5, 0.75), (1.0, 1.25)]
    t_end: float = Field(6.0, gt=0.0)
    samples: int = Field(121, ge=20)
    t_burn: float = Field(0.5, ge=0.0)
    psi_ells: list[int] = [0, 1, 2, 3, 4]
    psi_max_gap: int = Field(6, ge=0)
    poincare_samples: int = Field(1000, ge=1)
    eta0: float = Field(0.05, gt=0.0)


class BoundsSection(_Section):
    samples: int = Field(1000, ge=1)
    hatq_n0: int = 0
    hatq_delta1: float = Field(0.1, gt=0.0, lt=1.0)
    hatq_nu: float = Field(0.5, ge=0.0)
    hatq_t_end: float = Field(10.0, gt=0.1)
    hatq_extend: int = Field(5, ge=1)
    theta1: float = Field(0.6, gt=0.0)
    theta2: float = Field(0.8, gt=0.0)
    trajectory_t_end: float = Field(4.0, gt=0.0)
    trajectory_samples: int = Field(41, ge=3)


class OutputSection(_Section):
    dir: str = "runs"
    name: str | None = None


class SweepSection(_Section):
    rho: list[float] | None = None
    M: list[float] | None = None


class ExperimentConfig(BaseModel):
    """One experiment; `sweep` expands it into several."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["stationary", "simulate", "moments", "linear", "stability", "verify-bounds"] | None = None
    kernel: KernelModel = KernelModel()
    window: IndexWindow = IndexWindow(n_lo=-8, n_hi=6)
    delta0: float = Field(0.05, gt=0.0)
    M: float | None = Field(10.0, gt=0.0)
    A: float | None = Field(None, gt=0.0)
    rho: float = 0.0
    seed: int = Field(0, ge=0, lt=2 ** 64)
    simulation: SimulationSection = SimulationSection()
    perturbation: PerturbationSection = PerturbationSection()
    linear: LinearSection = LinearSection()
    bounds: BoundsSection = BoundsSection()
    output: OutputSection = OutputSection()
    sweep: SweepSection = SweepSection()

    @model_validator(mode="after")
    def _check(self):
        if self.A is not None and self.M is not None and "M" in self.model_fields_set:
            raise ValueError("give either M or A, not both")
        if self.A is None and self.M is None:
            raise ValueError("one of M or A is required")
        if not self.delta0 < 0.5 * (1.0 - self.kernel.epsilon0):
            raise ValueError(f"delta0={self.delta0} must be below (1 - epsilon0)/2 "
                             f"= {0.5 * (1.0 - self.kernel.epsilon0):.6g}")
        # stationary combs exist for any shift; the dynamics need the comb inside the intervals
        if self.kind not in ("stationary", "linear") and abs(self.rho) > self.delta0:
            raise ValueError(f"rho={self.rho} outside [-delta0, delta0]")
        n_trunc = self.simulation.n_trunc
        if n_trunc is not None and not self.window.n_lo < n_trunc <= self.window.n_hi:
            raise ValueError(f"simulation.n_trunc={n_trunc} outside the window")
        return self

    @property
    def uses_mass(self) -> bool:
        return self.A is None


######################################################################################
############################ LOADING #################################################
######################################################################################

def _apply_override(data: dict, item: str) -> None:
    """Sets data[a][b][c] = value for an override 'a.b.c=value'; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like path.to.key=value")
    path, raw = item.split("=", 1)
    keys = [k for k in path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"empty override path in {item!r}")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {path!r} runs through a non-mapping")
    node[keys[-1]] = yaml.safe_load(raw)


def load_config(path: Path | str | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """
    Loads a YAML experiment file (or the defaults when path is None) and applies overrides.

    Raises:
        ConfigError: unreadable file or malformed YAML
        pydantic.ValidationError: values that fail validation
    """
    data = {}
    if path is not None:
        source = Path(path)
        try:
            text = source.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {source}: {e}") from e
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed YAML in {source}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config root of {source} must be a mapping")
    for item in overrides:
        _apply_override(data, item)
    return ExperimentConfig.model_validate(data)


def expand_sweep(config: ExperimentConfig) -> list[ExperimentConfig]:
    """Cartesian product over the sweep lists; a config without sweep expands to itself."""
    axes = []
    if config.sweep.rho:
        axes.append([("rho", v) for v in config.sweep.rho])
    if config.sweep.M:
        axes.append([("M", v) for v in config.sweep.M])
    if not axes:
        return [config]
    out = []
    for combo in itertools.product(*axes):
        data = config.model_dump()
        data["sweep"] = {}
        for key, value in combo:
            data[key] = value
        if any(key == "M" for key, _ in combo):
            data["A"] = None
        out.append(ExperimentConfig.model_validate(data))
    logger.info("sweep expanded into %d experiments", len(out))
    return out


def experiment_label(config: ExperimentConfig) -> str:
    """Directory-safe label such as 'stability_rho0.025_M10'."""
    def num(v):
        return f"{v:g}".replace("-", "m")

    parts = [config.kind or "run"]
    if config.output.name:
        parts.insert(0, config.output.name)
    parts.append(f"rho{num(config.rho)}")
    parts.append(f"M{num(config.M)}" if config.uses_mass else f"A{num(config.A)}")
    return "_".join(parts)
