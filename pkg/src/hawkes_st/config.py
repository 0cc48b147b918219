"""Run configuration for the command-line tool.

Configs are JSON documents validated in full before any work starts; unknown
keys are rejected at every level. ``format_version`` versions the schema.
A ``manifest.json`` written by a previous run is also accepted and replays
the configuration echoed inside it.

Example (all sections optional except those the command needs)::

    {
      "format_version": 1,
      "seed": 7,
      "truth": {"d": 1, "a": 0.1, "b": 0.1, "cells": 16,
                "mu": {"constant": 2.0}, "g": {"branching_ratio": 0.3}},
      "sim": {"n": 50},
      "fit": {"method": "map", "mu_cells": 8, "g_cells": 4},
      "checks": {"enabled": ["identifiability"], "identifiability": {"n": 500}},
      "contraction": {"ns": [10, 40, 160]}
    }
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .gp import KernelSpec, LinkSpec, prior_draw
from .inference import FitConfig, FitMethod
from .model import GridField, ParameterF, TriggeringSupport

FORMAT_VERSION = 1
THREADS_ENV = "HAWKES_ST_THREADS"


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KernelModel(_Strict):
    family: Literal["rbf", "matern", "separable"] = "matern"
    amplitude: float = Field(1.0, gt=0)
    lengthscale: float = Field(0.3, gt=0)
    smoothness: float = Field(1.5, gt=0)
    time: Optional["KernelModel"] = None
    space: Optional["KernelModel"] = None

    @model_validator(mode="after")
    def _build(self):
        try:
            self.spec()
        except ValueError as exc:
            raise ValueError(str(exc)) from None
        return self

    def spec(self) -> KernelSpec:
        if self.family == "separable":
            if self.time is None or self.space is None:
                raise ValueError("a separable kernel needs time and space factors")
            return KernelSpec.separable(self.time.spec(), self.space.spec(), self.amplitude)
        return KernelSpec(self.family, self.amplitude, self.lengthscale, self.smoothness)


class LinkModel(_Strict):
    kind: Literal["softplus", "scaled_sigmoid"] = "softplus"
    ceiling: float = Field(1.0, gt=0)
    slope: float = Field(1.0, gt=0)

    def spec(self) -> LinkSpec:
        return LinkSpec(self.kind, self.ceiling, self.slope)


class ConstantMu(_Strict):
    constant: float = Field(gt=0)


class ConstantG(_Strict):
    branching_ratio: float = Field(ge=0, lt=1)


class GPComponent(_Strict):
    kernel: KernelModel = KernelModel()
    link: LinkModel = LinkModel()


class TruthSection(_Strict):
    """Ground-truth parameter: loaded from a file, constant, or a frozen GP prior draw."""

    file: Optional[str] = None
    d: int = Field(1, ge=1)
    a: float = 0.1
    b: float = 0.1
    cells: Optional[int] = Field(None, ge=1)
    mu: Union[ConstantMu, GPComponent] = ConstantMu(constant=2.0)
    g: Union[ConstantG, GPComponent] = ConstantG(branching_ratio=0.3)

    @model_validator(mode="after")
    def _support(self):
        if self.file is None:
            try:
                TriggeringSupport(self.a, self.b)
            except ValueError as exc:
                raise ValueError(f"finite-range constraint violated: {exc}") from None
        return self

    def build(self, seed: int) -> ParameterF:
        if self.file is not None:
            return ParameterF.load(self.file)
        support = TriggeringSupport(self.a, self.b)
        d = self.d
        cells = self.cells or {1: 32, 2: 16}.get(d, 8)
        if isinstance(self.mu, GPComponent) or isinstance(self.g, GPComponent):
            mu_c = self.mu if isinstance(self.mu, GPComponent) else GPComponent()
            g_c = self.g if isinstance(self.g, GPComponent) else GPComponent()
            drawn = prior_draw(mu_c.kernel.spec(), g_c.kernel.spec(), (mu_c.link.spec(), g_c.link.spec()), support, seed, d, cells)
            mu = drawn.mu if isinstance(self.mu, GPComponent) else GridField.constant_background(self.mu.constant, d, cells)
            g = drawn.g if isinstance(self.g, GPComponent) else _constant_g(self.g, support, d, cells)
            return ParameterF(mu, g, support)
        return ParameterF(GridField.constant_background(self.mu.constant, d, cells), _constant_g(self.g, support, d, cells), support)

    @property
    def smoothness(self) -> float | None:
        if isinstance(self.mu, GPComponent) and self.mu.kernel.family == "matern":
            return self.mu.kernel.smoothness
        return None


def _constant_g(c: ConstantG, support: TriggeringSupport, d: int, cells: int) -> GridField:
    height = c.branching_ratio / (support.a * (2 * support.b) ** d)
    return GridField.constant_trigger(height, support, d, cells)


class SimSection(_Strict):
    n: int = Field(100, ge=1)
    method: Literal["branching", "thinning"] = "branching"
    max_events_per_seq: int = Field(100_000, ge=1)


class FitSection(_Strict):
    method: Literal["map", "pcn", "vi"] = "map"
    events: Optional[str] = None
    truth: Optional[str] = None
    n_sequences: Optional[int] = Field(None, ge=1)
    a: Optional[float] = None
    b: Optional[float] = None
    mu_cells: int = Field(8, ge=1)
    g_cells: Optional[int] = Field(None, ge=1)
    iterations: int = Field(200, ge=0)
    mu_kernel: KernelModel = KernelModel()
    g_kernel: KernelModel = KernelModel()
    mu_link: LinkModel = LinkModel()
    g_link: LinkModel = LinkModel()
    fit_trigger: bool = True
    tol: float = Field(1e-6, gt=0)
    pcn_beta: float = Field(0.2, gt=0, le=1)
    burn_in: int = Field(0, ge=0)
    thin: int = Field(1, ge=1)
    adapt_beta: bool = True
    target_accept: float = Field(0.23, gt=0, lt=1)
    warm_start: bool = False
    step_size: float = Field(0.05, gt=0)
    n_mc: int = Field(8, ge=1)
    init_logstd: float = 0.0

    def fit_config(self, seed: int) -> FitConfig:
        return FitConfig(
            method=FitMethod(self.method),
            iterations=self.iterations,
            seed=seed,
            mu_kernel=self.mu_kernel.spec(),
            g_kernel=self.g_kernel.spec(),
            mu_link=self.mu_link.spec(),
            g_link=self.g_link.spec(),
            fit_trigger=self.fit_trigger,
            tol=self.tol,
            pcn_beta=self.pcn_beta,
            burn_in=self.burn_in,
            thin=self.thin,
            adapt_beta=self.adapt_beta,
            target_accept=self.target_accept,
            warm_start=self.warm_start,
            step_size=self.step_size,
            n_mc=self.n_mc,
            init_logstd=self.init_logstd,
        )


class BoxRule(_Strict):
    lo: list[float]
    hi: list[float]


class OmegaCheck(_Strict):
    n_values: list[int] = [50, 200, 800]
    alpha: float = Field(1.0, gt=0)
    replicates: int = Field(200, ge=1)
    pilot_replicates: Optional[int] = Field(None, ge=1)


class BernsteinCheck(_Strict):
    rule: Union[Literal["full", "stopped"], BoxRule] = "full"
    v: float = Field(gt=0)
    x_grid: list[float] = [0.5, 1.0, 2.0, 4.0]
    replicates: int = Field(10_000, ge=1)
    n: int = Field(1, ge=1)

    @field_validator("x_grid")
    @classmethod
    def _nonneg(cls, xs):
        if not xs or min(xs) < 0:
            raise ValueError("x_grid must be a nonempty list of nonnegative values")
        return xs


class KLCheck(_Strict):
    eps: float = Field(0.05, gt=0)
    n: int = Field(50, ge=1)
    replicates: int = Field(200, ge=1)
    slack: float = Field(0.5, ge=0)
    lambda02_sequences: int = Field(1000, ge=2)


class IdentifiabilityCheck(_Strict):
    n: int = Field(500, ge=2)
    mu_scale: float = Field(1.5, gt=0)
    g_scale: float = Field(1.0, ge=0)


CheckName = Literal["omega_event", "bernstein", "kl_bound", "identifiability"]


class ChecksSection(_Strict):
    enabled: list[CheckName]
    omega_event: OmegaCheck = OmegaCheck()
    bernstein: Optional[BernsteinCheck] = None
    kl_bound: KLCheck = KLCheck()
    identifiability: IdentifiabilityCheck = IdentifiabilityCheck()

    @model_validator(mode="after")
    def _nonempty(self):
        if not self.enabled:
            raise ValueError("enabled must list at least one check")
        if len(set(self.enabled)) != len(self.enabled):
            raise ValueError("enabled lists a check twice")
        if "bernstein" in self.enabled and self.bernstein is None:
            raise ValueError("the bernstein check needs a bernstein section (at least v)")
        return self


class ContractionSection(_Strict):
    ns: list[int] = [10, 40, 160]
    replicates: int = Field(1, ge=1)
    tau: Optional[float] = Field(None, gt=0)
    fit: FitSection = FitSection(method="pcn", iterations=2000, burn_in=1000, thin=10)

    @field_validator("ns")
    @classmethod
    def _increasing(cls, ns):
        if len(ns) < 3:
            raise ValueError("ns needs at least 3 values")
        if any(n < 1 for n in ns) or any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError("ns must be strictly increasing positive integers")
        return ns


class ExperimentConfig(_Strict):
    format_version: Literal[1] = FORMAT_VERSION
    seed: int = Field(0, ge=0)
    threads: Optional[int] = Field(None, ge=1)
    out: Optional[str] = None
    truth: Optional[TruthSection] = None
    sim: Optional[SimSection] = None
    fit: Optional[FitSection] = None
    checks: Optional[ChecksSection] = None
    contraction: Optional[ContractionSection] = None

    def resolved_threads(self) -> int:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                val = int(env)
            except ValueError:
                raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
            if val < 1:
                raise ConfigError(f"{THREADS_ENV} must be >= 1")
            return val
        return self.threads or (os.cpu_count() or 1)

    def echo(self) -> dict:
        return self.model_dump(mode="json", exclude_none=True)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict) -> ExperimentConfig:
    if isinstance(data, dict) and data.get("tool") == "hawkes-st" and "config" in data:
        data = data["config"]
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(data)


def identifiability_alternative(f: ParameterF, chk: IdentifiabilityCheck) -> ParameterF:
    mu = GridField(f.mu.grid, f.mu.values * chk.mu_scale, f.mu.domain)
    g = GridField(f.g.grid, f.g.values * chk.g_scale, f.g.domain)
    return ParameterF(mu, g, f.support)


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "FORMAT_VERSION",
    "THREADS_ENV",
    "identifiability_alternative",
    "load_config",
    "parse_config",
]
