"""Experiment configuration: JSON in, validated dataclass out.

Every section rejects unknown keys so misspelled options fail loudly
instead of silently running defaults.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import dataclass, field

from .model import ConfigError, OcpModel, problem_from_config

_INTEGRATOR_KEYS = {"type", "stages", "substeps"}
_TOP_KEYS = {
    "problem", "integrator", "strategies", "hessian", "tol", "max_iter",
    "seed", "nm_sweep", "reps", "samples", "variants", "rti_mode",
    "out_dir", "plant_substeps", "plant_stages", "drift_check",
}


@dataclass
class IntegratorSpec:
    type: str = "rk4"
    stages: int = 2
    substeps: int = 10

    @staticmethod
    def from_dict(d: dict) -> "IntegratorSpec":
        unknown = set(d) - _INTEGRATOR_KEYS
        if unknown:
            raise ConfigError(f"unknown integrator keys: {sorted(unknown)}")
        spec = IntegratorSpec(
            type=d.get("type", "rk4"),
            stages=int(d.get("stages", 2)),
            substeps=int(d.get("substeps", 10)))
        if spec.type not in ("rk4", "gl"):
            raise ConfigError(f"unknown integrator type: {spec.type!r}")
        if not 1 <= spec.stages <= 4:
            raise ConfigError("gl stages must be in 1..4")
        if spec.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        return spec


@dataclass
class ExperimentConfig:
    problem: dict
    integrator: IntegratorSpec = field(default_factory=IntegratorSpec)
    strategies: list[str] = field(default_factory=lambda: ["exact"])
    hessian: str = "gauss_newton"
    tol: float = 1e-8
    max_iter: int = 100
    seed: int = 0
    nm_sweep: list[int] = field(default_factory=list)
    reps: int = 20
    samples: int = 50
    variants: list[str] = field(
        default_factory=lambda: ["exact", "block_tr1_dynamic"])
    rti_mode: str = "rk4"
    out_dir: str = "out"
    plant_substeps: int = 4
    plant_stages: int = 4
    drift_check: bool = True

    def build_model(self, n_m: int | None = None) -> OcpModel:
        cfg = dict(self.problem)
        if n_m is not None:
            cfg["n_m"] = n_m
        return problem_from_config(cfg)

    def canonical_json(self) -> str:
        d = dict(self.__dict__)
        d["integrator"] = self.integrator.__dict__
        return json.dumps(d, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def parse_sweep(spec) -> list[int]:
    """Accepts [2, 3, 4] or the compact form "2..8"."""
    if isinstance(spec, str):
        lo, sep, hi = spec.partition("..")
        if not sep:
            raise ConfigError(f"bad sweep spec: {spec!r}")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in spec]


def load_config(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("experiment config must be an object")
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "problem" not in d:
        raise ConfigError("missing required key: problem")
    cfg = ExperimentConfig(problem=dict(d["problem"]))
    if "integrator" in d:
        cfg.integrator = IntegratorSpec.from_dict(d["integrator"])
    if "strategies" in d:
        cfg.strategies = list(d["strategies"])
    if "hessian" in d:
        if d["hessian"] not in ("gauss_newton", "block_sr1"):
            raise ConfigError(f"unknown hessian scheme: {d['hessian']!r}")
        cfg.hessian = d["hessian"]
    for key in ("tol",):
        if key in d:
            cfg.tol = float(d[key])
    for key, cast in (("max_iter", int), ("seed", int), ("reps", int),
                      ("samples", int), ("plant_substeps", int),
                      ("plant_stages", int)):
        if key in d:
            setattr(cfg, key, cast(d[key]))
    if "nm_sweep" in d:
        cfg.nm_sweep = parse_sweep(d["nm_sweep"])
    if "variants" in d:
        cfg.variants = list(d["variants"])
    if "rti_mode" in d:
        if d["rti_mode"] not in ("rk4", "lifted"):
            raise ConfigError(f"unknown rti mode: {d['rti_mode']!r}")
        cfg.rti_mode = d["rti_mode"]
    if "out_dir" in d:
        cfg.out_dir = str(d["out_dir"])
    if "drift_check" in d:
        cfg.drift_check = bool(d["drift_check"])
    return cfg


def revision_string() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"
