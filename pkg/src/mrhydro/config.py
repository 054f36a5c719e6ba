"""Layered run configuration with fail-closed parsing.

Precedence: built-in defaults, then the config file, then command-line
flags; the last writer wins.  Unknown keys anywhere are rejected with the
offending key named, so a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .controllers import (CONTROLLER_NAMES, DitherConfig, PidConfig,
                          PID_MASTER_DEFAULT, PID_SLAVE_DEFAULT)
from .plant import PlantParams
from .synthesis import CostWeights, NoiseCovariances


class ConfigError(ValueError):
    pass


def _build(cls, data: dict, where: str):
    fields = set(cls.__dataclass_fields__)
    bad = set(data) - fields
    if bad:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(bad)}")
    return cls(**data)


@dataclass
class RunConfig:
    """Everything one command needs, resolved and hashable."""

    plant: dict = field(default_factory=dict)       # nested parameter overrides
    controller: str = "open_loop"
    dither: dict = field(default_factory=dict)
    pid_master: dict = field(default_factory=dict)
    pid_slave: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    noise_cov: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)
    output_dir: str = "."
    seed: int = 0

    def validate(self) -> None:
        if self.controller not in CONTROLLER_NAMES:
            raise ConfigError(
                f"unknown controller '{self.controller}'; choose from {CONTROLLER_NAMES}")
        # building each section performs its own fail-closed check
        self.plant_params()
        self.dither_config()
        self.pid_configs()
        self.cost_weights()
        self.noise_covariances()

    def plant_params(self) -> PlantParams:
        try:
            return PlantParams.from_dict(self.plant)
        except Exception as exc:
            raise ConfigError(str(exc)) from exc

    def dither_config(self) -> DitherConfig:
        return _build(DitherConfig, self.dither, "dither")

    def pid_configs(self) -> tuple[PidConfig, PidConfig]:
        master_kw = {**PID_MASTER_DEFAULT.__dict__, **self.pid_master}
        slave_kw = {**PID_SLAVE_DEFAULT.__dict__, **self.pid_slave}
        bad_m = set(self.pid_master) - set(PidConfig.__dataclass_fields__)
        bad_s = set(self.pid_slave) - set(PidConfig.__dataclass_fields__)
        if bad_m:
            raise ConfigError(f"unknown key(s) in pid_master: {sorted(bad_m)}")
        if bad_s:
            raise ConfigError(f"unknown key(s) in pid_slave: {sorted(bad_s)}")
        return PidConfig(**master_kw), PidConfig(**slave_kw)

    def cost_weights(self) -> CostWeights:
        return _build(CostWeights, self.weights, "weights")

    def noise_covariances(self) -> NoiseCovariances:
        data = dict(self.noise_cov)
        for key in ("r_diag", "d_diag"):
            if key in data:
                data[key] = tuple(data[key])
        return _build(NoiseCovariances, data, "noise_cov")

    def to_dict(self) -> dict:
        return {
            "plant": self.plant, "controller": self.controller,
            "dither": self.dither, "pid_master": self.pid_master,
            "pid_slave": self.pid_slave, "weights": self.weights,
            "noise_cov": self.noise_cov, "scenario": self.scenario,
            "output_dir": self.output_dir, "seed": self.seed,
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_run_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then explicit overrides; all fail-closed."""
    layers: dict = {}
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        layers.update(data)
    if overrides:
        for key, val in overrides.items():
            if isinstance(val, dict) and isinstance(layers.get(key), dict):
                layers[key] = {**layers[key], **val}
            else:
                layers[key] = val
    cfg = _build(RunConfig, layers, "run config")
    cfg.validate()
    return cfg
