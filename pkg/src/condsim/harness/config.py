"""Run configuration files.

A config is a YAML mapping::

    schema_version: 1
    experiment: invariance
    master_seed: 12
    env: {kind: static_iid, law: {...}}
    params: {walk_paths: 10000, ...}
    checks: {sigma2_reference: 2.6667, ...}

``params`` override the per-experiment defaults in DEFAULTS; ``checks`` hold
the acceptance thresholds used by ``--check``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from ..env import EnvSpec
from ..errors import ConfigError

SCHEMA_VERSION = 1

EXPERIMENTS = ("invariance", "remark84", "counterexample_lower", "counterexample_upper",
               "env", "simulate", "dual", "kernel", "corrector")

DEFAULTS = {
    "invariance": {
        "walk_mode": "annealed", "walk_paths": 10000, "walk_horizon": 1000.0,
        "n_ladder": [100.0, 1000.0], "ks_time": 1.0,
        "phi_sites": 20000, "phi_envs": 1, "epsilons": [0.1, 0.01], "coarse": 0.1,
        "mart_envs": 10, "mart_paths": 200, "mart_horizon": 50.0, "mart_dt": 0.25,
        "dual_paths": 1000, "dual_horizon": 1000.0, "dual_mode": "annealed",
    },
    "remark84": {
        "phi_sites": 20000, "phi_envs": 1, "epsilons": [0.1, 0.01], "coarse": 0.1,
        "dual_paths": 1000, "dual_horizon": 1000.0, "dual_mode": "annealed",
    },
    "counterexample_lower": {
        "t_ladder": [100.0, 1000.0, 10000.0], "replicates": 20, "paths": 500, "delta": 0.5,
        "beta": 1.0, "r_beta_t": [100.0, 1000.0, 10000.0], "r_beta_paths": 4000,
        "control": {"kind": "static_heavy_inverse", "exponent": 2.0, "floor": 0.1},
    },
    "counterexample_upper": {
        "n_ladder": [100.0, 1000.0, 10000.0], "t": 1.0, "envs": 20, "paths": 2000,
        "quantile": 0.9,
        "control": {"kind": "homogeneous_heavy_upper", "pareto_alpha": 2.0},
    },
    "env": {"x_min": -50, "x_max": 50, "t_min": 0.0, "t_max": 20.0},
    "simulate": {"mode": "quenched", "n_paths": 1000, "sample_times": [10.0, 100.0]},
    "dual": {"mode": "quenched", "n_paths": 1000, "horizon": 100.0, "clock_times": [10.0, 100.0]},
    "kernel": {"source": [1.0, 0], "interval": [0.0, 1.0], "radius": 30, "n_probes": 20,
               "epsilon": 0.1, "phi_shifts": [[0.0, 0], [0.0, 1]]},
    "corrector": {"times_step": 1.0, "t_max": 100.0, "half_width": 10, "n_list": [25.0, 100.0],
                  "epsilons": [0.1, 0.01], "coarse": 0.1},
}


@dataclass
class RunConfig:
    experiment: str
    env: EnvSpec
    master_seed: int = 0
    params: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {self.schema_version}")
        unknown = set(self.params) - set(DEFAULTS[self.experiment])
        if unknown:
            raise ConfigError(f"unknown params for {self.experiment}: {sorted(unknown)}")

    def param(self, name: str):
        if name in self.params:
            return self.params[name]
        return copy.deepcopy(DEFAULTS[self.experiment][name])

    def resolved_params(self) -> dict:
        out = copy.deepcopy(DEFAULTS[self.experiment])
        out.update(copy.deepcopy(self.params))
        return out

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        return RunConfig(self.experiment, self.env, int(seed), dict(self.params), dict(self.checks),
                         dict(self.outputs), self.schema_version)

    def with_experiment(self, experiment: str) -> "RunConfig":
        params = {k: v for k, v in self.params.items() if k in DEFAULTS[experiment]}
        return RunConfig(experiment, self.env, self.master_seed, params, dict(self.checks),
                         dict(self.outputs), self.schema_version)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "experiment": self.experiment,
                "master_seed": int(self.master_seed), "env": self.env.to_dict(),
                "params": copy.deepcopy(self.params), "checks": copy.deepcopy(self.checks),
                "outputs": copy.deepcopy(self.outputs)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        extra = set(d) - {"schema_version", "experiment", "master_seed", "env", "params", "checks",
                          "outputs"}
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        for key in ("experiment", "env"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        seed = d.get("master_seed", 0)
        if not isinstance(seed, int) or seed < 0 or seed >= 2 ** 64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        return cls(experiment=d["experiment"], env=EnvSpec.from_dict(d["env"]), master_seed=seed,
                   params=dict(d.get("params") or {}), checks=dict(d.get("checks") or {}),
                   outputs=dict(d.get("outputs") or {}),
                   schema_version=d.get("schema_version", SCHEMA_VERSION))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        return cls.loads(p.read_text())

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
