"""Run configuration: one structured-text (JSON) file drives every workflow.

The file is a nested key/value document; unknown keys are rejected so typos
fail loudly.  A canonical hash of the parsed content is embedded in every
output artifact, which is what makes reruns byte-comparable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .control import AdmissibleSpec, ParamMap
from .dynamics import Simulator, build_noise, make_initial_coeffs
from .geometry import DomainSpec, GeometryError, build_grid
from .lifting import BoundaryControl, LiftingCache

__all__ = ["ConfigError", "RunConfig", "load_config"]


class ConfigError(ValueError):
    """Invalid run configuration."""


_SECTIONS = {
    "domain", "basis_size", "time", "noise", "control", "initial",
    "monte_carlo", "damping_rate", "simulate", "verify", "optimize", "output",
}

_DEFAULTS = {
    "domain": {
        "length_x": 2.0 * np.pi,
        "modes_x": 4,
        "nodes_y": 24,
        "friction_alpha": 1.0,
        "viscosity": 0.5,
    },
    "basis_size": 12,
    "time": {"t_final": 0.5, "dt": 0.005},
    "noise": {
        "m": 2,
        "additive_scale": 0.05,
        "additive_decay": 1.0,
        "seed": 7,
        "mult_gain": [0.1, 0.1],
    },
    "control": {
        "n_modes": 2,
        "n_times": 2,
        "p": 4.0,
        "radius": 20.0,
        "lambda1": 1e-4,
        "lambda2": 1e-4,
        "coeff_file": None,
        "slots": [["a", "bottom", 1, "re"], ["b", "top", 2, "re"]],
        "theta": [0.0, 0.0],
    },
    "initial": {"kind": "random", "seed": 3, "scale": 0.3, "decay": 1.0},
    "monte_carlo": {"paths": 50, "seed_bank_start": 0},
    "damping_rate": 1.0,
    "simulate": {"store_beta": False, "save_paths": 2, "nonlinear": True, "noise_on": True},
    "verify": {"paths": None, "stability_paths": 24, "stability_scale": 0.5},
    "optimize": {
        "method": "compass",
        "budget": 80,
        "theta_star": [0.6, 0.8],
        "theta0": None,
        "paths": 4,
        "noise_on": False,
        "step0": 0.3,
        "step_min": 1e-4,
    },
    "output": {"dir": "out"},
}


def _merge(defaults, user, path=""):
    if isinstance(defaults, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"section {path or '<root>'} must be a mapping")
        unknown = set(user) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)} in section {path or '<root>'}")
        return {
            key: _merge(defaults[key], user[key], f"{path}.{key}" if path else key)
            if key in user
            else (dict(defaults[key]) if isinstance(defaults[key], dict) else defaults[key])
            for key in defaults
        }
    return user


@dataclass(eq=False)
class RunConfig:
    data: dict

    def __post_init__(self):
        self.validate()

    # -- bookkeeping -------------------------------------------------------

    @property
    def config_hash(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"), default=float)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def validate(self):
        d = self.data
        t = d["time"]
        if t["dt"] <= 0 or t["t_final"] <= 0:
            raise ConfigError("time.dt and time.t_final must be positive")
        n_steps = t["t_final"] / t["dt"]
        if abs(round(n_steps) - n_steps) > 1e-9 or round(n_steps) < 1:
            raise ConfigError("t_final must be a positive integer multiple of dt")
        if d["monte_carlo"]["paths"] < 1:
            raise ConfigError("monte_carlo.paths must be >= 1")
        if d["basis_size"] < 1:
            raise ConfigError("basis_size must be >= 1")
        if d["damping_rate"] <= 0:
            raise ConfigError("damping_rate must be positive")
        if d["control"]["n_modes"] > d["domain"]["modes_x"]:
            raise ConfigError("control.n_modes cannot exceed domain.modes_x")
        try:
            DomainSpec(**d["domain"])
        except GeometryError as exc:
            raise ConfigError(str(exc)) from exc
        m = d["noise"]["m"]
        gains = d["noise"]["mult_gain"]
        if len(gains) not in (1, m):
            raise ConfigError("noise.mult_gain must have length 1 or m")

    # -- builders ----------------------------------------------------------

    def domain_spec(self) -> DomainSpec:
        return DomainSpec(**self.data["domain"])

    def grid(self):
        return build_grid(self.domain_spec())

    def basis(self, grid=None, n=None):
        from .basis import build_eigenbasis

        return build_eigenbasis(
            self.domain_spec(), n or self.data["basis_size"], grid
        )

    def lifting_cache(self, grid) -> LiftingCache:
        c = self.data["control"]
        return LiftingCache(grid, self.domain_spec().friction_alpha, c["n_modes"], c["p"])

    def noise(self, n=None):
        nz = self.data["noise"]
        gains = nz["mult_gain"]
        if len(gains) == 1:
            gains = gains * nz["m"]
        return build_noise(
            n or self.data["basis_size"],
            nz["m"],
            nz["additive_scale"],
            nz["additive_decay"],
            nz["seed"],
            gains,
        )

    def simulator(self, basis, cache, noise) -> Simulator:
        t = self.data["time"]
        return Simulator(
            basis,
            cache,
            noise,
            t_final=t["t_final"],
            dt=t["dt"],
            include_nonlinear=self.data["simulate"]["nonlinear"],
        )

    def initial_coeffs(self, n=None):
        ic = self.data["initial"]
        return make_initial_coeffs(
            n or self.data["basis_size"], ic["kind"], ic["seed"], ic["scale"], ic["decay"]
        )

    def admissible_spec(self) -> AdmissibleSpec:
        c = self.data["control"]
        return AdmissibleSpec(
            n_modes=c["n_modes"],
            n_times=c["n_times"],
            radius=c["radius"],
            lambda1=c["lambda1"],
            lambda2=c["lambda2"],
            p=c["p"],
        )

    def param_map(self) -> ParamMap:
        c = self.data["control"]
        t = self.data["time"]
        t_grid = tuple(np.linspace(0.0, t["t_final"], max(2, c["n_times"])))
        return ParamMap(
            length_x=self.data["domain"]["length_x"],
            n_modes=c["n_modes"],
            t_grid=t_grid,
            slots=tuple((s[0], s[1], int(s[2]), s[3]) for s in c["slots"]),
            p=c["p"],
        )

    def control(self) -> BoundaryControl | None:
        """Control from coeff_file if given, else static slots at theta."""
        c = self.data["control"]
        if c["coeff_file"]:
            return BoundaryControl.load(c["coeff_file"])
        theta = np.asarray(c["theta"], float)
        if not theta.any():
            return None
        pmap = self.param_map()
        if theta.shape != (pmap.dim,):
            raise ConfigError("control.theta length must match control.slots")
        return pmap.control(theta)

    def seed_bank(self, n_paths=None, start=None) -> list:
        mc = self.data["monte_carlo"]
        n = n_paths if n_paths is not None else mc["paths"]
        s0 = start if start is not None else mc["seed_bank_start"]
        return [s0 + i for i in range(n)]


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    unknown = set(user) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown top-level sections {sorted(unknown)}")
    return RunConfig(_merge(_DEFAULTS, user))
