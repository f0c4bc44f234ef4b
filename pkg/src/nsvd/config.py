"""Run configuration: an INI document with a fixed schema.

Every key has a default, so an empty file is a valid desk-scale config.
Unknown sections or keys, unparsable values and values violating the model
invariants raise ConfigError.  Overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path

from .control import BoxConstraints, OptimizerConfig
from .fields import ModelParams, PeriodicGrid
from .state import SCHEMES, TimeGrid

__all__ = ["ConfigError", "RunConfig", "load_config", "SCHEMA", "default_config_text"]


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


IC_KINDS = ("zero", "taylor-green", "random-divfree", "file")
TARGET_KINDS = ("zero", "file", "inverse-crime")
CONTROL_KINDS = ("zero", "random", "file")

# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "grid": {"n": (int, 16), "L": (float, 2.0 * math.pi), "dealias": (float, 2.0 / 3.0)},
    "time": {"T": (float, 1.0), "steps": (int, 50), "scheme": (str, "imex-euler")},
    "model": {
        "mu": (float, 0.05),
        "nu": (float, 0.05),
        "alpha": (float, 0.1),
        "beta": (float, 0.5),
        "r": (float, 3.0),
    },
    "initial": {"kind": (str, "random-divfree"), "amplitude": (float, 1.0), "path": (str, "")},
    "control": {"kind": (str, "zero"), "amplitude": (float, 0.5), "path": (str, "")},
    "cost": {
        "kappa": (float, 1.0),
        "lambda": (float, 0.01),
        "target": (str, "zero"),
        "target_path": (str, ""),
        "target_amplitude": (float, 0.5),
    },
    "box": {"u_min": (float, -0.5), "u_max": (float, 0.5)},
    "optimizer": {
        "max_iters": (int, 100),
        "step0": (float, 1.0),
        "armijo_c": (float, 1e-4),
        "shrink": (float, 0.5),
        "tol_vi": (float, 1e-8),
        "max_shrinks": (int, 30),
        "bb_steps": (_bool, True),
        "soc_samples": (int, 0),
        "bang_bang_threshold": (float, 1e-2),
    },
    "constants": {"C": (str, ""), "C_r": (str, ""), "C_hat": (str, "")},
    "gradient_check": {"eps": (str, "1e-1,1e-2,1e-3,1e-4"), "direction_amplitude": (float, 1.0)},
    "verify": {"damping_points": (int, 1000), "duality_instances": (int, 4)},
    "output": {"dir": (str, "runs"), "snapshot_every": (int, 10), "checkpoint_every": (int, 0)},
    "run": {"seed": (int, 0), "blowup_bound": (float, 1e8)},
}


def default_config_text() -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default) in keys.items():
            text = "true" if default is True else "false" if default is False else str(default)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, item):
        section, key = item
        return self.values[section][key]

    @property
    def grid(self) -> PeriodicGrid:
        return PeriodicGrid(self["grid", "n"], self["grid", "L"], self["grid", "dealias"])

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self["time", "steps"], self["time", "T"])

    @property
    def scheme(self) -> str:
        return self["time", "scheme"]

    @property
    def params(self) -> ModelParams:
        m = self.values["model"]
        return ModelParams(m["mu"], m["nu"], m["alpha"], m["beta"], m["r"], self["time", "T"])

    @property
    def box(self) -> BoxConstraints:
        return BoxConstraints(self["box", "u_min"], self["box", "u_max"])

    @property
    def optimizer(self) -> OptimizerConfig:
        o = self.values["optimizer"]
        return OptimizerConfig(
            max_iters=o["max_iters"],
            step0=o["step0"],
            armijo_c=o["armijo_c"],
            shrink=o["shrink"],
            tol_vi=o["tol_vi"],
            max_shrinks=o["max_shrinks"],
            bb_steps=o["bb_steps"],
        )

    @property
    def eps_list(self) -> tuple[float, ...]:
        return tuple(float(v) for v in self["gradient_check", "eps"].split(","))

    def constant(self, name: str) -> float | None:
        text = self["constants", name].strip()
        return float(text) if text else None

    def with_seed(self, seed: int) -> "RunConfig":
        values = {s: dict(k) for s, k in self.values.items()}
        values["run"]["seed"] = int(seed)
        return RunConfig(values)


def _validate(cfg: RunConfig) -> None:
    """Build every derived object once so module-level invariants are checked at load time."""
    try:
        cfg.grid
        cfg.time_grid
        cfg.params
        cfg.box
        cfg.optimizer
        eps = cfg.eps_list
        for name in ("C", "C_r", "C_hat"):
            cfg.constant(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.scheme not in SCHEMES:
        raise ConfigError(f"time.scheme must be one of {SCHEMES}, got {cfg.scheme!r}")
    if any(not e > 0 for e in eps):
        raise ConfigError("gradient_check.eps entries must be positive")
    checks = [
        ("initial", "kind", IC_KINDS),
        ("cost", "target", TARGET_KINDS),
        ("control", "kind", CONTROL_KINDS),
    ]
    for section, key, allowed in checks:
        if cfg[section, key] not in allowed:
            raise ConfigError(f"{section}.{key} must be one of {allowed}, got {cfg[section, key]!r}")
    for section, key, path_key in [("initial", "kind", "path"), ("control", "kind", "path"), ("cost", "target", "target_path")]:
        if cfg[section, key] == "file" and not cfg[section, path_key]:
            raise ConfigError(f"{section}.{path_key} is required when {section}.{key} = file")
    if cfg["cost", "kappa"] < 0 or cfg["cost", "lambda"] < 0:
        raise ConfigError("cost.kappa and cost.lambda must be non-negative")
    if cfg["cost", "kappa"] == 0 and cfg["cost", "lambda"] == 0:
        raise ConfigError("cost.kappa and cost.lambda cannot both be zero")
    for section, key in [("output", "snapshot_every"), ("output", "checkpoint_every"), ("optimizer", "soc_samples")]:
        if cfg[section, key] < 0:
            raise ConfigError(f"{section}.{key} must be non-negative")
    if cfg["optimizer", "bang_bang_threshold"] < 0:
        raise ConfigError("optimizer.bang_bang_threshold must be non-negative")
    if cfg["run", "seed"] < 0:
        raise ConfigError("run.seed must be non-negative")
    if not cfg["run", "blowup_bound"] > 0:
        raise ConfigError("run.blowup_bound must be positive")


def _parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, value = text.split("=", 1)
    if "." not in lhs:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    section, key = lhs.strip().split(".", 1)
    return section, key, value.strip()


def load_config(path=None, overrides=(), text: str | None = None) -> RunConfig:
    """Read, override and validate a config; raises ConfigError on any problem."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file {path} not found")
            parser.read_string(p.read_text(), source=str(p))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    raw: dict[str, dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
    for item in overrides:
        section, key, value = _parse_override(item)
        raw.setdefault(section, {})[key] = value

    values = {}
    for section, entries in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in entries:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default) in keys.items():
            if key in raw.get(section, {}):
                text_value = raw[section][key]
                try:
                    values[section][key] = conv(text_value)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: cannot parse {text_value!r}") from exc
            else:
                values[section][key] = default
    cfg = RunConfig(values)
    _validate(cfg)
    return cfg
