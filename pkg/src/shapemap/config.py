"""Flat key=value run configuration with dotted section prefixes.

Example::

    experiment = transmission
    model.alpha_in = 10
    model.beta = 100
    asm.tau = 1e-2
    mesh.generator = disk_in_square
    mesh.radius = 0.2
    mesh.resolution = 12
    output.dir = out

Lines starting with ``#`` are comments.  Unknown keys are rejected so typos
fail loudly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError

__all__ = ["RunConfig", "parse_config_text", "load_config", "apply_overrides"]

_DEFAULTS = {
    "experiment": "transmission",
    "model.alpha_in": 10.0,
    "model.alpha_out": 1.0,
    "model.f_in": 10.0,
    "model.f_out": 1.0,
    "model.beta": 100.0,
    "model.reynolds": 100.0,
    "model.inlet_scale": 1.0,
    "asm.tau": 1e-2,
    "asm.memory": 5,
    "asm.k_max": 25,
    "coarse.rtol": 1e-2,
    "coarse.max_iter": 100,
    "extraction.rtol": "",
    "elasticity.mu": 1.0,
    "elasticity.lambda": 0.0,
    "elasticity.delta": 0.0,
    "mesh.path": "",
    "mesh.generator": "",
    "mesh.radius": 0.2,
    "mesh.resolution": 12,
    "mesh.fixed_markers": "",
    "target.center_x": 0.5,
    "target.center_y": 0.5,
    "target.semi_major": 0.3,
    "target.semi_minor": 0.15,
    "target.angle_deg": 30.0,
    "target.resolution": "",
    "flow.inlet_marker": 1,
    "flow.wall_markers": "2,6",
    "flow.outlet_markers": "3,4,5",
    "backend.kind": "internal",
    "backend.dir": "",
    "backend.timeout_s": 600.0,
    "output.dir": "out",
}

_INT_KEYS = {
    "asm.memory",
    "asm.k_max",
    "coarse.max_iter",
    "mesh.resolution",
    "flow.inlet_marker",
}
_STR_KEYS = {
    "experiment",
    "mesh.path",
    "mesh.generator",
    "mesh.fixed_markers",
    "flow.wall_markers",
    "flow.outlet_markers",
    "backend.kind",
    "backend.dir",
    "output.dir",
    "extraction.rtol",
    "target.resolution",
}


@dataclass
class RunConfig:
    """Validated run configuration as a flat mapping."""

    values: dict = field(default_factory=lambda: dict(_DEFAULTS))

    def set(self, key, raw):
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        if key in _STR_KEYS:
            self.values[key] = str(raw).strip()
        elif key in _INT_KEYS:
            try:
                self.values[key] = int(str(raw).strip())
            except ValueError as exc:
                raise ConfigError(f"key {key!r} needs an integer") from exc
        else:
            try:
                self.values[key] = float(str(raw).strip())
            except ValueError as exc:
                raise ConfigError(f"key {key!r} needs a number") from exc
        return self

    def __getitem__(self, key):
        return self.values[key]

    def marker_list(self, key):
        raw = self.values[key]
        if not raw:
            return ()
        try:
            return tuple(int(tok) for tok in str(raw).split(",") if tok.strip())
        except ValueError as exc:
            raise ConfigError(f"key {key!r} needs comma-separated integers") from exc

    def validate(self):
        v = self.values
        if v["experiment"] not in ("transmission", "flow"):
            raise ConfigError("experiment must be 'transmission' or 'flow'")
        for key in ("asm.tau", "coarse.rtol"):
            if not 0.0 < v[key] < 1.0:
                raise ConfigError(f"{key} must lie in (0, 1)")
        if v["extraction.rtol"]:
            if not 0.0 < float(v["extraction.rtol"]) < 1.0:
                raise ConfigError("extraction.rtol must lie in (0, 1)")
        if v["asm.k_max"] < 1:
            raise ConfigError("asm.k_max must be at least 1")
        if v["mesh.path"] and not os.path.exists(v["mesh.path"]):
            raise ConfigError(f"mesh path {v['mesh.path']!r} does not exist")
        if not v["mesh.path"] and not v["mesh.generator"]:
            if v["experiment"] == "transmission":
                self.values["mesh.generator"] = "disk_in_square"
            else:
                raise ConfigError("flow experiments need mesh.path")
        if v["backend.kind"] not in ("internal", "external"):
            raise ConfigError("backend.kind must be 'internal' or 'external'")
        if v["backend.kind"] == "external" and not v["backend.dir"]:
            raise ConfigError("external backend needs backend.dir")
        return self

    @property
    def ellipse_angle(self):
        return math.radians(self.values["target.angle_deg"])


def parse_config_text(text):
    cfg = RunConfig()
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {i}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        cfg.set(key.strip(), raw)
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config_text(text)


def apply_overrides(cfg, overrides):
    """Apply ``key=value`` strings from the command line."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        cfg.set(key.strip(), raw)
    return cfg
