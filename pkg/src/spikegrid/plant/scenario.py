"""Scenario files: topology, control settings and a disturbance schedule."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .control import SecondaryParams, VsgParams
from .network import Bus, Converter, GridSource, Line, Topology

DISTURBANCE_KINDS = ("load_step", "grid_sag", "line_outage", "param_mismatch")

DEFAULTS: dict[str, Any] = {
    "name": "unnamed",
    "description": "",
    "dt": 1e-5,
    "duration": 1.0,
    "seed": 0,
    "preroll": 0.6,
    "bases": {"v_base": 1.0, "s_base": 1.0, "f_base": 50.0},
    "topology": {"buses": [], "lines": [], "converters": [], "grids": []},
    "vsg": {},
    "vsg_overrides": {},
    "secondary": {"k_v": 5.0, "k_q": 5.0, "enabled": True},
    "sampling": {"n_w": 4000, "sigma_v": 0.15, "sigma_i": 0.05, "holdoff": 0},
    "codec": {"pwm_period": 1e-4, "enc_period": None, "gate_oversample": 100,
              "v_norm": 1.25, "i_norm": 1.25},
    "snn": {"warmup": 5e-3, "hold_cycles": 1, "residual": True},
    "frt": {"target_limit": True, "runtime_limit": False},
    "stability": {"v_max": 2.0, "sustain": 0.01, "i_trip": None},
    "train": {"sizes": [6, 256, 256, 3], "tau_m": 1e-3, "epochs": 40, "lr": 3e-2,
              "lr_final": 1e-3, "minibatch": 4, "chunk": 2500, "target_mse": 0.01},
    "acceptance": {},
    "schedule": [],
}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    """Interpret an override value the way YAML would."""
    return yaml.safe_load(text)


# sections whose keys are fixed; vsg, topology, acceptance and schedule are free-form
_FIXED_SECTIONS = ("bases", "secondary", "sampling", "codec", "snn", "frt", "stability", "train")


def check_override_keys(overrides: dict[str, Any]) -> None:
    """Reject dotted keys that name no known setting (typos would be silently ignored)."""
    for dotted in overrides:
        parts = dotted.split(".")
        if parts[0] not in DEFAULTS:
            raise ValueError(f"unknown setting {dotted!r}")
        if parts[0] in _FIXED_SECTIONS and (len(parts) != 2 or parts[1] not in DEFAULTS[parts[0]]):
            raise ValueError(f"unknown setting {dotted!r}; {parts[0]} takes "
                             + ", ".join(sorted(DEFAULTS[parts[0]])))


def apply_overrides(cfg: dict, overrides: dict[str, Any]) -> dict:
    """Set dotted keys, e.g. ``{"sampling.n_w": 2000}``; list items by index."""
    cfg = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[int(part)] if isinstance(node, list) else node.setdefault(part, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Disturbance:
    t: float
    kind: str
    target: str
    value: Any = None

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(f"unknown disturbance kind {self.kind!r}")


@dataclass
class Scenario:
    config: dict
    topology: Topology
    schedule: list[Disturbance]
    vsg: list[VsgParams]
    secondary: SecondaryParams

    @property
    def name(self) -> str:
        return self.config["name"]

    @property
    def dt(self) -> float:
        return float(self.config["dt"])

    @property
    def duration(self) -> float:
        return float(self.config["duration"])

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    def section(self, key: str) -> dict:
        return self.config[key]

    def hash(self) -> str:
        return config_hash(self.config)

    def with_overrides(self, overrides: dict[str, Any]) -> "Scenario":
        check_override_keys(overrides)
        return build_scenario(apply_overrides(self.config, overrides))


def build_scenario(raw: dict) -> Scenario:
    cfg = deep_merge(DEFAULTS, raw)
    tp = cfg["topology"]
    topo = Topology(
        buses=[Bus(**b) for b in tp["buses"]],
        lines=[Line(**ln) for ln in tp.get("lines", [])],
        converters=[Converter(**c) for c in tp.get("converters", [])],
        grids=[GridSource(**g) for g in tp.get("grids", [])],
    )
    if not topo.is_connected():
        raise ValueError("topology is not connected")
    vsg = []
    for c in topo.converters:
        params = dict(cfg["vsg"])
        params.update(cfg["vsg_overrides"].get(c.name, {}))
        vsg.append(VsgParams(**params))
    schedule = sorted((Disturbance(**d) for d in cfg["schedule"]), key=lambda d: d.t)
    for d in schedule:
        if not 0 <= d.t <= cfg["duration"]:
            raise ValueError(f"disturbance at t={d.t} outside the run duration")
        if d.kind == "line_outage":
            topo.line(d.target)
        elif d.kind == "load_step":
            topo.bus(d.target)
            if not float(d.value) >= 0:
                raise ValueError("load must be non-negative")
        elif d.kind == "grid_sag":
            if not 0 <= float(d.value) <= 1.5:
                raise ValueError("grid voltage outside [0, 1.5] pu")
    if float(cfg["dt"]) > 1e-5 + 1e-15:
        raise ValueError("dt must not exceed 10 us")
    return Scenario(cfg, topo, schedule, vsg, SecondaryParams(**cfg["secondary"]))


def load_scenario(path: str | Path, overrides: dict[str, Any] | None = None) -> Scenario:
    """Load a scenario YAML file, or a built-in one by name."""
    p = Path(path)
    if p.exists():
        raw = yaml.safe_load(p.read_text())
    else:
        raw = builtin_raw(str(path))
    if overrides:
        check_override_keys(overrides)
        raw = apply_overrides(deep_merge(DEFAULTS, raw), overrides)
    return build_scenario(raw)


def builtin_names() -> list[str]:
    root = resources.files("spikegrid") / "scenarios"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".yaml"))


def builtin_raw(name: str) -> dict:
    root = resources.files("spikegrid") / "scenarios"
    f = root / f"{name}.yaml"
    if not f.is_file():
        raise FileNotFoundError(f"no scenario file or built-in named {name!r}")
    return yaml.safe_load(f.read_text())
