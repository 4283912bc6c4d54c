"""Scenario files: topology, load patterns and per-stage configuration."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from importlib import resources
from typing import Dict, List, Mapping, Optional

import jsonschema

from .controller import ControllerConfig
from .errors import ConfigError, SchemaError
from .exploration import DEFAULT_GRID, ExplorationConfig, check_grid
from .model import Topology, build_topology
from .profiler import BpProfileConfig
from .simulator import ThrottleEvent
from .workload import LoadPattern

SCHEMA_VERSION = 1

_SERVICE_TIME = {
    "type": "object",
    "required": ["kind", "mean_ms"],
    "properties": {
        "kind": {"enum": ["deterministic", "exponential", "lognormal"]},
        "mean_ms": {"type": "number", "exclusiveMinimum": 0},
        "sigma": {"type": "number", "minimum": 0},
    },
}

SCHEMA = {
    "type": "object",
    "required": ["schema_version", "name", "topology"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "bucket_s": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
        "topology": {
            "type": "object",
            "required": ["services", "classes"],
            "properties": {
                "services": {"type": "array", "minItems": 1, "items": {
                    "type": "object",
                    "required": ["id", "service_time"],
                    "properties": {
                        "id": {"type": "string"},
                        "cpu_per_replica": {"type": "integer", "minimum": 1},
                        "mem_per_replica": {"type": "number", "minimum": 0},
                        "worker_threads_per_replica": {"type": "integer", "minimum": 1},
                        "daemon_threads_per_replica": {"type": "integer", "minimum": 1},
                        "service_time": {"type": "object", "additionalProperties": _SERVICE_TIME},
                    },
                }},
                "edges": {"type": "array", "items": {
                    "type": "object",
                    "required": ["parent", "child"],
                    "properties": {
                        "parent": {"type": "string"},
                        "child": {"type": "string"},
                        "kind": {"enum": ["nested_rpc", "event_driven_rpc", "message_queue"]},
                    },
                }},
                "classes": {"type": "array", "minItems": 1, "items": {
                    "type": "object",
                    "required": ["id", "path", "sla"],
                    "properties": {
                        "id": {"type": "string"},
                        "path": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                        "sla": {"type": "object", "required": ["percentile", "latency_ms"]},
                        "priority": {"enum": ["high", "low", None]},
                    },
                }},
            },
        },
        "load": {
            "type": "object",
            "properties": {
                "base": {"type": "object", "required": ["base_rps", "mix"]},
                "patterns": {"type": "object"},
            },
        },
        "grid": {"type": "array", "items": {"type": "number"}},
        "exploration": {"type": "object"},
        "backpressure": {"type": "object"},
        "controller": {"type": "object"},
        "autoscaler": {"type": "object"},
        "run": {"type": "object"},
        "simulate": {"type": "object"},
    },
}


@dataclass
class Scenario:
    raw: dict
    topology: Topology

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def bucket_s(self) -> float:
        return float(self.raw.get("bucket_s", 60.0))

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def grid(self):
        return check_grid(self.raw.get("grid", DEFAULT_GRID), self.topology)

    def pattern(self, kind: str = "constant") -> LoadPattern:
        load = self.raw.get("load")
        if not load or "base" not in load:
            raise ConfigError(f"scenario {self.name!r} defines no load")
        base = dict(load["base"])
        base.setdefault("kind", "constant")
        if kind == "constant":
            return LoadPattern.from_dict({**base, "kind": "constant"})
        extra = load.get("patterns", {}).get(kind)
        if extra is None:
            raise ConfigError(f"scenario {self.name!r} has no {kind!r} load pattern")
        return LoadPattern.from_dict({**base, **extra, "kind": kind})

    def initial_replicas(self) -> Dict[str, int]:
        init = self.raw.get("exploration", {}).get("initial_replicas", {})
        default = int(self.raw.get("exploration", {}).get("default_initial_replicas", 4))
        return {s: int(init.get(s, default)) for s in self.topology.nodes}

    def exploration_config(self, service: str, threshold: float) -> ExplorationConfig:
        ex = self.raw.get("exploration", {})
        return ExplorationConfig(
            initial_replicas=self.initial_replicas()[service],
            backpressure_threshold=threshold,
            step=int(ex.get("step", 1)),
            samples_per_iteration=int(ex.get("samples_per_iteration", 10)),
            sla_violation_threshold=float(ex.get("sla_violation_threshold", 0.10)),
            profiling_time_s=float(ex.get("profiling_time_s", self.bucket_s)),
            seed=int(ex.get("seed", self.seed)),
        )

    def backpressure_entry(self, service: str) -> Mapping:
        return self.raw.get("backpressure", {}).get(service, {})

    def bp_config(self, service: str) -> BpProfileConfig:
        entry = self.backpressure_entry(service)
        if "profile" not in entry:
            raise ConfigError(f"scenario {self.name!r} has no profiling setup for {service!r}")
        return BpProfileConfig.from_dict(entry["profile"])

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig.from_dict(self.raw.get("controller", {}))

    def autoscaler_thresholds(self, policy: str) -> Dict[str, float]:
        return dict(self.raw.get("autoscaler", {}).get(policy, {}))

    def run_settings(self) -> dict:
        return dict(self.raw.get("run", {}))

    def throttles(self) -> List[ThrottleEvent]:
        return [ThrottleEvent(**t) for t in self.raw.get("simulate", {}).get("throttles", [])]

    def with_service_time(self, service: str, models: Mapping[str, Mapping]) -> "Scenario":
        """Copy of the scenario with ``service``'s per-class service-time models replaced."""
        raw = copy.deepcopy(self.raw)
        for s in raw["topology"]["services"]:
            if s["id"] == service:
                s["service_time"].update({c: dict(m) for c, m in models.items()})
                break
        else:
            raise ConfigError(f"unknown service {service!r}")
        return from_dict(raw)


def from_dict(raw: Mapping) -> Scenario:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path)
        raise SchemaError(f"scenario schema violation at {path or '<root>'}: {e.message}") from None
    raw = copy.deepcopy(dict(raw))
    return Scenario(raw, build_topology(raw["topology"]))


def preset_names() -> List[str]:
    folder = resources.files("meshsla") / "presets"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> Scenario:
    res = resources.files("meshsla") / "presets" / f"{name}.json"
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return from_dict(json.loads(res.read_text()))


def load_scenario(ref: str) -> Scenario:
    """Load a scenario from a JSON file path or a bundled preset name."""
    if os.path.exists(ref):
        with open(ref) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{ref}: not valid JSON ({e})") from None
        return from_dict(raw)
    name = ref[len("preset:"):] if ref.startswith("preset:") else ref
    if name.endswith(".json") or os.sep in name:
        raise FileNotFoundError(ref)
    return load_preset(name)
