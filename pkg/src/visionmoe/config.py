"""Versioned JSON run configuration.

A run is fully described by one JSON document::

    {"version": 1, "preset": "micro-vit", "arch": {}, "placement": "last2",
     "moe": {"num_experts": 4, "top_k": 1, "mlp_ratio": 2.0,
             "gate": {"kind": "linear", "proj_dim": null, "temperature": 1.0},
             "capacity_factor": null, "inner_skip": true},
     "gate_skew": 0.0, "seed": 0,
     "data": {"num_classes": 16, "per_class": 200, "test_per_class": 64, "noise": 0.1, "seed": 0},
     "train": {...TrainConfig fields...}}

Unknown keys anywhere are errors. ``arch`` holds overrides of the preset's
fields. The resolved document (all defaults filled in, ``moe`` null for
dense runs) is what gets written back and hashed.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbones import PLACEMENTS, get_preset, model_spec
from .moe_layer import MoELayerConfig
from .routing import CapacityConfig, GateKind
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        where = f" in '{section}'" if section else ""
        raise ConfigError(f"unknown config key(s){where}: {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")


@dataclass
class DataConfig:
    num_classes: int = 16
    per_class: int = 200
    test_per_class: int = 64
    noise: float = 0.1
    seed: int = 0


_MOE_DEFAULTS = {"num_experts": 4, "top_k": 1, "mlp_ratio": 4.0,
                 "gate": {"kind": "linear", "proj_dim": None, "temperature": 1.0},
                 "capacity_factor": None, "inner_skip": True}


@dataclass
class RunConfig:
    preset: str = "micro-vit"
    arch: dict = field(default_factory=dict)
    placement: str = "none"
    moe: dict | None = None
    gate_skew: float = 0.0
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    version: int = SCHEMA_VERSION

    # -- construction -------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        top = {f.name for f in dataclasses.fields(cls)}
        _check_keys("", d, top)
        version = d.get("version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {version}; this build reads version {SCHEMA_VERSION}")
        data = d.get("data") or {}
        _check_keys("data", data, {f.name for f in dataclasses.fields(DataConfig)})
        train = dict(d.get("train") or {})
        _check_keys("train", train, {f.name for f in dataclasses.fields(TrainConfig)})
        moe = d.get("moe")
        if moe is not None:
            _check_keys("moe", moe, _MOE_DEFAULTS)
            if "gate" in moe:
                _check_keys("moe.gate", moe["gate"], _MOE_DEFAULTS["gate"])
        arch = dict(d.get("arch") or {})
        seed = d.get("seed", train.get("seed", 0))
        if train.setdefault("seed", seed) != seed:
            raise ConfigError(f"train.seed ({train['seed']}) disagrees with the run seed ({seed})")
        try:
            cfg = cls(preset=d.get("preset", "micro-vit"), arch=arch, placement=d.get("placement", "none"),
                      moe=copy.deepcopy(moe), gate_skew=float(d.get("gate_skew", 0.0)), seed=int(seed),
                      data=DataConfig(**data), train=TrainConfig(**train), version=version)
            cfg.validate()
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc).strip("'\"")) from exc
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            with open(path) as f:
                doc = json.load(f)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    # -- resolution ----------------------------------------------------
    def arch_spec(self):
        fields = {f.name for f in dataclasses.fields(type(get_preset(self.preset)))}
        _check_keys("arch", self.arch, fields)
        overrides = {k: tuple(v) if isinstance(v, list) else v for k, v in self.arch.items()}
        return get_preset(self.preset, **overrides)

    def moe_config(self) -> MoELayerConfig | None:
        if self.placement == "none":
            return None
        m = self.resolved_moe()
        return MoELayerConfig(num_experts=m["num_experts"], top_k=m["top_k"], gate=GateKind(**m["gate"]),
                              mlp_ratio=m["mlp_ratio"], capacity=CapacityConfig(m["capacity_factor"]),
                              inner_skip=m["inner_skip"])

    def resolved_moe(self) -> dict | None:
        if self.placement == "none":
            return None
        m = copy.deepcopy(_MOE_DEFAULTS)
        given = copy.deepcopy(self.moe or {})
        m["gate"].update(given.pop("gate", {}) or {})
        m.update(given)
        return m

    def validate(self) -> None:
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        model_spec(self.arch_spec(), self.placement, self.moe_config())

    def model_spec(self):
        return model_spec(self.arch_spec(), self.placement, self.moe_config())

    def to_dict(self) -> dict:
        """Resolved document: every default filled, dense runs carry ``moe: null``."""
        return {
            "version": self.version,
            "preset": self.preset,
            "arch": dict(self.arch),
            "placement": self.placement,
            "moe": self.resolved_moe(),
            "gate_skew": self.gate_skew if self.placement != "none" else 0.0,
            "seed": self.seed,
            "data": dataclasses.asdict(self.data),
            "train": self.train.to_dict(),
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def tag(self) -> str:
        if self.placement == "none":
            return f"{self.preset}"
        m = self.resolved_moe()
        tag = f"{self.preset}-{m['num_experts']}-{self.placement}-k{m['top_k']}-r{m['mlp_ratio']:g}"
        if m["gate"]["kind"] != "linear":
            tag += f"-{m['gate']['kind']}"
        return tag

    def with_values(self, updates: dict) -> RunConfig:
        """Copy with dotted keys (e.g. ``moe.num_experts``) set; all applied before validation."""
        doc = {"version": self.version, "preset": self.preset, "arch": dict(self.arch),
               "placement": self.placement, "moe": copy.deepcopy(self.moe), "gate_skew": self.gate_skew,
               "seed": self.seed, "data": dataclasses.asdict(self.data), "train": self.train.to_dict()}
        for dotted, value in updates.items():
            parts = dotted.split(".")
            node = doc
            for p in parts[:-1]:
                if node.get(p) is None:
                    node[p] = {}
                node = node[p]
            node[parts[-1]] = value
            if dotted == "seed":
                doc["train"]["seed"] = value
        return RunConfig.from_dict(doc)
