"""Run configuration: a YAML document covering every tunable constant.

Example::

    hand: null                 # built-in hand when null, else a hand YAML path
    objects: [primitive:sphere, meshes/mug.obj]
    scales: [0.06, 0.1]
    batch_size: 64
    seeds: [0]
    output: grasps.jsonl
    synthesis:
      beta: 1.0
      learning_rate: {rotation: 0.1, translation: 0.05, joints: 0.2}
      stages:
        - {name: coarse, iterations: 300, contact_mode: spheres, distance_offset: 0.01,
           energy_weights: {grasp: 200, distance: 2000, limit: 10, self_pen: 1000, inter_pen: 1000}}
    qp: {rho: 0.1, sigma: 1.0e-6, alpha: 1.6, max_iters: 25, eps_abs: 1.0e-5}
    evaluation: {mass_kg: 0.03, residual_tol: 1.0e-3}

Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .assets import PRIMITIVES, ObjectModel, load_object, primitive_object
from .evaluation import EvalConfig
from .pipeline import StageConfig, SynthesisConfig, default_stages
from .qpsolve import AdmmSettings

PRIMITIVE_PREFIX = "primitive:"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    hand: str | None = None
    objects: list = field(default_factory=lambda: [PRIMITIVE_PREFIX + "sphere"])
    scales: list = field(default_factory=lambda: [0.1])
    batch_size: int = 64
    seeds: list = field(default_factory=lambda: [0])
    output: str = "grasps.jsonl"
    workers: int = 1
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    def validate(self, check_files: bool = True) -> "RunConfig":
        if not self.objects:
            raise ConfigError("objects: need at least one object")
        if not self.scales or any(not (s > 0) for s in self.scales):
            raise ConfigError("scales: every scale must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        if check_files:
            if self.hand is not None and not self.resolve(self.hand).exists():
                raise ConfigError(f"hand: file not found: {self.resolve(self.hand)}")
            for o in self.objects:
                if o.startswith(PRIMITIVE_PREFIX):
                    if o[len(PRIMITIVE_PREFIX):] not in PRIMITIVES + ("dumbbell",):
                        raise ConfigError(f"objects: unknown primitive {o!r}")
                elif not self.resolve(o).exists():
                    raise ConfigError(f"objects: file not found: {self.resolve(o)}")
        return self

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def load_hand(self):
        from .hand import builtin_hand, load_hand
        return builtin_hand() if self.hand is None else load_hand(self.resolve(self.hand))

    def load_object(self, source: str, scale: float) -> ObjectModel:
        if source.startswith(PRIMITIVE_PREFIX):
            return primitive_object(source[len(PRIMITIVE_PREFIX):], scale)
        return load_object(self.resolve(source), scale)

    def to_dict(self) -> dict:
        syn = dataclasses.asdict(self.synthesis)
        qp = syn.pop("qp")
        return {
            "hand": self.hand, "objects": list(self.objects), "scales": list(self.scales),
            "batch_size": self.batch_size, "seeds": list(self.seeds), "output": self.output,
            "workers": self.workers, "synthesis": syn, "qp": qp,
            "evaluation": dataclasses.asdict(self.evaluation),
        }


def _build(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _merge_dict(base: dict, upd: dict) -> dict:
    out = dict(base)
    out.update(upd)
    return out


def config_from_dict(data: dict, base_dir: Path | None = None) -> RunConfig:
    data = copy.deepcopy(data or {})
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    syn = data.pop("synthesis", {}) or {}
    qp = data.pop("qp", {}) or {}
    ev = data.pop("evaluation", {}) or {}
    top = {f.name for f in dataclasses.fields(RunConfig)} - {"synthesis", "evaluation", "base_dir"}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    defaults = SynthesisConfig()
    if "stages" in syn:
        syn["stages"] = [_build(StageConfig, s, f"synthesis.stages[{i}]") for i, s in enumerate(syn["stages"])]
    for k in ("learning_rate", "max_step"):
        if k in syn:
            syn[k] = _merge_dict(getattr(defaults, k), syn[k])
    syn["qp"] = _build(AdmmSettings, _merge_dict(dataclasses.asdict(defaults.qp), qp), "qp")
    cfg = RunConfig(**data, synthesis=_build(SynthesisConfig, syn, "synthesis"),
                    evaluation=_build(EvalConfig, ev, "evaluation"),
                    base_dir=Path(base_dir) if base_dir else Path.cwd())
    for k in ("scales", "seeds", "objects"):
        if not isinstance(getattr(cfg, k), list):
            setattr(cfg, k, [getattr(cfg, k)])
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(data, path.parent)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``dotted.key=value`` overrides (values parsed as YAML)."""
    if not overrides:
        return cfg
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            elif p in node and isinstance(node[p], (dict, list)):
                node = node[p]
            else:
                raise ConfigError(f"override {key!r}: no section {p!r}")
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            if last not in node:
                raise ConfigError(f"override {key!r}: unknown key {last!r}")
            node[last] = value
    return config_from_dict(d, cfg.base_dir)


def default_config() -> RunConfig:
    return RunConfig(synthesis=SynthesisConfig(stages=default_stages()))
