"""Experiment configuration: a JSON tree with dotted-key command-line overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

from .admm import AdmmConfig
from .baselines import BaselineConfig
from .errors import ConfigError
from .nn import Architecture
from .projections import Kind, SparsityConstraint, budget_from_fraction


@dataclass
class DataConfig:
    path: str = "data/mnist"
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    subset_seed: int = 0


@dataclass
class TrainConfig:
    """Dense (unconstrained) training from scratch."""

    epochs: int = 6
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 64
    lr_decay_epoch: Optional[int] = 4
    lr_decay: float = 0.1


@dataclass
class CompareConfig:
    kind: str = "irregular"
    layers: List[str] = field(default_factory=lambda: ["conv1", "conv2"])
    sparsities: List[float] = field(default_factory=lambda: [0.75, 0.9])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    methods: List[str] = field(default_factory=lambda: [
        "admm", "iterative_magnitude", "static_regularize", "projected_gd"])
    # static regularisation sweep; the best (norm, lambda) per cell is reported
    norms: List[str] = field(default_factory=lambda: ["l1", "l2"])
    lambdas: List[float] = field(default_factory=lambda: [1e-5, 1e-4, 1e-3])


@dataclass
class BisectConfig:
    layer: str = "conv2"
    kind: str = "shape"
    tolerance: float = 0.0
    lo: float = 0.0
    hi: float = 0.95
    max_probes: int = 6
    # shortened ADMM schedule used by every probe
    admm_iters: int = 4
    epochs_per_iter: int = 1
    retrain_epochs: int = 2


@dataclass
class BenchConfig:
    cases: Optional[List[str]] = None  # names from bench.DEFAULT_CASES; None = all
    levels: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 0.9])
    kinds: List[str] = field(default_factory=lambda: ["column", "row"])
    reps: int = 21
    warmup: int = 3
    threads: int = 1


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    arch: Architecture = field(default_factory=Architecture)
    train: TrainConfig = field(default_factory=TrainConfig)
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    # per-layer entries {layer, kind, sparsity | fraction_kept | budget}
    constraints: List[Dict] = field(default_factory=list)
    compare: CompareConfig = field(default_factory=CompareConfig)
    bisect: BisectConfig = field(default_factory=BisectConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self):
        d = asdict(self)
        d["baseline"] = self.baseline.to_dict()
        return d

    def layer_constraints(self, net_shapes=None):
        """Resolve the constraint schedule to ``{layer: SparsityConstraint}``."""
        shapes = net_shapes or self.arch.shapes()
        return {e["layer"]: resolve_constraint(e, shapes) for e in self.constraints}

    def validate(self, need_data=True):
        shapes = self.arch.shapes()
        for entry in self.constraints:
            resolve_constraint(entry, shapes)
        conv = set(self.arch.conv_names)
        for layer in self.compare.layers + [self.bisect.layer]:
            if layer not in conv:
                raise ConfigError(f"unknown conv layer {layer!r}")
        for s in self.compare.sparsities:
            if not 0 <= s < 1:
                raise ConfigError(f"sparsity must lie in [0, 1), got {s}")
        if need_data and not Path(self.data.path).exists():
            raise ConfigError(f"dataset path {self.data.path!r} does not exist")
        return self


def resolve_constraint(entry, shapes):
    """Build a :class:`SparsityConstraint` from one schedule entry."""
    layer = entry.get("layer")
    key = f"{layer}.weight"
    if key not in shapes or len(shapes[key]) != 4:
        raise ConfigError(f"constraint names unknown conv layer {layer!r}")
    dims = shapes[key]
    kind = entry.get("kind")
    if kind == "composite":
        members = [resolve_constraint(dict(m, layer=layer), shapes) for m in entry["members"]]
        return SparsityConstraint.composite(*members)
    try:
        kind = Kind(kind)
    except ValueError:
        raise ConfigError(f"unknown constraint kind {kind!r}") from None
    given = [k for k in ("budget", "fraction_kept", "sparsity") if k in entry]
    if len(given) != 1:
        raise ConfigError(f"{layer}: give exactly one of budget / fraction_kept / sparsity")
    if "budget" in entry:
        budget = int(entry["budget"])
    else:
        frac = entry["fraction_kept"] if "fraction_kept" in entry else 1.0 - entry["sparsity"]
        budget = budget_from_fraction(frac, dims, kind)
    c = SparsityConstraint(kind, budget)
    try:
        c.validate(dims)
    except ValueError as e:
        raise ConfigError(f"{layer}: {e}") from e
    return c


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


_SECTIONS = {
    "data": DataConfig, "arch": Architecture, "train": TrainConfig, "admm": AdmmConfig,
    "baseline": BaselineConfig, "compare": CompareConfig, "bisect": BisectConfig,
    "bench": BenchConfig,
}


def config_from_dict(d):
    d = copy.deepcopy(d)
    top = {}
    for key, value in d.items():
        if key in _SECTIONS:
            top[key] = _build(_SECTIONS[key], value, key)
        elif key in ("name", "seed", "output_dir", "constraints"):
            top[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return ExperimentConfig(**top)


def parse_override(text):
    """``"a.b=value"`` -> (["a", "b"], value); the value is parsed as JSON if possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(d, overrides):
    d = copy.deepcopy(d)
    for text in overrides:
        path, value = parse_override(text)
        node = d
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-object at {text!r}")
        node[path[-1]] = value
    return d


def load_config(path=None, overrides=()):
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return config_from_dict(apply_overrides(d, overrides))
