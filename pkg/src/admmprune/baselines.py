"""Comparison pruning methods sharing the constraint sets of the ADMM engine.

* iterative magnitude pruning: project to a growing budget, mask, retrain;
* static regularisation: train with a fixed-target L1 / L2 / group-L2
  penalty, then project, mask and retrain;
* projected gradient descent: hard projection every ``period`` SGD steps,
  then project, mask and retrain.

Every method ends in :func:`admmprune.admm.masked_map_and_retrain` or an
equivalent masked stage, so its output is exactly feasible.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .admm import AdmmConfig, _check_constraints, masked_map_and_retrain, project_network, retrain_masked
from .errors import ConfigError
from .projections import Kind, SparsityConstraint, check_constraint, group_count, mask_from

METHODS = ("iterative_magnitude", "static_regularize", "projected_gd")
NORMS = ("l1", "l2", "group_l2")


@dataclass
class BaselineConfig:
    method: str = "iterative_magnitude"
    # iterative magnitude: increasing fractions of the final pruned count
    schedule: Sequence[float] = (0.5, 0.75, 0.9, 1.0)
    epochs_per_stage: int = 3
    # static regularisation
    lam: float = 1e-4
    norm: str = "l1"
    reg_epochs: int = 8
    # projected gradient descent; None means "never during training"
    period: Optional[int] = 1
    pgd_epochs: int = 8
    # shared
    retrain_epochs: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64

    def __post_init__(self):
        self.schedule = tuple(float(s) for s in self.schedule)
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown baseline method {self.method!r}")
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.period is not None and self.period < 1:
            raise ConfigError("projection period must be >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.batch_size < 1:
            raise ConfigError("invalid optimizer settings")
        check_schedule(self.schedule)

    def total_epochs(self):
        if self.method == "iterative_magnitude":
            return len(self.schedule) * self.epochs_per_stage
        if self.method == "static_regularize":
            return self.reg_epochs + self.retrain_epochs
        return self.pgd_epochs + self.retrain_epochs

    def to_dict(self):
        d = asdict(self)
        d["schedule"] = list(self.schedule)
        return d

    def retrain_config(self):
        return AdmmConfig(retrain_epochs=self.retrain_epochs, lr=self.lr,
                          momentum=self.momentum, batch_size=self.batch_size)


def check_schedule(schedule):
    if not schedule:
        raise ConfigError("empty pruning schedule")
    if any(not 0 < s <= 1 for s in schedule):
        raise ConfigError("schedule fractions must lie in (0, 1]")
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ConfigError("schedule fractions must be strictly increasing")
    if schedule[-1] != 1.0:
        raise ConfigError("schedule must end at the target budget (1.0)")


def stage_constraint(c, dims, fraction):
    """Constraint pruning ``fraction`` of the groups that ``c`` prunes in total."""
    if c.kind is Kind.COMPOSITE:
        return SparsityConstraint.composite(*(stage_constraint(m, dims, fraction) for m in c.members))
    n = group_count(dims, c.kind)
    pruned = int(math.floor(fraction * (n - c.budget) + 0.5))
    return SparsityConstraint(c.kind, n - pruned)


def iterative_magnitude_prune(net, constraints, train, cfg, rng, on_stage=None):
    """Prune to each stage budget, then retrain with the stage mask."""
    check_schedule(cfg.schedule)
    _check_constraints(net, constraints)
    for i, frac in enumerate(cfg.schedule):
        stage = {layer: stage_constraint(c, net.weight(layer).shape, frac)
                 for layer, c in constraints.items()}
        project_network(net, stage)
        masks = {layer: mask_from(net.weight(layer)) for layer in stage}
        retrain_masked(net, masks, train, cfg.epochs_per_stage, cfg.lr, cfg.momentum,
                       cfg.batch_size, rng)
        if on_stage is not None:
            on_stage(i, net, stage)
    for layer, c in constraints.items():
        if not check_constraint(net.weight(layer), c):
            raise RuntimeError(f"{layer} violates its constraint after pruning")
    return net


# --- fixed-target penalties -------------------------------------------------

def _group_axes(kind):
    return {Kind.FILTER: (1, 2, 3), Kind.CHANNEL: (0, 2, 3), Kind.SHAPE: (0,)}[kind]


def penalty(w, lam, norm, c=None):
    """Value and gradient of a fixed-target sparsity penalty on ``w``.

    ``l1``: ``lam * sum|w|``; ``l2``: ``lam * sum w^2``; ``group_l2``:
    ``lam * sum_g ||w_g||_F`` over the groups of constraint ``c`` (single
    elements for irregular constraints, every member for composites).
    """
    if norm == "l1":
        return lam * float(np.abs(w).sum()), lam * np.sign(w)
    if norm == "l2":
        return lam * float(np.sum(w * w)), 2.0 * lam * w
    if norm != "group_l2":
        raise ConfigError(f"unknown norm {norm!r}")
    if c is None:
        raise ConfigError("group_l2 needs a constraint to define its groups")
    if c.kind is Kind.IRREGULAR:
        return penalty(w, lam, "l1")
    if c.kind is Kind.COMPOSITE:
        value, grad = 0.0, np.zeros_like(w)
        for m in c.members:
            v, g = penalty(w, lam, norm, m)
            value += v
            grad += g
        return value, grad
    norms = np.sqrt(np.sum(w * w, axis=_group_axes(c.kind), keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    grad = np.where(norms > 0, lam * w / safe, 0.0)
    return lam * float(norms.sum()), grad


def static_regularize_then_prune(net, constraints, train, cfg, rng):
    _check_constraints(net, constraints)
    opt = nn.SGD(cfg.lr, cfg.momentum)

    def extra(n):
        return {f"{layer}.weight": penalty(n.weight(layer), cfg.lam, cfg.norm, c)[1]
                for layer, c in constraints.items()}

    extra_fn = extra if cfg.lam > 0 else None
    for _ in range(cfg.reg_epochs):
        nn.train_epoch(net, opt, train.images, train.labels, cfg.batch_size, rng, extra_fn=extra_fn)
    masked_map_and_retrain(net, constraints, train, cfg.retrain_config(), rng)
    return net


def projected_gd(net, constraints, train, cfg, rng, on_project=None):
    """SGD with a hard projection every ``cfg.period`` steps, then masked retraining."""
    _check_constraints(net, constraints)
    opt = nn.SGD(cfg.lr, cfg.momentum)
    step = [0]

    def after_step(n):
        step[0] += 1
        if cfg.period is not None and step[0] % cfg.period == 0:
            project_network(n, constraints)
            if on_project is not None:
                on_project(n)

    for _ in range(cfg.pgd_epochs):
        nn.train_epoch(net, opt, train.images, train.labels, cfg.batch_size, rng,
                       after_step=after_step)
    masked_map_and_retrain(net, constraints, train, cfg.retrain_config(), rng)
    return net


def run_baseline(net, constraints, train, cfg, rng):
    if cfg.method == "iterative_magnitude":
        return iterative_magnitude_prune(net, constraints, train, cfg, rng)
    if cfg.method == "static_regularize":
        return static_regularize_then_prune(net, constraints, train, cfg, rng)
    return projected_gd(net, constraints, train, cfg, rng)
