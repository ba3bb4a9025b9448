"""ADMM-regularised training with analytic projection, then masked retraining.

For every constrained conv layer ``i`` the engine keeps an auxiliary copy
``Z_i`` (always feasible) and a scaled dual ``U_i``.  One ADMM iteration is

1. a block of SGD epochs on ``loss + sum_i rho_i/2 * ||W_i - Z_i + U_i||^2``,
2. ``Z_i <- project(W_i + U_i)``,
3. ``U_i <- U_i + W_i - Z_i``,
4. ``rho_i <- rho_i * rho_growth``.

The quadratic term pulls each layer toward the target ``Z_i - U_i``, which
moves between iterations; once ``W_i`` is feasible and ``U_i`` is zero the
pull vanishes.  After the last iteration the weights are projected one final
time and the surviving entries are retrained with a fixed gradient mask.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from . import nn
from .errors import ConfigError, ConstraintError
from .projections import check_constraint, mask_from, project

log = logging.getLogger(__name__)


@dataclass
class AdmmConfig:
    rho0: float = 1.5e-3
    rho_growth: float = 1.3
    admm_iters: int = 10
    epochs_per_iter: int = 4
    retrain_epochs: int = 3
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    retrain_lr: Optional[float] = None
    # per-layer initial penalty, overriding rho0
    rho_overrides: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.rho0 > 0:
            raise ConfigError("rho0 must be positive")
        if self.rho_growth < 1:
            raise ConfigError("rho_growth must be >= 1")
        if self.admm_iters < 1:
            raise ConfigError("admm_iters must be >= 1")
        if self.epochs_per_iter < 0 or self.retrain_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.batch_size < 1:
            raise ConfigError("invalid optimizer settings")
        if any(v <= 0 for v in self.rho_overrides.values()):
            raise ConfigError("rho overrides must be positive")

    @property
    def total_epochs(self):
        return self.admm_iters * self.epochs_per_iter + self.retrain_epochs

    def to_dict(self):
        return asdict(self)


@dataclass
class AdmmState:
    """Per-layer auxiliary ``Z``, scaled dual ``U`` and penalty ``rho``.

    ``rho`` is always ``rho_init * rho_growth ** k`` (evaluated in closed form,
    so the trajectory carries no accumulated rounding).
    """

    constraints: Dict[str, object]
    Z: Dict[str, np.ndarray]
    U: Dict[str, np.ndarray]
    rho: Dict[str, float]
    rho_growth: float = 1.0
    k: int = 0
    rho_init: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.rho_init:
            self.rho_init = dict(self.rho)

    @property
    def layers(self):
        return list(self.constraints)


def _check_constraints(net, constraints):
    for layer, c in constraints.items():
        if layer not in net.conv_layers:
            raise ConfigError(f"constraint names unknown conv layer {layer!r}")
        try:
            c.validate(net.weight(layer).shape)
        except ConstraintError as e:
            raise ConfigError(f"{layer}: {e}") from e


def init_state(net, constraints, cfg):
    """``Z = project(W)``, ``U = 0``, ``rho = rho0`` (or the layer override)."""
    _check_constraints(net, constraints)
    Z, U, rho = {}, {}, {}
    for layer, c in constraints.items():
        w = net.weight(layer)
        Z[layer] = project(w, c)
        U[layer] = np.zeros_like(w)
        rho[layer] = float(cfg.rho_overrides.get(layer, cfg.rho0))
    return AdmmState(dict(constraints), Z, U, rho, cfg.rho_growth, 0)


def penalty_grad(state, net, layer):
    """Gradient of ``rho/2 * ||W - Z + U||_F^2`` with respect to ``W``."""
    return state.rho[layer] * (net.weight(layer) - state.Z[layer] + state.U[layer])


def augmented_grad(state, net, layer, base_grad):
    return base_grad + penalty_grad(state, net, layer)


def penalty_grads(state, net):
    return {f"{layer}.weight": penalty_grad(state, net, layer) for layer in state.layers}


def penalty_value(state, net):
    total = 0.0
    for layer in state.layers:
        r = net.weight(layer) - state.Z[layer] + state.U[layer]
        total += 0.5 * state.rho[layer] * float(np.sum(r * r))
    return total


def regularization_target(state, layer):
    """The point ``Z - U`` the quadratic term pulls ``W`` toward."""
    return state.Z[layer] - state.U[layer]


def primal_residual(state, net):
    """``||W_i - Z_i||_F`` per constrained layer."""
    return {layer: float(np.linalg.norm(net.weight(layer) - state.Z[layer]))
            for layer in state.layers}


def update_auxiliary(state, net):
    """Z-step then dual step for every layer, then grow ``rho``."""
    for layer, c in state.constraints.items():
        w = net.weight(layer)
        state.Z[layer] = project(w + state.U[layer], c)
        state.U[layer] = state.U[layer] + (w - state.Z[layer])
    state.k += 1
    for layer in state.layers:
        state.rho[layer] = state.rho_init[layer] * state.rho_growth ** state.k
    return state


def admm_iteration(state, net, images, labels, cfg, rng, opt=None):
    """Run one ADMM iteration in place; returns the mean training loss."""
    if opt is None:
        opt = nn.SGD(cfg.lr, cfg.momentum)
    loss = float("nan")
    for _ in range(cfg.epochs_per_iter):
        loss = nn.train_epoch(net, opt, images, labels, cfg.batch_size, rng,
                              extra_fn=lambda n: penalty_grads(state, n))
    update_auxiliary(state, net)
    return loss


def run_admm(net, constraints, train, cfg, rng, val=None, log_path=None, on_iteration=None):
    """ADMM regularisation phase; returns the final state and per-iteration records.

    Each record holds ``k``, the per-layer ``rho`` used in that iteration's
    W-step, the primal residual after the Z-step, the mean training loss and
    (when ``val`` is given) validation accuracy.  Records are also appended to
    ``log_path`` as JSON lines.  The dual ``U`` is carried over unrescaled when
    ``rho`` grows.
    """
    state = init_state(net, constraints, cfg)
    opt = nn.SGD(cfg.lr, cfg.momentum)
    records = []
    for _ in range(cfg.admm_iters):
        rho_used = dict(state.rho)
        loss = admm_iteration(state, net, train.images, train.labels, cfg, rng, opt)
        rec = {
            "k": state.k,
            "rho": rho_used,
            "primal_residual": primal_residual(state, net),
            "train_loss": loss,
        }
        if val is not None:
            rec["val_accuracy"] = nn.evaluate(net, val.images, val.labels)
        records.append(rec)
        log.info("admm k=%d residual=%s", state.k, rec["primal_residual"])
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if on_iteration is not None:
            on_iteration(state, net, rec)
    return state, records


def project_network(net, constraints):
    """Project every constrained layer of ``net`` in place."""
    for layer, c in constraints.items():
        net.params[f"{layer}.weight"] = project(net.weight(layer), c)
    return net


def retrain_masked(net, masks, train, epochs, lr, momentum, batch_size, rng, on_epoch=None):
    """Fine-tune with gradients of masked weights zeroed.

    A fresh optimizer is used so no stale velocity can move a masked weight.
    """
    opt = nn.SGD(lr, momentum)
    grad_masks = {f"{layer}.weight": m.bits for layer, m in masks.items()}
    for epoch in range(epochs):
        nn.train_epoch(net, opt, train.images, train.labels, batch_size, rng,
                       grad_masks=grad_masks)
        if on_epoch is not None:
            on_epoch(epoch, net)
    return net


def masked_map_and_retrain(net, constraints, train, cfg, rng, on_epoch=None):
    """Project onto the constraints, freeze the zeros and retrain the rest.

    Returns ``(net, masks)``; ``net`` is modified in place and satisfies every
    constraint exactly.
    """
    _check_constraints(net, constraints)
    project_network(net, constraints)
    masks = {layer: mask_from(net.weight(layer)) for layer in constraints}
    lr = cfg.retrain_lr if cfg.retrain_lr is not None else cfg.lr
    retrain_masked(net, masks, train, cfg.retrain_epochs, lr, cfg.momentum,
                   cfg.batch_size, rng, on_epoch=on_epoch)
    for layer, c in constraints.items():
        if not check_constraint(net.weight(layer), c):
            raise RuntimeError(f"{layer} violates its constraint after retraining")
    return net, masks


def prune(net, constraints, train, cfg, rng, val=None, log_path=None):
    """Full pipeline: ADMM regularisation, masked mapping, masked retraining."""
    state, records = run_admm(net, constraints, train, cfg, rng, val=val, log_path=log_path)
    net, masks = masked_map_and_retrain(net, constraints, train, cfg, rng)
    return net, masks, state, records
