from __future__ import annotations

import numpy as np
import pytest

from admmprune import admm, baselines, nn
from admmprune.baselines import BaselineConfig, penalty, stage_constraint
from admmprune.errors import ConfigError
from admmprune.projections import SparsityConstraint as C
from admmprune.projections import check_constraint, group_count, project
from oracles import central_difference
from toys import TOY, toy_data

CONSTRAINTS = {"conv1": C("channel", 1), "conv2": C("irregular", 80)}


def same_params(a, b):
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_config_validation():
    with pytest.raises(ConfigError):
        BaselineConfig(method="magic")
    with pytest.raises(ConfigError):
        BaselineConfig(norm="l3")
    with pytest.raises(ConfigError):
        BaselineConfig(period=0)
    for bad in ((), (0.5, 0.4, 1.0), (0.5, 0.9), (0.0, 1.0), (0.5, 1.2)):
        with pytest.raises(ConfigError):
            BaselineConfig(schedule=bad)
    assert BaselineConfig(schedule=[0.5, 1.0]).schedule == (0.5, 1.0)
    assert BaselineConfig(method="projected_gd").total_epochs() == 12


def test_stage_constraint():
    dims = (16, 8, 3, 3)
    c = C("shape", 18)  # prunes 54 of 72
    assert stage_constraint(c, dims, 1.0) == c
    assert stage_constraint(c, dims, 0.5).budget == 72 - 27
    comp = C.composite(C("filter", 8), C("shape", 18))
    staged = stage_constraint(comp, dims, 0.5)
    assert [m.budget for m in staged.members] == [12, 45]


@pytest.mark.parametrize("norm", ["l1", "l2", "group_l2"])
@pytest.mark.parametrize("kind", ["filter", "channel", "shape"])
def test_penalty_gradients_match_finite_differences(norm, kind):
    rng = np.random.default_rng(0)
    w = rng.standard_normal((3, 4, 2, 2))
    c = C(kind, 1)
    _, grad = penalty(w, 0.3, norm, c)
    fd = central_difference(lambda: penalty(w, 0.3, norm, c)[0], w)
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)
    if norm == "l2":
        np.testing.assert_array_equal(grad, 2 * 0.3 * w)


def test_group_l2_gradient_formula_and_zero_groups():
    w = np.random.default_rng(1).standard_normal((3, 2, 2, 2))
    w[1] = 0.0
    value, grad = penalty(w, 0.5, "group_l2", C("filter", 1))
    norms = np.sqrt((w ** 2).sum(axis=(1, 2, 3)))
    assert value == pytest.approx(0.5 * norms.sum(), rel=1e-14)
    for g in (0, 2):
        np.testing.assert_allclose(grad[g], 0.5 * w[g] / norms[g], rtol=1e-14)
    assert not grad[1].any()
    comp = C.composite(C("filter", 1), C("shape", 2))
    v, g = penalty(w, 0.5, "group_l2", comp)
    v1, g1 = penalty(w, 0.5, "group_l2", C("filter", 1))
    v2, g2 = penalty(w, 0.5, "group_l2", C("shape", 2))
    assert v == pytest.approx(v1 + v2) and np.allclose(g, g1 + g2)
    assert np.array_equal(penalty(w, 0.5, "group_l2", C("irregular", 2))[1], 0.5 * np.sign(w))


def test_single_stage_imp_equals_masked_map_and_retrain():
    data = toy_data()
    base = nn.Network.init(TOY, seed=0)
    cfg = BaselineConfig(schedule=(1.0,), epochs_per_stage=2, lr=0.03)
    a = baselines.iterative_magnitude_prune(base.copy(), CONSTRAINTS, data, cfg, np.random.default_rng(9))
    b, _ = admm.masked_map_and_retrain(base.copy(), CONSTRAINTS, data,
                                       admm.AdmmConfig(retrain_epochs=2, lr=0.03), np.random.default_rng(9))
    assert same_params(a, b)


def test_imp_stages_meet_their_budgets():
    data = toy_data()
    net = nn.Network.init(TOY, seed=1)
    seen = []

    def on_stage(i, n, stage):
        for layer, c in stage.items():
            assert check_constraint(n.weight(layer), c)
        seen.append(stage["conv2"].budget)

    cfg = BaselineConfig(schedule=(0.5, 0.9, 1.0), epochs_per_stage=1)
    baselines.iterative_magnitude_prune(net, CONSTRAINTS, data, cfg, np.random.default_rng(0), on_stage)
    assert seen == [216 - 68, 216 - 122, 80]
    assert check_constraint(net.weight("conv2"), CONSTRAINTS["conv2"])


def test_static_with_zero_lambda_is_train_then_single_stage_imp():
    data = toy_data()
    base = nn.Network.init(TOY, seed=2)
    cfg = BaselineConfig(method="static_regularize", lam=0.0, reg_epochs=2, retrain_epochs=1)
    a = baselines.static_regularize_then_prune(base.copy(), CONSTRAINTS, data, cfg, np.random.default_rng(4))
    rng = np.random.default_rng(4)
    b = base.copy()
    opt = nn.SGD(cfg.lr, cfg.momentum)
    for _ in range(2):
        nn.train_epoch(b, opt, data.images, data.labels, cfg.batch_size, rng)
    imp = BaselineConfig(schedule=(1.0,), epochs_per_stage=1)
    baselines.iterative_magnitude_prune(b, CONSTRAINTS, data, imp, rng)
    assert same_params(a, b)
    cfg0 = BaselineConfig(method="static_regularize", lam=0.0, reg_epochs=0, retrain_epochs=1)
    c = baselines.static_regularize_then_prune(base.copy(), CONSTRAINTS, data, cfg0, np.random.default_rng(4))
    d = baselines.iterative_magnitude_prune(base.copy(), CONSTRAINTS, data, imp, np.random.default_rng(4))
    assert same_params(c, d)


def test_pgd_projects_every_period_and_infinite_period_limit():
    data = toy_data()
    base = nn.Network.init(TOY, seed=3)
    events = []

    def on_project(n):
        events.append(all(check_constraint(n.weight(k), c) for k, c in CONSTRAINTS.items()))

    cfg = BaselineConfig(method="projected_gd", period=2, pgd_epochs=2, retrain_epochs=1, batch_size=8)
    baselines.projected_gd(base.copy(), CONSTRAINTS, data, cfg, np.random.default_rng(0), on_project)
    assert len(events) == 2 * (48 // 8) // 2 and all(events)

    never = BaselineConfig(method="projected_gd", period=None, pgd_epochs=2, retrain_epochs=1)
    a = baselines.projected_gd(base.copy(), CONSTRAINTS, data, never, np.random.default_rng(5))
    rng = np.random.default_rng(5)
    b = base.copy()
    opt = nn.SGD(never.lr, never.momentum)
    for _ in range(2):
        nn.train_epoch(b, opt, data.images, data.labels, never.batch_size, rng)
    admm.masked_map_and_retrain(b, CONSTRAINTS, data, never.retrain_config(), rng)
    assert same_params(a, b)


@pytest.mark.parametrize("method", baselines.METHODS)
def test_every_baseline_ends_feasible(method):
    data = toy_data()
    cons = {"conv1": C.composite(C("filter", 3), C("shape", 5)), "conv2": C("channel", 2)}
    cfg = BaselineConfig(method=method, norm="group_l2", lam=1e-3, epochs_per_stage=1, reg_epochs=1,
                         pgd_epochs=1, retrain_epochs=1)
    net = baselines.run_baseline(nn.Network.init(TOY, seed=4), cons, data, cfg, np.random.default_rng(0))
    for layer, c in cons.items():
        assert check_constraint(net.weight(layer), c)
    assert group_count(net.weight("conv2").shape, "channel") == 4
    assert np.array_equal(project(net.weight("conv2"), cons["conv2"]), net.weight("conv2"))
