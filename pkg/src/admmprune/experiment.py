"""Experiment pipelines and run-directory persistence.

A run directory holds:

* ``manifest.json``  -- resolved config, normalisation constants, data sizes,
  library versions and per-stage status;
* ``metrics.csv``    -- ``method, layer, sparsity_kind, sparsity, accuracy, epoch``;
* ``admm_log.jsonl`` -- one JSON record per ADMM iteration;
* ``compare.csv`` / ``compare_sweep.csv`` / ``compare_summary.csv`` for comparisons;
* ``bisect.csv`` / ``bisect.json`` for budget searches;
* ``bench.csv`` / ``bench.json`` for GEMM benchmarks;
* ``checkpoints/`` -- networks (and ADMM state) in the tensor blob format.

Every random stream is derived from ``(seed, stage tag)``, so a config and
seed fully determine every reported number.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import __version__, admm, baselines, bench, nn
from .baselines import BaselineConfig
from .data import load_mnist
from .errors import ConfigError
from .projections import Kind, constraint_for_sparsity, sparsity

log = logging.getLogger(__name__)

METRIC_FIELDS = ("method", "layer", "sparsity_kind", "sparsity", "accuracy", "epoch")
COMPARE_FIELDS = ("method", "seed", "sparsity", "accuracy", "detail")

# stream tags for np.random.default_rng([seed, tag])
_TRAIN, _PRUNE, _BISECT = 1, 2, 3


def stream(seed, tag, *more):
    return np.random.default_rng([int(seed), tag, *[int(m) for m in more]])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class RunDir:
    def __init__(self, path, cfg):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.manifest = {
            "format": "admmprune-run/1",
            "package_version": __version__,
            "numpy_version": np.__version__,
            "python": platform.python_version(),
            "config": cfg.to_dict(),
            "stages": [],
            "status": "running",
        }
        self.write_manifest()

    def file(self, name):
        return self.path / name

    def write_manifest(self):
        self.file("manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True))

    def write_csv(self, name, fieldnames, rows):
        with open(self.file(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fieldnames)
            for r in rows:
                w.writerow([_fmt(r[f]) for f in fieldnames])

    def stage(self, name):
        return _Stage(self, name)


class _Stage:
    def __init__(self, run, name):
        self.run, self.name = run, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        self.entry = {"stage": self.name, "status": "running"}
        self.run.manifest["stages"].append(self.entry)
        self.run.write_manifest()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.entry["elapsed_s"] = round(time.perf_counter() - self.t0, 3)
        if exc_type is None:
            self.entry["status"] = "ok"
        else:
            self.entry["status"] = "failed"
            self.entry["error"] = f"{exc_type.__name__}: {exc}"
            self.run.manifest["status"] = "failed"
            self.run.manifest["failed_stage"] = self.name
        self.run.write_manifest()
        return False


# --- data and dense training -------------------------------------------------

def load_data(cfg):
    dc = cfg.data
    if not Path(dc.path).exists():
        raise ConfigError(f"dataset path {dc.path!r} does not exist")
    data = load_mnist(dc.path)
    data.train = data.train.subset(dc.train_subset, dc.subset_seed)
    data.test = data.test.subset(dc.test_subset, dc.subset_seed)
    return data


def train_dense(net, train, tc, rng, on_epoch=None):
    opt = nn.SGD(tc.lr, tc.momentum)
    for epoch in range(tc.epochs):
        if tc.lr_decay_epoch is not None and epoch == tc.lr_decay_epoch:
            opt.lr = tc.lr * tc.lr_decay
        loss = nn.train_epoch(net, opt, train.images, train.labels, tc.batch_size, rng)
        if on_epoch is not None:
            on_epoch(epoch, net, loss)
    return net


def train_baseline(cfg, data, seed):
    net = nn.Network.init(cfg.arch, seed=seed)
    return train_dense(net, data.train, cfg.train, stream(seed, _TRAIN))


def accuracy(net, data):
    return nn.evaluate(net, data.test.images, data.test.labels)


def layer_rows(method, net, constraints, acc, epoch):
    rows = []
    for layer, c in constraints.items():
        kind = c.members[-1].kind if c.kind is Kind.COMPOSITE else c.kind
        rows.append({"method": method, "layer": layer, "sparsity_kind": c.kind.value,
                     "sparsity": sparsity(net.weight(layer), kind), "accuracy": acc,
                     "epoch": epoch})
    return rows


# --- bisection ---------------------------------------------------------------

@dataclass
class BisectResult:
    sparsity: Optional[float]
    probes: List[dict] = field(default_factory=list)

    @property
    def feasible(self):
        return self.sparsity is not None


def bisect_budget(loss_at, tolerance, lo=0.0, hi=1.0, max_probes=6):
    """Largest probed sparsity in ``[lo, hi]`` whose accuracy loss is <= ``tolerance``.

    ``loss_at(s)`` trains/prunes at sparsity ``s`` and returns the accuracy
    loss.  The upper end is probed first; after that the bracket
    ``[feasible, infeasible]`` is halved until ``max_probes`` probes have run.
    ``lo`` is taken as feasible without probing (it is usually 0, i.e. no
    pruning).  Returns ``sparsity=None`` if no probed point is feasible.
    """
    if tolerance < 0:
        raise ConfigError("tolerance must be non-negative")
    if max_probes < 1:
        raise ConfigError("at least one probe is required")
    if not lo < hi:
        raise ConfigError("bisection bracket must satisfy lo < hi")
    probes = []

    def probe(s):
        loss = float(loss_at(s))
        ok = loss <= tolerance
        probes.append({"sparsity": s, "loss": loss, "feasible": ok})
        return ok

    if probe(hi):
        return BisectResult(hi, probes)
    best, a, b = None, lo, hi
    while len(probes) < max_probes:
        mid = 0.5 * (a + b)
        if probe(mid):
            best, a = mid, mid
        else:
            b = mid
    return BisectResult(best, probes)


# --- pipelines ----------------------------------------------------------------

@dataclass
class Hooks:
    """Optional observers used by tests; never affect results."""

    admm_iteration: Optional[Callable] = None
    retrain_epoch: Optional[Callable] = None


def _baseline_stage(run, cfg, data, baseline_ckpt=None):
    with run.stage("baseline"):
        if baseline_ckpt is not None:
            net, _, meta = nn.load_checkpoint(baseline_ckpt)
            epoch = int(meta.get("epoch", 0))
        else:
            net = train_baseline(cfg, data, cfg.seed)
            epoch = cfg.train.epochs
            nn.save_checkpoint(run.file("checkpoints/baseline"), net, epoch=epoch, seed=cfg.seed)
        acc = accuracy(net, data)
        run.manifest["baseline_accuracy"] = acc
    return net, acc, epoch


def _data_stage(run, cfg):
    with run.stage("data"):
        data = load_data(cfg)
        run.manifest["normalization"] = data.normalization()
        run.manifest["data_sizes"] = {"train": len(data.train), "test": len(data.test)}
    return data


def pipeline_train(run, cfg, baseline_ckpt=None, hooks=None):
    data = _data_stage(run, cfg)
    net, acc, epoch = _baseline_stage(run, cfg, data, baseline_ckpt)
    run.write_csv("metrics.csv", METRIC_FIELDS, [
        {"method": "baseline", "layer": "all", "sparsity_kind": "none", "sparsity": 0.0,
         "accuracy": acc, "epoch": epoch}])
    return net


def pipeline_prune_admm(run, cfg, baseline_ckpt=None, hooks=None):
    hooks = hooks or Hooks()
    data = _data_stage(run, cfg)
    net, base_acc, epoch = _baseline_stage(run, cfg, data, baseline_ckpt)
    constraints = cfg.layer_constraints()
    if not constraints:
        raise ConfigError("prune-admm needs at least one constraint")
    rng = stream(cfg.seed, _PRUNE)
    rows = [{"method": "baseline", "layer": "all", "sparsity_kind": "none", "sparsity": 0.0,
             "accuracy": base_acc, "epoch": epoch}]
    log_path = run.file("admm_log.jsonl")
    log_path.write_text("")
    with run.stage("admm"):
        state, records = admm.run_admm(net, constraints, data.train, cfg.admm, rng,
                                       val=data.test, log_path=log_path,
                                       on_iteration=hooks.admm_iteration)
    epoch += cfg.admm.admm_iters * cfg.admm.epochs_per_iter
    with run.stage("masked_retrain"):
        admm.project_network(net, constraints)
        rows += layer_rows("admm_projected", net, constraints, accuracy(net, data), epoch)
        net, masks = admm.masked_map_and_retrain(net, constraints, data.train, cfg.admm, rng,
                                                 on_epoch=hooks.retrain_epoch)
        epoch += cfg.admm.retrain_epochs
        final_acc = accuracy(net, data)
        rows += layer_rows("admm", net, constraints, final_acc, epoch)
        extra = {}
        for layer in constraints:
            extra[f"admm.{layer}.Z"] = state.Z[layer]
            extra[f"admm.{layer}.U"] = state.U[layer]
            extra[f"mask.{layer}"] = masks[layer].bits.astype(np.uint8)
        nn.save_checkpoint(run.file("checkpoints/pruned"), net, epoch=epoch, seed=cfg.seed,
                           extra_arrays=extra,
                           extra_meta={"admm_k": state.k, "admm_rho": state.rho,
                                       "constraints": {k: c.to_dict() for k, c in constraints.items()}})
    run.manifest["final_accuracy"] = final_acc
    run.write_csv("metrics.csv", METRIC_FIELDS, rows)
    return net


def pipeline_prune_baseline(run, cfg, baseline_ckpt=None, hooks=None):
    data = _data_stage(run, cfg)
    net, base_acc, epoch = _baseline_stage(run, cfg, data, baseline_ckpt)
    constraints = cfg.layer_constraints()
    if not constraints:
        raise ConfigError("prune-baseline needs at least one constraint")
    rows = [{"method": "baseline", "layer": "all", "sparsity_kind": "none", "sparsity": 0.0,
             "accuracy": base_acc, "epoch": epoch}]
    with run.stage(cfg.baseline.method):
        baselines.run_baseline(net, constraints, data.train, cfg.baseline, stream(cfg.seed, _PRUNE))
        acc = accuracy(net, data)
    rows += layer_rows(cfg.baseline.method, net, constraints, acc, epoch + cfg.baseline.total_epochs())
    nn.save_checkpoint(run.file("checkpoints/pruned"), net, epoch=epoch + cfg.baseline.total_epochs(),
                       seed=cfg.seed)
    run.manifest["final_accuracy"] = acc
    run.write_csv("metrics.csv", METRIC_FIELDS, rows)
    return net


def _compare_constraints(cfg, net, level):
    return {layer: constraint_for_sparsity(cfg.compare.kind, level, net.weight(layer).shape)
            for layer in cfg.compare.layers}


def pipeline_compare(run, cfg, baseline_ckpt=None, hooks=None):
    """Every method at every sparsity for every seed, from a shared dense baseline."""
    cc = cfg.compare
    data = _data_stage(run, cfg)
    rows, sweep, metric_rows = [], [], []
    budget = cfg.admm.total_epochs
    for method in cc.methods:
        if method != "admm" and method not in baselines.METHODS:
            raise ConfigError(f"unknown comparison method {method!r}")
    for seed in cc.seeds:
        with run.stage(f"baseline/seed{seed}"):
            base = train_baseline(cfg, data, seed)
            base_acc = accuracy(base, data)
        rows.append({"method": "baseline", "seed": seed, "sparsity": 0.0,
                     "accuracy": base_acc, "detail": ""})
        for li, level in enumerate(cc.sparsities):
            constraints = _compare_constraints(cfg, base, level)
            for mi, method in enumerate(cc.methods):
                with run.stage(f"{method}/seed{seed}/s{level}"):
                    if method == "admm":
                        net = base.copy()
                        admm.prune(net, constraints, data.train, cfg.admm, stream(seed, _PRUNE, li, mi))
                        acc, detail = accuracy(net, data), ""
                    else:
                        acc, detail, net = _run_compare_baseline(
                            cfg, base, constraints, data, method, seed, level, li, mi, budget, sweep)
                rows.append({"method": method, "seed": seed, "sparsity": level,
                             "accuracy": acc, "detail": detail})
                metric_rows += layer_rows(method, net, constraints, acc, cfg.train.epochs + budget)
                log.info("compare seed=%s s=%s %s acc=%.4f", seed, level, method, acc)
        run.write_csv("compare.csv", COMPARE_FIELDS, rows)
    run.write_csv("compare.csv", COMPARE_FIELDS, rows)
    run.write_csv("compare_sweep.csv", ("method", "seed", "sparsity", "norm", "lam", "accuracy"), sweep)
    run.write_csv("compare_summary.csv", ("method", "sparsity", "mean_accuracy", "min_accuracy",
                                          "max_accuracy", "seeds"), summarize(rows))
    run.write_csv("metrics.csv", METRIC_FIELDS, metric_rows)
    return rows


def _fair_baseline_config(cfg, method, budget, **overrides):
    """Baseline settings spending the same epoch budget as the ADMM schedule."""
    bc = cfg.baseline.to_dict()
    bc.update(method=method, lr=cfg.admm.lr, momentum=cfg.admm.momentum,
              batch_size=cfg.admm.batch_size, **overrides)
    retrain = cfg.admm.retrain_epochs
    if method == "iterative_magnitude":
        n = len(bc["schedule"])
        if budget % n:
            raise ConfigError(f"epoch budget {budget} is not divisible by {n} pruning stages")
        bc["epochs_per_stage"] = budget // n
    elif method == "static_regularize":
        bc["reg_epochs"], bc["retrain_epochs"] = budget - retrain, retrain
    else:
        bc["pgd_epochs"], bc["retrain_epochs"] = budget - retrain, retrain
    return BaselineConfig(**bc)


def _run_compare_baseline(cfg, base, constraints, data, method, seed, level, li, mi, budget, sweep):
    cc = cfg.compare
    if method != "static_regularize":
        net = base.copy()
        bc = _fair_baseline_config(cfg, method, budget)
        baselines.run_baseline(net, constraints, data.train, bc, stream(seed, _PRUNE, li, mi))
        return accuracy(net, data), "", net
    best = None
    for ni, norm in enumerate(cc.norms):
        for lj, lam in enumerate(cc.lambdas):
            net = base.copy()
            bc = _fair_baseline_config(cfg, method, budget, norm=norm, lam=lam)
            baselines.run_baseline(net, constraints, data.train, bc,
                                   stream(seed, _PRUNE, li, mi, ni, lj))
            acc = accuracy(net, data)
            sweep.append({"method": method, "seed": seed, "sparsity": level, "norm": norm,
                          "lam": lam, "accuracy": acc})
            if best is None or acc > best[0]:
                best = (acc, f"{norm}:{lam!r}", net)
    return best


def summarize(rows):
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["sparsity"]), []).append(r["accuracy"])
    out = []
    for (method, level), accs in groups.items():
        out.append({"method": method, "sparsity": level, "mean_accuracy": float(np.mean(accs)),
                    "min_accuracy": min(accs), "max_accuracy": max(accs), "seeds": len(accs)})
    return out


def pipeline_bisect(run, cfg, baseline_ckpt=None, hooks=None):
    bc = cfg.bisect
    data = _data_stage(run, cfg)
    base, base_acc, epoch = _baseline_stage(run, cfg, data, baseline_ckpt)
    short = admm.AdmmConfig(**{**cfg.admm.to_dict(), "admm_iters": bc.admm_iters,
                               "epochs_per_iter": bc.epochs_per_iter,
                               "retrain_epochs": bc.retrain_epochs})
    run.manifest["bisect_probe_schedule"] = short.to_dict()

    def loss_at(s):
        i = len(result_probes)
        with run.stage(f"probe{i}/s{s}"):
            c = {bc.layer: constraint_for_sparsity(bc.kind, s, base.weight(bc.layer).shape)}
            net = base.copy()
            admm.prune(net, c, data.train, short, stream(cfg.seed, _BISECT, i))
            acc = accuracy(net, data)
        result_probes.append(acc)
        return base_acc - acc

    result_probes = []
    result = bisect_budget(loss_at, bc.tolerance, bc.lo, bc.hi, bc.max_probes)
    rows = [{**p, "accuracy": a} for p, a in zip(result.probes, result_probes)]
    run.write_csv("bisect.csv", ("sparsity", "loss", "feasible", "accuracy"), rows)
    out = {"layer": bc.layer, "kind": bc.kind, "tolerance": bc.tolerance,
           "baseline_accuracy": base_acc, "max_sparsity": result.sparsity,
           "feasible": result.feasible, "probes": rows}
    run.file("bisect.json").write_text(json.dumps(out, indent=2, sort_keys=True))
    if not result.feasible:
        log.warning("no feasible pruning: even sparsity %s exceeds tolerance", result.probes[-1]["sparsity"])
    return result


def pipeline_bench(run, cfg, baseline_ckpt=None, hooks=None):
    bcfg = cfg.bench
    by_name = {c.name: c for c in bench.DEFAULT_CASES}
    names = bcfg.cases or list(by_name)
    unknown = [n for n in names if n not in by_name]
    if unknown:
        raise ConfigError(f"unknown bench cases {unknown}")
    run.manifest["bench_cases"] = [vars(by_name[n]) for n in names]
    with run.stage("bench"):
        reports = bench.run_layer_bench([by_name[n] for n in names], bcfg.levels, bcfg.kinds,
                                        bcfg.reps, bcfg.warmup, bcfg.threads, seed=cfg.seed)
    bench.write_reports(reports, run.path)
    return reports


PIPELINES = {
    "train": pipeline_train,
    "prune-admm": pipeline_prune_admm,
    "prune-baseline": pipeline_prune_baseline,
    "compare": pipeline_compare,
    "bisect": pipeline_bisect,
    "bench-gemm": pipeline_bench,
}


def run_experiment(cfg, command, baseline_ckpt=None, hooks=None, out_dir=None):
    """Validate ``cfg``, run pipeline ``command`` and return the run directory."""
    if command not in PIPELINES:
        raise ConfigError(f"unknown command {command!r}")
    cfg.validate(need_data=command != "bench-gemm")
    run = RunDir(out_dir or cfg.output_dir, cfg)
    run.manifest["command"] = command
    PIPELINES[command](run, cfg, baseline_ckpt=baseline_ckpt, hooks=hooks)
    run.manifest["status"] = "complete"
    run.write_manifest()
    return run.path
