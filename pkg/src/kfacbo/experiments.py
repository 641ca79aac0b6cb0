"""Experiment runners shared by the command line and the test suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import seeding
from .bilevel import OuterLoopConfig, OuterLoopResult, batch_stream, ift_hypergradient, outer_loop, run_inner
from .io import load_idx
from .nn import Network, flatten_params
from .solvers import SolverSpec
from .tasks import (
    gen_synthetic_classification,
    make_hyperclean_task,
    quadratic_toy,
    random_quadratic_task,
    roc_auc,
    split_and_corrupt,
)


@dataclass
class HypercleanParams:
    n_train: int = 300
    n_val: int = 300
    n_test: int = 1000
    classes: int = 3
    input_dim: int = 10
    separation: float = 4.0
    noise_ratio: float = 0.5
    alpha_reg: float = 1e-3
    batch_size: Optional[int] = None
    hidden: List[int] = field(default_factory=list)
    mc_samples: int = 1
    lam0: float = 1.0
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    data_seed: Optional[int] = None  # None: the run seed also draws the dataset


@dataclass
class HypercleanOutcome:
    seed: int
    solver: str
    batch_size: Optional[int]
    result: OuterLoopResult
    auc: float
    mean_lam_clean: float
    mean_lam_corrupt: float
    final_test_loss: float
    min_test_loss: float
    test_accuracy: float
    baseline_test_loss: float = float("nan")
    dataset: object = None

    def summary_row(self) -> dict:
        return {
            "solver": self.solver,
            "batch_size": "full" if self.batch_size is None else self.batch_size,
            "seed": self.seed,
            "final_outer_loss": self.result.history[-1]["outer_loss"] if self.result.history else float("nan"),
            "final_test_loss": self.final_test_loss,
            "min_test_loss": self.min_test_loss,
            "test_accuracy": self.test_accuracy,
            "auc": self.auc,
            "mean_lam_clean": self.mean_lam_clean,
            "mean_lam_corrupt": self.mean_lam_corrupt,
            "baseline_test_loss": self.baseline_test_loss,
        }


HYPERCLEAN_SUMMARY_COLUMNS = (
    "solver", "batch_size", "seed", "final_outer_loss", "final_test_loss", "min_test_loss",
    "test_accuracy", "auc", "mean_lam_clean", "mean_lam_corrupt", "baseline_test_loss",
)


def build_dataset(params: HypercleanParams, seed: int):
    if params.idx_images:
        x, y = load_idx(params.idx_images, params.idx_labels)
        return split_and_corrupt(x, y, params.n_train, params.n_val, params.n_test,
                                 params.classes, params.noise_ratio, seed)
    return gen_synthetic_classification(params.n_train, params.n_val, params.n_test, params.classes,
                                        params.input_dim, params.separation, params.noise_ratio, seed)


def _initial_network(params: HypercleanParams, dim: int, seed: int) -> Network:
    sizes = [dim + 1, *params.hidden, params.classes]
    net = Network.from_sizes(sizes, rng=seeding.stream(seed, "init"))
    if not params.hidden:
        net.layers[0].weight[...] = 0.0
    return net


def train_baseline(task, theta0, cfg: OuterLoopConfig):
    """Train with every weight fixed at 1, using the outer loop's inner schedule and batches."""
    rng = batch_stream(cfg.seed)
    lam = np.ones(task.m)
    theta = np.array(theta0, dtype=np.float64)
    for _ in range(cfg.outer_iters):
        batches = None
        if task.sample_batch is not None:
            batches = [task.sample_batch(rng) for _ in range(cfg.inner_steps)]
            if cfg.independent_curvature_batch:
                task.sample_batch(rng)
        theta = run_inner(task, lam, theta, cfg.inner_steps, cfg.inner_lr, cfg.inner_momentum, batches)
    return theta


def run_hyperclean(params: HypercleanParams, solver: SolverSpec, cfg: OuterLoopConfig,
                   baseline: bool = False, callbacks=()) -> HypercleanOutcome:
    """One hypercleaning run; ``cfg.seed`` seeds initialization, batches and MC draws."""
    data_seed = cfg.seed if params.data_seed is None else params.data_seed
    ds = build_dataset(params, data_seed)
    net = _initial_network(params, ds.dim, data_seed)
    task = make_hyperclean_task(ds, net, params.alpha_reg, params.batch_size, mc_samples=params.mc_samples)
    theta0 = flatten_params(net)
    lam0 = np.full(task.m, params.lam0)
    run_cfg = OuterLoopConfig(**{**cfg.__dict__, "solver": solver})
    result = outer_loop(task, run_cfg, lam0, theta0, callbacks)
    lam = result.lam
    mask = ds.corrupted
    try:
        auc = roc_auc(1.0 - lam, mask)
    except ValueError:
        auc = float("nan")
    tests = [r["test_metric"] for r in result.history]
    out = HypercleanOutcome(
        seed=cfg.seed,
        solver=solver.label,
        batch_size=params.batch_size,
        result=result,
        auc=auc,
        mean_lam_clean=float(lam[~mask].mean()) if (~mask).any() else float("nan"),
        mean_lam_corrupt=float(lam[mask].mean()) if mask.any() else float("nan"),
        final_test_loss=tests[-1] if tests else float(task.test_metric(lam, result.theta)),
        min_test_loss=min(tests) if tests else float(task.test_metric(lam, result.theta)),
        test_accuracy=task.test_accuracy(result.theta),
        dataset=ds,
    )
    if baseline:
        theta_b = train_baseline(task, theta0, run_cfg)
        out.baseline_test_loss = float(task.test_metric(np.ones(task.m), theta_b))
    return out


@dataclass
class ToyParams:
    d: int = 1
    m: int = 1
    cond: float = 10.0
    outer_reg: float = 0.0
    lam0: float = 1.0


def make_toy(params: ToyParams, seed: int):
    if params.d == 1 and params.m == 1:
        return quadratic_toy()
    return random_quadratic_task(params.d, params.m, seed, params.cond, params.outer_reg)


def run_toy(params: ToyParams, solver: SolverSpec, cfg: OuterLoopConfig):
    """Outer loop on a quadratic task; also reports the final hypergradient error vs. the closed form."""
    task = make_toy(params, cfg.seed)
    lam0 = np.full(task.m, params.lam0)
    result = outer_loop(task, OuterLoopConfig(**{**cfg.__dict__, "solver": solver}), lam0, np.zeros(task.d))
    lam = result.lam
    theta_star = task.inner_solution(lam)
    exact = ift_hypergradient(task, lam, theta_star, SolverSpec("exact")).grad
    numeric = ift_hypergradient(task, lam, result.theta, solver).grad
    summary = {
        "solver": solver.label,
        "seed": cfg.seed,
        "final_outer_loss": float(task.value(lam)),
        "lam_norm": float(np.linalg.norm(lam)),
        "hypergrad_error": float(np.linalg.norm(numeric - exact)),
    }
    return result, summary


TOY_SUMMARY_COLUMNS = ("solver", "seed", "final_outer_loss", "lam_norm", "hypergrad_error")


def run_batch_sweep(params: HypercleanParams, solvers: Sequence[SolverSpec], cfg: OuterLoopConfig,
                    batch_sizes: Sequence[Optional[int]], seeds: Sequence[int]):
    """Every (solver, batch size, seed) combination of :func:`run_hyperclean`."""
    outcomes = []
    for solver in solvers:
        for bs in batch_sizes:
            for seed in seeds:
                p = HypercleanParams(**{**params.__dict__, "batch_size": bs})
                c = OuterLoopConfig(**{**cfg.__dict__, "seed": seed})
                outcomes.append(run_hyperclean(p, solver, c))
    return outcomes
