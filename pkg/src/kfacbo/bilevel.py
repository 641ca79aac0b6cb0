"""Implicit-differentiation hypergradients and the inner/outer training loop.

Notation: ``lam`` is the outer variable (length ``m``), ``theta`` the inner
variable (length ``d``). The hypergradient is

    grad Phi = d_lam J_out - (d_lam d_theta J_in) v,   (H + damping) v = d_theta J_out
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import seeding
from .curvature import CurvatureOperator, FactorCache, FunctionOperator, KfacState, hvp_finite_difference
from .errors import InnerLoopError, KfacBoError, SolverError
from .solvers import SolveReport, SolverSpec, solve


@dataclass
class BilevelTask:
    """Callables defining one bilevel problem.

    Every callable takes ``(lam, theta)`` first. ``batch`` arguments are
    index arrays into the inner training set (``None`` = full set) and are
    ignored by tasks without data.

    inner_grad(lam, theta, batch) -> d_theta J_in
    outer_grads(lam, theta) -> (d_lam J_out, d_theta J_out)
    cross_dvp(lam, theta, v) -> (d_lam d_theta J_in) v, length m
    curvature(lam, theta, batch) -> CurvatureOperator for d_theta^2 J_in
    kfac(lam, theta, batch, rng) -> KfacState of the data term (optional)
    curvature_shift: isotropic Hessian part not represented by ``kfac``
        (e.g. ``2 * alpha`` from an L2 penalty); added to the KFAC damping
    inner_hvp(lam, theta, v) -> exact Hessian-vector product (optional;
        finite differences of ``inner_grad`` otherwise)
    project(lam) -> feasible lam (optional)
    test_metric(lam, theta) -> held-out score logged by the outer loop (optional)
    sample_batch(rng) -> index array for one inner step (optional)
    """

    inner_loss: Callable
    inner_grad: Callable
    outer_loss: Callable
    outer_grads: Callable
    cross_dvp: Callable
    curvature: Callable
    m: int
    d: int
    kfac: Optional[Callable] = None
    curvature_shift: float = 0.0
    inner_hvp: Optional[Callable] = None
    project: Optional[Callable] = None
    test_metric: Optional[Callable] = None
    sample_batch: Optional[Callable] = None
    name: str = "task"


@dataclass
class HypergradientResult:
    grad: np.ndarray
    direct_term: np.ndarray
    implicit_term: np.ndarray
    solver_report: SolveReport


def needs_factors(spec: SolverSpec) -> bool:
    return spec.kind in ("ikvp", "ekfac")


def ift_hypergradient(task: BilevelTask, lam, theta, solver: SolverSpec, curvature=None,
                      batch=None, rng=None) -> HypergradientResult:
    """Hypergradient at the current ``theta`` with ``solver`` for the linear system.

    ``curvature`` overrides the task's curvature source: a
    :class:`CurvatureOperator`, a dense matrix, or Kronecker factors.
    """
    lam = np.asarray(lam, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    direct, b = task.outer_grads(lam, theta)
    direct = np.asarray(direct, dtype=np.float64)
    spec = solver
    if curvature is None and solver.kind != "identity":
        if needs_factors(solver):
            if task.kfac is None:
                raise KfacBoError(f"task {task.name!r} provides no Kronecker factors")
            curvature = task.kfac(lam, theta, batch, rng)
        else:
            curvature = task.curvature(lam, theta, batch)
    if needs_factors(solver) and task.curvature_shift:
        spec = replace(solver, damping=solver.damping + task.curvature_shift)
    if solver.kind == "identity" and curvature is None:
        curvature = FunctionOperator(lambda v: v, task.d)
    try:
        report = solve(spec, curvature, b)
    except SolverError as exc:
        raise SolverError(f"hypergradient solve with {solver.label} failed: {exc}") from exc
    implicit = np.asarray(task.cross_dvp(lam, theta, report.solution), dtype=np.float64)
    return HypergradientResult(direct - implicit, direct, implicit, report)


def unrolled_hypergradient(task: BilevelTask, lam, theta0, steps: int, lr: float,
                           max_stored: int = 10_000, fd_step: float = 1e-5) -> np.ndarray:
    """Exact derivative of ``J_out(lam, theta_T)`` through ``steps`` gradient-descent steps.

    Stores all iterates, then runs the reverse recursion with Hessian-vector
    products (the task's ``inner_hvp`` if given, else central differences).
    ``theta0`` is treated as independent of ``lam``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps > max_stored:
        raise ValueError(f"{steps} steps exceed the iterate storage cap of {max_stored}")
    lam = np.asarray(lam, dtype=np.float64)
    thetas = [np.asarray(theta0, dtype=np.float64)]
    for _ in range(steps):
        thetas.append(thetas[-1] - lr * np.asarray(task.inner_grad(lam, thetas[-1], None)))
    direct, u = task.outer_grads(lam, thetas[-1])
    acc = np.zeros(task.m)

    def hvp(theta, v):
        if task.inner_hvp is not None:
            return task.inner_hvp(lam, theta, v)
        return hvp_finite_difference(lambda t: task.inner_grad(lam, t, None), theta, v, fd_step)

    u = np.asarray(u, dtype=np.float64)
    for t in range(steps - 1, -1, -1):
        acc += task.cross_dvp(lam, thetas[t], u)
        if t > 0:
            u = u - lr * hvp(thetas[t], u)
    return np.asarray(direct, dtype=np.float64) - lr * acc


def run_inner(task: BilevelTask, lam, theta0, steps: int, lr: float, momentum: float = 0.0,
              batches: Optional[Sequence] = None):
    """SGD with heavy-ball momentum (``buf = mu * buf + g``) on ``J_in(lam, .)``."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    theta = np.array(theta0, dtype=np.float64)
    buf = np.zeros_like(theta)
    for step in range(steps):
        batch = None if batches is None else batches[step]
        g = np.asarray(task.inner_grad(lam, theta, batch), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise InnerLoopError(f"non-finite inner gradient at step {step}", theta=theta, step=step)
        buf = momentum * buf + g if momentum else g
        new = theta - lr * buf
        if not np.all(np.isfinite(new)):
            raise InnerLoopError(f"non-finite inner iterate at step {step}", theta=theta, step=step)
        theta = new
    return theta


def batch_stream(seed: int) -> np.random.Generator:
    """Generator behind the outer loop's minibatch draws (independent of the KFAC sampling stream)."""
    return seeding.stream(seed, "batch")


def newton_inner_solve(task: BilevelTask, lam, theta0, tol: float = 1e-10, max_iter: int = 100):
    """Minimize ``J_in(lam, .)`` by Newton's method with the task's dense curvature.

    Exact only when ``task.curvature`` is the true Hessian (quadratics, linear
    models with convex losses). Stops once ``||grad|| <= tol``.
    """
    theta = np.array(theta0, dtype=np.float64)
    for _ in range(max_iter):
        g = np.asarray(task.inner_grad(lam, theta, None), dtype=np.float64)
        if np.linalg.norm(g) <= tol:
            return theta
        H = task.curvature(lam, theta, None).to_dense()
        theta = theta - np.linalg.solve(H, g)
    raise InnerLoopError(f"Newton did not reach gradient norm {tol} in {max_iter} steps", theta=theta)


def clip_weights(lam) -> np.ndarray:
    return np.clip(np.asarray(lam, dtype=np.float64), 0.0, 1.0)


def clip_subgradient(lam) -> np.ndarray:
    """1 on the closed interval [0, 1], 0 strictly outside."""
    lam = np.asarray(lam, dtype=np.float64)
    return ((lam >= 0.0) & (lam <= 1.0)).astype(np.float64)


@dataclass
class OuterLoopConfig:
    outer_iters: int = 100
    inner_steps: int = 10
    inner_lr: float = 0.1
    inner_momentum: float = 0.0
    outer_lr: float = 1.0
    outer_momentum: float = 0.0
    solver: SolverSpec = field(default_factory=lambda: SolverSpec("cg", iterations=3))
    refresh_interval: int = 1
    ema_beta: float = 0.0
    seed: int = 0
    warm_start: bool = True
    independent_curvature_batch: bool = False

    def __post_init__(self):
        for name in ("outer_iters", "inner_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("inner_lr", "outer_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if not 0.0 <= self.ema_beta < 1.0:
            raise ValueError("ema_beta must lie in [0, 1)")


@dataclass
class OuterLoopResult:
    history: List[dict]
    lam: np.ndarray
    theta: np.ndarray
    error: Optional[str] = None
    aborted: bool = False


def outer_loop(task: BilevelTask, cfg: OuterLoopConfig, lam0, theta0, callbacks=()) -> OuterLoopResult:
    """Alternate inner SGD and outer SGD-with-momentum hypergradient steps.

    Each callback receives the per-iteration record; returning ``True``
    stops the loop. Errors from components end the loop and are reported in
    ``OuterLoopResult.error`` with the history recorded so far.
    """
    # separate streams keep the minibatch sequence identical across solvers
    batch_rng = batch_stream(cfg.seed)
    kfac_rng = seeding.stream(cfg.seed, "kfac")
    lam = np.array(lam0, dtype=np.float64)
    theta_init = np.array(theta0, dtype=np.float64)
    theta = theta_init.copy()
    buf = np.zeros_like(lam)
    cache = FactorCache(cfg.refresh_interval, cfg.ema_beta) if needs_factors(cfg.solver) else None
    history: List[dict] = []
    t_start = time.perf_counter()
    for it in range(cfg.outer_iters):
        try:
            batches = None
            if task.sample_batch is not None:
                batches = [task.sample_batch(batch_rng) for _ in range(cfg.inner_steps)]
            start = theta if cfg.warm_start else theta_init
            theta = run_inner(task, lam, start, cfg.inner_steps, cfg.inner_lr, cfg.inner_momentum, batches)
            curv_batch = None
            if batches:
                curv_batch = task.sample_batch(batch_rng) if cfg.independent_curvature_batch else batches[-1]
            curvature = None
            if cache is not None:
                if task.kfac is None:
                    raise KfacBoError(f"task {task.name!r} provides no Kronecker factors")
                curvature = cache.get(it, lambda: task.kfac(lam, theta, curv_batch, kfac_rng))
            elif cfg.solver.kind != "identity":
                curvature = task.curvature(lam, theta, curv_batch)
            hg = ift_hypergradient(task, lam, theta, cfg.solver, curvature=curvature)
            if not np.all(np.isfinite(hg.grad)):
                raise KfacBoError("non-finite hypergradient")
            buf = cfg.outer_momentum * buf + hg.grad if cfg.outer_momentum else hg.grad
            lam = lam - cfg.outer_lr * buf
            if task.project is not None:
                lam = task.project(lam)
            if not np.all(np.isfinite(lam)):
                raise KfacBoError("outer iterate diverged")
            outer_value = float(task.outer_loss(lam, theta))
            if not np.isfinite(outer_value):
                raise KfacBoError("non-finite outer loss")
            record = {
                "outer_iter": it,
                "outer_loss": outer_value,
                "test_metric": float(task.test_metric(lam, theta)) if task.test_metric else float("nan"),
                "hypergrad_norm": float(np.linalg.norm(hg.grad)),
                "solver_residual": float(hg.solver_report.residual_norm),
                "solver_iters": int(hg.solver_report.iterations_used),
                "elapsed_ms": 1000.0 * (time.perf_counter() - t_start),
            }
        except KfacBoError as exc:
            return OuterLoopResult(history, lam, theta, error=f"outer iteration {it}: {exc}")
        history.append(record)
        if any(cb(record) for cb in callbacks):
            return OuterLoopResult(history, lam, theta, aborted=True)
    return OuterLoopResult(history, lam, theta)
