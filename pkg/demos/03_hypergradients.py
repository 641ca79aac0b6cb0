"""
Implicit versus unrolled hypergradients
=======================================

On the quadratic toy ``theta*(lam) = lam`` and ``Phi(lam) = lam^2 / 2`` the
hypergradient is ``lam``. On a random strongly convex quadratic, the
hypergradient obtained by differentiating through ``T`` steps of gradient
descent converges to the implicit one at the rate of the inner iteration.
"""

import numpy as np

from kfacbo.bilevel import ift_hypergradient, unrolled_hypergradient
from kfacbo.solvers import SolverSpec
from kfacbo.tasks import quadratic_toy, random_quadratic_task

toy = quadratic_toy()
for lam in (-1.0, 0.5, 3.0):
    g = ift_hypergradient(toy, [lam], toy.inner_solution([lam]), SolverSpec("exact")).grad
    print(f"lam = {lam:5.2f}: hypergradient {g[0]: .12f}")

###############################################################################
# Unrolled differentiation on a 5-parameter quadratic.

task = random_quadratic_task(5, 3, seed=6, cond=5.0)
H = task.curvature(None, None).to_dense()
lr = 0.3
lam = np.array([0.5, -1.0, 2.0])
ift = ift_hypergradient(task, lam, task.inner_solution(lam), SolverSpec("exact")).grad
rate = np.linalg.norm(np.eye(5) - lr * H, 2)
print("contraction ||I - lr H|| =", rate)
for T in (5, 10, 20, 40, 80, 160):
    gap = np.linalg.norm(unrolled_hypergradient(task, lam, np.zeros(5), T, lr) - ift)
    print(f"T = {T:3d}: ||unrolled - implicit|| = {gap:.3e}   (rate^T = {rate ** T:.1e})")

###############################################################################
# Truncated solvers sit between the two: CG with T = d is exact on a
# quadratic, Identity is the one-step-unrolling approximation.

theta = task.inner_solution(lam)
for spec in (SolverSpec("identity"), SolverSpec("neumann", terms=5), SolverSpec("cg", iterations=2),
             SolverSpec("cg", iterations=5)):
    g = ift_hypergradient(task, lam, theta, spec).grad
    print(f"{spec.label:>9}: error {np.linalg.norm(g - ift) / np.linalg.norm(ift):.3e}")
