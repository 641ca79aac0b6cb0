"""Concrete bilevel problems and the inverse-curvature diagnostic."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import seeding
from .bilevel import BilevelTask, clip_subgradient, clip_weights
from .curvature import (
    DenseOperator,
    GgnOperator,
    estimate_kfac_exact,
    estimate_kfac_mc,
    ekfac_correct,
    ekfac_inverse,
    kfac_eigen_state,
)
from .errors import ShapeError
from .nn import (
    Criterion,
    LinearLayer,
    Network,
    backpropagate,
    backward,
    forward,
    loss_and_output_grad,
    unflatten_params,
)
from .solvers import SolverSpec, cg_solve, exact_solve, neumann_solve, relative_operator_error

# -- quadratic problems ------------------------------------------------------


def quadratic_task(H, P, target=None, outer_reg=0.0, name="quadratic") -> BilevelTask:
    """Strongly convex quadratic bilevel problem with a closed-form solution.

    ``J_in = 0.5 (theta - H^-1 P^T lam)^T H (theta - H^-1 P^T lam)`` and
    ``J_out = 0.5 ||theta - target||^2 + 0.5 * outer_reg * ||lam||^2``, so
    ``theta*(lam) = H^-1 P^T lam`` and the cross derivative is ``-P``.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    d = H.shape[0]
    m = P.shape[0]
    if H.shape != (d, d) or P.shape[1] != d:
        raise ShapeError(f"H must be (d, d) and P (m, d); got {H.shape} and {P.shape}")
    target = np.zeros(d) if target is None else np.asarray(target, dtype=np.float64)

    def opt(lam):
        return np.linalg.solve(H, P.T @ lam)

    def inner_loss(lam, theta, batch=None):
        r = theta - opt(lam)
        return 0.5 * r @ H @ r

    def inner_grad(lam, theta, batch=None):
        return H @ theta - P.T @ lam

    def outer_loss(lam, theta):
        r = theta - target
        return 0.5 * r @ r + 0.5 * outer_reg * lam @ lam

    def outer_grads(lam, theta):
        return outer_reg * np.asarray(lam, dtype=np.float64), theta - target

    task = BilevelTask(
        inner_loss=inner_loss,
        inner_grad=inner_grad,
        outer_loss=outer_loss,
        outer_grads=outer_grads,
        cross_dvp=lambda lam, theta, v: -P @ v,
        curvature=lambda lam, theta, batch=None: DenseOperator(H),
        inner_hvp=lambda lam, theta, v: H @ v,
        m=m,
        d=d,
        name=name,
    )
    task.inner_solution = opt
    task.value = lambda lam: outer_loss(lam, opt(lam))
    return task


def quadratic_toy() -> BilevelTask:
    """``J_in = 0.5 (theta - lam)^2``, ``J_out = 0.5 theta^2``: ``Phi(lam) = 0.5 lam^2``."""
    return quadratic_task([[1.0]], [[1.0]], name="toy-quadratic")


def random_quadratic_task(d, m, seed=0, cond=10.0, outer_reg=0.0) -> BilevelTask:
    """Quadratic task with eigenvalues of ``H`` spread log-uniformly over ``[1, cond]``."""
    rng = seeding.stream(seed, "quadratic", d, m)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eig = np.geomspace(1.0, cond, d)
    H = (q * eig) @ q.T
    H = 0.5 * (H + H.T)
    P = rng.standard_normal((m, d))
    target = rng.standard_normal(d)
    return quadratic_task(H, P, target, outer_reg, name="random-quadratic")


# -- linear-regression diagnostic --------------------------------------------


@dataclass
class LinRegProblem:
    X: np.ndarray  # (d, N)
    y: np.ndarray
    seed: int

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[1]

    @property
    def hessian(self) -> np.ndarray:
        H = self.X @ self.X.T / self.N
        return 0.5 * (H + H.T)


def gen_linreg(d: int, N: int, seed: int) -> LinRegProblem:
    if d < 1 or N < 1:
        raise ValueError("d and N must be >= 1")
    rng = seeding.stream(seed, "linreg", d, N)
    return LinRegProblem(rng.standard_normal((d, N)), rng.standard_normal(N), seed)


@dataclass
class DiagnosticRecord:
    method: str
    d: int
    seed: int
    rel_error: float
    alpha_star: float
    wall_ms: float
    mc_samples: int = 0
    sample_count: int = 0


TABLE_METHODS = ("KFAC", "Neu-3", "Neu-20", "Neu-50", "CG-3", "CG-5", "CG-10", "Identity")
MAX_DIAGNOSTIC_DIM = 2000


def _regression_net(problem):
    net = Network([LinearLayer(np.zeros((1, problem.d)), "identity")])
    return net, forward(net, problem.X.T)


def approximate_inverse(problem: LinRegProblem, method: str, damping: float,
                        mc_samples: int = 1, rng=None) -> np.ndarray:
    """Dense approximation of ``(H + damping I)^-1`` produced by ``method``.

    Kronecker methods estimate factors of the one-output linear model with
    square loss and invert ``B kron A + damping I`` exactly in the factor
    eigenbasis. Iterative methods are applied to every basis vector.
    """
    H = problem.hessian
    d = problem.d
    eye = np.eye(d)
    label = method.strip()
    low = label.lower()
    if low == "exact":
        return exact_solve(H, eye, damping)
    if low == "identity":
        return eye
    if low in ("kfac", "kfac-exact", "ekfac"):
        net, trace = _regression_net(problem)
        crit = Criterion("square")
        if low == "kfac-exact":
            state = estimate_kfac_exact(net, trace, crit)
        else:
            state = estimate_kfac_mc(net, trace, crit, mc_samples, rng)
        if low == "ekfac":
            eig = ekfac_correct(state, net, trace, crit, rng, mc_samples, damping)
        else:
            eig = kfac_eigen_state(state, damping)
        return ekfac_inverse(eig, eye).T
    spec = SolverSpec.from_label(label, damping=damping)
    op = DenseOperator(H)
    if spec.kind == "neumann":
        return neumann_solve(op, eye, spec.terms, spec.eta, damping).solution
    if spec.kind == "cg":
        cols = [cg_solve(op, eye[:, i], spec.iterations, 1e-14, damping).solution for i in range(d)]
        return np.column_stack(cols)
    raise ValueError(f"method {method!r} has no dense realization")


def _diagnostic_cell(d, N, damping, seed, methods, mc_samples, base_seed):
    problem = gen_linreg(d, N, seed)
    exact = exact_solve(problem.hessian, np.eye(d), damping)
    out = []
    for method in methods:
        t0 = time.perf_counter()
        rng = seeding.stream(base_seed, "diagnostic", method, d, seed)
        approx = approximate_inverse(problem, method, damping, mc_samples, rng)
        err, alpha = relative_operator_error(approx, exact)
        wall = 1000.0 * (time.perf_counter() - t0)
        uses_mc = method.lower() in ("kfac", "ekfac")
        out.append(DiagnosticRecord(method, d, seed, float(err), float(alpha), wall,
                                    mc_samples if uses_mc else 0, mc_samples * N if uses_mc else 0))
    return out


def diagnostic_study(ds: Sequence[int], N: int = 100, damping: float = 1e-5,
                     seeds: Sequence[int] = range(5), methods: Sequence[str] = TABLE_METHODS,
                     mc_samples: int = 1, base_seed: int = 0, threads: int = 1) -> List[DiagnosticRecord]:
    """Score every method's approximate inverse on random linear-regression Hessians.

    Records are sorted by ``(method, d, seed)``; each cell draws from its own
    random stream so ``threads`` never changes the numbers.
    """
    if not damping > 0:
        raise ValueError("damping must be > 0")
    if any(d > MAX_DIAGNOSTIC_DIM for d in ds):
        raise ValueError(f"diagnostic limited to d <= {MAX_DIAGNOSTIC_DIM}")
    for method in methods:
        if method.lower() not in ("exact", "identity", "kfac", "kfac-exact", "ekfac"):
            SolverSpec.from_label(method)
    cells = [(d, s) for d in ds for s in seeds]
    args = [(d, N, damping, s, list(methods), mc_samples, base_seed) for d, s in cells]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda a: _diagnostic_cell(*a), args))
    else:
        results = [_diagnostic_cell(*a) for a in args]
    records = [r for cell in results for r in cell]
    order = {m: i for i, m in enumerate(methods)}
    records.sort(key=lambda r: (order[r.method], r.d, r.seed))
    return records


def summarize(records: Sequence[DiagnosticRecord]):
    """Seed-averaged error per ``(method, d)``."""
    table = {}
    for r in records:
        table.setdefault((r.method, r.d), []).append(r.rel_error)
    return {k: float(np.mean(v)) for k, v in table.items()}


# -- data hypercleaning ------------------------------------------------------


@dataclass
class HypercleanDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    corrupted: np.ndarray
    y_train_clean: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int
    corruption_ratio: float
    seed: int

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


def corrupt_labels(labels, ratio: float, classes: int, rng):
    """Reassign exactly ``floor(ratio * N)`` labels to a uniformly chosen different class."""
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"corruption ratio must lie in [0, 1], got {ratio}")
    n = labels.shape[0]
    count = int(np.floor(ratio * n))
    if count and classes < 2:
        raise ValueError("label corruption needs at least 2 classes")
    rng = np.random.default_rng(rng)
    idx = rng.choice(n, size=count, replace=False)
    out = labels.copy()
    out[idx] = (labels[idx] + rng.integers(1, classes, size=count)) % classes
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    return out, mask


def split_and_corrupt(x, y, n_train, n_val, n_test, classes, noise_ratio, seed) -> HypercleanDataset:
    """Shuffle ``(x, y)`` into train/val/test and corrupt the training labels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    total = n_train + n_val + n_test
    if x.shape[0] < total:
        raise ValueError(f"need {total} examples, have {x.shape[0]}")
    perm = seeding.stream(seed, "split").permutation(x.shape[0])[:total]
    x, y = x[perm], y[perm]
    tr, va = slice(0, n_train), slice(n_train, n_train + n_val)
    te = slice(n_train + n_val, total)
    noisy, mask = corrupt_labels(y[tr], noise_ratio, classes, seeding.stream(seed, "corrupt"))
    return HypercleanDataset(x[tr], noisy, mask, y[tr].copy(), x[va], y[va], x[te], y[te],
                             classes, noise_ratio, seed)


def gen_synthetic_classification(n_train, n_val, n_test, classes=3, input_dim=10,
                                 separation=4.0, noise_ratio=0.5, seed=0) -> HypercleanDataset:
    """Unit-variance Gaussian clusters whose means are ``separation`` apart pairwise."""
    if min(n_train, n_val, n_test) < classes:
        raise ValueError("each split needs at least one example per class")
    if input_dim < classes:
        raise ValueError("input_dim must be >= classes for equidistant cluster means")
    rng = seeding.stream(seed, "clusters")
    basis, _ = np.linalg.qr(rng.standard_normal((input_dim, classes)))
    means = separation / np.sqrt(2.0) * basis.T
    total = n_train + n_val + n_test
    y = np.arange(total) % classes
    y = y[rng.permutation(total)]
    x = means[y] + rng.standard_normal((total, input_dim))
    return split_and_corrupt(x, y, n_train, n_val, n_test, classes, noise_ratio, seed)


def with_bias(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.hstack([x, np.ones((x.shape[0], 1))])


def linear_classifier(in_dim, classes) -> Network:
    return Network([LinearLayer(np.zeros((classes, in_dim)), "identity")])


def make_hyperclean_task(ds: HypercleanDataset, net: Network, alpha_reg: float = 1e-3,
                         batch_size: Optional[int] = None, bias_feature: bool = True,
                         mc_samples: int = 1) -> BilevelTask:
    """Per-example weighting of a corrupted training set against a clean validation set.

    Inner loss: ``mean_n clip(lam_n) * CE_n(theta) + alpha ||theta||^2``.
    Outer loss: validation cross-entropy (independent of ``lam``).
    """
    if alpha_reg < 0:
        raise ValueError("alpha_reg must be >= 0")
    prep = with_bias if bias_feature else (lambda x: np.asarray(x, dtype=np.float64))
    x_tr, x_va, x_te = prep(ds.x_train), prep(ds.x_val), prep(ds.x_test)
    if x_tr.shape[1] != net.in_dim or net.out_dim != ds.classes:
        raise ShapeError(
            f"network maps {net.in_dim} -> {net.out_dim}, data has {x_tr.shape[1]} features and {ds.classes} classes"
        )
    work = net.copy()
    n = ds.n_train
    y_tr, y_va, y_te = ds.y_train, ds.y_val, ds.y_test
    ce = Criterion("cross_entropy")
    if batch_size is not None and not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must lie in [1, {n}]")

    def trace_at(theta, x):
        unflatten_params(work, theta)
        return forward(work, x)

    def rows(batch):
        return slice(None) if batch is None else batch

    def inner_loss(lam, theta, batch=None):
        b = rows(batch)
        tr = trace_at(theta, x_tr[b])
        loss, _ = loss_and_output_grad(ce.with_weights(clip_weights(lam)[b]), tr.outputs, y_tr[b])
        return loss + alpha_reg * theta @ theta

    def inner_grad(lam, theta, batch=None):
        b = rows(batch)
        tr = trace_at(theta, x_tr[b])
        _, dout = loss_and_output_grad(ce.with_weights(clip_weights(lam)[b]), tr.outputs, y_tr[b])
        return backward(work, tr, dout).flat + 2.0 * alpha_reg * theta

    def eval_loss(theta, x, y):
        return loss_and_output_grad(ce, trace_at(theta, x).outputs, y)[0]

    def outer_loss(lam, theta):
        return eval_loss(theta, x_va, y_va)

    def outer_grads(lam, theta):
        tr = trace_at(theta, x_va)
        _, dout = loss_and_output_grad(ce, tr.outputs, y_va)
        return np.zeros(n), backward(work, tr, dout).flat

    def cross_dvp(lam, theta, v):
        tr = trace_at(theta, x_tr)
        _, dout = loss_and_output_grad(ce, tr.outputs, y_tr)
        g = backpropagate(work, tr, dout)
        blocks = work.split(v)
        dots = sum(np.einsum("ni,ij,nj->n", gk, vk, ak) for gk, vk, ak in zip(g, blocks, tr.inputs))
        return clip_subgradient(lam) * dots / n

    def curvature(lam, theta, batch=None):
        # the operator outlives this call, so it gets a network the other closures never touch
        b = rows(batch)
        own = work.copy()
        unflatten_params(own, theta)
        return GgnOperator(own, forward(own, x_tr[b]), ce.with_weights(clip_weights(lam)[b]),
                           shift=2.0 * alpha_reg)

    def kfac(lam, theta, batch=None, rng=None):
        b = rows(batch)
        tr = trace_at(theta, x_tr[b])
        return estimate_kfac_mc(work, tr, ce.with_weights(clip_weights(lam)[b]), mc_samples, rng)

    def sample_batch(rng):
        return np.sort(rng.choice(n, size=batch_size, replace=False))

    task = BilevelTask(
        inner_loss=inner_loss,
        inner_grad=inner_grad,
        outer_loss=outer_loss,
        outer_grads=outer_grads,
        cross_dvp=cross_dvp,
        curvature=curvature,
        m=n,
        d=net.num_params,
        kfac=kfac,
        curvature_shift=2.0 * alpha_reg,
        project=clip_weights,
        test_metric=lambda lam, theta: eval_loss(theta, x_te, y_te),
        sample_batch=sample_batch if batch_size is not None and batch_size < n else None,
        name="hyperclean",
    )
    task.test_accuracy = lambda theta: float(np.mean(trace_at(theta, x_te).outputs.argmax(1) == y_te))
    return task


def roc_auc(scores, positives) -> float:
    """Area under the ROC curve of ``scores`` for detecting ``positives`` (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = pos.sum(), (~pos).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
