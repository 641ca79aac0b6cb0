"""Approximate solvers for ``(C + lam I) v = b`` and an inverse-quality metric."""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import linalg

from .curvature import (
    CurvatureOperator,
    DampedKfacState,
    DenseOperator,
    EkfacState,
    IdentityOperator,
    KfacState,
    MAX_DENSE_DIM,
    apply_damping,
    ekfac_inverse,
    kfac_eigen_state,
)
from .errors import ShapeError, SolverError

SOLVER_KINDS = ("exact", "cg", "neumann", "identity", "ikvp", "ekfac")


@dataclass(frozen=True)
class SolverSpec:
    """Which solver to run and its budget.

    ``iterations`` is the CG budget ``T``; ``terms`` the Neumann truncation
    ``K``; ``eta`` the Neumann step (``None``: ``1 / (1.1 * lambda_max)``
    from power iteration).
    """

    kind: str
    damping: float = 0.0
    iterations: int = 10
    tol: float = 1e-10
    terms: int = 10
    eta: Optional[float] = None
    damping_convention: str = "literal"

    def __post_init__(self):
        if self.kind not in SOLVER_KINDS:
            raise ValueError(f"unknown solver kind {self.kind!r}; expected one of {SOLVER_KINDS}")
        if not self.damping >= 0:
            raise ValueError("damping must be >= 0")
        if self.iterations < 1:
            raise ValueError("CG needs T >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.terms < 0:
            raise ValueError("Neumann needs K >= 0")
        if self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be > 0")

    @classmethod
    def from_label(cls, label: str, damping: float = 0.0, **kw) -> "SolverSpec":
        """Parse ``Exact``, ``Identity``, ``KFAC``, ``EKFAC``, ``CG-<T>`` or ``Neu-<K>``."""
        key = label.strip()
        low = key.lower()
        if low in ("exact", "identity", "ekfac"):
            return cls(low, damping=damping, **kw)
        if low in ("kfac", "ikvp"):
            return cls("ikvp", damping=damping, **kw)
        m = re.fullmatch(r"cg-(\d+)", low)
        if m:
            return cls("cg", damping=damping, iterations=int(m.group(1)), **kw)
        m = re.fullmatch(r"neu(?:mann)?-(\d+)", low)
        if m:
            return cls("neumann", damping=damping, terms=int(m.group(1)), **kw)
        raise ValueError(f"unrecognized solver label {label!r}")

    @property
    def label(self) -> str:
        return {
            "exact": "Exact",
            "identity": "Identity",
            "ikvp": "KFAC",
            "ekfac": "EKFAC",
            "cg": f"CG-{self.iterations}",
            "neumann": f"Neu-{self.terms}",
        }[self.kind]


@dataclass
class SolveReport:
    solution: np.ndarray
    iterations_used: int = 0
    residual_norm: float = float("nan")
    wall_time: float = 0.0
    warnings: List[str] = field(default_factory=list)


def _as_operator(target):
    if isinstance(target, CurvatureOperator):
        return target
    if isinstance(target, np.ndarray):
        return DenseOperator(target)
    raise TypeError(f"expected a curvature operator or dense matrix, got {type(target).__name__}")


def _residual(op, v, b, damping):
    return float(np.linalg.norm(op.matvec(v) + damping * v - b))


def exact_solve(dense, b, damping: float = 0.0) -> np.ndarray:
    """Direct solve of ``(dense + damping I) v = b`` (``b`` may be a matrix)."""
    m = np.asarray(dense, dtype=np.float64)
    if m.shape[0] > MAX_DENSE_DIM:
        raise ValueError(f"exact solve limited to d <= {MAX_DENSE_DIM}")
    m = m + damping * np.eye(m.shape[0]) if damping else m
    try:
        v = linalg.solve(m, b, assume_a="sym")
    except linalg.LinAlgError as exc:
        raise SolverError("system is singular even after damping") from exc
    if not np.all(np.isfinite(v)):
        raise SolverError("direct solve produced non-finite values")
    return v


def cg_solve(op, b, iterations: int, tol: float = 1e-10, damping: float = 0.0) -> SolveReport:
    """Plain conjugate gradient from ``v0 = 0`` on ``op + damping I``."""
    t0 = time.perf_counter()
    op = _as_operator(op)
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    stop = (tol * np.linalg.norm(b)) ** 2
    used = 0
    for it in range(iterations):
        if rr <= stop:
            break
        cp = op.matvec(p) + damping * p
        curv = p @ cp
        if not np.isfinite(curv) or curv <= 0:
            raise SolverError(f"non-positive curvature p^T C p = {curv}", iteration=it)
        step = rr / curv
        x = x + step * p
        r = r - step * cp
        rr_new = r @ r
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite iterate", iteration=it)
        p = r + (rr_new / rr) * p
        rr = rr_new
        used = it + 1
    res = _residual(op, x, b, damping)
    return SolveReport(x, used, res, time.perf_counter() - t0)


def power_iteration(op, steps: int = 20, damping: float = 0.0, seed: int = 0) -> float:
    """Largest eigenvalue estimate of ``op + damping I`` (Rayleigh quotient)."""
    op = _as_operator(op)
    v = np.random.default_rng(seed).standard_normal(op.dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(steps):
        w = op.matvec(v) + damping * v
        est = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0:
            return damping
        v = w / norm
    return est


def default_neumann_step(op, damping: float = 0.0) -> float:
    return 1.0 / (1.1 * power_iteration(op, damping=damping))


def neumann_solve(op, b, terms: int, eta: Optional[float] = None, damping: float = 0.0) -> SolveReport:
    """Truncated series ``eta * sum_{k=0}^{K} (I - eta (C + damping I))^k b``."""
    t0 = time.perf_counter()
    op = _as_operator(op)
    b = np.asarray(b, dtype=np.float64)
    if terms < 0:
        raise ValueError("Neumann needs K >= 0")
    if eta is None:
        eta = default_neumann_step(op, damping)
    term = b.copy()
    acc = b.copy()
    norms = [np.linalg.norm(acc)]
    warnings = []
    for _ in range(terms):
        term = term - eta * (op.matvec(term) + damping * term)
        acc = acc + term
        norms.append(np.linalg.norm(acc))
        if len(norms) > 5 and norms[-6] > 0 and norms[-1] > 10.0 * norms[-6] and not warnings:
            warnings.append("partial sums grew more than 10x over 5 terms; series looks divergent")
    v = eta * acc
    res = _residual(op, v, b, damping) if terms else float("nan")
    return SolveReport(v, terms, res, time.perf_counter() - t0, warnings)


def ikvp(state: DampedKfacState, v) -> np.ndarray:
    """Inverse KFAC-vector product ``vec(B^-1 V A^-1)`` per layer.

    ``v`` may be a flat vector or a batch ``(..., d)``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != state.num_params:
        raise ShapeError(f"expected length {state.num_params}, got {v.shape[-1]}")
    lead = v.shape[:-1]
    out = np.empty_like(v)
    pos = 0
    for ca, cb, (d1, d2) in zip(state.chol_A, state.chol_B, state.shapes):
        V = v[..., pos:pos + d1 * d2].reshape((-1, d1, d2))
        res = np.empty_like(V)
        for i in range(V.shape[0]):
            left = linalg.cho_solve(cb, V[i])                  # B^-1 V
            res[i] = linalg.cho_solve(ca, left.T).T            # (B^-1 V) A^-1
        out[..., pos:pos + d1 * d2] = res.reshape(lead + (d1 * d2,))
        pos += d1 * d2
    return out


def spectral_norm(m) -> float:
    """Largest singular value, from the top eigenvalue of ``M^T M``."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    if m.shape[0] <= 64:
        return float(np.linalg.norm(m, 2))
    if np.array_equal(m, m.T):
        w = linalg.eigvalsh(m)
        return float(max(abs(w[0]), abs(w[-1])))
    g = m.T @ m
    top = linalg.eigvalsh(0.5 * (g + g.T), subset_by_index=[g.shape[0] - 1] * 2)[0]
    return float(np.sqrt(max(top, 0.0)))


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def relative_operator_error(approx_inv, exact_inv, span: float = 1e4, rtol: float = 1e-6):
    """``min_alpha ||alpha X - Y||_2 / ||Y||_2`` and the minimizing ``alpha``.

    Golden-section search over ``log alpha`` in ``[alpha0 / span, alpha0 * span]``
    with ``alpha0 = ||Y|| / ||X||``, down to relative width ``rtol``. The
    least-squares scale ``<X, Y> / <X, X>`` is also tried, which makes the
    result exact when ``X`` is a multiple of ``Y``.
    """
    X = np.asarray(approx_inv, dtype=np.float64)
    Y = np.asarray(exact_inv, dtype=np.float64)
    if X.shape != Y.shape:
        raise ShapeError(f"shapes differ: {X.shape} vs {Y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("matrices must be finite")
    ny = spectral_norm(Y)
    nx = spectral_norm(X)
    if ny == 0:
        raise ValueError("exact inverse is zero")
    if nx == 0:
        return 1.0, 1.0

    def err(log_alpha):
        return spectral_norm(np.exp(log_alpha) * X - Y) / ny

    center = np.log(ny / nx)
    lo, hi = center - np.log(span), center + np.log(span)
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc, fd = err(c), err(d)
    while hi - lo > rtol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = err(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = err(d)
    best_log, best = (c, fc) if fc <= fd else (d, fd)
    alpha_ls = float(np.vdot(X, Y) / np.vdot(X, X))
    if alpha_ls > 0:
        e_ls = spectral_norm(alpha_ls * X - Y) / ny
        if e_ls <= best:
            return e_ls, alpha_ls
    return best, float(np.exp(best_log))


def solve(spec: SolverSpec, target, b) -> SolveReport:
    """Dispatch ``spec`` against a curvature operator, dense matrix or KFAC state."""
    b = np.asarray(b, dtype=np.float64)
    lam = spec.damping
    kfac_like = isinstance(target, (KfacState, DampedKfacState, EkfacState))
    if spec.kind in ("ikvp", "ekfac"):
        if not kfac_like:
            raise TypeError(f"{spec.label} solver needs Kronecker factors, got {type(target).__name__}")
    elif kfac_like:
        raise TypeError(f"{spec.label} solver needs a curvature operator, got {type(target).__name__}")
    t0 = time.perf_counter()
    if spec.kind == "identity":
        return SolveReport(b.copy(), 0, float("nan"), time.perf_counter() - t0)
    if spec.kind == "exact":
        op = _as_operator(target)
        v = exact_solve(op.to_dense(), b, lam)
        return SolveReport(v, 1, _residual(op, v, b, lam), time.perf_counter() - t0)
    if spec.kind == "cg":
        return cg_solve(target, b, spec.iterations, spec.tol, lam)
    if spec.kind == "neumann":
        return neumann_solve(target, b, spec.terms, spec.eta, lam)
    if spec.kind == "ikvp":
        state = target
        if isinstance(state, EkfacState):
            raise TypeError("KFAC solver got an eigen-corrected state; use the EKFAC solver")
        if isinstance(state, KfacState):
            state = apply_damping(state, lam, spec.damping_convention)
        v = ikvp(state, b)
        return SolveReport(v, 0, float("nan"), time.perf_counter() - t0)
    state = target
    if isinstance(state, DampedKfacState):
        raise TypeError("EKFAC solver needs undamped factors or an eigen-corrected state")
    if isinstance(state, KfacState):
        state = kfac_eigen_state(state)
    v = ekfac_inverse(state.with_damping(lam), b)
    return SolveReport(v, 0, float("nan"), time.perf_counter() - t0)
