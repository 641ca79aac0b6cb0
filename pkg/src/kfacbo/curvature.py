"""Kronecker-factored curvature, its damped/eigen-corrected forms, and dense oracles.

For a layer ``z = W a`` the Gauss-Newton block is approximated by ``B kron A``
with ``A = mean(a a^T)`` and ``B`` the second moment of backpropagated output
"pseudo-gradients" ``g~ = (J_z f)^T s`` where ``E[s s^T]`` equals the loss
Hessian w.r.t. the outputs. ``kron`` follows the row-major ``vec`` of
:mod:`kfacbo.nn`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np
from scipy import linalg

from .errors import FormatError, KfacBoError, ShapeError, SolverError
from .nn import (
    Criterion,
    ForwardTrace,
    GradientBundle,
    Network,
    backpropagate,
    backward,
    output_hessian,
    per_example_grads,
    linearized_forward,
    softmax,
)

MAX_EXACT_CLASSES = 32
MAX_DENSE_DIM = 5000
_TRACE_FLOOR = 1e-30


def _sym(m):
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class KfacState:
    """Per-layer Kronecker factors ``A`` (``d_in x d_in``) and ``B`` (``d_out x d_out``)."""

    A: List[np.ndarray]
    B: List[np.ndarray]
    variant: str = "mc"
    mc_samples: int = 1
    step_counter: int = 0
    ema_beta: Optional[float] = None

    @property
    def shapes(self):
        return [(b.shape[0], a.shape[0]) for a, b in zip(self.A, self.B)]

    @property
    def num_params(self) -> int:
        return sum(d1 * d2 for d1, d2 in self.shapes)

    def block(self, k) -> np.ndarray:
        """Dense ``B_k kron A_k`` (row-major vec)."""
        return np.kron(self.B[k], self.A[k])

    def to_dense(self) -> np.ndarray:
        return linalg.block_diag(*[self.block(k) for k in range(len(self.A))])


def _input_factors(trace: ForwardTrace):
    n = trace.batch_size
    return [_sym(a.T @ a / n) for a in trace.inputs]


def output_factor_columns(criterion: Criterion, outputs, rng=None, mc_samples=1,
                          mode="sample", weight_scaling="sqrt"):
    """Output-space vectors ``s`` whose second moment reproduces the loss Hessian.

    Returns an array of shape ``(K, N, C)``; the estimate of the per-example
    output Hessian is ``sum_k s[k, n] s[k, n]^T`` (the ``1/M`` normalization
    for sampling is folded into the columns).

    ``mode="sample"`` draws ``mc_samples`` pseudo-targets from the model's
    predictive distribution. ``mode="enumerate"`` returns every pseudo-label
    weighted by its probability (cross-entropy) or the exact identity factor
    (square loss), which reproduces the Hessian without noise. With
    per-example weights ``w_n`` the vectors are scaled by ``sqrt(w_n)``;
    ``weight_scaling="linear"`` scales by ``w_n`` instead (over-counts the
    weight, kept to demonstrate the effect).
    """
    f = np.asarray(outputs, dtype=np.float64)
    n, c = f.shape
    if mode not in ("sample", "enumerate"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample" and mc_samples < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    if criterion.kind == "cross_entropy":
        p = softmax(f)
        if mode == "enumerate":
            eye = np.eye(c)
            cols = (p[None, :, :] - eye[:, None, :]) * np.sqrt(p.T)[:, :, None]
        else:
            rng = np.random.default_rng(rng)
            cdf = np.cumsum(p, axis=1)
            u = rng.random((mc_samples, n, 1))
            labels = np.minimum((u > cdf[None]).sum(axis=2), c - 1)
            cols = np.broadcast_to(p, (mc_samples, n, c)).copy()
            cols[np.arange(mc_samples)[:, None], np.arange(n)[None, :], labels] -= 1.0
            cols /= np.sqrt(mc_samples)
    else:
        if mode == "enumerate":
            cols = np.broadcast_to(np.eye(c)[:, None, :], (c, n, c)).copy()
        else:
            rng = np.random.default_rng(rng)
            cols = rng.standard_normal((mc_samples, n, c)) / np.sqrt(mc_samples)
    if criterion.weights is not None:
        w = criterion.weights
        if w.shape != (n,):
            raise ShapeError(f"{w.shape[0]} weights for a batch of {n}")
        if weight_scaling == "sqrt":
            cols = cols * np.sqrt(w)[None, :, None]
        elif weight_scaling == "linear":
            cols = cols * w[None, :, None]
        else:
            raise ValueError(f"unknown weight scaling {weight_scaling!r}")
    return cols


def _factors_from_columns(net, trace, cols):
    n = trace.batch_size
    pseudo = backpropagate(net, trace, cols)
    B = [_sym(np.einsum("kni,knj->ij", g, g) / n) for g in pseudo]
    return B


def estimate_kfac_mc(net: Network, trace: ForwardTrace, criterion: Criterion,
                     mc_samples: int = 1, rng=None, enumerate_labels: bool = False) -> KfacState:
    """Monte-Carlo KFAC; ``enumerate_labels`` swaps sampling for exact enumeration."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    mode = "enumerate" if enumerate_labels else "sample"
    cols = output_factor_columns(criterion, trace.outputs, rng, mc_samples, mode)
    return KfacState(_input_factors(trace), _factors_from_columns(net, trace, cols),
                     variant="mc", mc_samples=mc_samples)


def estimate_kfac_exact(net: Network, trace: ForwardTrace, criterion: Criterion) -> KfacState:
    """KFAC with an exact symmetric factorization of the output Hessian (C backprops)."""
    c = trace.outputs.shape[1]
    if c > MAX_EXACT_CLASSES:
        raise ValueError(f"exact factors need C <= {MAX_EXACT_CLASSES}, got {c}")
    cols = output_factor_columns(criterion, trace.outputs, mode="enumerate")
    return KfacState(_input_factors(trace), _factors_from_columns(net, trace, cols),
                     variant="exact", mc_samples=c)


def estimate_kfac_emp(net: Network, trace: ForwardTrace, grads: GradientBundle) -> KfacState:
    """Empirical KFAC: ``B`` from the per-example gradients of the true loss."""
    n = trace.batch_size
    if grads.preact_grads[0].shape[0] != n:
        raise ShapeError(f"gradients for {grads.preact_grads[0].shape[0]} examples, trace has {n}")
    B = [_sym(g.T @ g / n) for g in grads.preact_grads]
    return KfacState(_input_factors(trace), B, variant="empirical", mc_samples=0)


def kfac_state_from_factors(A, B, variant="given") -> KfacState:
    A = [_sym(np.atleast_2d(np.asarray(a, dtype=np.float64))) for a in A]
    B = [_sym(np.atleast_2d(np.asarray(b, dtype=np.float64))) for b in B]
    return KfacState(A, B, variant=variant)


# -- damping ---------------------------------------------------------------

def damping_ratio(A, B, convention="literal") -> float:
    """Trace-based balance ``pi`` between the two damping terms.

    ``literal``: ``sqrt(d_in tr(A) / (d_out tr(B)))``.
    ``normalized``: ``sqrt((tr(A)/d_in) / (tr(B)/d_out))``.
    Falls back to 1 when either trace is (numerically) zero.
    """
    d2, d1 = A.shape[0], B.shape[0]
    tr_a, tr_b = float(np.trace(A)), float(np.trace(B))
    if tr_b < _TRACE_FLOOR or tr_a < _TRACE_FLOOR:
        return 1.0
    if convention == "literal":
        return float(np.sqrt(d2 * tr_a / (d1 * tr_b)))
    if convention == "normalized":
        return float(np.sqrt((tr_a / d2) / (tr_b / d1)))
    raise ValueError(f"unknown damping convention {convention!r}")


@dataclass(frozen=True)
class DampedKfacState:
    """Factors after ``A + pi sqrt(lam) I`` and ``B + sqrt(lam)/pi I``, with Cholesky caches."""

    A: List[np.ndarray]
    B: List[np.ndarray]
    pis: List[float]
    damping: float
    chol_A: list = field(repr=False, default=None)
    chol_B: list = field(repr=False, default=None)

    @property
    def shapes(self):
        return [(b.shape[0], a.shape[0]) for a, b in zip(self.A, self.B)]

    @property
    def num_params(self) -> int:
        return sum(d1 * d2 for d1, d2 in self.shapes)

    def to_dense(self) -> np.ndarray:
        return linalg.block_diag(*[np.kron(b, a) for a, b in zip(self.A, self.B)])


def _cholesky(m, what, k):
    try:
        return linalg.cho_factor(m, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SolverError(f"{what} factor of layer {k} is not positive definite; increase damping") from exc


def apply_damping(state: KfacState, damping: float, convention: str = "literal",
                  allow_zero: bool = False) -> DampedKfacState:
    """Heuristic factored Tikhonov damping.

    ``damping == 0`` is only accepted with ``allow_zero`` (factors must
    already be positive definite).
    """
    if not damping > 0 and not (allow_zero and damping == 0):
        raise ValueError(f"damping must be > 0, got {damping}")
    root = np.sqrt(damping)
    As, Bs, pis, ca, cb = [], [], [], [], []
    for k, (a, b) in enumerate(zip(state.A, state.B)):
        pi = damping_ratio(a, b, convention)
        ad = a + pi * root * np.eye(a.shape[0])
        bd = b + root / pi * np.eye(b.shape[0])
        As.append(ad)
        Bs.append(bd)
        pis.append(pi)
        ca.append(_cholesky(ad, "A", k))
        cb.append(_cholesky(bd, "B", k))
    return DampedKfacState(As, Bs, pis, float(damping), ca, cb)


# -- smoothing and amortization -------------------------------------------

def ema_update(state: Optional[KfacState], fresh: KfacState, beta: float) -> KfacState:
    """``beta * old + (1 - beta) * fresh`` per factor; ``state=None`` means zeros."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"EMA coefficient must lie in [0, 1), got {beta}")
    if state is None:
        A = [(1.0 - beta) * a for a in fresh.A]
        B = [(1.0 - beta) * b for b in fresh.B]
        return replace(fresh, A=A, B=B, step_counter=1, ema_beta=beta)
    if state.shapes != fresh.shapes:
        raise ShapeError(f"factor shapes {state.shapes} vs {fresh.shapes}")
    if beta == 0.0:
        return replace(fresh, step_counter=state.step_counter + 1, ema_beta=beta)
    A = [beta * a + (1.0 - beta) * an for a, an in zip(state.A, fresh.A)]
    B = [beta * b + (1.0 - beta) * bn for b, bn in zip(state.B, fresh.B)]
    return replace(fresh, A=A, B=B, step_counter=state.step_counter + 1, ema_beta=beta)


class FactorCache:
    """Refreshes curvature every ``interval`` steps, optionally with EMA.

    Between refreshes the last factors are returned unchanged, so the caller
    pays for estimation only once per interval.
    """

    def __init__(self, interval: int = 1, ema_beta: float = 0.0):
        if interval < 1:
            raise ValueError("refresh interval must be >= 1")
        if not 0.0 <= ema_beta < 1.0:
            raise ValueError("EMA coefficient must lie in [0, 1)")
        self.interval = interval
        self.ema_beta = ema_beta
        self.state: Optional[KfacState] = None
        self.last_refresh: Optional[int] = None
        self.refreshes = 0

    def due(self, step: int) -> bool:
        return self.state is None or step - self.last_refresh >= self.interval

    def get(self, step: int, estimate: Callable[[], KfacState]) -> KfacState:
        if self.due(step):
            fresh = estimate()
            if self.state is None or self.ema_beta == 0.0:
                self.state = replace(fresh, step_counter=step, ema_beta=self.ema_beta)
            else:
                self.state = ema_update(self.state, fresh, self.ema_beta)
            self.last_refresh = step
            self.refreshes += 1
        return self.state


# -- eigenvalue-corrected KFAC --------------------------------------------

@dataclass(frozen=True)
class EkfacState:
    """Kronecker eigenbasis ``(Q_A, Q_B)`` with per-entry eigenvalues ``d_out x d_in``."""

    QA: List[np.ndarray]
    QB: List[np.ndarray]
    eigenvalues: List[np.ndarray]
    damping: float = 0.0

    @property
    def shapes(self):
        return [s.shape for s in self.eigenvalues]

    @property
    def num_params(self) -> int:
        return sum(s.size for s in self.eigenvalues)

    def with_damping(self, damping: float) -> "EkfacState":
        return replace(self, damping=float(damping))

    def to_dense(self, inverse=False) -> np.ndarray:
        blocks = []
        for qa, qb, s in zip(self.QA, self.QB, self.eigenvalues):
            q = np.kron(qb, qa)
            lam = s.ravel() + self.damping
            blocks.append((q / lam if inverse else q * lam) @ q.T)
        return linalg.block_diag(*blocks)


def _eigh(m, what):
    if not np.all(np.isfinite(m)):
        raise KfacBoError(f"{what} contains non-finite entries")
    vals, vecs = np.linalg.eigh(_sym(m))
    return np.clip(vals, 0.0, None), vecs


def kfac_eigen_state(state: KfacState, damping: float = 0.0) -> EkfacState:
    """KFAC in its eigenbasis: inverting gives ``(B kron A + damping I)^-1`` exactly."""
    QA, QB, S = [], [], []
    for a, b in zip(state.A, state.B):
        la, qa = _eigh(a, "A")
        lb, qb = _eigh(b, "B")
        QA.append(qa)
        QB.append(qb)
        S.append(np.outer(lb, la))
    return EkfacState(QA, QB, S, float(damping))


def ekfac_correct(state: KfacState, net: Network, trace: ForwardTrace, criterion: Criterion,
                  rng=None, mc_samples: int = 1, damping: float = 0.0,
                  enumerate_labels: bool = False) -> EkfacState:
    """Replace the Kronecker eigenvalues by per-direction second moments.

    ``Lambda*[i, j] = mean over examples and samples of (Q_B^T G~ Q_A)[i, j]^2``
    where ``G~ = g~ a^T`` is a per-example pseudo-gradient of the weight.
    """
    mode = "enumerate" if enumerate_labels else "sample"
    cols = output_factor_columns(criterion, trace.outputs, rng, mc_samples, mode)
    pseudo = backpropagate(net, trace, cols)
    n = trace.batch_size
    QA, QB, S = [], [], []
    for k, (a, b) in enumerate(zip(state.A, state.B)):
        _, qa = _eigh(a, f"A[{k}]")
        _, qb = _eigh(b, f"B[{k}]")
        ga = pseudo[k] @ qb          # (K, N, d_out) in B's eigenbasis
        aa = trace.inputs[k] @ qa    # (N, d_in) in A's eigenbasis
        S.append(np.einsum("kni,nj->ij", ga * ga, aa * aa) / n)
        QA.append(qa)
        QB.append(qb)
    return EkfacState(QA, QB, S, float(damping))


def ekfac_inverse(state: EkfacState, v) -> np.ndarray:
    """Apply ``(Q (diag Lambda* + damping) Q^T)^-1`` blockwise.

    ``v`` may be a flat vector or a batch ``(..., d)``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != state.num_params:
        raise ShapeError(f"expected length {state.num_params}, got {v.shape[-1]}")
    out = np.empty_like(v)
    pos = 0
    for qa, qb, s in zip(state.QA, state.QB, state.eigenvalues):
        d1, d2 = s.shape
        denom = s + state.damping
        if np.any(denom <= 0):
            raise SolverError("eigenvalues plus damping must be positive")
        V = v[..., pos:pos + d1 * d2].reshape(v.shape[:-1] + (d1, d2))
        rot = qb.T @ V @ qa
        out[..., pos:pos + d1 * d2] = (qb @ (rot / denom) @ qa.T).reshape(v.shape[:-1] + (d1 * d2,))
        pos += d1 * d2
    return out


# -- dense oracles and matrix-free products -------------------------------

def per_example_jacobians(net: Network, trace: ForwardTrace) -> np.ndarray:
    """Output-parameter Jacobians ``J_theta f_n``, shape ``(N, C, d)``."""
    n, c = trace.outputs.shape
    probes = np.broadcast_to(np.eye(c)[:, None, :], (c, n, c))
    g = backpropagate(net, trace, probes)
    blocks = [np.einsum("cni,nj->ncij", gk, ak).reshape(n, c, -1) for gk, ak in zip(g, trace.inputs)]
    return np.concatenate(blocks, axis=2)


def dense_ggn(net: Network, trace: ForwardTrace, criterion: Criterion, targets=None) -> np.ndarray:
    """Exact Gauss-Newton matrix ``mean_n J_n^T H_n J_n`` (desk-scale oracle)."""
    d = net.num_params
    if d > MAX_DENSE_DIM:
        raise ValueError(f"dense GGN limited to d <= {MAX_DENSE_DIM}, got {d}")
    J = per_example_jacobians(net, trace)
    H = output_hessian(criterion, trace.outputs, targets)
    G = np.einsum("nci,ncd,ndj->ij", J, H, J, optimize=True) / trace.batch_size
    return _sym(G)


def ggn_vector_product(net: Network, trace: ForwardTrace, criterion: Criterion, v) -> np.ndarray:
    """``G v`` via a linearized forward pass and one backward pass."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (net.num_params,):
        raise ShapeError(f"expected vector of length {net.num_params}, got {v.shape}")
    jv = linearized_forward(net, trace, v)
    H = output_hessian(criterion, trace.outputs)
    u = np.einsum("nij,nj->ni", H, jv)
    return backward(net, trace, u).flat


def hvp_finite_difference(grad_fn: Callable, theta, v, h: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian-vector product of a gradient function."""
    if not h > 0:
        raise ValueError("step h must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = (np.asarray(grad_fn(theta + h * v)) - np.asarray(grad_fn(theta - h * v))) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise KfacBoError("finite-difference HVP produced non-finite values")
    return out


def per_example_loss_grads(net: Network, trace: ForwardTrace, criterion: Criterion, targets):
    """Per-example flat gradients of the unweighted losses, shape ``(N, d)``."""
    from .nn import loss_and_output_grad
    _, dout = loss_and_output_grad(Criterion(criterion.kind), trace.outputs, targets)
    return per_example_grads(net, trace, dout)


# -- operators --------------------------------------------------------------

class CurvatureOperator:
    """Symmetric linear map ``v -> C v`` consumed by the solvers."""

    dim: int

    def matvec(self, v) -> np.ndarray:
        raise NotImplementedError

    def __matmul__(self, v):
        return self.matvec(v)

    def to_dense(self) -> np.ndarray:
        if self.dim > MAX_DENSE_DIM:
            raise ValueError(f"refusing to materialize a {self.dim}x{self.dim} operator")
        eye = np.eye(self.dim)
        return _sym(np.column_stack([self.matvec(eye[:, i]) for i in range(self.dim)]))


class DenseOperator(CurvatureOperator):
    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"dense operator must be square, got {m.shape}")
        self.matrix = m
        self.dim = m.shape[0]

    def matvec(self, v):
        return self.matrix @ v

    def to_dense(self):
        return self.matrix


class IdentityOperator(CurvatureOperator):
    def __init__(self, dim):
        self.dim = int(dim)

    def matvec(self, v):
        return np.array(v, dtype=np.float64)

    def to_dense(self):
        return np.eye(self.dim)


class FunctionOperator(CurvatureOperator):
    """Wraps any callable ``v -> C v``; ``shift`` adds ``shift * v``."""

    def __init__(self, fn, dim, shift=0.0):
        self.fn = fn
        self.dim = int(dim)
        self.shift = float(shift)

    def matvec(self, v):
        out = np.asarray(self.fn(v), dtype=np.float64)
        return out + self.shift * v if self.shift else out


class GgnOperator(CurvatureOperator):
    """Matrix-free GGN of a network on a fixed batch, plus an optional ``shift * I``."""

    def __init__(self, net, trace, criterion, shift=0.0):
        self.net, self.trace, self.criterion = net, trace, criterion
        self.dim = net.num_params
        self.shift = float(shift)

    def matvec(self, v):
        out = ggn_vector_product(self.net, self.trace, self.criterion, v)
        return out + self.shift * v if self.shift else out

    def to_dense(self):
        g = dense_ggn(self.net, self.trace, self.criterion)
        return g + self.shift * np.eye(self.dim) if self.shift else g


class KfacOperator(CurvatureOperator):
    """Forward application of the block-diagonal ``B kron A`` (no inverse)."""

    def __init__(self, state):
        self.state = state
        self.dim = state.num_params

    def matvec(self, v):
        v = np.asarray(v, dtype=np.float64)
        out = np.empty_like(v)
        pos = 0
        for a, b in zip(self.state.A, self.state.B):
            d1, d2 = b.shape[0], a.shape[0]
            V = v[pos:pos + d1 * d2].reshape(d1, d2)
            out[pos:pos + d1 * d2] = (b @ V @ a).ravel()
            pos += d1 * d2
        return out

    def to_dense(self):
        return self.state.to_dense()


# -- factor dump ------------------------------------------------------------

FACTOR_MAGIC = b"KFAC"
FACTOR_VERSION = 1


def save_factors(path, state) -> None:
    """Write ``A`` and ``B`` of every layer to a little-endian binary file.

    Layout: ``b"KFAC"``, ``u32`` version, ``u32`` layer count, then per layer
    ``u32 d_out, u32 d_in``; payload per layer ``A`` (d_in x d_in) followed by
    ``B`` (d_out x d_out), row-major float64.
    """
    with open(path, "wb") as fh:
        fh.write(FACTOR_MAGIC)
        fh.write(struct.pack("<II", FACTOR_VERSION, len(state.A)))
        for a, b in zip(state.A, state.B):
            fh.write(struct.pack("<II", b.shape[0], a.shape[0]))
        for a, b in zip(state.A, state.B):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_factors(path) -> KfacState:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FACTOR_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {FACTOR_MAGIC!r}")
    if len(data) < 12:
        raise FormatError("truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FACTOR_VERSION:
        raise FormatError(f"unsupported factor file version {version}")
    pos = 12
    if len(data) < pos + 8 * count:
        raise FormatError("truncated layer table")
    dims = [struct.unpack_from("<II", data, pos + 8 * k) for k in range(count)]
    pos += 8 * count
    A, B = [], []
    for d1, d2 in dims:
        need = 8 * (d2 * d2 + d1 * d1)
        if len(data) < pos + need:
            raise FormatError("truncated payload")
        A.append(np.frombuffer(data, "<f8", d2 * d2, pos).reshape(d2, d2).astype(np.float64))
        pos += 8 * d2 * d2
        B.append(np.frombuffer(data, "<f8", d1 * d1, pos).reshape(d1, d1).astype(np.float64))
        pos += 8 * d1 * d1
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes")
    return KfacState(A, B, variant="loaded")
