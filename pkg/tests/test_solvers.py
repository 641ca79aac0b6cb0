import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kfacbo.curvature import (
    DenseOperator,
    FunctionOperator,
    IdentityOperator,
    apply_damping,
    estimate_kfac_mc,
    kfac_state_from_factors,
)
from kfacbo.errors import SolverError
from kfacbo.nn import Criterion, LinearLayer, Network, forward
from kfacbo.solvers import (
    SolverSpec,
    cg_solve,
    exact_solve,
    ikvp,
    neumann_solve,
    power_iteration,
    relative_operator_error,
    solve,
    spectral_norm,
)
from kfacbo.tasks import approximate_inverse, gen_linreg


def spd(d, rng, eigs=None):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    eigs = rng.uniform(0.5, 5.0, d) if eigs is None else eigs
    return (q * eigs) @ q.T


# -- spec --------------------------------------------------------------------

@pytest.mark.parametrize("label,kind,budget", [
    ("CG-3", "cg", 3), ("Neu-20", "neumann", 20), ("Neumann-5", "neumann", 5),
    ("KFAC", "ikvp", None), ("EKFAC", "ekfac", None), ("Identity", "identity", None), ("Exact", "exact", None),
])
def test_spec_labels(label, kind, budget):
    spec = SolverSpec.from_label(label)
    assert spec.kind == kind
    if kind == "cg":
        assert spec.iterations == budget
    if kind == "neumann":
        assert spec.terms == budget


@pytest.mark.parametrize("kw", [dict(iterations=0), dict(terms=-1), dict(eta=0.0), dict(tol=0.0), dict(damping=-1.0)])
def test_spec_invariants(kw):
    with pytest.raises(ValueError):
        SolverSpec("cg", **kw)


# -- exact -------------------------------------------------------------------

def test_exact_identity():
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(exact_solve(np.eye(3), b), b)


def test_exact_diagonal():
    np.testing.assert_allclose(exact_solve(np.diag([1.0, 2.0]), np.array([2.0, 2.0])), [2.0, 1.0])


def test_exact_random_spd_residual():
    rng = np.random.default_rng(0)
    C = spd(20, rng)
    b = rng.standard_normal(20)
    assert np.linalg.norm(C @ exact_solve(C, b) - b) <= 1e-10


def test_exact_singular_raises():
    with pytest.raises(SolverError):
        exact_solve(np.zeros((3, 3)), np.ones(3))


# -- CG ----------------------------------------------------------------------

def test_cg_identity_one_iteration():
    b = np.array([3.0, 4.0])
    rep = cg_solve(IdentityOperator(2), b, 10)
    np.testing.assert_allclose(rep.solution, b)
    assert rep.iterations_used == 1


def test_cg_finite_termination():
    rng = np.random.default_rng(1)
    C = spd(30, rng, eigs=np.linspace(1.0, 30.0, 30))
    b = rng.standard_normal(30)
    rep = cg_solve(DenseOperator(C), b, 30, tol=1e-14)
    assert rep.residual_norm <= 1e-8 * np.linalg.norm(b)
    np.testing.assert_allclose(rep.solution, exact_solve(C, b), rtol=1e-6)


def test_cg_energy_error_non_increasing():
    rng = np.random.default_rng(2)
    C = spd(12, rng)
    b = rng.standard_normal(12)
    lam = 0.1
    xs = exact_solve(C, b, lam)
    errs = []
    for t in range(1, 13):
        e = cg_solve(DenseOperator(C), b, t, tol=1e-300, damping=lam).solution - xs
        errs.append(np.sqrt(e @ (C @ e + lam * e)))
    assert all(b_ <= a + 1e-12 for a, b_ in zip(errs, errs[1:]))


def test_cg_indefinite_raises_with_iteration():
    with pytest.raises(SolverError) as info:
        cg_solve(DenseOperator(np.diag([1.0, -1.0])), np.array([0.0, 1.0]), 5)
    assert info.value.iteration == 0


def _seed_averaged_error(method, d, N=100, seeds=range(3)):
    errs = []
    for seed in seeds:
        p = gen_linreg(d, N, seed)
        exact = exact_solve(p.hessian, np.eye(d), 1e-5)
        errs.append(relative_operator_error(approximate_inverse(p, method, 1e-5), exact)[0])
    return float(np.mean(errs))


@pytest.mark.xfail(strict=True, reason="d = N = 100 is the rank-transition point; CG-10 measures ~0.5, "
                                       "not the reference 8.68e-4 (see README, criterion 1)")
def test_cg10_at_rank_transition_order_of_magnitude():
    assert 8.68e-5 <= _seed_averaged_error("CG-10", 100) <= 8.68e-3


# -- Neumann -----------------------------------------------------------------

def test_neumann_identity_collapses():
    b = np.array([1.0, 2.0])
    for k in range(4):
        np.testing.assert_allclose(neumann_solve(IdentityOperator(2), b, k, eta=1.0).solution, b)


@pytest.mark.parametrize("alpha", [0.3, 0.9, 1.5])
@pytest.mark.parametrize("K", [0, 1, 5, 20])
def test_neumann_scalar_geometric_error(alpha, K):
    b = np.array([1.0, -2.0, 0.5])
    v = neumann_solve(DenseOperator(alpha * np.eye(3)), b, K, eta=1.0).solution
    err = np.abs(v - b / alpha) / np.abs(b)
    np.testing.assert_allclose(err, abs(1 - alpha) ** (K + 1) / alpha, rtol=0, atol=1e-12)


def test_neumann_partial_sums_converge_monotonically():
    alpha = 0.4
    errs = [abs(neumann_solve(DenseOperator(np.array([[alpha]])), np.ones(1), k, eta=1.0).solution[0] - 1 / alpha)
            for k in range(15)]
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_neumann_divergence_warning():
    rep = neumann_solve(DenseOperator(3.0 * np.eye(2)), np.ones(2), 12, eta=1.0)
    assert rep.warnings


def test_neumann_default_step_uses_power_iteration():
    C = np.diag([1.0, 4.0, 10.0])
    assert power_iteration(DenseOperator(C)) == pytest.approx(10.0, rel=1e-3)
    rep = neumann_solve(DenseOperator(C), np.ones(3), 500)
    np.testing.assert_allclose(rep.solution, 1.0 / np.diag(C), rtol=1e-6)


def test_neumann_table_regime_order_of_magnitude():
    assert 8.01e-2 <= _seed_averaged_error("Neu-3", 500) <= 8.01


def test_identity_equals_neumann_k0_eta1_bitwise():
    b = np.random.default_rng(3).standard_normal(7)
    ident = solve(SolverSpec("identity"), IdentityOperator(7), b).solution
    neu = solve(SolverSpec("neumann", terms=0, eta=1.0), DenseOperator(np.diag(np.arange(1.0, 8.0))), b).solution
    assert ident.tobytes() == neu.tobytes() == b.tobytes()


# -- IKVP --------------------------------------------------------------------

def test_ikvp_identity_factors():
    st_ = apply_damping(kfac_state_from_factors([np.eye(3)], [np.eye(2)]), 0.0, allow_zero=True)
    v = np.arange(6.0)
    np.testing.assert_allclose(ikvp(st_, v), v)


def test_ikvp_matches_dense_kronecker_inverse():
    rng = np.random.default_rng(4)
    a, b = spd(2, rng), spd(2, rng)
    st_ = apply_damping(kfac_state_from_factors([a], [b]), 0.0, allow_zero=True)
    v = rng.standard_normal(4)
    np.testing.assert_allclose(ikvp(st_, v), np.linalg.solve(np.kron(b, a), v), atol=1e-10)


def test_ikvp_diagonal_arithmetic():
    st_ = apply_damping(kfac_state_from_factors([np.diag([1.0, 4.0])], [np.diag([2.0])]), 0.0, allow_zero=True)
    np.testing.assert_allclose(ikvp(st_, np.array([2.0, 4.0])), [1.0, 0.5])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_ikvp_linear_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    st_ = apply_damping(kfac_state_from_factors([spd(3, rng)], [spd(2, rng)]), 1e-3)
    u, w = rng.standard_normal(6), rng.standard_normal(6)
    np.testing.assert_allclose(ikvp(st_, u + w), ikvp(st_, u) + ikvp(st_, w), atol=1e-12)
    assert abs(u @ ikvp(st_, w) - ikvp(st_, u) @ w) <= 1e-10 * (1 + abs(u @ ikvp(st_, w)))


def _ikvp_vs_full_damping(d, lam, convention):
    p = gen_linreg(d, 200, 0)
    net = Network([LinearLayer(np.zeros((1, d)))])
    st_ = estimate_kfac_mc(net, forward(net, p.X.T), Criterion("square"), mc_samples=50, rng=0)
    damped = apply_damping(st_, lam, convention)
    b = np.random.default_rng(1).standard_normal(d)
    v = ikvp(damped, b)
    # exact against the factored system it actually inverts
    np.testing.assert_allclose(v, np.linalg.solve(damped.to_dense(), b), atol=1e-10)
    ref = exact_solve(p.hessian, b, lam)
    return np.linalg.norm(v - ref) / np.linalg.norm(ref)


def test_ikvp_versus_full_damping_on_linear_regression():
    assert _ikvp_vs_full_damping(8, 1e-5, "literal") <= 5e-2


def test_literal_damping_ratio_overdamps_wide_layers():
    # the literal ratio grows like sqrt(d_in / d_out); the normalized one stays near 1
    literal = _ikvp_vs_full_damping(50, 1e-5, "literal")
    normalized = _ikvp_vs_full_damping(50, 1e-5, "normalized")
    assert normalized <= 5e-2 < literal


# -- error metric ------------------------------------------------------------

def test_error_metric_self_comparison():
    Y = spd(5, np.random.default_rng(5))
    err, alpha = relative_operator_error(Y, Y)
    assert err == 0.0 and alpha == 1.0


def test_error_metric_absorbs_rescaling():
    Y = spd(5, np.random.default_rng(6))
    err, alpha = relative_operator_error(2.0 * Y, Y)
    assert err <= 1e-12
    assert alpha == pytest.approx(0.5, rel=1e-12)


def test_error_metric_matches_grid_search():
    X, Y = np.eye(2), np.diag([1.0, 0.1])
    grid = np.exp(np.linspace(np.log(1e-2), np.log(1e2), 200_001))
    errs = np.maximum(np.abs(grid - 1.0), np.abs(grid - 0.1))
    i = np.argmin(errs)
    err, alpha = relative_operator_error(X, Y)
    assert err == pytest.approx(errs[i], abs=1e-4)
    assert alpha == pytest.approx(grid[i], abs=1e-4)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_error_metric_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    X, Y = spd(6, rng), spd(6, rng)
    assert relative_operator_error(c * X, Y)[0] == pytest.approx(relative_operator_error(X, Y)[0], abs=1e-6)


def test_spectral_norm_large_paths_agree():
    rng = np.random.default_rng(7)
    M = rng.standard_normal((80, 80))
    S = M + M.T
    assert spectral_norm(M) == pytest.approx(np.linalg.norm(M, 2), rel=1e-10)
    assert spectral_norm(S) == pytest.approx(np.linalg.norm(S, 2), rel=1e-10)


# -- dispatch ----------------------------------------------------------------

def test_exact_and_cg_agree():
    rng = np.random.default_rng(8)
    C = spd(30, rng)
    b = rng.standard_normal(30)
    a = solve(SolverSpec("exact"), DenseOperator(C), b).solution
    c = solve(SolverSpec("cg", iterations=30, tol=1e-14), DenseOperator(C), b).solution
    np.testing.assert_allclose(c, a, rtol=1e-6, atol=1e-10)


def test_solve_rejects_mismatched_targets():
    st_ = kfac_state_from_factors([np.eye(2)], [np.eye(1)])
    with pytest.raises(TypeError):
        solve(SolverSpec("cg"), st_, np.ones(2))
    with pytest.raises(TypeError):
        solve(SolverSpec("ikvp", damping=1e-3), DenseOperator(np.eye(2)), np.ones(2))


def test_solve_reports_residual():
    C = np.diag([2.0, 3.0])
    rep = solve(SolverSpec("exact", damping=1.0), C, np.array([3.0, 4.0]))
    np.testing.assert_allclose(rep.solution, [1.0, 1.0])
    assert rep.residual_norm <= 1e-14


def test_function_operator_with_shift():
    op = FunctionOperator(lambda v: 2 * v, 3, shift=1.0)
    np.testing.assert_allclose(op.matvec(np.ones(3)), 3 * np.ones(3))
