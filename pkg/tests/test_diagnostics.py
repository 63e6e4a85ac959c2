import numpy as np
import pytest

from blocktr1.diagnostics import (InsufficientDecayError, LicqError,
                                  build_reference, estimate_rate,
                                  null_space, projected_jacobian_error,
                                  reduced_kkt_error, stage_null_spaces)
from blocktr1.integrator import Rk4Dynamics
from blocktr1.model import chain_of_masses
from blocktr1.sqp import initialize_jacobians, run_sqp


def test_null_space_no_rows_is_identity():
    N = null_space(None, 4)
    assert np.array_equal(N, np.eye(4))
    N = null_space(np.zeros((0, 4)), 4)
    assert np.array_equal(N, np.eye(4))


def test_null_space_single_row_hand_oracle():
    N = null_space(np.array([[1.0, 0.0]]), 2)
    assert N.shape == (2, 1)
    assert abs(abs(N[1, 0]) - 1.0) < 1e-14
    assert abs(N[0, 0]) < 1e-14


def test_null_space_orthonormal_and_annihilating():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m, n = rng.integers(1, 4), 6
        rows = rng.normal(size=(m, n))
        N = null_space(rows, n)
        assert N.shape == (n, n - m)
        assert np.max(np.abs(N.T @ N - np.eye(n - m))) < 1e-12
        assert np.max(np.abs(rows @ N)) < 1e-12


def test_null_space_licq_violation():
    rows = np.array([[1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(LicqError):
        null_space(rows, 2)


def test_projected_error_exact_is_zero():
    rng = np.random.default_rng(1)
    J = rng.normal(size=(3, 5))
    N = null_space(rng.normal(size=(2, 5)), 5)
    assert projected_jacobian_error(J, J, N) == 0.0
    empty = np.zeros((5, 0))
    assert projected_jacobian_error(J + 1.0, J, empty) == 0.0


def test_projected_error_rank_one_identity():
    # A = J + delta u v^T with v in range(N): error is delta |u| |N^T v|
    rng = np.random.default_rng(2)
    N = null_space(rng.normal(size=(2, 5)), 5)
    J = rng.normal(size=(3, 5))
    u = rng.normal(size=3)
    v = N @ rng.normal(size=3)
    delta = 0.37
    A = J + delta * np.outer(u, v)
    err = projected_jacobian_error(A, J, N)
    expected = delta * np.linalg.norm(u) * np.linalg.norm(N.T @ v)
    assert err == pytest.approx(expected, rel=1e-12)


def test_projected_error_invariant_to_row_space_perturbations():
    rng = np.random.default_rng(3)
    rows = rng.normal(size=(2, 5))
    N = null_space(rows, 5)
    J = rng.normal(size=(3, 5))
    A = J + rng.normal(size=(3, 5)) * 0.1
    base = projected_jacobian_error(A, J, N)
    # any perturbation assembled from the active rows is invisible
    M = rng.normal(size=(3, 2))
    assert projected_jacobian_error(A + M @ rows, J, N) == pytest.approx(
        base, abs=1e-12)


def test_estimate_rate_geometric_sequences():
    e = [0.5 ** k for k in range(10)]
    assert estimate_rate(e, tail=5) == pytest.approx(0.5, rel=1e-12)
    e = [3 * 0.25 ** k for k in range(10)]
    assert estimate_rate(e, tail=5) == pytest.approx(0.25, rel=1e-12)


def test_estimate_rate_scale_invariance():
    rng = np.random.default_rng(4)
    e = np.exp(-0.7 * np.arange(12)) * (1 + 0.1 * rng.random(12))
    e = np.sort(e)[::-1]
    r1 = estimate_rate(e, tail=5)
    r2 = estimate_rate(1737.0 * e, tail=5)
    assert r1 == pytest.approx(r2, rel=1e-14)


def test_estimate_rate_flags():
    with pytest.raises(ValueError):
        estimate_rate([1.0, 0.5], tail=5)
    with pytest.raises(InsufficientDecayError):
        estimate_rate([1.0, 0.5, 0.6, 0.3, 0.2, 0.1], tail=5)
    with pytest.raises(ValueError):
        estimate_rate([1.0, -0.5, 0.1, 0.1, 0.1, 0.1], tail=5)


def _reference_setup():
    m = chain_of_masses(2, 4, 1.0, spring_d=3.0, rest_length=0.1,
                        u_perturb=(0.02, 0.03, 0.05), t_perturb=0.5,
                        wall_y=-10.0, force_input=True)
    dyn = Rk4Dynamics(m, 4)
    res = run_sqp(m, dyn, "exact", tol=1e-12, max_iter=60)
    assert res.converged
    return m, dyn, res.iterate


def test_stage_null_spaces_pin_initial_state():
    m, dyn, it = _reference_setup()
    bases = stage_null_spaces(m, [])
    assert bases[0].shape == (m.n_w, m.n_u)       # x_0 directions removed
    for Nb in bases[1:-1]:
        assert Nb.shape == (m.n_w, m.n_w)
    assert np.max(np.abs(bases[0][:m.n_x, :])) < 1e-12


def test_reduced_kkt_error_zero_for_exact_blocks():
    m, dyn, it = _reference_setup()
    ref = build_reference(m, dyn, it, [])
    from blocktr1.diagnostics import _exact_stage_hessian
    H = [_exact_stage_hessian(m, dyn, it, i) for i in range(m.N + 1)]
    A = [dyn.jacobian(it.X[i], it.U[i]) for i in range(m.N)]
    err = reduced_kkt_error(H, A, m, dyn, it, ref.null_bases)
    assert err == 0.0


def test_reduced_kkt_error_gauss_newton_zero_residual():
    # unperturbed start: the optimum is the steady state itself, all
    # residuals and multipliers vanish, and GN equals the exact Hessian
    m = chain_of_masses(2, 4, 1.0, spring_d=3.0, rest_length=0.1,
                        t_perturb=0.0, wall_y=-10.0, force_input=True)
    dyn = Rk4Dynamics(m, 4)
    res = run_sqp(m, dyn, "exact", tol=1e-12, max_iter=30)
    assert res.converged
    it = res.iterate
    assert np.max(np.abs(it.lam)) < 1e-10
    from blocktr1.model import stage_cost_terms
    ref = build_reference(m, dyn, it, [])
    H_gn = [stage_cost_terms(m, i, it.w(i))[1] for i in range(m.N + 1)]
    A = [dyn.jacobian(it.X[i], it.U[i]) for i in range(m.N)]
    err = reduced_kkt_error(H_gn, A, m, dyn, it, ref.null_bases)
    assert err < 1e-6          # finite-difference noise only


def test_reduced_kkt_error_detects_jacobian_perturbation():
    m, dyn, it = _reference_setup()
    ref = build_reference(m, dyn, it, [])
    from blocktr1.diagnostics import _exact_stage_hessian
    H = [_exact_stage_hessian(m, dyn, it, i) for i in range(m.N + 1)]
    A = [dyn.jacobian(it.X[i], it.U[i]) for i in range(m.N)]
    rng = np.random.default_rng(5)
    pert = rng.normal(size=A[1].shape)
    A[1] = A[1] + pert
    err = reduced_kkt_error(H, A, m, dyn, it, ref.null_bases)
    expected = np.sqrt(2) * np.linalg.norm(pert @ ref.null_bases[1])
    assert err == pytest.approx(expected, rel=1e-10)


def test_projected_jacobian_convergence_along_run(rate_instance):
    # property-level: along a clean local run the worst-stage projected
    # error falls by orders of magnitude
    m, dyn, ref, it0 = rate_instance
    res = run_sqp(m, dyn, "block_tr1_dynamic", tol=1e-10, max_iter=150,
                  reference=ref, it0=it0)
    assert res.converged
    first = res.diagnostics[0].proj_jac_err
    final = float(np.max(ref.projected_errors(res.jacobians.blocks)))
    assert final < 1e-1 * first
    # the unprojected stage-0 error may stay large; only the projection
    # is constrained by the update theory
    unproj0 = np.linalg.norm(res.jacobians.blocks[0] - ref.jac_blocks[0])
    proj0 = ref.projected_errors(res.jacobians.blocks)[0]
    assert proj0 < 1e-3 * max(unproj0, 1.0)
