import numpy as np
import pytest

from blocktr1 import autodiff as ad
from blocktr1.autodiff import VectorFunction
from blocktr1.integrator import (CollocationStage, ExplicitFormError,
                                 collocation_adjoint, collocation_jacobians,
                                 collocation_residual, collocation_stage,
                                 collocation_step, gauss_legendre_tableau,
                                 rk4_adjoint, rk4_jacobian, rk4_map,
                                 simulate_interval, solve_collocation)
from blocktr1.model import OcpModel, chain_of_masses, scalar_linear_model


def implicit_mass_matrix_model(N=1, T=0.1):
    # 2 M xdot = A x + B u with a non-identity mass matrix, implicit only
    M = np.array([[2.0, 0.3], [0.1, 1.5]])
    A = np.array([[-1.0, 0.4], [0.2, -2.0]])
    Bm = np.array([[0.5], [1.0]])

    def f(z):
        xdot, x, u = z[:2], z[2:4], z[4:]
        out = []
        for i in range(2):
            out.append(M[i, 0] * xdot[0] + M[i, 1] * xdot[1]
                       - A[i, 0] * x[0] - A[i, 1] * x[1] - Bm[i, 0] * u[0])
        return out
    rhs = VectorFunction(5, 2, f)
    return OcpModel(
        n_x=2, n_u=1, N=N, T=T, rhs=rhs, explicit=False, phi=None,
        stage_residuals=[VectorFunction(3, 3, lambda w: list(w))] * N,
        terminal_residual=VectorFunction(2, 2, lambda w: list(w)),
        path_rows=[np.zeros((0, 3)) for _ in range(N)] + [np.zeros((0, 2))],
        path_bounds=[np.zeros(0)] * (N + 1), x0hat=np.array([1.0, 0.0])), \
        M, A, Bm


# -- explicit RK4 ----------------------------------------------------------


def test_rk4_zero_rhs_identity():
    m = scalar_linear_model(0.0, 0.0, 1, 0.5)
    assert rk4_map(m, [1.3], [0.7], 3) == pytest.approx([1.3])


def test_rk4_stability_polynomial():
    # one step of h = 0.1 on xdot = -x equals the quartic Taylor value
    m = scalar_linear_model(-1.0, 0.0, 1, 0.1)
    z = -0.1
    expected = 1 + z + z ** 2 / 2 + z ** 3 / 6 + z ** 4 / 24
    assert rk4_map(m, [1.0], [0.0], 1)[0] == pytest.approx(expected,
                                                           abs=1e-15)


def test_rk4_empirical_order_four():
    # global error over [0, 1] on xdot = -x
    errs = []
    hs = [0.2, 0.1, 0.05, 0.025]
    m = scalar_linear_model(-1.0, 0.0, 1, 1.0)
    for h in hs:
        n = round(1.0 / h)
        errs.append(abs(rk4_map(m, [1.0], [0.0], n)[0] - np.exp(-1.0)))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - 4.0) <= 0.1


def test_rk4_requires_explicit_model():
    m, *_ = implicit_mass_matrix_model()
    with pytest.raises(ExplicitFormError):
        rk4_map(m, [1.0, 0.0], [0.0], 1)


def test_rk4_jacobian_zero_rhs():
    m = scalar_linear_model(0.0, 0.0, 1, 0.5)
    J = rk4_jacobian(m, [2.0], [0.1], 2)
    assert np.allclose(J, [[1.0, 0.0]], atol=0)


def test_rk4_jacobian_linear_closed_form():
    a, b, h = -0.8, 0.5, 0.1
    m = scalar_linear_model(a, b, 1, h)
    J = rk4_jacobian(m, [1.7], [0.3], 1)
    z = a * h
    Rz = 1 + z + z ** 2 / 2 + z ** 3 / 6 + z ** 4 / 24
    # du-sensitivity of the linear RK4 step: (R(z) - 1) * b / a
    assert J[0, 0] == pytest.approx(Rz, abs=1e-14)
    assert J[0, 1] == pytest.approx((Rz - 1) * b / a, abs=1e-14)


def test_rk4_jacobian_finite_difference_chain():
    m = chain_of_masses(3, 8, 1.6, spring_d=5.0, rest_length=0.1)
    x, u = m.x0hat, np.array([0.02, -0.01, 0.03])
    J = rk4_jacobian(m, x, u, 4)
    z = np.concatenate([x, u])
    eps = 1e-6
    for j in range(0, z.shape[0], 5):
        e = np.zeros(z.shape[0])
        e[j] = eps
        fp = rk4_map(m, (z + e)[:m.n_x], (z + e)[m.n_x:], 4)
        fmn = rk4_map(m, (z - e)[:m.n_x], (z - e)[m.n_x:], 4)
        fd = (fp - fmn) / (2 * eps)
        denom = np.maximum(np.abs(J[:, j]), 1.0)
        assert np.max(np.abs(fd - J[:, j]) / denom) < 1e-6


def test_rk4_adjoint_matches_jacobian_transpose():
    m = chain_of_masses(3, 8, 1.6, spring_d=5.0, rest_length=0.1)
    rng = np.random.default_rng(0)
    x, u = m.x0hat, rng.normal(size=3) * 0.1
    J = rk4_jacobian(m, x, u, 5)
    for _ in range(5):
        s = rng.normal(size=m.n_x)
        g = rk4_adjoint(m, x, u, 5, s)
        ref = J.T @ s
        assert np.max(np.abs(g - ref)) <= 1e-10 * (1 + np.max(np.abs(ref)))


def test_rk4_adjoint_zero_seed():
    m = chain_of_masses(2, 4, 1.0)
    g = rk4_adjoint(m, m.x0hat, np.zeros(3), 3, np.zeros(m.n_x))
    assert np.array_equal(g, np.zeros(m.n_w))


def test_rk4_adjoint_scalar_closed_form():
    a, b, h = -0.8, 0.5, 0.1
    m = scalar_linear_model(a, b, 1, h)
    g = rk4_adjoint(m, [1.7], [0.3], 1, [2.0])
    J = rk4_jacobian(m, [1.7], [0.3], 1)
    assert np.allclose(g, J.T @ [2.0], atol=1e-13)


# -- Gauss-Legendre tableaus ------------------------------------------------


def test_gl_tableau_s1_is_midpoint():
    t = gauss_legendre_tableau(1)
    assert np.allclose(t.c, [0.5], atol=1e-15)
    assert np.allclose(t.b, [1.0], atol=1e-15)
    assert np.allclose(t.A, [[0.5]], atol=1e-15)


def test_gl_tableau_s2_nodes():
    t = gauss_legendre_tableau(2)
    r = np.sqrt(3) / 6
    assert t.c == pytest.approx([0.5 - r, 0.5 + r], abs=1e-14)
    assert t.b.sum() == pytest.approx(1.0, abs=1e-14)


def test_gl_tableau_vandermonde_conditions():
    # collocation conditions: sum_l a_jl c_l^(q-1) = c_j^q / q
    for s in (1, 2, 3, 4):
        t = gauss_legendre_tableau(s)
        for q in range(1, s + 1):
            lhs = t.A @ (t.c ** (q - 1))
            assert np.allclose(lhs, t.c ** q / q, atol=1e-13)
        assert np.allclose(t.b @ np.vander(t.c, s, increasing=True),
                           [1.0 / (q + 1) for q in range(s)], atol=1e-13)


def test_gl_tableau_rejects_bad_stage_count():
    with pytest.raises(ValueError):
        gauss_legendre_tableau(5)
    with pytest.raises(ValueError):
        gauss_legendre_tableau(0)


@pytest.mark.parametrize("s", [1, 2])
def test_gl_empirical_order(s):
    # global error over [0, 1] on xdot = -x
    errs = []
    hs = [0.2, 0.1, 0.05, 0.025]
    m = scalar_linear_model(-1.0, 0.0, 1, 1.0)
    tableau = gauss_legendre_tableau(s)
    for h in hs:
        n = round(1.0 / h)
        x1 = simulate_interval(m, [1.0], [0.0], 1.0, n, tableau)
        errs.append(abs(x1[0] - np.exp(-1.0)))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert abs(slope - 2 * s) <= 0.1


def test_a_stability_probe():
    # hz = -50: the 2-stage Gauss scheme contracts, RK4 blows up
    h, lam = 1.0, -50.0
    m = scalar_linear_model(lam, 0.0, 1, h)
    stage = CollocationStage.build(h, gauss_legendre_tableau(2), 1)
    x_gl = collocation_step(m, [1.0], [0.0], stage)
    assert abs(x_gl[0]) < 1.0
    x_rk4 = rk4_map(m, [1.0], [0.0], 1)
    assert abs(x_rk4[0]) > 1.0


# -- collocation equations --------------------------------------------------


def test_collocation_residual_zero_rhs():
    m = scalar_linear_model(0.0, 0.0, 1, 0.1)
    stage = collocation_stage(m, gauss_legendre_tableau(2))
    g = collocation_residual(m, [1.0], [0.0], np.zeros(2), stage)
    assert np.array_equal(g, np.zeros(2))


def test_collocation_scalar_linear_solution():
    # xdot = -x, s = 1, h = 0.1: K solves K = -(x + h K / 2)
    m = scalar_linear_model(-1.0, 0.0, 1, 0.1)
    stage = collocation_stage(m, gauss_legendre_tableau(1))
    K = solve_collocation(m, [1.0], [0.0], stage)
    assert K[0] == pytest.approx(-1.0 / 1.05, abs=1e-12)
    g = collocation_residual(m, [1.0], [0.0], K, stage)
    assert np.max(np.abs(g)) <= 1e-10


def test_collocation_jacobians_scalar_hand_oracle():
    # explicit-form residual K - lam (x + (h/2) K): D = [-lam, 0],
    # C = [1 - h lam / 2]
    lam, h = -1.0, 0.1
    m = scalar_linear_model(lam, 0.0, 1, h)
    stage = collocation_stage(m, gauss_legendre_tableau(1))
    D, C = collocation_jacobians(m, [1.0], [0.0], np.array([-0.9]), stage)
    assert np.allclose(D, [[-lam, 0.0]], atol=1e-14)
    assert np.allclose(C, [[1 - h * lam / 2]], atol=1e-14)


def test_collocation_jacobians_finite_difference():
    m = chain_of_masses(2, 4, 0.8, spring_d=5.0, rest_length=0.1,
                        force_input=True)
    stage = collocation_stage(m, gauss_legendre_tableau(2))
    rng = np.random.default_rng(4)
    K = rng.normal(size=2 * m.n_x) * 0.1
    x, u = m.x0hat, rng.normal(size=3) * 0.05
    D, C = collocation_jacobians(m, x, u, K, stage)
    fn_in = np.concatenate([x, u, K])
    eps = 1e-6
    J = np.hstack([D, C])
    for j in range(0, fn_in.shape[0], 3):
        e = np.zeros_like(fn_in)
        e[j] = eps
        zp, zm = fn_in + e, fn_in - e
        gp = collocation_residual(m, zp[:m.n_x], zp[m.n_x:m.n_w],
                                  zp[m.n_w:], stage)
        gm = collocation_residual(m, zm[:m.n_x], zm[m.n_x:m.n_w],
                                  zm[m.n_w:], stage)
        fd = (gp - gm) / (2 * eps)
        denom = np.maximum(np.abs(J[:, j]), 1.0)
        assert np.max(np.abs(fd - J[:, j]) / denom) < 1e-6


def test_collocation_adjoint_matches_transpose():
    m = chain_of_masses(2, 4, 0.8, spring_d=5.0, rest_length=0.1,
                        force_input=True)
    stage = collocation_stage(m, gauss_legendre_tableau(2))
    rng = np.random.default_rng(9)
    K = rng.normal(size=2 * m.n_x) * 0.1
    x, u = m.x0hat, rng.normal(size=3) * 0.05
    D, C = collocation_jacobians(m, x, u, K, stage)
    sigma = rng.normal(size=2 * m.n_x)
    g = collocation_adjoint(m, x, u, K, stage, sigma)
    ref = np.concatenate([D.T @ sigma, C.T @ sigma])
    assert np.max(np.abs(g - ref)) <= 1e-10 * (1 + np.max(np.abs(ref)))
    assert np.array_equal(
        collocation_adjoint(m, x, u, K, stage, np.zeros(2 * m.n_x)),
        np.zeros(m.n_w + 2 * m.n_x))


def test_collocation_implicit_model():
    # implicit mass-matrix ODE handled through the generic residual form
    m, M, A, Bm = implicit_mass_matrix_model()
    stage = collocation_stage(m, gauss_legendre_tableau(2))
    K = solve_collocation(m, [1.0, 0.0], [0.2], stage)
    g = collocation_residual(m, [1.0, 0.0], [0.2], K, stage)
    assert np.max(np.abs(g)) <= 1e-10
    # against the exact linear solution over one step
    x1 = np.array([1.0, 0.0]) + stage.B @ K
    import scipy.linalg
    Ac = np.linalg.solve(M, A)
    Bc = np.linalg.solve(M, Bm)
    expm = scipy.linalg.expm(Ac * stage.h)
    x_exact = expm @ [1.0, 0.0] + np.linalg.solve(
        Ac, (expm - np.eye(2)) @ (Bc @ [0.2]))
    assert np.max(np.abs(x1 - x_exact)) < 1e-7


def test_simulate_interval_accuracy():
    m = scalar_linear_model(-1.0, 0.0, 1, 1.0)
    x1 = simulate_interval(m, [1.0], [0.0], 1.0, 4,
                           gauss_legendre_tableau(4))
    assert x1[0] == pytest.approx(np.exp(-1.0), abs=1e-12)
