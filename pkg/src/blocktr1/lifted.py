"""Lifted collocation SQP with rank-one matrix maintenance.

The collocation variables are condensed out of every QP and expanded
back afterwards, so the subproblems have multiple-shooting size. With
quasi-Newton updates the per-stage matrices (stage Jacobians, the inverse
of the K-block and the condensed Jacobian) are all maintained by rank-one
formulas: no factorization and no matrix-matrix product appears anywhere
in the iteration. A plain direct-collocation SQP driver over the same
stage data is provided as the reference formulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diagnostics import ReferenceSolution
from .integrator import (CollocationStage, collocation_adjoint,
                         collocation_jacobians, collocation_residual,
                         solve_collocation)
from .model import Iterate, OcpModel, constant_iterate, stage_cost_terms
from .qp import QpDegenerateError, StageQpData, solve_qp
from .sqp import (SqpConfig, SqpDiagnostics, SqpError, SqpResult,
                  _psd_floor, _stage_map)
from .updates import UpdateVectors

LIFTED_STRATEGIES = ("exact", "block_tr1_forward", "block_tr1_adjoint",
                     "block_tr1_dynamic")


class OpCounter:
    """Scalar multiplication counts of the structure-exploiting pieces."""

    __slots__ = ("matvec", "outer")

    def __init__(self):
        self.matvec = 0
        self.outer = 0

    def count_matvec(self, m: int, n: int):
        self.matvec += m * n

    def count_outer(self, m: int, n: int):
        self.outer += m * n

    def snapshot(self):
        return self.matvec, self.outer


@dataclass
class LiftedStageState:
    """Per-stage matrices maintained across lifted iterations."""

    K: np.ndarray        # collocation variables (s*n_x)
    omega: np.ndarray    # collocation multipliers (s*n_x)
    D: np.ndarray        # (s*n_x, n_w) stage Jacobian wrt (x, u)
    C: np.ndarray        # (s*n_x, s*n_x) stage Jacobian wrt K
    C_inv: np.ndarray    # maintained inverse of C
    E: np.ndarray        # maintained product C_inv @ D

    def drift(self) -> tuple[float, float]:
        n = self.C.shape[0]
        d_inv = float(np.max(np.abs(self.C_inv @ self.C - np.eye(n))))
        d_e = float(np.max(np.abs(self.E - self.C_inv @ self.D)))
        return d_inv, d_e

    def refresh(self):
        """Refactorize the maintained C once and rebuild C_inv and E."""
        self.C_inv = np.linalg.inv(self.C)
        self.E = self.C_inv @ self.D


class SingularStageError(RuntimeError):
    """The collocation K-block Jacobian is singular (ill-posed model)."""


def lifted_initialize(model: OcpModel, it: Iterate,
                      stage: CollocationStage) -> list[LiftedStageState]:
    """Exact stage Jacobians at the iterate, factorized once.

    This is the only matrix factorization of a lifted run; afterwards the
    inverse and the condensed Jacobian are maintained by rank-one updates.
    Missing collocation variables are filled in by the stage Newton
    solver; missing multipliers start at zero.
    """
    states = []
    s_nx = stage.tableau.s * model.n_x
    for i in range(model.N):
        if it.K is not None:
            K = it.K[i].copy()
        else:
            K = solve_collocation(model, it.X[i], it.U[i], stage)
        omega = it.omega[i].copy() if it.omega is not None \
            else np.zeros(s_nx)
        D, C = collocation_jacobians(model, it.X[i], it.U[i], K, stage)
        try:
            C_inv = np.linalg.inv(C)
        except np.linalg.LinAlgError as exc:
            raise SingularStageError(f"stage {i}: singular dG/dK") from exc
        states.append(LiftedStageState(K, omega, D, C, C_inv, C_inv @ D))
    it.K = np.array([st.K for st in states])
    it.omega = np.array([st.omega for st in states])
    return states


def tr1_dc_scaling(D: np.ndarray, C: np.ndarray, uv: UpdateVectors,
                   variant: str, c1: float, counter: OpCounter | None = None):
    """Shared two-sided rank-one decision on a split [D C] stage Jacobian.

    Returns (skipped, alpha, rho, tau_D, tau_C, variant); the caller
    applies the update so that the lifted and the direct-collocation
    drivers make bitwise-identical decisions from identical inputs.
    """
    n_w = D.shape[1]
    s_w, s_k = uv.s[:n_w], uv.s[n_w:]
    rho = uv.y - D @ s_w - C @ s_k
    tau_d = uv.gamma[:n_w] - uv.sigma @ D
    tau_c = uv.gamma[n_w:] - uv.sigma @ C
    if counter is not None:
        counter.count_matvec(D.shape[0], n_w)
        counter.count_matvec(C.shape[0], C.shape[1])
        counter.count_matvec(D.shape[0], n_w)
        counter.count_matvec(C.shape[0], C.shape[1])
    ns = np.linalg.norm(uv.s)
    nsig = np.linalg.norm(uv.sigma)
    if ns == 0.0 or nsig == 0.0:
        return True, None, rho, tau_d, tau_c, None
    nrho = np.linalg.norm(rho)
    ntau = np.sqrt(tau_d @ tau_d + tau_c @ tau_c)
    den_f = float(tau_d @ s_w + tau_c @ s_k)
    den_a = float(uv.sigma @ rho)
    if variant == "dynamic":
        score_f = abs(den_f) / (nsig * nrho) if nsig * nrho > 0 else np.inf
        score_a = abs(den_a) / (ns * ntau) if ns * ntau > 0 else np.inf
        variant = "forward" if score_f >= score_a else "adjoint"
    if variant == "forward":
        if den_f == 0.0 or abs(den_f) < c1 * nsig * nrho:
            return True, None, rho, tau_d, tau_c, variant
        alpha = 1.0 / den_f
    else:
        if den_a == 0.0 or abs(den_a) < c1 * ns * ntau:
            return True, None, rho, tau_d, tau_c, variant
        alpha = 1.0 / den_a
    return False, alpha, rho, tau_d, tau_c, variant


def tr1_update_DC(state: LiftedStageState, uv: UpdateVectors, variant: str,
                  c1: float = 1e-8, counter: OpCounter | None = None,
                  sm_guard: float = 1e-12) -> tuple[bool, float | None]:
    """Rank-one update of D, C, C_inv and E for one stage.

    The four matrices are updated together or not at all: a skipped
    scaling decision or a near-singular Sherman-Morrison denominator
    leaves the stage untouched, preserving the maintained identities.
    Only matrix-vector products and outer products are used.
    """
    skipped, alpha, rho, tau_d, tau_c, _ = tr1_dc_scaling(
        state.D, state.C, uv, variant, c1, counter)
    if skipped:
        return True, None
    rho_t = state.C_inv @ rho
    tc_rho = float(tau_c @ rho_t)
    if counter is not None:
        counter.count_matvec(*state.C_inv.shape)
    beta_den = 1.0 + alpha * tc_rho
    if abs(beta_den) < sm_guard:
        return True, None
    beta = 1.0 / beta_den

    n_k, n_w = state.D.shape
    state.D += alpha * np.outer(rho, tau_d)
    state.C += alpha * np.outer(rho, tau_c)
    w_row = tau_c @ state.C_inv
    state.C_inv -= (alpha * beta) * np.outer(rho_t, w_row)
    u_row = tau_c @ state.E
    tau_tilde = tau_d - beta * (u_row + alpha * tc_rho * tau_d)
    state.E += alpha * np.outer(rho_t, tau_tilde)
    if counter is not None:
        counter.count_outer(n_k, n_w)
        counter.count_outer(n_k, n_k)
        counter.count_matvec(n_k, n_k)
        counter.count_outer(n_k, n_k)
        counter.count_matvec(n_k, n_w)
        counter.count_outer(n_k, n_w)
    return False, alpha


def _lifted_hessians(model: OcpModel, it: Iterate, hess) -> list[np.ndarray]:
    if hess.kind == "gauss_newton":
        return [stage_cost_terms(model, i, it.w(i))[1]
                for i in range(model.N + 1)]
    return [_psd_floor(H) for H in hess.blocks]


def _b_apply(stage: CollocationStage, M: np.ndarray,
             counter: OpCounter | None = None) -> np.ndarray:
    """B @ M without forming a matrix-matrix product.

    B = h (b^T kron I), so the product is the weighted sum of the s
    row blocks of M; cost is linear in M's size.
    """
    s = stage.tableau.s
    n_x = stage.B.shape[0]
    blocks = M.reshape(s, n_x, *M.shape[1:])
    out = stage.h * np.tensordot(stage.tableau.b, blocks, axes=1)
    if counter is not None:
        counter.count_matvec(M.size, 1)
    return out


def _bt_apply(stage: CollocationStage, lam: np.ndarray,
              counter: OpCounter | None = None) -> np.ndarray:
    """B^T @ lam = h (b kron lam); linear cost."""
    out = stage.h * np.kron(stage.tableau.b, lam)
    if counter is not None:
        counter.count_outer(stage.tableau.s, lam.shape[0])
    return out


def lifted_iterate(model: OcpModel, stage: CollocationStage, it: Iterate,
                   states: list[LiftedStageState], hess,
                   cfg: SqpConfig | None = None, warm_active=None,
                   counter: OpCounter | None = None, c_vals=None,
                   strategy: str = "block_tr1_dynamic"):
    """One lifted collocation SQP iteration (condense, solve, expand).

    Builds the condensed QP from the maintained matrices, solves it,
    expands the collocation variables and multipliers, applies the full
    step, and performs the coupled rank-one updates at the new point.
    With the quasi-Newton strategies this routine performs no matrix
    factorization and no matrix-matrix multiplication.
    """
    cfg = cfg or SqpConfig()
    counter = counter if counter is not None else OpCounter()
    N, n_x, n_w = model.N, model.n_x, model.n_w
    exact = strategy == "exact"

    if c_vals is None:
        c_vals = [collocation_residual(model, it.X[i], it.U[i], states[i].K,
                                       stage) for i in range(N)]
    g_k_vals = [None] * N
    qp_stages = []
    h_blocks = _lifted_hessians(model, it, hess)
    for i in range(N):
        st = states[i]
        w = it.w(i)
        grad, _ = stage_cost_terms(model, i, w)
        if exact:
            g_k = collocation_adjoint(
                model, it.X[i], it.U[i], st.K, stage,
                st.omega)[n_w:] if np.any(st.omega) \
                else np.zeros(st.K.shape[0])
        else:
            adj = collocation_adjoint(model, it.X[i], it.U[i], st.K, stage,
                                      st.omega)
            g_w, g_k = adj[:n_w], adj[n_w:]
            grad = grad + g_w - st.E.T @ g_k
            counter.count_matvec(st.E.shape[1], st.E.shape[0])
        g_k_vals[i] = g_k
        e_i = it.X[i] + _b_apply(stage, st.K, counter) - it.X[i + 1]
        cinv_c = st.C_inv @ c_vals[i]
        counter.count_matvec(*st.C_inv.shape)
        d_i = e_i - _b_apply(stage, cinv_c, counter)
        A_i = -_b_apply(stage, st.E, counter)
        A_i[:, :n_x] += np.eye(n_x)
        qp_stages.append(StageQpData(
            H=h_blocks[i], h=grad, A=A_i, a=d_i,
            P=model.path_rows[i],
            p=model.path_bounds[i] - model.path_rows[i] @ w))
    grad_N, _ = stage_cost_terms(model, N, it.X[N])
    qp_stages.append(StageQpData(
        H=h_blocks[N], h=grad_N, P=model.path_rows[N],
        p=model.path_bounds[N] - model.path_rows[N] @ it.X[N]))

    try:
        sol = solve_qp(qp_stages, model.x0hat - it.X[0],
                       warm_active_set=warm_active if cfg.warm_start_qp
                       else None)
    except QpDegenerateError as exc:
        raise SqpError(f"QP solve failed: {exc}") from exc
    if sol.status != "optimal":
        raise SqpError(f"QP solve failed: {sol.status}")

    it_new = it.copy()
    new_c_vals = [None] * N
    dK_all = []
    for i in range(N):
        st = states[i]
        dw = sol.dz[i]
        cinv_c = st.C_inv @ c_vals[i]
        dK = -cinv_c - st.E @ dw
        counter.count_matvec(*st.C_inv.shape)
        counter.count_matvec(*st.E.shape)
        dK_all.append(dK)
        it_new.X[i] += dw[:n_x]
        it_new.U[i] += dw[n_x:]
        it_new.K[i] = st.K + dK
    it_new.X[N] += sol.dz[N]
    it_new.lam = sol.lam.copy()
    it_new.mu = [m.copy() for m in sol.mu]
    step_norm = float(np.max(np.abs(np.concatenate(
        [np.concatenate(sol.dz)] + dK_all))))

    def update_stage(i):
        st = states[i]
        lam_new = it_new.lam[i]
        omega_new = st.omega - st.C_inv.T @ (
            g_k_vals[i] + _bt_apply(stage, lam_new, counter))
        counter.count_matvec(*st.C_inv.shape)
        it_new.omega[i] = omega_new
        K_new = it_new.K[i]
        x_new, u_new = it_new.X[i], it_new.U[i]
        c_new = collocation_residual(model, x_new, u_new, K_new, stage)
        new_c_vals[i] = c_new
        if exact:
            st.K = K_new.copy()
            st.omega = omega_new
            D, C = collocation_jacobians(model, x_new, u_new, K_new, stage)
            st.D, st.C = D, C
            st.C_inv = np.linalg.inv(C)
            st.E = st.C_inv @ D
            return 0
        s = np.concatenate([sol.dz[i], dK_all[i]])
        sigma = omega_new - st.omega
        skipped = True
        if np.linalg.norm(s) > cfg.qn_min_step * (
                1.0 + np.linalg.norm(np.concatenate([x_new, u_new, K_new]))):
            gamma = collocation_adjoint(model, x_new, u_new, K_new, stage,
                                        sigma)
            uv = UpdateVectors(s, sigma, c_new - c_vals[i], gamma)
            variant = {"block_tr1_forward": "forward",
                       "block_tr1_adjoint": "adjoint",
                       "block_tr1_dynamic": "dynamic"}[strategy]
            skipped, _ = tr1_update_DC(st, uv, variant, cfg.c1, counter,
                                       cfg.sm_guard)
        st.K = K_new.copy()
        st.omega = omega_new
        return int(skipped)

    n_skipped = sum(_stage_map(update_stage, N, cfg.threads))

    n_refresh = 0
    drift_inv = drift_e = 0.0
    if cfg.drift_check:
        for st in states:
            d_inv, d_e = st.drift()
            drift_inv = max(drift_inv, d_inv)
            drift_e = max(drift_e, d_e)
            if d_inv > cfg.drift_tol or d_e > cfg.drift_tol:
                st.refresh()
                n_refresh += 1

    diag = SqpDiagnostics(
        iteration=0, kkt=float("nan"), step_norm=step_norm,
        n_skipped=n_skipped, active_set=sol.active_set,
        strategy=strategy, qp_iterations=sol.iterations,
        n_refactorizations=n_refresh)
    diag.matvec_count, diag.outer_product_count = counter.snapshot()
    diag.drift_inv, diag.drift_e = drift_inv, drift_e
    return it_new, diag, new_c_vals


def collocation_kkt_residual(model: OcpModel, stage: CollocationStage,
                             it: Iterate, x0hat=None) -> float:
    """First-order optimality max-norm for the collocation-form problem."""
    N, n_x, n_w = model.N, model.n_x, model.n_w
    B = stage.B
    x0hat = model.x0hat if x0hat is None else np.asarray(x0hat, float)
    terms = [float(np.max(np.abs(it.X[0] - x0hat)))]
    for i in range(N):
        K, omega, lam = it.K[i], it.omega[i], it.lam[i]
        terms.append(float(np.max(np.abs(
            it.X[i] + B @ K - it.X[i + 1]))))
        terms.append(float(np.max(np.abs(collocation_residual(
            model, it.X[i], it.U[i], K, stage)))))
        adj = collocation_adjoint(model, it.X[i], it.U[i], K, stage, omega)
        grad, _ = stage_cost_terms(model, i, it.w(i))
        r_w = grad + adj[:n_w]
        r_w[:n_x] += lam
        if i > 0:
            r_w[:n_x] -= it.lam[i - 1]
        if model.path_rows[i].shape[0]:
            r_w = r_w + model.path_rows[i].T @ it.mu[i]
        if i == 0:
            r_w = r_w[n_x:]
        terms.append(float(np.max(np.abs(r_w))) if r_w.size else 0.0)
        r_k = adj[n_w:] + B.T @ lam
        terms.append(float(np.max(np.abs(r_k))))
    grad_N, _ = stage_cost_terms(model, N, it.X[N])
    r_N = grad_N - it.lam[N - 1]
    if model.path_rows[N].shape[0]:
        r_N = r_N + model.path_rows[N].T @ it.mu[N]
    terms.append(float(np.max(np.abs(r_N))))
    for i in range(N + 1):
        P, p = model.path_rows[i], model.path_bounds[i]
        if not P.shape[0]:
            continue
        slack = P @ it.w(i) - p
        terms.append(float(np.max(np.maximum(slack, 0.0))))
        terms.append(float(np.max(np.maximum(-it.mu[i], 0.0))))
        terms.append(float(np.max(np.abs(it.mu[i] * slack))))
    return max(terms)


def run_lifted_sqp(model: OcpModel, stage: CollocationStage,
                   strategy: str = "block_tr1_dynamic",
                   hessian: str = "gauss_newton",
                   it0: Iterate | None = None, tol: float = 1e-8,
                   max_iter: int = 100, cfg: SqpConfig | None = None,
                   reference: ReferenceSolution | None = None) -> SqpResult:
    """Drive lifted collocation SQP iterations to the given tolerance."""
    if strategy not in LIFTED_STRATEGIES:
        raise ValueError(f"unknown lifted strategy: {strategy!r}")
    from .sqp import initialize_hessian
    cfg = cfg or SqpConfig()
    it = (it0 or constant_iterate(model)).copy()
    states = lifted_initialize(model, it, stage)
    hess = initialize_hessian(model, it, hessian)
    counter = OpCounter()
    diags = []
    warm = None
    c_vals = None
    status = "max_iterations"
    for k in range(max_iter):
        res = collocation_kkt_residual(model, stage, it)
        if res <= tol:
            status = "converged"
            break
        if res > cfg.divergence_limit or not np.isfinite(res):
            status = "diverged"
            break
        it_new, diag, c_vals = lifted_iterate(
            model, stage, it, states, hess, cfg, warm_active=warm,
            counter=counter, c_vals=c_vals, strategy=strategy)
        diag.iteration = k
        diag.kkt = res
        if reference is not None:
            diag.distance = reference.distance(it)
        diags.append(diag)
        warm = diag.active_set
        it = it_new
    else:
        if collocation_kkt_residual(model, stage, it) <= tol:
            status = "converged"
    result = SqpResult(it, diags, status)
    result.lifted_states = states
    return result


# ---------------------------------------------------------------------------
# direct collocation SQP (reference formulation, shares the update logic)


@dataclass
class DirectStageState:
    K: np.ndarray
    omega: np.ndarray
    D: np.ndarray
    C: np.ndarray


def direct_initialize(model: OcpModel, it: Iterate,
                      stage: CollocationStage) -> list[DirectStageState]:
    states = []
    s_nx = stage.tableau.s * model.n_x
    for i in range(model.N):
        K = it.K[i].copy() if it.K is not None else \
            solve_collocation(model, it.X[i], it.U[i], stage)
        omega = it.omega[i].copy() if it.omega is not None \
            else np.zeros(s_nx)
        D, C = collocation_jacobians(model, it.X[i], it.U[i], K, stage)
        states.append(DirectStageState(K, omega, D, C))
    it.K = np.array([st.K for st in states])
    it.omega = np.array([st.omega for st in states])
    return states


def direct_iterate(model: OcpModel, stage: CollocationStage, it: Iterate,
                   states: list[DirectStageState], hess,
                   cfg: SqpConfig | None = None, warm_active=None,
                   strategy: str = "block_tr1_dynamic"):
    """One SQP iteration on the full direct-collocation problem.

    The stage variables are (x, u, K); the collocation rows are embedded
    as stage-local equality constraints of the structured QP.
    """
    cfg = cfg or SqpConfig()
    N, n_x, n_w = model.N, model.n_x, model.n_w
    B = stage.B
    exact = strategy == "exact"
    s_nx = stage.tableau.s * model.n_x
    h_blocks = _lifted_hessians(model, it, hess)
    qp_stages = []
    for i in range(N):
        st = states[i]
        w = it.w(i)
        grad, _ = stage_cost_terms(model, i, w)
        if exact:
            h_full = np.concatenate([grad, np.zeros(s_nx)])
        else:
            adj = collocation_adjoint(model, it.X[i], it.U[i], st.K, stage,
                                      st.omega)
            h_w = grad + adj[:n_w] - st.D.T @ st.omega
            h_k = adj[n_w:] - st.C.T @ st.omega
            h_full = np.concatenate([h_w, h_k])
        H_full = np.zeros((n_w + s_nx, n_w + s_nx))
        H_full[:n_w, :n_w] = h_blocks[i]
        A_i = np.hstack([np.eye(n_x), np.zeros((n_x, n_w - n_x)), B])
        c_i = collocation_residual(model, it.X[i], it.U[i], st.K, stage)
        P = model.path_rows[i]
        qp_stages.append(StageQpData(
            H=H_full, h=h_full, A=A_i,
            a=it.X[i] + B @ st.K - it.X[i + 1],
            P=np.hstack([P, np.zeros((P.shape[0], s_nx))]),
            p=model.path_bounds[i] - P @ w,
            Geq=np.hstack([st.D, st.C]), geq=c_i))
    grad_N, _ = stage_cost_terms(model, N, it.X[N])
    qp_stages.append(StageQpData(
        H=h_blocks[N], h=grad_N, P=model.path_rows[N],
        p=model.path_bounds[N] - model.path_rows[N] @ it.X[N]))

    try:
        sol = solve_qp(qp_stages, model.x0hat - it.X[0],
                       warm_active_set=warm_active if cfg.warm_start_qp
                       else None)
    except QpDegenerateError as exc:
        raise SqpError(f"QP solve failed: {exc}") from exc
    if sol.status != "optimal":
        raise SqpError(f"QP solve failed: {sol.status}")

    it_new = it.copy()
    n_skipped = 0
    for i in range(N):
        st = states[i]
        dz = sol.dz[i]
        dw, dK = dz[:n_w], dz[n_w:]
        it_new.X[i] += dw[:n_x]
        it_new.U[i] += dw[n_x:]
        it_new.K[i] = st.K + dK
        it_new.omega[i] = sol.omega[i]
    it_new.X[N] += sol.dz[N]
    it_new.lam = sol.lam.copy()
    it_new.mu = [m.copy() for m in sol.mu]

    for i in range(N):
        st = states[i]
        x_new, u_new, K_new = it_new.X[i], it_new.U[i], it_new.K[i]
        if exact:
            st.D, st.C = collocation_jacobians(model, x_new, u_new, K_new,
                                               stage)
        else:
            s = np.concatenate([sol.dz[i][:n_w], it_new.K[i] - st.K])
            sigma = it_new.omega[i] - st.omega
            if np.linalg.norm(s) > cfg.qn_min_step * (1.0 + np.linalg.norm(
                    np.concatenate([x_new, u_new, K_new]))):
                c_new = collocation_residual(model, x_new, u_new, K_new,
                                             stage)
                c_old = collocation_residual(model, it.X[i], it.U[i], st.K,
                                             stage)
                gamma = collocation_adjoint(model, x_new, u_new, K_new,
                                            stage, sigma)
                uv = UpdateVectors(s, sigma, c_new - c_old, gamma)
                variant = {"block_tr1_forward": "forward",
                           "block_tr1_adjoint": "adjoint",
                           "block_tr1_dynamic": "dynamic"}[strategy]
                skipped, alpha, rho, tau_d, tau_c, _ = tr1_dc_scaling(
                    st.D, st.C, uv, variant, cfg.c1)
                if not skipped:
                    st.D = st.D + alpha * np.outer(rho, tau_d)
                    st.C = st.C + alpha * np.outer(rho, tau_c)
                else:
                    n_skipped += 1
            else:
                n_skipped += 1
        st.K = it_new.K[i].copy()
        st.omega = it_new.omega[i].copy()

    diag = SqpDiagnostics(
        iteration=0, kkt=float("nan"),
        step_norm=float(np.max(np.abs(np.concatenate(sol.dz)))),
        n_skipped=n_skipped, active_set=sol.active_set, strategy=strategy,
        qp_iterations=sol.iterations)
    return it_new, diag


def run_direct_sqp(model: OcpModel, stage: CollocationStage,
                   strategy: str = "block_tr1_dynamic",
                   hessian: str = "gauss_newton",
                   it0: Iterate | None = None, tol: float = 1e-8,
                   max_iter: int = 100,
                   cfg: SqpConfig | None = None) -> SqpResult:
    """SQP on the direct-collocation problem without condensing."""
    from .sqp import initialize_hessian
    cfg = cfg or SqpConfig()
    it = (it0 or constant_iterate(model)).copy()
    states = direct_initialize(model, it, stage)
    hess = initialize_hessian(model, it, hessian)
    diags = []
    warm = None
    status = "max_iterations"
    for k in range(max_iter):
        res = collocation_kkt_residual(model, stage, it)
        if res <= tol:
            status = "converged"
            break
        if res > cfg.divergence_limit or not np.isfinite(res):
            status = "diverged"
            break
        it_new, diag = direct_iterate(model, stage, it, states, hess, cfg,
                                      warm_active=warm, strategy=strategy)
        diag.iteration = k
        diag.kkt = res
        diags.append(diag)
        warm = diag.active_set
        it = it_new
    else:
        if collocation_kkt_residual(model, stage, it) <= tol:
            status = "converged"
    result = SqpResult(it, diags, status)
    result.direct_states = states
    return result
