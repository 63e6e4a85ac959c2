"""Adjoint-based inexact SQP over the multiple-shooting problem.

Each iteration builds the structured QP from the current Jacobian
approximations, applies the full step with the QP multipliers, and then
updates the per-stage blocks with the selected quasi-Newton formula. The
stage loops are data independent and may run on a thread pool.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import ReferenceSolution
from .model import (Iterate, OcpModel, constant_iterate,
                    evaluate_lagrangian_gradient, kkt_residual,
                    stage_cost_terms)
from .qp import QpDegenerateError, QpSolution, StageQpData, solve_qp
from .updates import (UpdateVectors, block_sr1_hessian_update,
                      block_tr1_update, broyden_update, dense_tr1_update)

BLOCK_STRATEGIES = ("exact", "block_tr1_forward", "block_tr1_adjoint",
                    "block_tr1_dynamic", "broyden_good", "broyden_bad")
ALL_STRATEGIES = BLOCK_STRATEGIES + ("dense_tr1",)


class SqpError(RuntimeError):
    """Iteration failed (QP failure or non-finite model evaluation)."""


@dataclass
class SqpConfig:
    c1: float = 1e-8
    sr1_threshold: float = 1e-8
    warm_start_qp: bool = True
    threads: int = 1
    divergence_limit: float = 1e6
    # steps below this relative size carry mostly rounding noise in the
    # function differences; quasi-Newton updates are skipped there
    qn_min_step: float = 1e-9
    # lifted collocation: Sherman-Morrison denominator guard, and the
    # consistency-drift check with its refresh threshold
    sm_guard: float = 1e-12
    drift_check: bool = True
    drift_tol: float = 1e-8


@dataclass
class JacobianStore:
    """Per-stage constraint Jacobian approximations and their strategy."""

    strategy: str
    blocks: list[np.ndarray] | None = None
    dense: np.ndarray | None = None          # dense_tr1 only
    skip_counts: list[int] = field(default_factory=list)

    @property
    def is_dense(self) -> bool:
        return self.strategy == "dense_tr1"


@dataclass
class HessianScheme:
    """Gauss-Newton per iteration, or persistent symmetric rank-one blocks."""

    kind: str = "gauss_newton"
    blocks: list[np.ndarray] | None = None


@dataclass
class SqpDiagnostics:
    iteration: int
    kkt: float
    step_norm: float
    n_skipped: int
    active_set: list[int]
    strategy: str
    qp_iterations: int = 0
    proj_jac_err: float = float("nan")
    proj_jac_per_stage: np.ndarray | None = None
    distance: float = float("nan")
    n_refactorizations: int = 0
    matvec_count: int = 0
    outer_product_count: int = 0


@dataclass
class SqpResult:
    iterate: Iterate
    diagnostics: list[SqpDiagnostics]
    status: str            # converged | max_iterations | diverged
    jacobians: "JacobianStore | None" = None
    hessian: "HessianScheme | None" = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _stage_map(fn, n: int, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(n)))
    return [fn(i) for i in range(n)]


def initialize_jacobians(model: OcpModel, dynamics, it: Iterate,
                         strategy: str, init: str = "exact") -> JacobianStore:
    """Jacobian store seeded exactly at the given iterate (or with zeros)."""
    if strategy not in ALL_STRATEGIES:
        raise ValueError(f"unknown strategy: {strategy!r}")
    if init == "exact":
        blocks = [dynamics.jacobian(it.X[i], it.U[i]) for i in range(model.N)]
    elif init == "zero":
        blocks = [np.zeros((model.n_x, model.n_w)) for _ in range(model.N)]
    else:
        raise ValueError(f"unknown initialization: {init!r}")
    store = JacobianStore(strategy, blocks=blocks,
                          skip_counts=[0] * model.N)
    if store.is_dense:
        store.dense = _stack_dense(model, blocks)
        store.blocks = None
    return store


def initialize_hessian(model: OcpModel, it: Iterate,
                       kind: str = "gauss_newton") -> HessianScheme:
    if kind == "gauss_newton":
        return HessianScheme("gauss_newton")
    if kind == "block_sr1":
        blocks = [stage_cost_terms(model, i, it.w(i))[1]
                  for i in range(model.N + 1)]
        return HessianScheme("block_sr1", blocks)
    raise ValueError(f"unknown Hessian scheme: {kind!r}")


def _stack_dense(model: OcpModel, blocks) -> np.ndarray:
    nv_total = model.N * model.n_w + model.n_x
    A = np.zeros((model.N * model.n_x, nv_total))
    for i, B in enumerate(blocks):
        A[i * model.n_x:(i + 1) * model.n_x,
          i * model.n_w:i * model.n_w + model.n_w] = B
    return A


def _psd_floor(H: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Shift by the smallest eigenvalue so the QP block is safely PSD."""
    lam_min = float(np.linalg.eigvalsh(H)[0])
    if lam_min < floor:
        return H + (floor - lam_min) * np.eye(H.shape[0])
    return H


def _stage_hessians(model: OcpModel, it: Iterate,
                    hess: HessianScheme) -> list[np.ndarray]:
    if hess.kind == "gauss_newton":
        return [stage_cost_terms(model, i, it.w(i))[1]
                for i in range(model.N + 1)]
    return [_psd_floor(H) for H in hess.blocks]


def build_ms_stage_data(model: OcpModel, dynamics, it: Iterate,
                        jac: JacobianStore, hess: HessianScheme,
                        f_vals=None):
    """Stage QP data at an iterate (everything except the initial defect).

    This is the preparation-phase work: dynamics evaluation for the
    defects, the adjoint-corrected gradients, and the Hessian blocks.
    """
    N = len(it.U)
    if f_vals is None:
        f_vals = [dynamics.map(it.X[i], it.U[i]) for i in range(N)]
    if not all(np.all(np.isfinite(f)) for f in f_vals):
        raise SqpError("non-finite dynamics evaluation")
    if jac.strategy == "exact":
        grads = [stage_cost_terms(model, i, it.w(i))[0]
                 for i in range(N + 1)]
    else:
        grads = evaluate_lagrangian_gradient(model, dynamics, it, jac.blocks)
    h_blocks = _stage_hessians(model, it, hess)
    stages = []
    for i in range(N):
        w = it.w(i)
        stages.append(StageQpData(
            H=h_blocks[i], h=grads[i], A=jac.blocks[i],
            a=f_vals[i] - it.X[i + 1],
            P=model.path_rows[i], p=model.path_bounds[i]
            - model.path_rows[i] @ w))
    stages.append(StageQpData(
        H=h_blocks[N], h=grads[N],
        P=model.path_rows[N],
        p=model.path_bounds[N] - model.path_rows[N] @ it.X[N]))
    return stages, f_vals


def solve_and_step(model: OcpModel, it: Iterate, stages, x0hat,
                   warm_active=None) -> tuple[Iterate, QpSolution]:
    """Solve the structured QP and apply the full primal-dual step."""
    try:
        sol = solve_qp(stages, np.asarray(x0hat, float) - it.X[0],
                       warm_active_set=warm_active)
    except QpDegenerateError as exc:
        raise SqpError(f"QP solve failed: {exc}") from exc
    if sol.status != "optimal":
        raise SqpError(f"QP solve failed: {sol.status}")
    N = len(it.U)
    it_new = it.copy()
    for i in range(N):
        it_new.X[i] += sol.dz[i][:model.n_x]
        it_new.U[i] += sol.dz[i][model.n_x:]
    it_new.X[N] += sol.dz[N]
    it_new.lam = sol.lam.copy()
    it_new.mu = [m.copy() for m in sol.mu]
    return it_new, sol


def ms_quasi_newton_update(model: OcpModel, dynamics, it: Iterate,
                           it_new: Iterate, jac: JacobianStore,
                           cfg: SqpConfig, f_vals):
    """Per-stage Jacobian updates at the accepted new iterate.

    Returns (skip flags, dynamics values at the new iterate). For the
    exact strategy the blocks are refreshed by full sensitivity sweeps.
    """
    N = len(it.U)
    variant = {"block_tr1_forward": "forward",
               "block_tr1_adjoint": "adjoint",
               "block_tr1_dynamic": "dynamic"}.get(jac.strategy)
    exact = jac.strategy == "exact"
    new_f_vals = [None] * N

    def update_stage(i):
        x_new, u_new = it_new.X[i], it_new.U[i]
        f_new = dynamics.map(x_new, u_new)
        new_f_vals[i] = f_new
        if exact:
            jac.blocks[i] = dynamics.jacobian(x_new, u_new)
            return 0
        s = np.concatenate([it_new.X[i] - it.X[i], it_new.U[i] - it.U[i]])
        sigma = it_new.lam[i] - it.lam[i]
        if np.linalg.norm(s) <= cfg.qn_min_step * (
                1.0 + np.linalg.norm(it_new.w(i))):
            return 1
        if jac.strategy in ("broyden_good", "broyden_bad"):
            which = "good" if jac.strategy == "broyden_good" else "bad"
            A_new, skipped = broyden_update(jac.blocks[i], s,
                                            f_new - f_vals[i], which)
            jac.blocks[i] = A_new
            return int(skipped)
        gamma = dynamics.adjoint(x_new, u_new, sigma)
        uv = UpdateVectors(s, sigma, f_new - f_vals[i], gamma)
        res = block_tr1_update(jac.blocks[i], uv, variant, cfg.c1)
        jac.blocks[i] = res.A
        return int(res.skipped)

    skip_flags = _stage_map(update_stage, N, cfg.threads)
    for i, sk in enumerate(skip_flags):
        jac.skip_counts[i] += sk
    return skip_flags, new_f_vals


def sqp_iterate(model: OcpModel, dynamics, it: Iterate, jac: JacobianStore,
                hess: HessianScheme, cfg: SqpConfig | None = None,
                warm_active=None, f_vals=None):
    """One full-step SQP iteration; returns (new iterate, diagnostics).

    Builds the stage QP data from the current Jacobian approximations with
    the adjoint-corrected gradient, solves the structured QP, applies the
    full primal-dual step and finally performs the per-stage quasi-Newton
    updates at the new point. The Jacobian and Hessian stores are updated
    in place.
    """
    cfg = cfg or SqpConfig()
    if jac.is_dense:
        return _sqp_iterate_dense(model, dynamics, it, jac, hess, cfg,
                                  warm_active, f_vals)
    stages, f_vals = build_ms_stage_data(model, dynamics, it, jac, hess,
                                         f_vals)
    it_new, sol = solve_and_step(
        model, it, stages, model.x0hat,
        warm_active if cfg.warm_start_qp else None)
    step_norm = float(np.max(np.abs(np.concatenate(sol.dz))))
    skip_flags, new_f_vals = ms_quasi_newton_update(
        model, dynamics, it, it_new, jac, cfg, f_vals)
    if hess.kind == "block_sr1":
        _sr1_update(model, dynamics, it, it_new, hess, cfg)
    diag = SqpDiagnostics(
        iteration=0, kkt=float("nan"), step_norm=step_norm,
        n_skipped=sum(skip_flags), active_set=sol.active_set,
        strategy=jac.strategy, qp_iterations=sol.iterations)
    return it_new, diag, new_f_vals


def _sr1_update(model: OcpModel, dynamics, it: Iterate, it_new: Iterate,
                hess: HessianScheme, cfg: SqpConfig):
    """Symmetric rank-one update of every stage Hessian block.

    The curvature vector is the change of the stage Lagrangian gradient
    between the old and new primal point, both evaluated with the new
    multipliers.
    """
    for i in range(model.N + 1):
        w_old, w_new = it.w(i), it_new.w(i)
        s = w_new - w_old
        g_new, _ = stage_cost_terms(model, i, w_new)
        g_old, _ = stage_cost_terms(model, i, w_old)
        if i < model.N:
            lam = it_new.lam[i]
            if np.any(lam):
                g_new = g_new + dynamics.adjoint(it_new.X[i], it_new.U[i],
                                                 lam)
                g_old = g_old + dynamics.adjoint(it.X[i], it.U[i], lam)
        H_new, _ = block_sr1_hessian_update(hess.blocks[i], s, g_new - g_old,
                                            cfg.sr1_threshold)
        hess.blocks[i] = H_new


def _sqp_iterate_dense(model: OcpModel, dynamics, it: Iterate,
                       jac: JacobianStore, hess: HessianScheme,
                       cfg: SqpConfig, warm_active, f_vals):
    """Comparison-harness iteration with one unstructured Jacobian.

    The whole trajectory is a single QP stage whose equality rows carry
    the dense Jacobian, so rank-one updates may fill entries outside the
    block pattern.
    """
    N, n_x, n_w = model.N, model.n_x, model.n_w
    if f_vals is None:
        f_vals = [dynamics.map(it.X[i], it.U[i]) for i in range(N)]
    nv = N * n_w + n_x
    H = np.zeros((nv, nv))
    h = np.zeros(nv)
    h_blocks = _stage_hessians(model, it, hess)
    lam_stack = it.lam.reshape(-1)
    adj = np.zeros(nv)
    for i in range(N + 1):
        o = i * n_w
        d = model.stage_dim(i)
        H[o:o + d, o:o + d] = h_blocks[i]
        g, _ = stage_cost_terms(model, i, it.w(i))
        h[o:o + d] = g
        if i < N and np.any(it.lam[i]):
            adj[o:o + d] = dynamics.adjoint(it.X[i], it.U[i], it.lam[i])
    h = h + adj - jac.dense.T @ lam_stack

    # equality rows: dynamics with the dense Jacobian, minus the shift
    Geq = np.zeros((N * n_x, nv))
    geq = np.zeros(N * n_x)
    Geq[:, :] = jac.dense
    for i in range(N):
        Geq[i * n_x:(i + 1) * n_x,
            (i + 1) * n_w:(i + 1) * n_w + n_x] -= np.eye(n_x)
        geq[i * n_x:(i + 1) * n_x] = f_vals[i] - it.X[i + 1]
    P_rows, p_vals = [], []
    for i in range(N + 1):
        P = model.path_rows[i]
        if P.shape[0]:
            row = np.zeros((P.shape[0], nv))
            row[:, i * n_w:i * n_w + model.stage_dim(i)] = P
            P_rows.append(row)
            p_vals.append(model.path_bounds[i] - P @ it.w(i))
    stage = StageQpData(
        H=H, h=h, P=np.vstack(P_rows) if P_rows else None,
        p=np.concatenate(p_vals) if p_vals else None, Geq=Geq, geq=geq)
    try:
        sol = solve_qp([stage], model.x0hat - it.X[0],
                       warm_active_set=warm_active if cfg.warm_start_qp
                       else None)
    except QpDegenerateError as exc:
        raise SqpError(f"QP solve failed: {exc}") from exc
    if sol.status != "optimal":
        raise SqpError(f"QP solve failed: {sol.status}")

    dz = sol.dz[0]
    lam_new = sol.omega[0][:N * n_x].reshape(N, n_x)
    it_new = it.copy()
    for i in range(N):
        it_new.X[i] += dz[i * n_w:i * n_w + n_x]
        it_new.U[i] += dz[i * n_w + n_x:(i + 1) * n_w]
    it_new.X[N] += dz[N * n_w:]
    it_new.lam = lam_new
    mu_flat = sol.mu[0]
    pos = 0
    for i in range(N + 1):
        m = model.path_rows[i].shape[0]
        it_new.mu[i] = mu_flat[pos:pos + m].copy()
        pos += m

    new_f_vals = [dynamics.map(it_new.X[i], it_new.U[i]) for i in range(N)]
    sigma = (it_new.lam - it.lam).reshape(-1)
    y = np.concatenate([new_f_vals[i] - f_vals[i] for i in range(N)])
    gamma = np.zeros(nv)
    for i in range(N):
        if np.any(sigma[i * n_x:(i + 1) * n_x]):
            gamma[i * n_w:i * n_w + n_w] = dynamics.adjoint(
                it_new.X[i], it_new.U[i], sigma[i * n_x:(i + 1) * n_x])
    res = dense_tr1_update(jac.dense, dz, sigma, y, gamma, cfg.c1)
    jac.dense = res.A
    if hess.kind == "block_sr1":
        _sr1_update(model, dynamics, it, it_new, hess, cfg)
    diag = SqpDiagnostics(
        iteration=0, kkt=float("nan"),
        step_norm=float(np.max(np.abs(dz))),
        n_skipped=int(res.skipped), active_set=sol.active_set,
        strategy=jac.strategy, qp_iterations=sol.iterations)
    return it_new, diag, new_f_vals


def run_sqp(model: OcpModel, dynamics, strategy: str = "exact",
            hessian: str = "gauss_newton", it0: Iterate | None = None,
            tol: float = 1e-8, max_iter: int = 100,
            cfg: SqpConfig | None = None,
            reference: ReferenceSolution | None = None,
            jac_init: str = "exact") -> SqpResult:
    """Iterate the inexact SQP method until the KKT residual meets tol.

    Per-iteration diagnostics record the residual at the incoming iterate,
    the step norm, skip counts and the QP active set; with ``reference``
    given, the distance to the reference solution and the projected
    Jacobian errors are measured as well.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    cfg = cfg or SqpConfig()
    it = (it0 or constant_iterate(model)).copy()
    jac = initialize_jacobians(model, dynamics, it, strategy, jac_init)
    hess = initialize_hessian(model, it, hessian)
    diags: list[SqpDiagnostics] = []
    warm = None
    f_vals = None
    status = "max_iterations"
    for k in range(max_iter):
        res = kkt_residual(model, dynamics, it)
        if res <= tol:
            status = "converged"
            break
        if res > cfg.divergence_limit or not np.isfinite(res):
            status = "diverged"
            break
        it_new, diag, f_vals = sqp_iterate(model, dynamics, it, jac, hess,
                                           cfg, warm_active=warm,
                                           f_vals=f_vals)
        diag.iteration = k
        diag.kkt = res
        if reference is not None:
            diag.distance = reference.distance(it)
            if not jac.is_dense:
                per_stage = reference.projected_errors(jac.blocks)
                diag.proj_jac_per_stage = per_stage
                diag.proj_jac_err = float(np.max(per_stage))
        diags.append(diag)
        warm = diag.active_set
        it = it_new
    else:
        res = kkt_residual(model, dynamics, it)
        if res <= tol:
            status = "converged"
    return SqpResult(it, diags, status, jac, hess)
