"""Real-time-iteration NMPC harness.

One SQP (or lifted collocation) iteration per sample, split into a
preparation phase (quasi-Newton updates from the previous accepted step,
warm-start shift, linearization, QP assembly) and a feedback phase that
only injects the measured state and solves the QP. The plant is
propagated by a finer implicit integrator of the same model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .integrator import (CollocationStage, collocation_adjoint,
                         collocation_residual, gauss_legendre_tableau,
                         simulate_interval)
from .lifted import (LiftedStageState, _b_apply, _bt_apply,
                     _lifted_hessians, collocation_kkt_residual,
                     lifted_initialize, tr1_update_DC)
from .model import Iterate, OcpModel, constant_iterate, kkt_residual, \
    stage_cost_terms
from .qp import StageQpData
from .sqp import (HessianScheme, JacobianStore, SqpConfig, SqpError,
                  build_ms_stage_data, initialize_hessian,
                  initialize_jacobians, ms_quasi_newton_update,
                  solve_and_step)
from .updates import UpdateVectors


def shift_warm_start(it: Iterate) -> Iterate:
    """Shift all trajectories one stage forward, duplicating the last.

    The standard continuation warm start between consecutive samples:
    states, controls, multipliers and (when present) the collocation
    variables move up one stage; the new terminal entries repeat the old
    ones.
    """
    out = it.copy()
    out.X[:-1] = it.X[1:]
    out.X[-1] = it.X[-1]
    out.U[:-1] = it.U[1:]
    out.U[-1] = it.U[-1]
    out.lam[:-1] = it.lam[1:]
    out.lam[-1] = it.lam[-1]
    out.mu = [m.copy() for m in it.mu[1:]] + [it.mu[-1].copy()]
    if it.K is not None:
        out.K[:-1] = it.K[1:]
        out.K[-1] = it.K[-1]
    if it.omega is not None:
        out.omega[:-1] = it.omega[1:]
        out.omega[-1] = it.omega[-1]
    return out


def _shift_blocks(blocks: list) -> list:
    return [b.copy() for b in blocks[1:]] + [blocks[-1].copy()]


@dataclass
class RtiSample:
    t: float
    x_plant: np.ndarray
    u: np.ndarray
    kkt: float
    prep_ns: int
    fb_ns: int
    active_set_size: int
    violated: bool
    qp_fallback: bool = False


@dataclass
class ClosedLoopTrace:
    samples: list[RtiSample] = field(default_factory=list)

    @property
    def states(self) -> np.ndarray:
        return np.array([s.x_plant for s in self.samples])

    @property
    def controls(self) -> np.ndarray:
        return np.array([s.u for s in self.samples])


class RtiController:
    """Receding-horizon controller performing one iteration per sample.

    ``mode`` selects the iteration: 'rk4' runs the multiple-shooting SQP
    step, 'lifted' the condensed collocation step. The feedback phase
    never evaluates the model or its derivatives.
    """

    def __init__(self, model: OcpModel, dynamics=None, strategy="exact",
                 hessian: str = "gauss_newton", mode: str = "rk4",
                 stage: CollocationStage | None = None,
                 cfg: SqpConfig | None = None,
                 it0: Iterate | None = None):
        self.model = model
        self.mode = mode
        self.strategy = strategy
        self.cfg = cfg or SqpConfig()
        self.it = (it0 or constant_iterate(model)).copy()
        self.hess = initialize_hessian(model, self.it, hessian)
        self.pending = None          # accepted step awaiting its updates
        self.needs_shift = False
        self.needs_exact_refresh = False
        self.warm_active = None
        self.prepared = None
        self.prep_time = 0
        self.fb_time = 0
        self.fb_qp_solves = 0
        if mode == "rk4":
            if dynamics is None:
                raise ValueError("rk4 mode needs a dynamics object")
            self.dynamics = dynamics
            self.jac = initialize_jacobians(model, dynamics, self.it,
                                            strategy)
        elif mode == "lifted":
            if stage is None:
                raise ValueError("lifted mode needs a collocation stage")
            self.stage = stage
            self.states = lifted_initialize(model, self.it, stage)
        else:
            raise ValueError(f"unknown mode: {mode!r}")

    # -- preparation phase -------------------------------------------------

    def prepare(self):
        t0 = time.perf_counter_ns()
        if self.mode == "rk4":
            self._prepare_ms()
        else:
            self._prepare_lifted()
        self.prep_time = time.perf_counter_ns() - t0

    def _prepare_ms(self):
        if self.pending is not None:
            it_old, it_new, f_old = self.pending
            if self.needs_exact_refresh:
                for i in range(self.model.N):
                    self.jac.blocks[i] = self.dynamics.jacobian(
                        it_new.X[i], it_new.U[i])
                self.needs_exact_refresh = False
            else:
                ms_quasi_newton_update(self.model, self.dynamics, it_old,
                                       it_new, self.jac, self.cfg, f_old)
            self.pending = None
        if self.needs_shift:
            self.it = shift_warm_start(self.it)
            self.jac.blocks = _shift_blocks(self.jac.blocks)
            if self.hess.kind == "block_sr1":
                self.hess.blocks = _shift_blocks(self.hess.blocks)
            self.needs_shift = False
        stages, f_vals = build_ms_stage_data(
            self.model, self.dynamics, self.it, self.jac, self.hess)
        self.prepared = (stages, f_vals)

    def _prepare_lifted(self):
        model, stage = self.model, self.stage
        N, n_w = model.N, model.n_w
        if self.pending is not None:
            it_old, it_new, c_old = self.pending
            if self.needs_exact_refresh or self.strategy == "exact":
                for i, st in enumerate(self.states):
                    from .integrator import collocation_jacobians
                    D, C = collocation_jacobians(
                        model, it_new.X[i], it_new.U[i], it_new.K[i], stage)
                    st.D, st.C = D, C
                    st.C_inv = np.linalg.inv(C)
                    st.E = st.C_inv @ D
                self.needs_exact_refresh = False
            else:
                variant = {"block_tr1_forward": "forward",
                           "block_tr1_adjoint": "adjoint",
                           "block_tr1_dynamic": "dynamic"}[self.strategy]
                for i, st in enumerate(self.states):
                    s = np.concatenate([
                        it_new.X[i] - it_old.X[i],
                        it_new.U[i] - it_old.U[i],
                        it_new.K[i] - it_old.K[i]])
                    sigma = it_new.omega[i] - it_old.omega[i]
                    scale = 1.0 + np.linalg.norm(
                        np.concatenate([it_new.X[i], it_new.U[i],
                                        it_new.K[i]]))
                    if np.linalg.norm(s) <= self.cfg.qn_min_step * scale:
                        continue
                    c_new = collocation_residual(
                        model, it_new.X[i], it_new.U[i], it_new.K[i], stage)
                    gamma = collocation_adjoint(
                        model, it_new.X[i], it_new.U[i], it_new.K[i], stage,
                        sigma)
                    uv = UpdateVectors(s, sigma, c_new - c_old[i], gamma)
                    tr1_update_DC(st, uv, variant, self.cfg.c1,
                                  sm_guard=self.cfg.sm_guard)
            self.pending = None
        if self.needs_shift:
            self.it = shift_warm_start(self.it)
            old = self.states
            self.states = []
            for i in range(N):
                src = old[i + 1] if i + 1 < N else old[-1]
                self.states.append(LiftedStageState(
                    self.it.K[i].copy(), self.it.omega[i].copy(),
                    src.D.copy(), src.C.copy(), src.C_inv.copy(),
                    src.E.copy()))
            if self.hess.kind == "block_sr1":
                self.hess.blocks = _shift_blocks(self.hess.blocks)
            self.needs_shift = False
        if self.cfg.drift_check:
            for st in self.states:
                d_inv, d_e = st.drift()
                if d_inv > self.cfg.drift_tol or d_e > self.cfg.drift_tol:
                    st.refresh()

        it = self.it
        c_vals = [collocation_residual(model, it.X[i], it.U[i],
                                       self.states[i].K, stage)
                  for i in range(N)]
        g_k_vals = []
        h_blocks = _lifted_hessians(model, it, self.hess)
        qp_stages = []
        for i in range(N):
            st = self.states[i]
            w = it.w(i)
            grad, _ = stage_cost_terms(model, i, w)
            adj = collocation_adjoint(model, it.X[i], it.U[i], st.K, stage,
                                      st.omega)
            g_w, g_k = adj[:n_w], adj[n_w:]
            if self.strategy != "exact":
                grad = grad + g_w - st.E.T @ g_k
            g_k_vals.append(g_k)
            e_i = it.X[i] + _b_apply(stage, st.K) - it.X[i + 1]
            cinv_c = st.C_inv @ c_vals[i]
            d_i = e_i - _b_apply(stage, cinv_c)
            A_i = -_b_apply(stage, st.E)
            A_i[:, :model.n_x] += np.eye(model.n_x)
            qp_stages.append(StageQpData(
                H=h_blocks[i], h=grad, A=A_i, a=d_i,
                P=model.path_rows[i],
                p=model.path_bounds[i] - model.path_rows[i] @ w))
        grad_N, _ = stage_cost_terms(model, N, it.X[N])
        qp_stages.append(StageQpData(
            H=h_blocks[N], h=grad_N, P=model.path_rows[N],
            p=model.path_bounds[N] - model.path_rows[N] @ it.X[N]))
        self.prepared = (qp_stages, c_vals, g_k_vals)

    # -- feedback phase -----------------------------------------------------

    def feedback(self, x0hat) -> np.ndarray:
        """Inject the measured state, solve the QP, apply the full step."""
        t0 = time.perf_counter_ns()
        x0hat = np.asarray(x0hat, dtype=float)
        try:
            if self.mode == "rk4":
                u = self._feedback_ms(x0hat)
            else:
                u = self._feedback_lifted(x0hat)
            fallback = False
        except SqpError:
            u = self.it.U[0].copy()
            self.needs_exact_refresh = True
            self.pending = None
            self.needs_shift = False
            fallback = True
        self.fb_time = time.perf_counter_ns() - t0
        self.last_fallback = fallback
        return u

    def _feedback_ms(self, x0hat) -> np.ndarray:
        stages, f_vals = self.prepared
        it_new, sol = solve_and_step(
            self.model, self.it, stages, x0hat,
            self.warm_active if self.cfg.warm_start_qp else None)
        self.fb_qp_solves += 1
        self.warm_active = sol.active_set
        self.last_active_set = sol.active_set
        self.pending = (self.it, it_new, f_vals)
        self.it = it_new
        self.needs_shift = True
        return it_new.U[0].copy()

    def _feedback_lifted(self, x0hat) -> np.ndarray:
        model = self.model
        qp_stages, c_vals, g_k_vals = self.prepared
        it_new, sol = solve_and_step(
            model, self.it, qp_stages, x0hat,
            self.warm_active if self.cfg.warm_start_qp else None)
        self.fb_qp_solves += 1
        self.warm_active = sol.active_set
        self.last_active_set = sol.active_set
        for i in range(model.N):
            st = self.states[i]
            dw = sol.dz[i]
            dK = -(st.C_inv @ c_vals[i]) - st.E @ dw
            it_new.K[i] = st.K + dK
            it_new.omega[i] = st.omega - st.C_inv.T @ (
                g_k_vals[i] + _bt_apply(self.stage, it_new.lam[i]))
        self.pending = (self.it, it_new, c_vals)
        for i in range(model.N):
            self.states[i].K = it_new.K[i].copy()
            self.states[i].omega = it_new.omega[i].copy()
        self.it = it_new
        self.needs_shift = True
        return it_new.U[0].copy()

    def residual(self, x0hat) -> float:
        if self.mode == "rk4":
            return kkt_residual(self.model, self.dynamics, self.it,
                                x0hat=x0hat)
        return collocation_kkt_residual(self.model, self.stage, self.it,
                                        x0hat=x0hat)


def rti_step(ctrl: RtiController, x0hat) -> tuple[np.ndarray, RtiSample]:
    """One prepare/feedback cycle; returns the applied control and a record."""
    ctrl.prepare()
    u = ctrl.feedback(x0hat)
    sample = RtiSample(
        t=0.0, x_plant=np.asarray(x0hat, float).copy(), u=u,
        kkt=float("nan"), prep_ns=ctrl.prep_time, fb_ns=ctrl.fb_time,
        active_set_size=len(getattr(ctrl, "last_active_set", [])),
        violated=False, qp_fallback=getattr(ctrl, "last_fallback", False))
    return u, sample


def simulate_closed_loop(model: OcpModel, ctrl: RtiController, steps: int,
                         plant_substeps: int = 4,
                         plant_stages: int = 4,
                         disturbance: np.ndarray | None = None,
                         record_kkt: bool = True) -> ClosedLoopTrace:
    """Alternate plant propagation and RTI samples.

    The plant integrates the same ODE with an s-stage Gauss-Legendre
    scheme over ``plant_substeps`` sub-intervals per sample, which is at
    least as accurate as any controller discretization used here. An
    optional per-sample additive state disturbance acts after each
    propagation.
    """
    tableau = gauss_legendre_tableau(plant_stages)
    trace = ClosedLoopTrace()
    x = model.x0hat.copy()
    dt = model.dt
    P_state = model.path_rows[model.N]
    p_state = model.path_bounds[model.N]
    for k in range(steps):
        u, sample = rti_step(ctrl, x)
        sample.t = k * dt
        if record_kkt:
            sample.kkt = ctrl.residual(x)
        if P_state.shape[0]:
            sample.violated = bool(np.max(P_state @ x - p_state) > 1e-6)
        trace.samples.append(sample)
        if not np.all(np.isfinite(x)):
            raise RuntimeError("plant state became non-finite")
        x = simulate_interval(model, x, u, dt, plant_substeps, tableau)
        if disturbance is not None:
            x = x + disturbance[k]
    return trace
