import numpy as np
import pytest

from blocktr1.integrator import Rk4Dynamics, collocation_stage, \
    gauss_legendre_tableau
from blocktr1.model import chain_of_masses, constant_iterate
from blocktr1.rti import (RtiController, rti_step, shift_warm_start,
                          simulate_closed_loop)
from blocktr1.sqp import (SqpConfig, initialize_hessian,
                          initialize_jacobians, sqp_iterate)


def cl_model(n_m=3, N=8, wall=-0.05):
    return chain_of_masses(n_m, N, 1.6, spring_d=1.0, rest_length=0.1,
                           u_perturb=(-0.3, 0.3, 0.4), t_perturb=0.8,
                           wall_y=wall, weights=(0.1, 0.005, 2.0))


def test_shift_constant_trajectory_unchanged():
    m = cl_model()
    it = constant_iterate(m)
    it.lam = np.tile(np.arange(m.n_x, dtype=float), (m.N, 1)) * 0 + 0.3
    shifted = shift_warm_start(it)
    assert np.array_equal(shifted.X, it.X)
    assert np.array_equal(shifted.U, it.U)
    assert np.array_equal(shifted.lam, it.lam)


def test_shift_index_bookkeeping_hand_example():
    m = chain_of_masses(2, 2, 1.0, wall_y=-10.0)
    it = constant_iterate(m)
    it.X = np.array([[float(i)] * m.n_x for i in range(3)])
    it.U = np.array([[10.0] * 3, [20.0] * 3])
    it.lam = np.array([[1.0] * m.n_x, [2.0] * m.n_x])
    s = shift_warm_start(it)
    assert np.array_equal(s.X[:, 0], [1.0, 2.0, 2.0])
    assert np.array_equal(s.U[:, 0], [20.0, 20.0])
    assert np.array_equal(s.lam[:, 0], [2.0, 2.0])


def test_double_shift_is_shift_of_shift():
    m = cl_model()
    rng = np.random.default_rng(0)
    it = constant_iterate(m)
    it.X = rng.normal(size=it.X.shape)
    it.U = rng.normal(size=it.U.shape)
    it.lam = rng.normal(size=it.lam.shape)
    a = shift_warm_start(shift_warm_start(it))
    b = shift_warm_start(shift_warm_start(it.copy()))
    assert np.array_equal(a.X, b.X)


def test_first_rti_step_equals_sqp_iterate():
    m = cl_model()
    dyn = Rk4Dynamics(m, 4)
    ctrl = RtiController(m, dynamics=dyn, strategy="exact")
    u, _ = rti_step(ctrl, m.x0hat)
    it0 = constant_iterate(m)
    jac = initialize_jacobians(m, dyn, it0, "exact")
    hess = initialize_hessian(m, it0)
    it1, _, _ = sqp_iterate(m, dyn, it0, jac, hess)
    assert np.max(np.abs(u - it1.U[0])) <= 1e-12
    assert np.max(np.abs(ctrl.it.X - it1.X)) <= 1e-12


def test_steady_state_is_fixed_point():
    m = chain_of_masses(3, 8, 1.6, spring_d=1.0, rest_length=0.1,
                        t_perturb=0.0, wall_y=-10.0)
    dyn = Rk4Dynamics(m, 4)
    ctrl = RtiController(m, dynamics=dyn, strategy="exact")
    for _ in range(3):
        u, _ = rti_step(ctrl, m.x_ss)
    assert np.max(np.abs(u - m.u_ss)) <= 1e-8
    trace = simulate_closed_loop(m, ctrl, steps=5, plant_substeps=2,
                                 plant_stages=2, record_kkt=False)
    assert np.max(np.abs(trace.states - m.x_ss)) <= 1e-8


def test_feedback_phase_does_no_linearization():
    m = cl_model()
    dyn = Rk4Dynamics(m, 4)

    calls = {"map": 0, "jacobian": 0, "adjoint": 0}

    class CountingDynamics:
        def map(self, x, u):
            calls["map"] += 1
            return dyn.map(x, u)

        def jacobian(self, x, u):
            calls["jacobian"] += 1
            return dyn.jacobian(x, u)

        def adjoint(self, x, u, s):
            calls["adjoint"] += 1
            return dyn.adjoint(x, u, s)

    for strategy in ("exact", "block_tr1_dynamic"):
        ctrl = RtiController(m, dynamics=CountingDynamics(),
                             strategy=strategy)
        for k in range(3):
            ctrl.prepare()
            before = dict(calls)
            ctrl.feedback(m.x0hat)
            assert calls == before, "feedback evaluated the model"


def test_closed_loop_returns_to_steady_state():
    m = cl_model(n_m=3)
    dyn = Rk4Dynamics(m, 4)
    ctrl = RtiController(m, dynamics=dyn, strategy="exact")
    steps = 45      # 9 seconds of simulated time
    trace = simulate_closed_loop(m, ctrl, steps, plant_substeps=2,
                                 plant_stages=3, record_kkt=False)
    dev = np.max(np.abs(trace.states - m.x_ss), axis=1)
    assert dev[-1] <= 1e-3
    assert not any(s.violated for s in trace.samples)


def test_closed_loop_exact_vs_tr1_indistinguishable():
    m = cl_model(n_m=3)
    dyn = Rk4Dynamics(m, 4)
    traces = {}
    for strategy in ("exact", "block_tr1_dynamic"):
        ctrl = RtiController(m, dynamics=dyn, strategy=strategy)
        traces[strategy] = simulate_closed_loop(
            m, ctrl, 30, plant_substeps=2, plant_stages=3,
            record_kkt=False)
    xa = traces["exact"].states
    xb = traces["block_tr1_dynamic"].states
    scale = max(1.0, float(np.max(np.abs(xa))))
    assert np.max(np.abs(xa - xb)) / scale <= 1e-2


def test_closed_loop_deterministic():
    m = cl_model(n_m=2)
    dyn = Rk4Dynamics(m, 4)
    runs = []
    for _ in range(2):
        ctrl = RtiController(m, dynamics=dyn, strategy="block_tr1_dynamic")
        tr = simulate_closed_loop(m, ctrl, 10, plant_substeps=2,
                                  plant_stages=2, record_kkt=False)
        runs.append(tr.states)
    assert np.array_equal(runs[0], runs[1])


def test_lifted_rti_controller_runs():
    m = chain_of_masses(2, 6, 1.2, spring_d=3.0, rest_length=0.1,
                        u_perturb=(0.02, 0.03, 0.05), t_perturb=0.5,
                        wall_y=-10.0, force_input=True)
    stage = collocation_stage(m, gauss_legendre_tableau(2))
    ctrl = RtiController(m, strategy="block_tr1_dynamic", mode="lifted",
                         stage=stage)
    trace = simulate_closed_loop(m, ctrl, 12, plant_substeps=2,
                                 plant_stages=3, record_kkt=True)
    assert np.all(np.isfinite(trace.states))
    dev = np.max(np.abs(trace.states - m.x_ss), axis=1)
    assert dev[-1] < dev[0]


def test_infeasible_qp_fallback_holds_previous_control():
    # a wall above the current chain makes the stage-0 rows infeasible
    m = cl_model(n_m=2, wall=-10.0)
    dyn = Rk4Dynamics(m, 4)
    ctrl = RtiController(m, dynamics=dyn, strategy="exact")
    u0, s0 = rti_step(ctrl, m.x0hat)
    bad_model_rows = m.path_bounds[0].copy()
    for i in range(m.N + 1):
        m.path_bounds[i][:] = -1e3      # p rows now unsatisfiable
    u1, s1 = rti_step(ctrl, m.x0hat)
    assert s1.qp_fallback
    assert np.array_equal(u1, ctrl.it.U[0])
    for i in range(m.N + 1):
        m.path_bounds[i][:] = bad_model_rows
    u2, s2 = rti_step(ctrl, m.x0hat)     # recovers with exact refresh
    assert not s2.qp_fallback
