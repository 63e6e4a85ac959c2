"""Block-structured quasi-Newton SQP methods for nonlinear optimal control."""

from .autodiff import (VectorFunction, directional_derivative, jacobian,
                       vjp, vjp_multi)
from .model import (Iterate, OcpModel, chain_of_masses, constant_iterate,
                    evaluate_lagrangian_gradient, kkt_residual,
                    problem_from_config)
from .integrator import (ButcherTableau, CollocationStage, MapDynamics,
                         Rk4Dynamics, collocation_adjoint,
                         collocation_jacobians, collocation_residual,
                         collocation_stage, gauss_legendre_tableau,
                         rk4_adjoint, rk4_jacobian, rk4_map, rk4_tableau,
                         solve_collocation)
from .qp import (QpDegenerateError, QpSolution, StageQpData,
                 kkt_solve_structured, solve_qp)
from .updates import (UpdateVectors, block_sr1_hessian_update,
                      block_tr1_update, broyden_update, dense_tr1_update)
from .sqp import (HessianScheme, JacobianStore, SqpConfig, SqpError,
                  SqpResult, run_sqp, sqp_iterate)
from .lifted import (LiftedStageState, collocation_kkt_residual,
                     lifted_initialize, lifted_iterate, run_direct_sqp,
                     run_lifted_sqp, tr1_update_DC)
from .diagnostics import (ReferenceSolution, build_reference, estimate_rate,
                          null_space, projected_jacobian_error,
                          reduced_kkt_error, stage_null_spaces)
from .rti import (ClosedLoopTrace, RtiController, rti_step,
                  shift_warm_start, simulate_closed_loop)

__all__ = [
    "VectorFunction", "directional_derivative", "jacobian", "vjp",
    "vjp_multi",
    "Iterate", "OcpModel", "chain_of_masses", "constant_iterate",
    "evaluate_lagrangian_gradient", "kkt_residual", "problem_from_config",
    "ButcherTableau", "CollocationStage", "MapDynamics", "Rk4Dynamics",
    "collocation_adjoint", "collocation_jacobians", "collocation_residual",
    "collocation_stage", "gauss_legendre_tableau", "rk4_adjoint",
    "rk4_jacobian", "rk4_map", "rk4_tableau", "solve_collocation",
    "QpDegenerateError", "QpSolution", "StageQpData",
    "kkt_solve_structured", "solve_qp",
    "UpdateVectors", "block_sr1_hessian_update", "block_tr1_update",
    "broyden_update", "dense_tr1_update",
    "HessianScheme", "JacobianStore", "SqpConfig", "SqpError", "SqpResult",
    "run_sqp", "sqp_iterate",
    "LiftedStageState", "collocation_kkt_residual", "lifted_initialize",
    "lifted_iterate", "run_direct_sqp", "run_lifted_sqp", "tr1_update_DC",
    "ReferenceSolution", "build_reference", "estimate_rate", "null_space",
    "projected_jacobian_error", "reduced_kkt_error", "stage_null_spaces",
    "ClosedLoopTrace", "RtiController", "rti_step", "shift_warm_start",
    "simulate_closed_loop",
]
