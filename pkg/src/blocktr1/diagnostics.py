"""Measurements behind the convergence claims.

Null-space projections of active constraint rows, projected Jacobian
errors, tail contraction-rate estimates and the reduced-KKT-matrix error
used to diagnose superlinear behaviour.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import Iterate, OcpModel, stage_cost_terms


class LicqError(ValueError):
    """Active rows are linearly dependent."""


class InsufficientDecayError(ValueError):
    """An error quotient in the tail is >= 1; no linear rate exists."""


def null_space(rows: np.ndarray | None, n: int) -> np.ndarray:
    """Orthonormal basis of null(rows) via Householder QR of rows^T.

    ``rows`` of None or zero height yields the identity. Raises
    :class:`LicqError` when the rows are rank deficient.
    """
    if rows is None or rows.shape[0] == 0:
        return np.eye(n)
    rows = np.asarray(rows, dtype=float)
    m = rows.shape[0]
    if rows.shape[1] != n:
        raise ad.DimensionError("row width mismatch")
    Q, R = np.linalg.qr(rows.T, mode="complete")
    diag = np.abs(np.diag(R[:m, :m])) if m else np.zeros(0)
    if m and np.min(diag) <= 1e-10 * max(1.0, np.max(diag)):
        raise LicqError("active rows are rank deficient")
    return Q[:, m:]


def stage_null_spaces(model: OcpModel, active_set,
                      include_initial: bool = True) -> list[np.ndarray]:
    """Per-stage null-space bases of the active rows at a solution.

    ``active_set`` holds global inequality row ids (stage-local rows are
    stacked in stage order). The initial-value condition pins the x_0
    directions of stage 0, so its rows are appended there by default.
    """
    offsets = []
    acc = 0
    for P in model.path_rows:
        offsets.append(acc)
        acc += P.shape[0]
    bases = []
    active = sorted(active_set) if active_set else []
    for i in range(model.N + 1):
        nv = model.stage_dim(i)
        rows = [model.path_rows[i][g - offsets[i]]
                for g in active
                if offsets[i] <= g < offsets[i] + model.path_rows[i].shape[0]]
        if i == 0 and include_initial:
            init = np.hstack([np.eye(model.n_x),
                              np.zeros((model.n_x, nv - model.n_x))])
            rows = list(init) + rows
        mat = np.vstack(rows) if rows else None
        bases.append(null_space(mat, nv))
    return bases


def projected_jacobian_error(A: np.ndarray, J_star: np.ndarray,
                             N_basis: np.ndarray,
                             norm: str = "fro") -> float:
    """|| (A - J_star) N || in the Frobenius or spectral norm."""
    if N_basis.shape[1] == 0:
        return 0.0
    E = (A - J_star) @ N_basis
    if norm == "fro":
        return float(np.linalg.norm(E))
    if norm == "2":
        return float(np.linalg.norm(E, 2))
    raise ValueError(f"unknown norm: {norm!r}")


def estimate_rate(errors, tail: int = 5) -> float:
    """Geometric-mean contraction rate over the last ``tail`` quotients."""
    e = np.asarray([float(v) for v in errors])
    if np.any(e <= 0.0):
        raise ValueError("error sequence must be positive")
    if e.shape[0] < tail + 1:
        raise ValueError("too few entries for the requested tail")
    q = e[-tail:] / e[-tail - 1:-1]
    if np.any(q >= 1.0):
        raise InsufficientDecayError("tail quotient >= 1")
    return float(np.exp(np.mean(np.log(q))))


@dataclass
class ReferenceSolution:
    """Converged solution against which runs are measured."""

    iterate: Iterate
    jac_blocks: list[np.ndarray]        # exact dF/dw at w*, stages 0..N-1
    null_bases: list[np.ndarray]        # stages 0..N
    active_set: list[int]

    def distance(self, it: Iterate) -> float:
        d = max(float(np.max(np.abs(it.X - self.iterate.X))),
                float(np.max(np.abs(it.lam - self.iterate.lam))))
        if it.U.size:
            d = max(d, float(np.max(np.abs(it.U - self.iterate.U))))
        return d

    def projected_errors(self, A_blocks) -> np.ndarray:
        return np.array([
            projected_jacobian_error(A, J, Nb) for A, J, Nb in
            zip(A_blocks, self.jac_blocks, self.null_bases)])


def build_reference(model: OcpModel, dynamics, it_star: Iterate,
                    active_set) -> ReferenceSolution:
    jacs = [dynamics.jacobian(it_star.X[i], it_star.U[i])
            for i in range(model.N)]
    bases = stage_null_spaces(model, active_set)
    return ReferenceSolution(it_star.copy(), jacs, bases,
                             sorted(active_set) if active_set else [])


def _exact_stage_hessian(model: OcpModel, dynamics, it: Iterate, i: int,
                         fd_step: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian of the stage Lagrangian terms.

    Differentiates the exact stage gradient grad l(w) + dF/dw(w)^T lam_i,
    which needs only first derivatives of the model.
    """
    w0 = it.w(i)
    nv = w0.shape[0]
    lam_i = it.lam[i] if i < model.N else None

    def grad_at(w):
        g, _ = stage_cost_terms(model, i, w)
        if lam_i is not None and np.any(lam_i):
            g = g + dynamics.adjoint(w[:model.n_x], w[model.n_x:], lam_i)
        return g

    H = np.empty((nv, nv))
    for j in range(nv):
        e = np.zeros(nv)
        e[j] = fd_step * max(1.0, abs(w0[j]))
        H[:, j] = (grad_at(w0 + e) - grad_at(w0 - e)) / (2 * e[j])
    return 0.5 * (H + H.T)


def reduced_kkt_error(H_blocks, A_blocks, model: OcpModel, dynamics,
                      it_star: Iterate, N_bases) -> float:
    """Frobenius distance of the reduced KKT matrix from its exact value.

    Assembles [[N^T H N, N^T A^T], [A N, 0]] block-wise for the
    approximations and for the exact Hessian/Jacobian at the reference
    point, and returns the Frobenius norm of the difference.
    """
    def assemble(Hs, As):
        nz = sum(Nb.shape[1] for Nb in N_bases)
        nr = model.N * model.n_x
        top = np.zeros((nz, nz))
        off_rows = np.zeros((nr, nz))
        col = 0
        for i, Nb in enumerate(N_bases):
            k = Nb.shape[1]
            top[col:col + k, col:col + k] = Nb.T @ Hs[i] @ Nb
            if i < model.N:
                off_rows[i * model.n_x:(i + 1) * model.n_x,
                         col:col + k] = As[i] @ Nb
            col += k
        return np.block([[top, off_rows.T],
                         [off_rows, np.zeros((nr, nr))]])

    H_star = [_exact_stage_hessian(model, dynamics, it_star, i)
              for i in range(model.N + 1)]
    J_star = [dynamics.jacobian(it_star.X[i], it_star.U[i])
              for i in range(model.N)]
    diff = assemble(H_blocks, A_blocks) - assemble(H_star, J_star)
    return float(np.linalg.norm(diff))
