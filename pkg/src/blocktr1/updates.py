"""Rank-one matrix update formulas for Jacobian and Hessian blocks.

The two-sided update keeps a rectangular Jacobian block consistent with
either the forward secant condition A+ s = y or the adjoint condition
sigma^T A+ = gamma^T; a scalar-denominator skipping test guards against
blow-up. Classical Broyden updates and the symmetric rank-one Hessian
update are included for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class UpdateVectors:
    """Step data entering one block update.

    ``gamma`` must be the transposed-Jacobian product evaluated at the
    new point; ``y`` is the change in the constraint function value.
    """

    s: np.ndarray        # primal step w+ - w
    sigma: np.ndarray    # multiplier step lam+ - lam
    y: np.ndarray        # F(w+) - F(w)
    gamma: np.ndarray    # dF(w+)^T sigma


@dataclass
class Tr1Result:
    A: np.ndarray
    skipped: bool
    alpha: float | None
    variant: str | None


def block_tr1_update(A: np.ndarray, uv: UpdateVectors, variant: str,
                     c1: float = 1e-8) -> Tr1Result:
    """Two-sided rank-one update A+ = A + alpha * rho * tau^T.

    ``variant`` selects the scaling: 'forward' uses alpha = 1/(tau^T s)
    and satisfies A+ s = y; 'adjoint' uses alpha = 1/(sigma^T rho) and
    satisfies sigma^T A+ = gamma^T; 'dynamic' picks whichever variant has
    the larger normalized denominator. The update is skipped when the
    corresponding denominator fails its threshold test with constant c1.
    """
    if not 0.0 < c1 < 1.0:
        raise ValueError("c1 must lie in (0, 1)")
    s, sigma, y, gamma = uv.s, uv.sigma, uv.y, uv.gamma
    ns, nsig = np.linalg.norm(s), np.linalg.norm(sigma)
    if ns == 0.0 or nsig == 0.0:
        return Tr1Result(A, True, None, None)
    rho = y - A @ s
    tau = gamma - A.T @ sigma
    nrho, ntau = np.linalg.norm(rho), np.linalg.norm(tau)
    den_f = float(tau @ s)
    den_a = float(sigma @ rho)

    if variant == "dynamic":
        score_f = abs(den_f) / (nsig * nrho) if nsig * nrho > 0 else np.inf
        score_a = abs(den_a) / (ns * ntau) if ns * ntau > 0 else np.inf
        variant = "forward" if score_f >= score_a else "adjoint"

    if variant == "forward":
        if den_f == 0.0 or abs(den_f) < c1 * nsig * nrho:
            return Tr1Result(A, True, None, "forward")
        alpha = 1.0 / den_f
    elif variant == "adjoint":
        if den_a == 0.0 or abs(den_a) < c1 * ns * ntau:
            return Tr1Result(A, True, None, "adjoint")
        alpha = 1.0 / den_a
    else:
        raise ValueError(f"unknown variant: {variant!r}")
    return Tr1Result(A + alpha * np.outer(rho, tau), False, alpha, variant)


def dense_tr1_update(A_full: np.ndarray, s, sigma, y, gamma,
                     c1: float = 1e-8, variant: str = "dynamic") -> Tr1Result:
    """The same two-sided update applied to the full stacked Jacobian."""
    uv = UpdateVectors(np.asarray(s, float), np.asarray(sigma, float),
                       np.asarray(y, float), np.asarray(gamma, float))
    return block_tr1_update(A_full, uv, variant, c1)


def broyden_update(A: np.ndarray, s: np.ndarray, y: np.ndarray,
                   variant: str = "good") -> tuple[np.ndarray, bool]:
    """Classical good/bad Broyden updates; both satisfy A+ s = y."""
    s = np.asarray(s, float)
    y = np.asarray(y, float)
    res = y - A @ s
    if variant == "good":
        den = float(s @ s)
        if den == 0.0:
            return A, True
        return A + np.outer(res, s) / den, False
    if variant == "bad":
        v = A.T @ y
        den = float(y @ (A @ s))
        if abs(den) <= 1e-14 * (np.linalg.norm(y) * np.linalg.norm(A @ s)
                                + 1e-300):
            return A, True
        return A + np.outer(res, v) / den, False
    raise ValueError(f"unknown Broyden variant: {variant!r}")


def block_sr1_hessian_update(H: np.ndarray, s: np.ndarray, z: np.ndarray,
                             r: float = 1e-8) -> tuple[np.ndarray, bool]:
    """Symmetric rank-one update H+ = H + vv^T/(v^T s) with v = z - Hs.

    Skipped when |v^T s| < r * ||v|| * ||s||; the result stays symmetric
    and satisfies H+ s = z whenever the update is applied.
    """
    if not 0.0 < r < 1.0:
        raise ValueError("skip threshold must lie in (0, 1)")
    s = np.asarray(s, float)
    z = np.asarray(z, float)
    v = z - H @ s
    den = float(v @ s)
    if den == 0.0 or abs(den) < r * np.linalg.norm(v) * np.linalg.norm(s):
        return H, True
    return H + np.outer(v, v) / den, False
