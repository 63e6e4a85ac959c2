"""Fixed-step integrators and their exact sensitivities.

Two discretizations are provided: the classical explicit RK4 map for
multiple shooting, and implicit Gauss-Legendre collocation described by
its stage equations. Forward sensitivities push dual numbers through the
full map, one seed per column; transposed-Jacobian products run a reverse
sweep over the stored stage points and never materialize the Jacobian of
the composed map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, VectorFunction
from .model import OcpModel


class ExplicitFormError(ValueError):
    """RK4 requires a model in explicit form xdot = phi(x, u)."""


@dataclass(frozen=True)
class ButcherTableau:
    s: int
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray


def rk4_tableau() -> ButcherTableau:
    A = np.array([[0.0, 0, 0, 0],
                  [0.5, 0, 0, 0],
                  [0.0, 0.5, 0, 0],
                  [0.0, 0, 1.0, 0]])
    b = np.array([1.0, 2.0, 2.0, 1.0]) / 6.0
    c = np.array([0.0, 0.5, 0.5, 1.0])
    return ButcherTableau(4, A, b, c)


# ---------------------------------------------------------------------------
# Gauss-Legendre collocation coefficients


def _legendre(n: int, x: float) -> tuple[float, float]:
    """Value and derivative of the Legendre polynomial P_n on [-1, 1]."""
    p_prev, p = 1.0, x
    if n == 0:
        return 1.0, 0.0
    for k in range(1, n):
        p_prev, p = p, ((2 * k + 1) * x * p - k * p_prev) / (k + 1)
    dp = n * (x * p - p_prev) / (x * x - 1.0)
    return p, dp


def _legendre_roots(n: int) -> np.ndarray:
    """Roots of P_n by bisection bracketing plus Newton polishing."""
    grid = np.linspace(-1.0 + 1e-9, 1.0 - 1e-9, 200 * n)
    vals = [_legendre(n, g)[0] for g in grid]
    roots = []
    for lo, hi, flo, fhi in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if flo == 0.0:
            roots.append(lo)
            continue
        if flo * fhi > 0:
            continue
        a, b, fa = lo, hi, flo
        for _ in range(60):
            mid = 0.5 * (a + b)
            fm = _legendre(n, mid)[0]
            if fa * fm <= 0:
                b = mid
            else:
                a, fa = mid, fm
        x = 0.5 * (a + b)
        for _ in range(50):
            p, dp = _legendre(n, x)
            step = p / dp
            x -= step
            if abs(step) < 1e-15:
                break
        roots.append(x)
    return np.array(sorted(roots))


def gauss_legendre_tableau(s: int) -> ButcherTableau:
    """Gauss-Legendre collocation scheme with s stages (order 2s).

    Nodes are the roots of the degree-s Legendre polynomial shifted to
    (0, 1); weights and the coefficient matrix solve the standard
    Vandermonde collocation conditions.
    """
    if not 1 <= s <= 4:
        raise ValueError(f"unsupported stage count: {s}")
    c = 0.5 * (_legendre_roots(s) + 1.0)
    V = np.vander(c, s, increasing=True).T          # V[q, l] = c_l^q
    A = np.empty((s, s))
    for j in range(s):
        rhs = np.array([c[j] ** (q + 1) / (q + 1) for q in range(s)])
        A[j] = np.linalg.solve(V, rhs)
    b = np.linalg.solve(V, np.array([1.0 / (q + 1) for q in range(s)]))
    return ButcherTableau(s, A, b, c)


@dataclass(frozen=True)
class CollocationStage:
    """One collocation interval: step size, scheme and coupling matrix."""

    h: float
    tableau: ButcherTableau
    B: np.ndarray    # (n_x, s*n_x), maps stacked stage derivatives to dx

    @staticmethod
    def build(h: float, tableau: ButcherTableau, n_x: int) -> "CollocationStage":
        B = h * np.kron(tableau.b, np.eye(n_x))
        return CollocationStage(h, tableau, B)


def collocation_stage(model: OcpModel, tableau: ButcherTableau,
                      h: float | None = None) -> CollocationStage:
    return CollocationStage.build(model.dt if h is None else h, tableau,
                                  model.n_x)


# ---------------------------------------------------------------------------
# explicit RK4 over one shooting interval


def _require_explicit(model: OcpModel):
    if not model.explicit or model.phi is None:
        raise ExplicitFormError("model does not provide an explicit rhs")


def _rk4_generic(phi: VectorFunction, x, u, h, n_steps: int):
    """RK4 over scalar-like lists; works for floats, Dual and Var."""
    n_x = len(x)
    x = list(x)
    u = list(u)
    h2, h6 = 0.5 * h, h / 6.0
    for _ in range(n_steps):
        k1 = phi(x + u)
        k2 = phi([xi + h2 * k for xi, k in zip(x, k1)] + u)
        k3 = phi([xi + h2 * k for xi, k in zip(x, k2)] + u)
        k4 = phi([xi + h * k for xi, k in zip(x, k3)] + u)
        x = [xi + h6 * (a + 2 * b + 2 * c + d)
             for xi, a, b, c, d in zip(x, k1, k2, k3, k4)]
    return x


def rk4_map(model: OcpModel, x, u, n_steps: int) -> np.ndarray:
    """State at the end of one shooting interval of length T/N."""
    _require_explicit(model)
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    h = model.dt / n_steps
    out = _rk4_generic(model.phi, [float(v) for v in x],
                       [float(v) for v in u], h, n_steps)
    return np.array(out, dtype=float)


def rk4_jacobian(model: OcpModel, x, u, n_steps: int) -> np.ndarray:
    """Exact d(rk4_map)/d(x,u), one dual pass per column."""
    _require_explicit(model)
    h = model.dt / n_steps
    n_x, n_u = model.n_x, model.n_u
    xf = [float(v) for v in x]
    uf = [float(v) for v in u]
    J = np.empty((n_x, n_x + n_u))
    for j in range(n_x + n_u):
        xd = [Dual(v, 1.0 if k == j else 0.0) for k, v in enumerate(xf)]
        ud = [Dual(v, 1.0 if n_x + k == j else 0.0)
              for k, v in enumerate(uf)]
        out = _rk4_generic(model.phi, xd, ud, h, n_steps)
        J[:, j] = [o.dot if isinstance(o, Dual) else 0.0 for o in out]
    return J


def rk4_adjoint(model: OcpModel, x, u, n_steps: int, sigma) -> np.ndarray:
    """Transposed-Jacobian product of the RK4 map.

    Runs a float forward pass that stores every stage input, then sweeps
    backwards applying stage-local transposed rhs Jacobians via the
    reverse tape. ``sigma`` may be a vector or an (n_x, k) matrix of
    seeds; the result has matching shape over the (x, u) input.
    """
    _require_explicit(model)
    sigma = np.asarray(sigma, dtype=float)
    single = sigma.ndim == 1
    sig = sigma.reshape(model.n_x, -1)
    n_x, n_u = model.n_x, model.n_u
    h = model.dt / n_steps
    h2, h6 = 0.5 * h, h / 6.0
    uf = [float(v) for v in u]
    phi = model.phi

    # forward pass, storing the four stage inputs of every substep
    xs = [float(v) for v in x]
    steps = []
    for _ in range(n_steps):
        k1 = [float(v) for v in phi(xs + uf)]
        x2 = [xi + h2 * k for xi, k in zip(xs, k1)]
        k2 = [float(v) for v in phi(x2 + uf)]
        x3 = [xi + h2 * k for xi, k in zip(xs, k2)]
        k3 = [float(v) for v in phi(x3 + uf)]
        x4 = [xi + h * k for xi, k in zip(xs, k3)]
        k4 = [float(v) for v in phi(x4 + uf)]
        steps.append((xs, x2, x3, x4))
        xs = [xi + h6 * (a + 2 * b + 2 * c + d)
              for xi, a, b, c, d in zip(xs, k1, k2, k3, k4)]

    n_seeds = sig.shape[1]
    adj_x = sig.copy()                      # (n_x, k)
    adj_u = np.zeros((n_u, n_seeds))
    coeff = (h6, 2 * h6, 2 * h6, h6)        # weights b_j * h
    prop = (0.0, h2, h2, h)                 # stage offsets a_j * h
    for x1, x2, x3, x4 in reversed(steps):
        stage_inputs = (x1, x2, x3, x4)
        adj_k = [c * adj_x for c in coeff]  # adjoints of k_1..k_4
        new_adj_x = adj_x.copy()
        for j in (3, 2, 1, 0):
            g = ad.vjp_multi(phi, stage_inputs[j] + uf, adj_k[j])
            g = g.reshape(n_x + n_u, n_seeds)
            new_adj_x += g[:n_x]
            adj_u += g[n_x:]
            if j > 0:
                adj_k[j - 1] = adj_k[j - 1] + prop[j] * g[:n_x]
        adj_x = new_adj_x
    out = np.vstack([adj_x, adj_u])
    return out[:, 0] if single else out


class Rk4Dynamics:
    """Discrete dynamics x+ = F_i(x, u) over one shooting interval."""

    def __init__(self, model: OcpModel, n_steps: int = 10):
        _require_explicit(model)
        self.model = model
        self.n_steps = n_steps

    def map(self, x, u) -> np.ndarray:
        return rk4_map(self.model, x, u, self.n_steps)

    def jacobian(self, x, u) -> np.ndarray:
        return rk4_jacobian(self.model, x, u, self.n_steps)

    def adjoint(self, x, u, sigma) -> np.ndarray:
        return rk4_adjoint(self.model, x, u, self.n_steps, sigma)


class MapDynamics:
    """Discrete dynamics given directly as a map w -> x+ (for tests)."""

    def __init__(self, fn: VectorFunction, n_x: int, n_u: int):
        self.fn = fn
        self.n_x, self.n_u = n_x, n_u

    def map(self, x, u) -> np.ndarray:
        return ad.evaluate(self.fn, np.concatenate([x, u]))

    def jacobian(self, x, u) -> np.ndarray:
        return ad.jacobian(self.fn, np.concatenate([x, u]))

    def adjoint(self, x, u, sigma) -> np.ndarray:
        return ad.vjp_multi(self.fn, np.concatenate([x, u]), sigma)


# ---------------------------------------------------------------------------
# collocation equations G_i(x, u, K) = 0


def _collocation_fn(model: OcpModel, stage: CollocationStage) -> VectorFunction:
    """Stacked residual over z = (x, u, K); rows follow the stage order."""
    n_x, n_u = model.n_x, model.n_u
    s = stage.tableau.s
    a = stage.tableau.A
    h = stage.h

    def g(z):
        xv = z[:n_x]
        uv = z[n_x:n_x + n_u]
        K = z[n_x + n_u:]
        out = []
        for j in range(s):
            xi = list(xv)
            for l in range(s):
                alj = h * a[j, l]
                if alj != 0.0:
                    xi = [p + alj * K[l * n_x + m]
                          for m, p in enumerate(xi)]
            kj = K[j * n_x:(j + 1) * n_x]
            if model.explicit:
                vals = model.phi(xi + list(uv))
                out.extend(kj[m] - vals[m] for m in range(n_x))
            else:
                out.extend(model.rhs(list(kj) + xi + list(uv)))
        return out

    return VectorFunction(n_x + n_u + s * n_x, s * n_x, g)


def collocation_residual(model: OcpModel, x, u, K,
                         stage: CollocationStage) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    if K.shape[0] != stage.tableau.s * model.n_x:
        raise ad.DimensionError("K has wrong length")
    fn = _collocation_fn(model, stage)
    z = np.concatenate([np.asarray(x, float), np.asarray(u, float), K])
    return ad.evaluate(fn, z)


def collocation_jacobians(model: OcpModel, x, u, K, stage: CollocationStage):
    """Exact D = dG/d(x,u) and C = dG/dK via forward duals."""
    fn = _collocation_fn(model, stage)
    z = np.concatenate([np.asarray(x, float), np.asarray(u, float),
                        np.asarray(K, float)])
    J = ad.jacobian(fn, z)
    n_w = model.n_w
    return J[:, :n_w].copy(), J[:, n_w:].copy()


def collocation_adjoint(model: OcpModel, x, u, K, stage: CollocationStage,
                        sigma) -> np.ndarray:
    """[D C]^T @ sigma over the stacked (x, u, K) input via one tape."""
    fn = _collocation_fn(model, stage)
    z = np.concatenate([np.asarray(x, float), np.asarray(u, float),
                        np.asarray(K, float)])
    return ad.vjp_multi(fn, z, sigma)


def _collocation_c_matrix(model: OcpModel, x, u, K,
                          stage: CollocationStage) -> np.ndarray:
    """dG/dK alone, used by the Newton solver for the stage equations."""
    fn = _collocation_fn(model, stage)
    n_w = model.n_w
    n_k = stage.tableau.s * model.n_x
    zf = [float(v) for v in x] + [float(v) for v in u] + \
        [float(v) for v in K]
    C = np.empty((n_k, n_k))
    for j in range(n_k):
        args = [Dual(v, 1.0 if k == n_w + j else 0.0)
                for k, v in enumerate(zf)]
        out = fn(args)
        C[:, j] = [o.dot if isinstance(o, Dual) else 0.0 for o in out]
    return C


def solve_collocation(model: OcpModel, x, u, stage: CollocationStage,
                      K0=None, tol: float = 1e-10,
                      max_iter: int = 50) -> np.ndarray:
    """Full-Newton solution of G(x, u, K) = 0 with the exact dG/dK."""
    s = stage.tableau.s
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if K0 is None:
        if model.explicit:
            k = ad.evaluate(model.phi, np.concatenate([x, u]))
        else:
            k = np.zeros(model.n_x)
        K = np.tile(k, s)
    else:
        K = np.asarray(K0, dtype=float).copy()
    for _ in range(max_iter):
        g = collocation_residual(model, x, u, K, stage)
        if np.max(np.abs(g)) <= tol:
            return K
        C = _collocation_c_matrix(model, x, u, K, stage)
        K = K + np.linalg.solve(C, -g)
    g = collocation_residual(model, x, u, K, stage)
    if np.max(np.abs(g)) > tol:
        raise RuntimeError("collocation Newton did not converge")
    return K


def collocation_step(model: OcpModel, x, u, stage: CollocationStage,
                     K0=None) -> np.ndarray:
    """One implicit integration step: x+ = x + B K with G(x,u,K) = 0."""
    K = solve_collocation(model, x, u, stage, K0=K0)
    return np.asarray(x, dtype=float) + stage.B @ K


def simulate_interval(model: OcpModel, x, u, dt: float, n_steps: int,
                      tableau: ButcherTableau) -> np.ndarray:
    """Propagate the ODE over dt with n_steps collocation sub-steps."""
    sub = CollocationStage.build(dt / n_steps, tableau, model.n_x)
    out = np.asarray(x, dtype=float)
    for _ in range(n_steps):
        out = collocation_step(model, out, u, sub)
    return out
