"""Discrete-time optimal control problem data and benchmark models.

An :class:`OcpModel` bundles the continuous dynamics, least-squares stage
costs, affine path constraints and the current initial state. The chain of
spring-connected masses is the built-in scaling benchmark; a few tiny
analytic models support the unit tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import VectorFunction


class ConfigError(ValueError):
    """Malformed problem or experiment configuration."""


@dataclass
class OcpModel:
    """Data of one block-structured OCP over N shooting intervals.

    ``rhs`` is the implicit ODE residual f(xdot, x, u) over the stacked
    input (xdot, x, u). When ``explicit`` is set, ``phi`` holds the
    explicit right-hand side so that f = xdot - phi(x, u).
    Stage variables are w_i = (x_i, u_i) for i < N and w_N = x_N.
    """

    n_x: int
    n_u: int
    N: int
    T: float
    rhs: VectorFunction
    explicit: bool
    phi: VectorFunction | None
    stage_residuals: list[VectorFunction]
    terminal_residual: VectorFunction
    path_rows: list[np.ndarray]
    path_bounds: list[np.ndarray]
    x0hat: np.ndarray
    x_ss: np.ndarray | None = None
    u_ss: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.T <= 0 or self.N < 1:
            raise ConfigError("require T > 0 and N >= 1")
        if len(self.stage_residuals) != self.N:
            raise ConfigError("need one stage residual per interval")
        n_w = self.n_x + self.n_u
        if len(self.path_rows) != self.N + 1:
            raise ConfigError("need path rows for stages 0..N")
        for i, (P, p) in enumerate(zip(self.path_rows, self.path_bounds)):
            cols = n_w if i < self.N else self.n_x
            if P.shape != (len(p), cols):
                raise ConfigError(f"path rows at stage {i} have wrong shape")
        self.x0hat = np.asarray(self.x0hat, dtype=float)
        if self.x0hat.shape != (self.n_x,):
            raise ConfigError("x0hat has wrong length")

    @property
    def n_w(self) -> int:
        return self.n_x + self.n_u

    @property
    def dt(self) -> float:
        return self.T / self.N

    def stage_dim(self, i: int) -> int:
        return self.n_w if i < self.N else self.n_x

    def n_ineq_rows(self) -> int:
        return sum(P.shape[0] for P in self.path_rows)


@dataclass
class Iterate:
    """One primal-dual state of the SQP iteration.

    ``lam`` are the continuity multipliers, ``mu`` the inequality
    multipliers per stage. ``K``/``omega`` are only present for
    collocation-based solvers.
    """

    X: np.ndarray             # (N+1, n_x)
    U: np.ndarray             # (N, n_u)
    lam: np.ndarray           # (N, n_x)
    mu: list[np.ndarray]      # per stage, length N+1
    K: np.ndarray | None = None      # (N, s*n_x)
    omega: np.ndarray | None = None  # (N, s*n_x)

    def w(self, i: int) -> np.ndarray:
        if i < self.U.shape[0]:
            return np.concatenate([self.X[i], self.U[i]])
        return self.X[i].copy()

    def copy(self) -> "Iterate":
        return Iterate(
            self.X.copy(), self.U.copy(), self.lam.copy(),
            [m.copy() for m in self.mu],
            None if self.K is None else self.K.copy(),
            None if self.omega is None else self.omega.copy())

    def stacked(self) -> np.ndarray:
        parts = [np.concatenate([self.X[i], self.U[i]])
                 for i in range(self.U.shape[0])]
        parts.append(self.X[-1])
        return np.concatenate(parts)


def constant_iterate(model: OcpModel, x0: np.ndarray | None = None,
                     u0: np.ndarray | None = None) -> Iterate:
    """Constant-trajectory initial guess with zero multipliers."""
    x0 = model.x0hat if x0 is None else np.asarray(x0, dtype=float)
    u0 = np.zeros(model.n_u) if u0 is None else np.asarray(u0, dtype=float)
    X = np.tile(x0, (model.N + 1, 1))
    U = np.tile(u0, (model.N, 1))
    lam = np.zeros((model.N, model.n_x))
    mu = [np.zeros(P.shape[0]) for P in model.path_rows]
    return Iterate(X, U, lam, mu)


# ---------------------------------------------------------------------------
# stage cost and first-order optimality helpers


def stage_cost_terms(model: OcpModel, i: int, w: np.ndarray):
    """Gradient and Gauss-Newton Hessian of the stage cost at w.

    The stage cost is 0.5*||R_i(w)||^2, so the gradient is J_R^T R and the
    Gauss-Newton block is J_R^T J_R.
    """
    R = model.stage_residuals[i] if i < model.N else model.terminal_residual
    r = ad.evaluate(R, w)
    J = ad.jacobian(R, w)
    return J.T @ r, J.T @ J


def evaluate_lagrangian_gradient(model: OcpModel, dynamics, it: Iterate,
                                 A_list: list[np.ndarray]) -> list[np.ndarray]:
    """Stage gradients with the adjoint correction for inexact Jacobians.

    Returns h_i = grad l(w_i) + (dF_i/dw(w_i) - A_i)^T lam_i for i < N; the
    exact transposed-Jacobian product comes from a reverse sweep of the
    discrete dynamics. The terminal stage has no dynamics term.
    """
    if len(A_list) != model.N:
        raise ad.DimensionError("need one Jacobian block per interval")
    out = []
    for i in range(model.N):
        w = it.w(i)
        grad, _ = stage_cost_terms(model, i, w)
        lam_i = it.lam[i]
        if np.any(lam_i):
            exact = dynamics.adjoint(it.X[i], it.U[i], lam_i)
            grad = grad + exact - A_list[i].T @ lam_i
        out.append(grad)
    grad_N, _ = stage_cost_terms(model, model.N, it.X[model.N])
    out.append(grad_N)
    return out


def kkt_residual(model: OcpModel, dynamics, it: Iterate,
                 active_set=None, x0hat=None) -> float:
    """Max-norm of the first-order optimality conditions at the iterate.

    Covers stationarity (the x_0 block is pinned by the initial-value
    multiplier and therefore excluded), dynamics defects, the initial
    condition, inequality feasibility, multiplier signs and
    complementarity. ``active_set`` optionally names (stage, row) pairs
    whose violation is measured as an equality; ``x0hat`` overrides the
    model's initial state (the parametric case of receding horizons).
    """
    x0hat = model.x0hat if x0hat is None else np.asarray(x0hat, float)
    terms = [float(np.max(np.abs(it.X[0] - x0hat)))]
    for i in range(model.N):
        w = it.w(i)
        grad, _ = stage_cost_terms(model, i, w)
        r = grad + dynamics.adjoint(it.X[i], it.U[i], it.lam[i])
        if i > 0:
            r[:model.n_x] -= it.lam[i - 1]
        if model.path_rows[i].shape[0]:
            r = r + model.path_rows[i].T @ it.mu[i]
        if i == 0:
            r = r[model.n_x:]
        terms.append(float(np.max(np.abs(r))) if r.size else 0.0)
        defect = dynamics.map(it.X[i], it.U[i]) - it.X[i + 1]
        terms.append(float(np.max(np.abs(defect))))
    grad_N, _ = stage_cost_terms(model, model.N, it.X[model.N])
    r_N = grad_N - it.lam[model.N - 1]
    if model.path_rows[model.N].shape[0]:
        r_N = r_N + model.path_rows[model.N].T @ it.mu[model.N]
    terms.append(float(np.max(np.abs(r_N))))
    for i in range(model.N + 1):
        P, p = model.path_rows[i], model.path_bounds[i]
        if not P.shape[0]:
            continue
        slack = P @ it.w(i) - p
        terms.append(float(np.max(np.maximum(slack, 0.0))))
        terms.append(float(np.max(np.maximum(-it.mu[i], 0.0))))
        terms.append(float(np.max(np.abs(it.mu[i] * slack))))
        if active_set:
            rows = [r for (s, r) in active_set if s == i]
            if rows:
                terms.append(float(np.max(np.abs(slack[rows]))))
    return max(terms)


# ---------------------------------------------------------------------------
# chain of spring-connected masses


def spring_force(p_a, p_b, spring_d: float, rest_length: float):
    """Force on the mass at ``p_a`` from the spring to the mass at ``p_b``."""
    d0 = p_b[0] - p_a[0]
    d1 = p_b[1] - p_a[1]
    d2 = p_b[2] - p_a[2]
    dist = ad.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    c = spring_d * (1.0 - rest_length / dist)
    return (c * d0, c * d1, c * d2)


def chain_of_masses(n_m: int, N: int, T: float, *, mass: float = 0.03,
                    spring_d: float = 0.1, rest_length: float = 0.033,
                    gravity=(0.0, 0.0, -9.81), wall_y: float = -0.01,
                    x_end=None, weights=(0.1, 0.05, 1.0),
                    force_input: bool = False,
                    u_perturb=(-0.04, 0.06, 0.03),
                    t_perturb: float = 1.0,
                    ref_offset=(0.0, 0.0, 0.0)) -> OcpModel:
    """Chain of ``n_m`` masses connected by springs, one end fixed.

    Mass 0 sits at the origin; the n_m-1 free masses carry position and
    velocity states. The free mass at the far end is the actuator: by
    default its velocity derivative equals the control directly, with
    ``force_input`` the control acts as a force on that mass instead.
    A wall constrains every free-mass y-position from below. The tracking
    objective penalizes deviation from the hanging steady state, which is
    computed here by damped Newton; ``ref_offset`` shifts the tracked
    positions away from that equilibrium, so the optimum keeps a nonzero
    residual (useful for convergence-rate experiments). The initial state
    is the steady state perturbed by holding ``u_perturb`` for
    ``t_perturb`` time units.
    """
    if n_m < 2:
        raise ConfigError("chain needs at least 2 masses")
    n_f = n_m - 1
    n_x, n_u = 6 * n_f, 3
    gravity = tuple(float(g) for g in gravity)
    if x_end is None:
        x_end = (6.0 * rest_length * n_f, 0.0, 0.0)
    x_end = np.asarray(x_end, dtype=float)

    def phi_fn(z):
        xdot = [None] * n_x
        pos = [z[6 * j:6 * j + 3] for j in range(n_f)]
        u = z[n_x:n_x + 3]
        for j in range(n_f):
            v = z[6 * j + 3:6 * j + 6]
            xdot[6 * j:6 * j + 3] = v
        forces = [spring_force(pos[j], pos[j + 1], spring_d, rest_length)
                  for j in range(n_f - 1)]
        # f_prev: force on mass j from the spring towards mass j-1
        f_prev = spring_force(pos[0], (0.0, 0.0, 0.0), spring_d, rest_length)
        for j in range(n_f - 1):
            f_next = forces[j]
            acc = [(f_next[k] + f_prev[k]) / mass + gravity[k]
                   for k in range(3)]
            xdot[6 * j + 3:6 * j + 6] = acc
            f_prev = tuple(-f for f in f_next)
        if force_input:
            acc = [f_prev[k] / mass + gravity[k] + u[k] / mass
                   for k in range(3)]
        else:
            acc = [u[0], u[1], u[2]]
        xdot[6 * (n_f - 1) + 3:6 * n_f] = acc
        return xdot

    phi = VectorFunction(n_x + n_u, n_x, phi_fn)
    rhs = _implicit_from_explicit(phi, n_x, n_u)

    x_ss = _chain_steady_state(phi, n_f, x_end, gravity, force_input)
    u_ss = np.zeros(n_u)

    q, r_w, q_n = (float(w) for w in weights)
    sq, sr, sqn = math.sqrt(q), math.sqrt(r_w), math.sqrt(q_n)
    x_track = x_ss.copy()
    for j in range(n_f):
        x_track[6 * j:6 * j + 3] += np.asarray(ref_offset, dtype=float)
    x_ref = x_track.tolist()

    def stage_res(w):
        return ([sq * (w[k] - x_ref[k]) for k in range(n_x)]
                + [sr * w[n_x + k] for k in range(n_u)])

    def term_res(w):
        return [sqn * (w[k] - x_ref[k]) for k in range(n_x)]

    R_stage = VectorFunction(n_x + n_u, n_x + n_u, stage_res)
    R_term = VectorFunction(n_x, n_x, term_res)

    P_stage = np.zeros((n_f, n_x + n_u))
    for j in range(n_f):
        P_stage[j, 6 * j + 1] = -1.0
    P_term = P_stage[:, :n_x].copy()
    p_vec = np.full(n_f, -wall_y)

    x0hat = _presimulate(phi, x_ss, np.asarray(u_perturb, float), t_perturb)

    model = OcpModel(
        n_x=n_x, n_u=n_u, N=N, T=T, rhs=rhs, explicit=True, phi=phi,
        stage_residuals=[R_stage] * N, terminal_residual=R_term,
        path_rows=[P_stage.copy() for _ in range(N)] + [P_term],
        path_bounds=[p_vec.copy() for _ in range(N + 1)],
        x0hat=x0hat, x_ss=x_ss, u_ss=u_ss,
        params={"n_m": n_m, "mass": mass, "spring_d": spring_d,
                "rest_length": rest_length, "gravity": gravity,
                "wall_y": wall_y, "x_end": x_end.tolist(),
                "weights": (q, r_w, q_n), "force_input": force_input,
                "u_perturb": tuple(float(v) for v in u_perturb),
                "t_perturb": t_perturb,
                "ref_offset": tuple(float(v) for v in ref_offset)})
    return model


def _implicit_from_explicit(phi: VectorFunction, n_x: int,
                            n_u: int) -> VectorFunction:
    def f(z):
        xdot = z[:n_x]
        vals = phi(z[n_x:])
        return [xdot[k] - vals[k] for k in range(n_x)]
    return VectorFunction(2 * n_x + n_u, n_x, f)


def _chain_steady_state(phi: VectorFunction, n_f: int, x_end: np.ndarray,
                        gravity, force_input: bool) -> np.ndarray:
    """Hanging equilibrium of the chain via damped Newton on f(0,x,0)=0.

    With the velocity-input convention the actuated end is pinned at
    ``x_end`` and only the interior positions are solved for; with a force
    input the end-mass force balance closes the system and no pin is
    needed. Gravity is ramped up in a few continuation steps so the
    straight-line configuration is always a valid start.
    """
    n_free = n_f if force_input else n_f - 1
    n_x = 6 * n_f

    def positions_to_state(p_flat):
        x = [0.0] * n_x
        for j in range(n_free):
            x[6 * j:6 * j + 3] = [p_flat[3 * j + k] for k in range(3)]
        if not force_input:
            x[6 * (n_f - 1):6 * (n_f - 1) + 3] = list(x_end)
        return x

    def residual_fn(p_flat, g_scale):
        x = positions_to_state(p_flat)
        z = list(x) + [0.0, 0.0, 0.0]
        xdot = phi(z)
        res = []
        for j in range(n_free):
            for k in range(3):
                a = xdot[6 * j + 3 + k]
                res.append(a - gravity[k] + g_scale * gravity[k])
        return res

    # straight line from the anchor, exact equilibrium at zero gravity
    if force_input:
        guess = np.concatenate([x_end * (j + 1) / n_f for j in range(n_f)])
    else:
        guess = np.concatenate([x_end * (j + 1) / n_f
                                for j in range(n_f - 1)]) \
            if n_f > 1 else np.zeros(0)

    p = guess.copy()
    if n_free > 0:
        for g_scale in (0.25, 0.5, 0.75, 1.0):
            vf = VectorFunction(3 * n_free, 3 * n_free,
                                lambda q, g=g_scale: residual_fn(q, g))
            p = _damped_newton(vf, p, tol=1e-12, max_iter=100)

    x = np.array(positions_to_state(p), dtype=float)
    return x


def _damped_newton(fn: VectorFunction, x0: np.ndarray, tol: float,
                   max_iter: int) -> np.ndarray:
    x = np.asarray(x0, dtype=float).copy()
    r = ad.evaluate(fn, x)
    for _ in range(max_iter):
        nr = np.linalg.norm(r)
        if nr <= tol:
            return x
        J = ad.jacobian(fn, x)
        step = np.linalg.solve(J, -r)
        alpha = 1.0
        for _ in range(60):
            x_try = x + alpha * step
            r_try = ad.evaluate(fn, x_try)
            if np.linalg.norm(r_try) < nr:
                x, r = x_try, r_try
                break
            alpha *= 0.5
        else:
            raise RuntimeError("damped Newton stalled")
    if np.linalg.norm(r) > tol:
        raise RuntimeError("damped Newton did not reach tolerance")
    return x


def _presimulate(phi: VectorFunction, x0: np.ndarray, u: np.ndarray,
                 t_total: float, n_steps: int = 50) -> np.ndarray:
    """Constant-control RK4 roll-out used to perturb the initial state."""
    if t_total <= 0:
        return x0.copy()
    h = t_total / n_steps
    x = x0.copy()
    u_list = u.tolist()
    for _ in range(n_steps):
        x = _rk4_step(phi, x, u_list, h)
    return x


def _rk4_step(phi: VectorFunction, x: np.ndarray, u_list: list,
              h: float) -> np.ndarray:
    def f(xv):
        return np.array(phi(list(xv) + u_list), dtype=float)

    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


# ---------------------------------------------------------------------------
# small analytic models for tests


def scalar_linear_model(a: float, b: float, N: int, T: float,
                        x0: float = 1.0, q: float = 1.0,
                        r: float = 0.1) -> OcpModel:
    """One-state one-control model with xdot = a*x + b*u."""
    phi = VectorFunction(2, 1, lambda z: [a * z[0] + b * z[1]])
    rhs = _implicit_from_explicit(phi, 1, 1)
    sq, sr = math.sqrt(q), math.sqrt(r)
    R = VectorFunction(2, 2, lambda w: [sq * w[0], sr * w[1]])
    R_N = VectorFunction(1, 1, lambda w: [sq * w[0]])
    return OcpModel(
        n_x=1, n_u=1, N=N, T=T, rhs=rhs, explicit=True, phi=phi,
        stage_residuals=[R] * N, terminal_residual=R_N,
        path_rows=[np.zeros((0, 2)) for _ in range(N)] + [np.zeros((0, 1))],
        path_bounds=[np.zeros(0) for _ in range(N + 1)],
        x0hat=np.array([x0]), x_ss=np.zeros(1), u_ss=np.zeros(1))


# ---------------------------------------------------------------------------
# problem configuration


_CHAIN_KEYS = {
    "problem", "n_m", "N", "T", "wall_y", "mass", "spring_constant",
    "rest_length", "gravity", "x_end", "weights", "force_input",
    "u_perturb", "t_perturb", "ref_offset",
}


def problem_from_config(cfg: dict) -> OcpModel:
    """Build a model from a JSON-style problem description.

    Unknown keys are rejected so that typos do not silently fall back to
    defaults.
    """
    if not isinstance(cfg, dict):
        raise ConfigError("problem config must be an object")
    kind = cfg.get("problem")
    if kind != "chain":
        raise ConfigError(f"unknown problem type: {kind!r}")
    unknown = set(cfg) - _CHAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown problem keys: {sorted(unknown)}")
    for key in ("n_m", "N", "T"):
        if key not in cfg:
            raise ConfigError(f"missing required key: {key}")
    kwargs = {}
    if "wall_y" in cfg:
        kwargs["wall_y"] = float(cfg["wall_y"])
    if "mass" in cfg:
        kwargs["mass"] = float(cfg["mass"])
    if "spring_constant" in cfg:
        kwargs["spring_d"] = float(cfg["spring_constant"])
    if "rest_length" in cfg:
        kwargs["rest_length"] = float(cfg["rest_length"])
    if "gravity" in cfg:
        kwargs["gravity"] = tuple(cfg["gravity"])
    if "x_end" in cfg:
        kwargs["x_end"] = tuple(cfg["x_end"])
    if "weights" in cfg:
        w = cfg["weights"]
        kwargs["weights"] = (w["state"], w["control"], w["terminal"])
    if "force_input" in cfg:
        kwargs["force_input"] = bool(cfg["force_input"])
    if "u_perturb" in cfg:
        kwargs["u_perturb"] = tuple(cfg["u_perturb"])
    if "t_perturb" in cfg:
        kwargs["t_perturb"] = float(cfg["t_perturb"])
    if "ref_offset" in cfg:
        kwargs["ref_offset"] = tuple(cfg["ref_offset"])
    return chain_of_masses(int(cfg["n_m"]), int(cfg["N"]), float(cfg["T"]),
                           **kwargs)
