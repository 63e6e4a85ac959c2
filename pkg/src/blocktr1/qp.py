"""Convex block-structured QP subproblems.

Stage-coupled QPs of the multiple-shooting / condensed-collocation form
are solved by a primal active-set method. Every working-set iteration
solves one equality-constrained KKT system that is assembled stage-wise
and factorized sparsely, exploiting the block bidiagonal coupling.
Stage-local equality rows (``Geq``) host embedded integrator equations of
direct collocation instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


FEAS_TOL = 1e-9
ZERO_STEP_TOL = 1e-11
MU_TOL = 1e-10
LEVENBERG = 1e-10


class QpDegenerateError(RuntimeError):
    """Working-set KKT matrix singular beyond regularization."""


@dataclass
class StageQpData:
    """One stage of the structured QP.

    Variables of stage i start with the state step (first n_x entries).
    ``A``/``a`` couple this stage to the next state; the terminal stage
    leaves them ``None``. ``P``/``p`` are inequality rows P z <= p;
    ``Geq``/``geq`` are stage-local equality rows Geq z + geq = 0.
    """

    H: np.ndarray
    h: np.ndarray
    A: np.ndarray | None = None
    a: np.ndarray | None = None
    P: np.ndarray | None = None
    p: np.ndarray | None = None
    Geq: np.ndarray | None = None
    geq: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        nv = self.h.shape[0]
        if self.H.shape != (nv, nv):
            raise ValueError("H/h shape mismatch")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-12:
            raise ValueError("H must be symmetric")
        if self.P is None:
            self.P = np.zeros((0, nv))
            self.p = np.zeros(0)
        else:
            self.P = np.asarray(self.P, dtype=float)
            self.p = np.asarray(self.p, dtype=float)

    @property
    def nv(self) -> int:
        return self.h.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.P.shape[0]


@dataclass
class QpSolution:
    """KKT point of the structured QP (or a failure report)."""

    dz: list[np.ndarray]
    lam: np.ndarray                # (N, n_x) dynamics multipliers
    nu0: np.ndarray                # initial-condition multiplier
    omega: list[np.ndarray]        # stage-local equality multipliers
    mu: list[np.ndarray]           # full inequality multipliers per stage
    active_set: list[int]          # sorted global row identifiers
    status: str                    # optimal | infeasible | max_iterations
    iterations: int = 0
    objective: float = 0.0
    objective_trace: list[float] = field(default_factory=list)


def row_offsets(stages: list[StageQpData]) -> list[int]:
    """Global id of the first inequality row of each stage."""
    offs, acc = [], 0
    for st in stages:
        offs.append(acc)
        acc += st.n_ineq
    return offs


class _Problem:
    """Assembled sparse pieces shared by all working-set iterations."""

    def __init__(self, stages: list[StageQpData], d0: np.ndarray):
        self.stages = stages
        self.d0 = np.asarray(d0, dtype=float)
        self.n_x = self.d0.shape[0]
        self.N = len(stages) - 1
        self.voff = []
        acc = 0
        for st in stages:
            self.voff.append(acc)
            acc += st.nv
        self.nv = acc
        self.roff = row_offsets(stages)
        self.n_rows = self.roff[-1] + stages[-1].n_ineq

        # equality rows: initial condition, dynamics, stage-local
        rows, cols, vals = [], [], []
        rhs = []
        r = 0
        for k in range(self.n_x):
            rows.append(r + k)
            cols.append(self.voff[0] + k)
            vals.append(1.0)
        rhs.extend(self.d0)
        r += self.n_x
        for i in range(self.N):
            st = stages[i]
            A, a = st.A, st.a
            for ii in range(self.n_x):
                for jj in range(st.nv):
                    v = A[ii, jj]
                    if v != 0.0:
                        rows.append(r + ii)
                        cols.append(self.voff[i] + jj)
                        vals.append(v)
                rows.append(r + ii)
                cols.append(self.voff[i + 1] + ii)
                vals.append(-1.0)
            rhs.extend(-a)
            r += self.n_x
        self.dyn_mult_slice = []
        for i in range(self.N):
            start = self.n_x + i * self.n_x
            self.dyn_mult_slice.append(slice(start, start + self.n_x))
        self.geq_mult_slice = []
        for i, st in enumerate(stages):
            if st.Geq is not None and st.Geq.shape[0]:
                G = np.asarray(st.Geq, dtype=float)
                g0 = np.asarray(st.geq, dtype=float)
                self.geq_mult_slice.append(slice(r, r + G.shape[0]))
                for ii in range(G.shape[0]):
                    for jj in range(st.nv):
                        v = G[ii, jj]
                        if v != 0.0:
                            rows.append(r + ii)
                            cols.append(self.voff[i] + jj)
                            vals.append(v)
                rhs.extend(-g0)
                r += G.shape[0]
            else:
                self.geq_mult_slice.append(slice(r, r))
        self.n_eq = r
        self.eq_triplets = (rows, cols, vals)
        self.eq_rhs = np.array(rhs, dtype=float)

        hr, hc, hv = [], [], []
        for i, st in enumerate(stages):
            o = self.voff[i]
            Hm = st.H
            for ii in range(st.nv):
                for jj in range(st.nv):
                    v = Hm[ii, jj]
                    if v != 0.0:
                        hr.append(o + ii)
                        hc.append(o + jj)
                        hv.append(v)
        self.h_triplets = (hr, hc, hv)
        self.grad_const = np.concatenate([st.h for st in stages])

    # -- bookkeeping ------------------------------------------------------

    def row_stage(self, gid: int) -> tuple[int, int]:
        for i in range(len(self.stages) - 1, -1, -1):
            if gid >= self.roff[i]:
                return i, gid - self.roff[i]
        raise IndexError(gid)

    def split(self, z: np.ndarray) -> list[np.ndarray]:
        return [z[self.voff[i]:self.voff[i] + st.nv]
                for i, st in enumerate(self.stages)]

    def ineq_values(self, z: np.ndarray) -> np.ndarray:
        out = np.empty(self.n_rows)
        for i, st in enumerate(self.stages):
            if st.n_ineq:
                zi = z[self.voff[i]:self.voff[i] + st.nv]
                out[self.roff[i]:self.roff[i] + st.n_ineq] = st.P @ zi
        return out

    def gradient(self, z: np.ndarray) -> np.ndarray:
        g = self.grad_const.copy()
        for i, st in enumerate(self.stages):
            o = self.voff[i]
            g[o:o + st.nv] += st.H @ z[o:o + st.nv]
        return g

    def objective(self, z: np.ndarray) -> float:
        obj = 0.0
        for i, st in enumerate(self.stages):
            zi = z[self.voff[i]:self.voff[i] + st.nv]
            obj += 0.5 * zi @ st.H @ zi + st.h @ zi
        return float(obj)

    # -- KKT solves -------------------------------------------------------

    def _kkt_matrix(self, working: list[int], reg: float):
        rows, cols, vals = ([*self.eq_triplets[0]], [*self.eq_triplets[1]],
                            [*self.eq_triplets[2]])
        r = self.n_eq
        for gid in working:
            i, li = self.row_stage(gid)
            st = self.stages[i]
            for jj in range(st.nv):
                v = st.P[li, jj]
                if v != 0.0:
                    rows.append(r)
                    cols.append(self.voff[i] + jj)
                    vals.append(v)
            r += 1
        n_con = r
        n = self.nv + n_con
        hr, hc, hv = self.h_triplets
        kr = list(hr) + [self.nv + a for a in rows] + list(cols)
        kc = list(hc) + list(cols) + [self.nv + a for a in rows]
        kv = list(hv) + list(vals) + list(vals)
        if reg > 0.0:
            kr += list(range(self.nv))
            kc += list(range(self.nv))
            kv += [reg] * self.nv
        mat = sp.csc_matrix((kv, (kr, kc)), shape=(n, n))
        return mat, n_con

    def kkt_solve(self, working: list[int], grad: np.ndarray,
                  con_rhs: np.ndarray | None):
        """Solve [[H, B^T], [B, 0]] [q; m] = [-grad; con_rhs].

        ``con_rhs`` of ``None`` means a homogeneous constraint right-hand
        side (the step form used inside the active-set loop).
        """
        for reg in (0.0, LEVENBERG):
            mat, n_con = self._kkt_matrix(working, reg)
            rhs = np.zeros(self.nv + n_con)
            rhs[:self.nv] = -grad
            if con_rhs is not None:
                rhs[self.nv:self.nv + con_rhs.shape[0]] = con_rhs
            try:
                lu = spla.splu(mat)
            except RuntimeError:
                continue
            sol = lu.solve(rhs)
            if not np.all(np.isfinite(sol)):
                continue
            resid = np.max(np.abs(mat @ sol - rhs))
            if resid <= 1e-7 * (1.0 + np.max(np.abs(rhs))):
                return sol[:self.nv], sol[self.nv:]
        raise QpDegenerateError("singular working-set KKT system")


def kkt_solve_structured(stages: list[StageQpData], d0, working_set=None):
    """Equality-constrained KKT point for a fixed working set.

    Returns (dz per stage, dynamics multipliers, working-set multipliers).
    The working-set rows are imposed as equalities P z = p.
    """
    prob = _Problem(stages, d0)
    working = sorted(working_set) if working_set else []
    con_rhs = prob.eq_rhs.copy()
    if working:
        extra = np.array([prob.stages[i].p[li] for i, li in
                          (prob.row_stage(g) for g in working)])
        con_rhs = np.concatenate([con_rhs, extra])
    z, m = prob.kkt_solve(working, prob.grad_const, con_rhs)
    lam = np.array([m[prob.dyn_mult_slice[i]] for i in range(prob.N)]) \
        if prob.N else np.zeros((0, prob.n_x))
    mu_w = m[prob.n_eq:]
    return prob.split(z), lam, mu_w


def _feasible_start(prob: _Problem):
    """Point satisfying all equality constraints, ignoring inequalities."""
    z = np.zeros(prob.nv)
    x = prob.d0.copy()
    for i, st in enumerate(prob.stages):
        o = prob.voff[i]
        z[o:o + prob.n_x] = x
        if st.Geq is not None and st.Geq.shape[0]:
            G = st.Geq
            rhs = -st.geq - G[:, :prob.n_x] @ x
            free = G[:, prob.n_x:]
            if free.shape[1]:
                sol, *_ = np.linalg.lstsq(free, rhs, rcond=None)
                z[o + prob.n_x:o + st.nv] = sol
            if np.max(np.abs(G @ z[o:o + st.nv] + st.geq),
                      initial=0.0) > 1e-7:
                return None
        if i < prob.N:
            x = st.A @ z[o:o + st.nv] + st.a
    return z


def _phase1(stages: list[StageQpData], d0: np.ndarray, z0: np.ndarray,
            prob: _Problem):
    """Feasibility restoration with one violation-scaling slack per stage.

    Each stage gains a variable t >= 0; violated rows are relaxed to
    P z - v t <= p where v is the row's initial violation. Minimizing
    0.5 * sum(t^2) from the feasible start t = 1 drives t to zero exactly
    when the original constraint system is feasible.
    """
    aug = []
    viol0 = prob.ineq_values(z0)
    for i, st in enumerate(stages):
        nv = st.nv
        # tiny Tikhonov term on the original variables keeps the phase-1
        # KKT factorizable; it perturbs t* by O(1e-10) only
        H = LEVENBERG * np.eye(nv + 1)
        H[nv, nv] = 1.0
        h = np.zeros(nv + 1)
        A = a = None
        if st.A is not None:
            A = np.hstack([st.A, np.zeros((st.A.shape[0], 1))])
            a = st.a
        Geq = geq = None
        if st.Geq is not None and st.Geq.shape[0]:
            Geq = np.hstack([st.Geq, np.zeros((st.Geq.shape[0], 1))])
            geq = st.geq
        v = np.maximum(
            viol0[prob.roff[i]:prob.roff[i] + st.n_ineq] - st.p, 0.0)
        P = np.hstack([st.P, -v[:, None]])
        extra = np.zeros((1, nv + 1))
        extra[0, nv] = -1.0                       # t >= 0
        P = np.vstack([P, extra])
        p = np.concatenate([st.p, [0.0]])
        aug.append(StageQpData(H, h, A, a, P, p, Geq, geq))

    z0_aug = np.zeros(sum(st.nv for st in aug))
    off = 0
    for i, st in enumerate(stages):
        z0_aug[off:off + st.nv] = z0[prob.voff[i]:prob.voff[i] + st.nv]
        z0_aug[off + st.nv] = 1.0
        off += st.nv + 1
    sol = _active_set_solve(aug, d0, z0_aug, warm=None)
    if sol.status != "optimal":
        return None, None
    t_vals = np.array([dz[-1] for dz in sol.dz])
    if np.max(np.abs(t_vals), initial=0.0) > 1e-7:
        return None, None
    z = np.concatenate([dz[:-1] for dz in sol.dz])
    aug_prob = _Problem(aug, d0)
    active = []
    for gid in sol.active_set:
        i, li = aug_prob.row_stage(gid)
        if li < stages[i].n_ineq:                 # skip the t >= 0 rows
            active.append(prob.roff[i] + li)
    return z, sorted(active)


def _active_set_solve(stages, d0, z0, warm, max_iter=None) -> QpSolution:
    prob = _Problem(stages, d0)
    if max_iter is None:
        max_iter = 50 + 10 * prob.n_rows
    z = z0.copy()
    vals = prob.ineq_values(z)
    bounds = np.concatenate([st.p for st in stages]) if prob.n_rows \
        else np.zeros(0)
    in_w = np.zeros(prob.n_rows, dtype=bool)
    working = sorted(warm) if warm is not None else \
        [g for g in range(prob.n_rows) if vals[g] >= bounds[g] - 1e-10]
    for g in working:
        in_w[g] = True

    trace = []
    it = 0
    while it < max_iter:
        it += 1
        trace.append(prob.objective(z))
        grad = prob.gradient(z)
        try:
            q, m = prob.kkt_solve(working, grad, None)
        except QpDegenerateError:
            if not working:
                raise
            # drop the most recent row and retry; guards rank-deficient adds
            g = working.pop()
            in_w[g] = False
            continue

        zero_step = np.max(np.abs(q), initial=0.0) <= ZERO_STEP_TOL * (
            1.0 + np.max(np.abs(z), initial=0.0))
        if not zero_step:
            # ratio test over rows not in the working set, lowest-id ties
            alpha, blocker = 1.0, -1
            for i, st in enumerate(stages):
                if not st.n_ineq:
                    continue
                qi = q[prob.voff[i]:prob.voff[i] + st.nv]
                dq = st.P @ qi
                base = prob.roff[i]
                for li in range(st.n_ineq):
                    g = base + li
                    if in_w[g] or dq[li] <= 1e-12:
                        continue
                    ag = (st.p[li] - vals[g]) / dq[li]
                    if ag < alpha - 1e-12:
                        alpha, blocker = max(ag, 0.0), g
                    elif blocker >= 0 and ag <= alpha + 1e-12 and g < blocker:
                        blocker = g
            z = z + alpha * q
            vals = prob.ineq_values(z)
            if blocker >= 0:
                in_w[blocker] = True
                working.append(blocker)
                working.sort()
                continue
        # at the optimum of the current working set; check multiplier signs
        mu_w = m[prob.n_eq:]
        neg = [k for k in range(len(working)) if mu_w[k] < -MU_TOL]
        if not neg:
            return _finish(prob, z, working, m, it, trace)
        drop = min(neg, key=lambda k: working[k])
        g = working.pop(drop)
        in_w[g] = False
    return QpSolution(prob.split(z), np.zeros((prob.N, prob.n_x)),
                      np.zeros(prob.n_x), [np.zeros(0) for _ in stages],
                      [np.zeros(st.n_ineq) for st in stages],
                      sorted(working), "max_iterations", it, 0.0, trace)


def _finish(prob: _Problem, z, working, m, iterations, trace) -> QpSolution:
    stages = prob.stages
    # one full-form resolve removes drift accumulated along the active-set
    # path (and any slack left over from feasibility restoration)
    try:
        con_rhs = prob.eq_rhs
        if working:
            extra = np.array([prob.stages[i].p[li] for i, li in
                              (prob.row_stage(g) for g in working)])
            con_rhs = np.concatenate([con_rhs, extra])
        z_ref, m_ref = prob.kkt_solve(working, prob.grad_const, con_rhs)
        ok = True
        if prob.n_rows:
            vals = prob.ineq_values(z_ref)
            bounds = np.concatenate([st.p for st in stages])
            ok = np.max(vals - bounds) <= FEAS_TOL
        if ok:
            z, m = z_ref, m_ref
    except QpDegenerateError:
        pass
    mu = [np.zeros(st.n_ineq) for st in stages]
    mu_w = m[prob.n_eq:]
    for k, gid in enumerate(working):
        i, li = prob.row_stage(gid)
        mu[i][li] = mu_w[k]
    lam = np.array([m[prob.dyn_mult_slice[i]] for i in range(prob.N)]) \
        if prob.N else np.zeros((0, prob.n_x))
    omega = [m[prob.geq_mult_slice[i]].copy() for i in range(len(stages))]
    return QpSolution(prob.split(z), lam, m[:prob.n_x], omega, mu,
                      sorted(working), "optimal", iterations,
                      prob.objective(z), trace)


def solve_qp(stages: list[StageQpData], d0, warm_active_set=None,
             max_iter=None) -> QpSolution:
    """KKT point of the structured QP via a primal active-set method.

    The initial-condition and dynamics rows stay in the working set
    permanently; inequality rows enter and leave through ratio tests with
    a lowest-identifier tie-break. ``warm_active_set`` (global row ids) is
    honored when the corresponding equality-restricted solution is primal
    feasible, which is the common case across RTI samples.
    """
    prob = _Problem(stages, d0)

    if warm_active_set is not None:
        warm = sorted(g for g in set(warm_active_set)
                      if 0 <= g < prob.n_rows)
        try:
            dz, _, _ = kkt_solve_structured(stages, d0, warm)
            zw = np.concatenate(dz)
            vals = prob.ineq_values(zw)
            bounds = np.concatenate([st.p for st in stages]) if prob.n_rows \
                else np.zeros(0)
            if not prob.n_rows or np.max(vals - bounds) <= FEAS_TOL:
                return _active_set_solve(stages, d0, zw, warm,
                                         max_iter=max_iter)
        except QpDegenerateError:
            pass

    z0 = _feasible_start(prob)
    if z0 is None:
        return _infeasible(prob)
    if prob.n_rows:
        vals = prob.ineq_values(z0)
        bounds = np.concatenate([st.p for st in stages])
        if np.max(vals - bounds) > FEAS_TOL:
            z0, active = _phase1(stages, d0, z0, prob)
            if z0 is None:
                return _infeasible(prob)
            return _active_set_solve(stages, d0, z0, active,
                                     max_iter=max_iter)
    return _active_set_solve(stages, d0, z0, None, max_iter=max_iter)


def _infeasible(prob: _Problem) -> QpSolution:
    return QpSolution([np.zeros(st.nv) for st in prob.stages],
                      np.zeros((prob.N, prob.n_x)), np.zeros(prob.n_x),
                      [np.zeros(0) for _ in prob.stages],
                      [np.zeros(st.n_ineq) for st in prob.stages],
                      [], "infeasible")
