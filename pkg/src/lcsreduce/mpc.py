"""Trust-region MPC on an LCS model.

Both planners solve::

    min  sum_{t<T} (x_t'Q x_t + u_t'R u_t) + x_T'Q_T x_T
    s.t. x_{t+1} = A x_t + B u_t + C lam_t + d
         0 <= lam_t  perp  D x_t + E u_t + F lam_t + c >= 0
         u_t in [u_bar - Delta, u_bar + Delta]

``"transcription"`` searches jointly over states, inputs and multipliers
with the complementarity relaxed to ``lam_t'w_t <= sigma`` and ``sigma``
driven from 1e-1 down to 1e-6, each stage warm-started from the previous
one. The relaxed inequality is written as ``lam_t'w_t = s_t`` with a
bounded slack ``s_t in [0, sigma]``.

``"active-set"`` (the default) works on the mode partition instead. With
the mode sequence fixed the trajectory is affine in the inputs, so the
restricted problem is a convex QP in ``u`` whose extra linear constraints
keep the sequence valid. Multipliers of those constraints say which mode
flips lower the cost; the planner hops until none does.

Either way the returned inputs are re-simulated through the exact LCS so
the predicted trajectory is model consistent.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import quadprog

from .errors import DegenerateBuffer, LcsReduceError
from .lcs import LcsParams, Trajectory, lcs_rollout, mode_signature
from .solvers import NLP_MAX_INNER, NLP_MAX_OUTER, NLP_TOL, NlpProblem, solve_nlp

log = logging.getLogger(__name__)

SIGMA_SCHEDULE = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


@dataclass(frozen=True)
class TrustRegion:
    """Input box ``[center - delta, center + delta]``."""

    center: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        dl = np.broadcast_to(np.asarray(self.delta, dtype=float), c.shape).copy()
        if np.any(dl < 0) or not np.all(np.isfinite(dl)) or not np.all(np.isfinite(c)):
            raise ValueError("trust region half-width must be finite and non-negative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "delta", dl)

    @property
    def lower(self):
        return self.center - self.delta

    @property
    def upper(self):
        return self.center + self.delta

    @classmethod
    def box(cls, lo, hi, m):
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (m,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (m,))
        return cls(0.5 * (lo + hi), 0.5 * (hi - lo))

    def clip(self, u):
        return np.minimum(np.maximum(u, self.lower), self.upper)


def trust_region_from_buffer(inputs, eta: float = 20.0) -> TrustRegion:
    """Dimension-wise mean and ``eta`` times the population std of buffer inputs."""
    U = np.asarray(inputs, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if U.shape[0] < 2:
        raise DegenerateBuffer(f"need at least 2 inputs, got {U.shape[0]}")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    return TrustRegion(U.mean(axis=0), eta * U.std(axis=0))


@dataclass(frozen=True)
class QuadCost:
    Q: np.ndarray
    R: np.ndarray
    Q_T: np.ndarray
    target: np.ndarray | None = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        QT = np.atleast_2d(np.asarray(self.Q_T, dtype=float))
        for name, M, strict in (("Q", Q, False), ("R", R, True), ("Q_T", QT, False)):
            if M.shape[0] != M.shape[1] or np.max(np.abs(M - M.T), initial=0.0) > 1e-10:
                raise ValueError(f"{name} must be square and symmetric")
            lo = np.linalg.eigvalsh(M)[0]
            if lo < -1e-12 or (strict and lo <= 0):
                raise ValueError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
        if Q.shape != QT.shape:
            raise ValueError("Q and Q_T must match")
        tgt = np.zeros(Q.shape[0]) if self.target is None else np.asarray(self.target, dtype=float)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Q_T", QT)
        object.__setattr__(self, "target", tgt)

    @classmethod
    def identity(cls, n, m):
        return cls(np.eye(n), np.eye(m), np.eye(n))

    def horizon_cost(self, states, inputs):
        """``sum_{t<T} (x'Qx + u'Ru) + x_T'Q_T x_T`` with ``T = len(inputs)``."""
        E = np.asarray(states) - self.target
        U = np.asarray(inputs)
        T = len(U)
        run = np.einsum("ti,ij,tj->", E[:T], self.Q, E[:T]) + np.einsum("ti,ij,tj->", U, self.R, U)
        return float(run + E[T] @ self.Q_T @ E[T])


@dataclass
class MpcPlan:
    inputs: np.ndarray
    states: np.ndarray
    lams: np.ndarray
    objective: float
    degraded: bool = False
    sigma_final: float = float("nan")
    iterations: int = 0
    violation: float = 0.0


class _Transcription:
    """Index bookkeeping and evaluators for one planning problem."""

    def __init__(self, theta: LcsParams, x0, cost: QuadCost, T: int):
        n, m, r = theta.dims
        self.theta, self.cost, self.T = theta, cost, T
        self.n, self.m, self.r = n, m, r
        self.x0 = np.asarray(x0, dtype=float)
        o = 0
        self.sx = slice(o, o + T * n); o += T * n
        self.su = slice(o, o + T * m); o += T * m
        self.sl = slice(o, o + T * r); o += T * r
        self.sw = slice(o, o + T * r); o += T * r
        self.ss = slice(o, o + T); o += T
        self.dim = o
        self.n_eq = T * (n + r + 1)
        self._build_linear()
        # objective Hessian is constant and block diagonal
        Hx = np.kron(np.eye(T), cost.Q)
        Hx[(T - 1) * n:, (T - 1) * n:] = cost.Q_T
        self.Hx = 2.0 * Hx
        self.Hu = 2.0 * np.kron(np.eye(T), cost.R)
        self.xref = np.tile(cost.target, T)
        e0 = self.x0 - cost.target
        self.c0 = float(e0 @ cost.Q @ e0)

    def _build_linear(self):
        th, T, n, m, r = self.theta, self.T, self.n, self.m, self.r
        J = np.zeros((self.n_eq, self.dim))
        k = np.zeros(self.n_eq)
        ix = lambda t: self.sx.start + (t - 1) * n  # x_t for t >= 1
        iu = lambda t: self.su.start + t * m
        il = lambda t: self.sl.start + t * r
        iw = lambda t: self.sw.start + t * r
        for t in range(T):
            row = t * n
            J[row:row + n, ix(t + 1):ix(t + 1) + n] = np.eye(n)
            if t > 0:
                J[row:row + n, ix(t):ix(t) + n] = -th.A
            J[row:row + n, iu(t):iu(t) + m] = -th.B
            J[row:row + n, il(t):il(t) + r] = -th.C
            k[row:row + n] = -th.d - (th.A @ self.x0 if t == 0 else 0.0)
            row = T * n + t * r
            J[row:row + r, iw(t):iw(t) + r] = np.eye(r)
            if t > 0:
                J[row:row + r, ix(t):ix(t) + n] = -th.D
            J[row:row + r, iu(t):iu(t) + m] = -th.E
            J[row:row + r, il(t):il(t) + r] = -th.F
            k[row:row + r] = -th.c - (th.D @ self.x0 if t == 0 else 0.0)
        self.J_lin = J[: T * (n + r)]
        self.k_lin = k[: T * (n + r)]
        self.cc_rows = np.arange(T * (n + r), self.n_eq)

    def objective(self, z):
        ex = z[self.sx] - self.xref
        u = z[self.su]
        gx = self.Hx @ ex
        gu = self.Hu @ u
        g = np.zeros(self.dim)
        g[self.sx] = gx
        g[self.su] = gu
        return 0.5 * (ex @ gx + u @ gu) + self.c0, g

    def constraints(self, z):
        T, r = self.T, self.r
        lam = z[self.sl].reshape(T, r)
        w = z[self.sw].reshape(T, r)
        s = z[self.ss]
        h = np.empty(self.n_eq)
        nl = self.J_lin.shape[0]
        h[:nl] = self.J_lin @ z + self.k_lin
        h[nl:] = np.sum(lam * w, axis=1) - s
        J = np.zeros((self.n_eq, self.dim))
        J[:nl] = self.J_lin
        rows = self.cc_rows
        for t in range(T):
            J[rows[t], self.sl.start + t * r:self.sl.start + (t + 1) * r] = w[t]
            J[rows[t], self.sw.start + t * r:self.sw.start + (t + 1) * r] = lam[t]
        J[rows, self.ss.start + np.arange(T)] = -1.0
        return h, J

    def pack(self, traj: Trajectory, sigma):
        th = self.theta
        X, U, L = traj.states, traj.inputs, traj.lams
        W = X[:-1] @ th.D.T + U @ th.E.T + L @ th.F.T + th.c
        z = np.empty(self.dim)
        z[self.sx] = X[1:].ravel()
        z[self.su] = U.ravel()
        z[self.sl] = np.maximum(L, 0.0).ravel()
        z[self.sw] = np.maximum(W, 0.0).ravel()
        z[self.ss] = np.clip(np.sum(L * W, axis=1), 0.0, sigma)
        return z

    def bounds(self, tr: TrustRegion, sigma):
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        lo[self.su] = np.tile(tr.lower, self.T)
        hi[self.su] = np.tile(tr.upper, self.T)
        lo[self.sl] = 0.0
        lo[self.sw] = 0.0
        lo[self.ss] = 0.0
        hi[self.ss] = sigma
        return lo, hi


def _simulate(theta, x0, U, cost):
    traj = lcs_rollout(theta, x0, U)
    return traj, cost.horizon_cost(traj.states, traj.inputs)


def _active_sets(theta, traj):
    """Mode sequence of a simulated trajectory: index active where lam > w."""
    X, U, L = traj.states, traj.inputs, traj.lams
    W = X[:-1] @ theta.D.T + U @ theta.E.T + L @ theta.F.T + theta.c
    return L > W


class _ModeQp:
    """Condensed QP in the stacked inputs for one fixed mode sequence.

    With the active set of every step fixed, ``lam_t`` is affine in
    ``(x_t, u_t)`` and the whole trajectory is affine in ``u``. The region
    where the mode sequence is valid is a polyhedron (active multipliers
    non-negative, inactive slacks non-negative).
    """

    def __init__(self, theta: LcsParams, x0, cost: QuadCost, T, lo, hi):
        self.theta, self.cost, self.T = theta, cost, T
        self.x0 = np.asarray(x0, dtype=float)
        n, m, r = theta.dims
        self.nu = T * m
        self.lo, self.hi = np.tile(lo, T), np.tile(hi, T)
        self.pinned = self.hi - self.lo <= 0.0
        self.Rbig = 2.0 * np.kron(np.eye(T), cost.R)

    def build(self, modes):
        th, T, cost = self.theta, self.T, self.cost
        n, m, r = th.dims
        nu = self.nu
        Mx = np.zeros((n, nu))
        kx = self.x0.copy()
        H = self.Rbig.copy()
        g = np.zeros(nu)
        const = 0.0
        rows, rhs, tags = [], [], []
        e = kx - cost.target
        const += e @ cost.Q @ e
        for t in range(T):
            a = np.flatnonzero(modes[t])
            Mq = th.D @ Mx
            Mq[:, t * m:(t + 1) * m] += th.E
            kq = th.D @ kx + th.c
            Ml = np.zeros((r, nu))
            kl = np.zeros(r)
            if a.size:
                Finv = np.linalg.inv(th.F[np.ix_(a, a)])
                Ml[a] = -Finv @ Mq[a]
                kl[a] = -Finv @ kq[a]
            Mw = th.F @ Ml + Mq
            kw = th.F @ kl + kq
            for i in range(r):
                if modes[t][i]:
                    rows.append(Ml[i]); rhs.append(-kl[i])
                else:
                    rows.append(Mw[i]); rhs.append(-kw[i])
                tags.append((t, i))
            Mx_next = th.A @ Mx + th.C @ Ml
            Mx_next[:, t * m:(t + 1) * m] += th.B
            kx = th.A @ kx + th.C @ kl + th.d
            Mx = Mx_next
            W = cost.Q_T if t == T - 1 else cost.Q
            e = kx - cost.target
            H += 2.0 * Mx.T @ W @ Mx
            g += 2.0 * Mx.T @ W @ e
            const += e @ W @ e
        return 0.5 * (H + H.T), g, const, np.array(rows), np.array(rhs), tags

    def solve(self, modes):
        """Minimize over the region of ``modes``; returns ``(u, J, mult, tags)`` or None."""
        H, g, const, Cr, br, tags = self.build(modes)
        nr = len(br)
        # box rows, pinned coordinates as equalities
        I = np.eye(self.nu)
        pin = np.flatnonzero(self.pinned)
        free = np.flatnonzero(~self.pinned)
        Cmat = np.vstack([I[pin], Cr, I[free], -I[free]]).T
        bvec = np.concatenate([self.lo[pin], br, self.lo[free], -self.hi[free]])
        try:
            sol = quadprog.solve_qp(H, -g, Cmat, bvec, meq=pin.size)
        except ValueError:
            return None
        u = np.clip(sol[0], self.lo, self.hi)
        J = float(0.5 * u @ H @ u + g @ u + const)
        mult = sol[4][pin.size:pin.size + nr]
        return u, J, mult, tags


def _mode_descent(theta, x0, cost, T, tr, U0, max_hops=30):
    """Local descent over the mode partition starting from inputs ``U0``."""
    m = theta.m
    qp = _ModeQp(theta, x0, cost, T, tr.lower, tr.upper)
    traj = lcs_rollout(theta, x0, U0)
    modes = _active_sets(theta, traj)
    best = qp.solve(modes)
    if best is None:
        return None
    hops = 0
    tried = set()
    while hops < max_hops:
        u, J, mult, tags = best
        scale = 1e-9 * max(1.0, abs(J))
        order = [k for k in np.argsort(-mult) if mult[k] > scale]
        improved = False
        for k in order:
            t, i = tags[k]
            cand = modes.copy()
            cand[t, i] = ~cand[t, i]
            key = cand.tobytes()
            if key in tried:
                continue
            tried.add(key)
            out = qp.solve(cand)
            hops += 1
            if out is not None and out[1] < J - scale:
                modes, best, improved = cand, out, True
                break
            if hops >= max_hops:
                break
        if not improved and len(order) > 1:
            # degenerate vertex: cross every pushing boundary at once
            cand = modes.copy()
            for k in order:
                t, i = tags[k]
                cand[t, i] = ~cand[t, i]
            key = cand.tobytes()
            if key not in tried:
                tried.add(key)
                out = qp.solve(cand)
                hops += 1
                if out is not None and out[1] < J - scale:
                    modes, best, improved = cand, out, True
        if not improved:
            # stationary on this piece; the cost may still drop across a
            # boundary the QP never touches, so scan single flips once
            for t, i in np.ndindex(*modes.shape):
                cand = modes.copy()
                cand[t, i] = ~cand[t, i]
                key = cand.tobytes()
                if key in tried:
                    continue
                tried.add(key)
                out = qp.solve(cand)
                if out is not None and out[1] < J - scale:
                    modes, best, improved = cand, out, True
                    hops += 1
                    break
        if not improved:
            break
    return best[0].reshape(T, m), hops


def plan(theta: LcsParams, x0, cost: QuadCost, tr: TrustRegion, T: int = 5,
         warm: MpcPlan | None = None, method: str = "active-set", sigmas=SIGMA_SCHEDULE,
         tol: float = NLP_TOL, max_iter: int = NLP_MAX_INNER,
         max_outer: int = NLP_MAX_OUTER, max_hops: int = 30) -> MpcPlan:
    """Plan ``T`` inputs from ``x0`` inside the trust region.

    ``method="transcription"`` solves the full transcribed program over
    ``(x, u, lam, w)`` with the complementarity relaxation schedule
    ``sigmas``. ``method="active-set"`` (default) fixes the mode sequence of
    an initial guess, solves the resulting convex QP over the inputs and
    hops to neighbouring mode sequences while the cost decreases.

    Either way the candidate inputs are clipped to the box and re-simulated
    through the exact LCS; the cheapest of the solver output and the
    re-simulated initial guesses is returned, so a poor local solve never
    makes the plan worse than its warm start.
    """
    if T < 1:
        raise ValueError("horizon must be at least 1")
    if method not in ("active-set", "transcription"):
        raise ValueError(f"unknown planning method {method!r}")
    x0 = np.asarray(x0, dtype=float)
    if tr.center.shape != (theta.m,):
        raise ValueError("trust region dimension does not match the model input")
    lo_u, hi_u = tr.lower, tr.upper

    candidates = [np.tile(tr.center, (T, 1))]
    if warm is not None:
        U_warm = np.vstack([warm.inputs[1:], warm.inputs[-1:]])[:T]
        if len(U_warm) < T:
            U_warm = np.vstack([U_warm, np.tile(U_warm[-1], (T - len(U_warm), 1))])
        candidates.insert(0, np.clip(U_warm, lo_u, hi_u))

    sims = [_simulate(theta, x0, U, cost) for U in candidates]
    best_traj, best_cost = min(sims, key=lambda s: s[1])

    if np.all(tr.delta == 0):
        return MpcPlan(best_traj.inputs, best_traj.states, best_traj.lams, best_cost,
                       degraded=False, sigma_final=0.0)

    proposals = []
    degraded, iters, viol, sigma_final = False, 0, 0.0, 0.0
    if method == "transcription":
        prob = _Transcription(theta, x0, cost, T)
        z = prob.pack(sims[0][0], sigmas[0])
        mu = None
        res = None
        for sigma in sigmas:
            lo, hi = prob.bounds(tr, sigma)
            res = solve_nlp(NlpProblem(prob.dim, prob.objective, prob.constraints, lo, hi,
                                       np.clip(z, lo, hi)),
                            tol=tol, max_iter=max_iter, max_outer=max_outer, multipliers=mu)
            z, mu = res.x, res.multipliers
            iters += res.iterations
        proposals.append(z[prob.su].reshape(T, theta.m))
        degraded, viol, sigma_final = not res.converged, res.violation, sigmas[-1]
    else:
        for traj, _ in sims:
            try:
                out = _mode_descent(theta, x0, cost, T, tr, traj.inputs, max_hops)
            except LcsReduceError as exc:
                log.warning("mode descent failed: %s", exc)
                out = None
            if out is None:
                degraded = True
                continue
            proposals.append(out[0])
            iters += out[1] + 1
    for U in proposals:
        U = np.clip(U, lo_u, hi_u)
        try:
            traj, J = _simulate(theta, x0, U, cost)
        except LcsReduceError as exc:
            log.warning("re-simulation of planned inputs failed: %s", exc)
            continue
        if J < best_cost:
            best_traj, best_cost = traj, J
    return MpcPlan(best_traj.inputs.copy(), best_traj.states, best_traj.lams, best_cost,
                   degraded=degraded, sigma_final=sigma_final, iterations=iters,
                   violation=viol)


@dataclass
class Rollout:
    """Closed-loop episode on the environment."""

    states: np.ndarray
    inputs: np.ndarray
    lams: np.ndarray
    signatures: list
    plan_objectives: list = field(default_factory=list)
    degraded: list = field(default_factory=list)
    sigma_final: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    plan_times: list = field(default_factory=list)
    x0_resampled: bool = False

    @property
    def horizon(self):
        return len(self.inputs)

    def transitions(self):
        return self.states[:-1], self.inputs, self.states[1:]

    def degraded_rate(self):
        return float(np.mean(self.degraded)) if self.degraded else 0.0

    def time_percentiles(self, q=(50, 90, 99)):
        return dict(zip(q, np.percentile(self.plan_times, q))) if self.plan_times else {}

    def planning_log_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "objective", "sigma_final", "iterations", "degraded"])
            for k in range(len(self.plan_objectives)):
                w.writerow([k, repr(float(self.plan_objectives[k])), self.sigma_final[k],
                            self.iterations[k], int(self.degraded[k])])

    def to_trajectory(self):
        return Trajectory(self.states, self.inputs, self.lams, list(self.signatures))


def receding_rollout(env, theta_g: LcsParams, cost: QuadCost, tr: TrustRegion, H: int,
                     T: int, x0, planner_kw=None) -> Rollout:
    """Run ``H`` receding-horizon steps, applying only the first planned input.

    Each plan starts from the environment's true state and is warm-started
    from the previous plan shifted by one step.
    """
    if H < 1:
        raise ValueError("rollout horizon must be at least 1")
    planner_kw = planner_kw or {}
    states = [np.asarray(x0, dtype=float)]
    inputs, lams, sigs = [], [], []
    out = Rollout(np.empty(0), np.empty(0), np.empty(0), [])
    warm = None
    lam_env = None
    for _ in range(H):
        t0 = time.perf_counter()
        p = plan(theta_g, states[-1], cost, tr, T, warm=warm, **planner_kw)
        out.plan_times.append(time.perf_counter() - t0)
        u = tr.clip(p.inputs[0])
        if np.max(np.abs(u - p.inputs[0]), initial=0.0) > 1e-12:
            log.info("applied input projected onto the trust region")
        x_next, lam_env = env.step(states[-1], u, lam0=lam_env)
        inputs.append(u)
        lams.append(lam_env)
        sigs.append(mode_signature(lam_env, env.threshold))
        states.append(x_next)
        out.plan_objectives.append(p.objective)
        out.degraded.append(p.degraded)
        out.sigma_final.append(p.sigma_final)
        out.iterations.append(p.iterations)
        warm = p
        if np.linalg.norm(x_next) > 1e6:
            log.warning("environment state exploded during rollout")
            break
    out.states = np.array(states)
    out.inputs = np.array(inputs).reshape(-1, env.theta.m)
    out.lams = np.array(lams).reshape(-1, env.theta.r)
    out.signatures = sigs
    return out
