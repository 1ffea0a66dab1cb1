"""Numerical kernels: monotone LCP, nonnegative QP, and box/equality NLP.

All routines are pure functions of their inputs. Dense linear algebra only;
problem sizes in this package stay below a few hundred variables.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .errors import AmbiguousSolution, NoConvergence, NonMonotone, NoSolution

LCP_TOL = 1e-8
QP_TOL = 1e-6
NLP_TOL = 1e-4

LCP_MAX_ITER = 10_000
QP_MAX_ITER = 20_000
NLP_MAX_INNER = 500
NLP_MAX_OUTER = 8

ENUM_MAX_DIM = 12


def _as_vector(v):
    return np.atleast_1d(np.asarray(v, dtype=float)).ravel()


@dataclass(frozen=True)
class LcpProblem:
    """Find ``lam >= 0`` with ``w = M lam + q >= 0`` and ``lam.w = 0``.

    ``M + M.T`` must be positive definite; this is checked here, so a
    constructed problem always has a unique solution.
    """

    M: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        q = _as_vector(self.q)
        if M.shape != (q.size, q.size):
            raise ValueError(f"M has shape {M.shape}, expected {(q.size, q.size)}")
        if q.size and np.linalg.eigvalsh(M + M.T)[0] <= 0.0:
            raise NonMonotone("symmetric part of M is not positive definite")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "q", q)

    @property
    def dim(self):
        return self.q.size


@dataclass(frozen=True)
class QpNonneg:
    """``min 0.5 z'Pz + b'z  s.t.  z >= 0`` with ``P`` symmetric positive definite."""

    P: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        b = _as_vector(self.b)
        if P.shape != (b.size, b.size):
            raise ValueError(f"P has shape {P.shape}, expected {(b.size, b.size)}")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-10:
            raise ValueError("P is not symmetric")
        if b.size and np.linalg.eigvalsh(P)[0] <= 0.0:
            raise ValueError("P is not positive definite")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "b", b)

    def objective(self, z):
        return 0.5 * z @ self.P @ z + self.b @ z


@dataclass
class NlpProblem:
    """Smooth objective, equality constraints ``h(z) = 0``, and box bounds.

    ``objective(z)`` returns ``(value, gradient)``; ``constraints(z)`` returns
    ``(h, jacobian)`` or is ``None`` for a purely box-constrained problem.
    """

    dim: int
    objective: Callable[[np.ndarray], tuple]
    constraints: Optional[Callable[[np.ndarray], tuple]]
    lower: np.ndarray
    upper: np.ndarray
    x0: np.ndarray

    def __post_init__(self):
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (self.dim,)).copy()
        self.x0 = _as_vector(self.x0)
        if self.x0.size != self.dim:
            raise ValueError("initial iterate has the wrong dimension")
        if np.any(self.lower > self.upper):
            raise ValueError("empty box: lower > upper")


@dataclass
class NlpResult:
    x: np.ndarray
    fun: float
    violation: float
    stationarity: float
    converged: bool
    iterations: int
    multipliers: np.ndarray = field(repr=False)

    @property
    def degraded(self):
        return not self.converged


# ---------------------------------------------------------------------------
# LCP


def _lcp_certified(M, q, lam, tol):
    if lam.min(initial=0.0) < -tol:
        return False
    w = M @ lam + q
    if w.min(initial=0.0) < -tol:
        return False
    return abs(lam @ w) <= tol * (1.0 + np.linalg.norm(q))


def _lcp_from_active(M, q, active, tol):
    """Solve the LCP restricted to a guessed active set; None if the guess fails."""
    lam = np.zeros_like(q)
    idx = np.flatnonzero(active)
    if idx.size:
        try:
            lam[idx] = np.linalg.solve(M[np.ix_(idx, idx)], -q[idx])
        except np.linalg.LinAlgError:
            return None
    if not _lcp_certified(M, q, lam, tol):
        return None
    np.maximum(lam, 0.0, out=lam)
    return lam


def lcp_kernel(M, q, tol=LCP_TOL, max_iter=LCP_MAX_ITER, lam0=None, step=None,
               polish_every=10):
    """Projected extragradient iteration with periodic active-set polishing.

    ``M`` is trusted to be monotone (no eigenvalue check); use
    :func:`solve_lcp` for validated input.
    """
    r = q.size
    if r == 0 or q.min() >= 0.0:
        return np.zeros(r)
    if step is None:
        # at exactly 1/|M| extragradient stalls on the top eigen-direction
        step = 0.5 / np.linalg.norm(M, 2)
    lam = np.zeros(r) if lam0 is None else np.maximum(_as_vector(lam0), 0.0)
    qnorm = np.linalg.norm(q)
    for k in range(max_iter):
        w = M @ lam + q
        if k % polish_every == 0:
            cand = _lcp_from_active(M, q, lam > w, tol)
            if cand is not None:
                return cand
        y = np.maximum(lam - step * w, 0.0)
        lam = np.maximum(lam - step * (M @ y + q), 0.0)
        w = M @ lam + q
        if (np.max(np.abs(np.minimum(lam, w))) <= tol
                and abs(lam @ w) <= tol * (1.0 + qnorm)
                and w.min() >= -tol):
            return lam
    raise NoConvergence(f"LCP not solved to {tol:g} in {max_iter} iterations", best=lam)


def solve_lcp(p: LcpProblem, tol: float = LCP_TOL, max_iter: int = LCP_MAX_ITER,
              lam0=None) -> np.ndarray:
    """Solve a monotone LCP.

    Parameters
    ----------
    p : LcpProblem
    tol : float
        Residual tolerance in ``(0, 1e-3]``.
    lam0 : array_like, optional
        Warm start; the unique solution does not depend on it.

    Returns
    -------
    lam : ndarray
        Satisfies ``lam >= -tol``, ``M lam + q >= -tol`` and
        ``|lam.w| <= tol (1 + |q|)``.
    """
    if not 0.0 < tol <= 1e-3:
        raise ValueError("tol must lie in (0, 1e-3]")
    return lcp_kernel(p.M, p.q, tol=tol, max_iter=max_iter, lam0=lam0)


def solve_lcp_enum(p: LcpProblem, tol: float = 1e-10) -> np.ndarray:
    """Brute-force LCP solution over all ``2**r`` active sets (oracle)."""
    M, q = p.M, p.q
    r = q.size
    if r > ENUM_MAX_DIM:
        raise ValueError(f"enumeration limited to r <= {ENUM_MAX_DIM}")
    scale = 1.0 + np.abs(q).max(initial=0.0)
    found = None
    for mask in itertools.product((False, True), repeat=r):
        active = np.array(mask, dtype=bool)
        lam = np.zeros(r)
        idx = np.flatnonzero(active)
        if idx.size:
            try:
                lam[idx] = np.linalg.solve(M[np.ix_(idx, idx)], -q[idx])
            except np.linalg.LinAlgError:
                continue
        w = M @ lam + q
        if lam.min() < -tol * scale or w[~active].min(initial=0.0) < -tol * scale:
            continue
        lam = np.maximum(lam, 0.0)
        if found is None:
            found = lam
        elif np.max(np.abs(found - lam)) > 1e-7 * scale:
            raise AmbiguousSolution("distinct feasible active sets")
    if found is None:
        raise NoSolution("no feasible active set")
    return found


# ---------------------------------------------------------------------------
# Nonnegative QP


def _qp_kkt(P, B, Z):
    G = Z @ P + B
    return np.max(np.abs(np.minimum(Z, G)), axis=1)


def _qp_polish(P, B, free, tol):
    """Exact solve on guessed free sets.

    Each row solves ``P_ff z_f = -b_f`` embedded in a ``k x k`` system whose
    fixed coordinates are pinned to zero, so the batch is one stacked solve.
    """
    N, k = B.shape
    f = free.astype(float)
    M = f[:, :, None] * P[None, :, :] * f[:, None, :]
    M[:, np.arange(k), np.arange(k)] += 1.0 - f
    try:
        Z = -np.linalg.solve(M, (f * B)[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        return np.zeros((N, k)), np.zeros(N, dtype=bool)
    ok = Z.min(axis=1) >= -tol
    np.maximum(Z, 0.0, out=Z)
    ok &= _qp_kkt(P, B, Z) <= tol
    return Z, ok


def solve_qp_nonneg_batch(P, B, tol=QP_TOL, max_iter=QP_MAX_ITER, Z0=None,
                          alpha=1.6, check_every=10):
    """Solve many nonnegative QPs sharing the Hessian ``P``.

    Over-relaxed ADMM on the splitting ``z = y, y >= 0`` with one shared
    factorization, followed by exact polishing on the active set identified
    by the iterate.

    Parameters
    ----------
    P : (k, k) ndarray
        Symmetric positive definite Hessian.
    B : (N, k) ndarray
        One linear term per row.
    Z0 : (N, k) ndarray, optional
        Warm start.

    Returns
    -------
    Z : (N, k) ndarray
    converged : (N,) bool ndarray
        Rows whose KKT residual ``max|min(z, Pz + b)|`` reached ``tol``.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    N, k = B.shape
    eig = np.linalg.eigvalsh(P)
    if eig[0] <= 0.0:
        raise ValueError("P is not positive definite")
    rho = np.sqrt(eig[0] * eig[-1])
    K = np.linalg.inv(P + rho * np.eye(k))

    out = np.zeros((N, k))
    done = np.zeros(N, dtype=bool)
    Y = np.zeros((N, k)) if Z0 is None else np.maximum(np.asarray(Z0, dtype=float), 0.0)

    grad = Y @ P + B
    Zp, ok = _qp_polish(P, B, Y > grad, tol)
    out[ok] = Zp[ok]
    done |= ok
    rows = np.flatnonzero(~done)
    if rows.size == 0:
        return out, done

    Bw, Y = B[rows], Y[rows]
    U = -(Y @ P + Bw) / rho
    for it in range(1, max_iter + 1):
        X = (rho * (Y - U) - Bw) @ K
        Xh = alpha * X + (1.0 - alpha) * Y
        Y = np.maximum(Xh + U, 0.0)
        U += Xh - Y
        if it % check_every:
            continue
        res = _qp_kkt(P, Bw, Y)
        finished = res <= tol
        # Y is feasible, so a small KKT residual already meets the contract
        out[rows[finished]] = Y[finished]
        Zp, ok = _qp_polish(P, Bw, (Y + U * rho) > 0.0, tol)
        ok &= ~finished
        out[rows[ok]] = Zp[ok]
        finished |= ok
        done[rows[finished]] = True
        keep = ~finished
        if not keep.any():
            break
        rows, Bw, Y, U = rows[keep], Bw[keep], Y[keep], U[keep]
    if rows.size and not done[rows].all():
        out[rows] = Y
    return out, done


def solve_qp_nonneg(p: QpNonneg, tol: float = QP_TOL, max_iter: int = QP_MAX_ITER,
                    z0=None) -> np.ndarray:
    """Minimize ``0.5 z'Pz + b'z`` over ``z >= 0``.

    Raises
    ------
    NoConvergence
        If the KKT residual exceeds ``tol`` after ``max_iter`` ADMM iterations.
    """
    if not 0.0 < tol <= 1e-4:
        raise ValueError("tol must lie in (0, 1e-4]")
    if p.b.size == 0:
        return np.zeros(0)
    Z, ok = solve_qp_nonneg_batch(p.P, p.b[None, :], tol=tol, max_iter=max_iter,
                                  Z0=None if z0 is None else _as_vector(z0)[None, :])
    if not ok[0]:
        raise NoConvergence(f"QP not solved to {tol:g}", best=Z[0])
    return Z[0]


def solve_qp_enum(p: QpNonneg) -> tuple[np.ndarray, float]:
    """Global optimum by enumerating free sets (oracle; small ``k`` only)."""
    k = p.b.size
    if k > ENUM_MAX_DIM:
        raise ValueError(f"enumeration limited to k <= {ENUM_MAX_DIM}")
    best, best_val = np.zeros(k), 0.0
    for mask in itertools.product((False, True), repeat=k):
        idx = np.flatnonzero(mask)
        if not idx.size:
            continue
        z = np.zeros(k)
        z[idx] = np.linalg.solve(p.P[np.ix_(idx, idx)], -p.b[idx])
        if z.min() < 0.0:
            continue
        val = p.objective(z)
        if val < best_val:
            best, best_val = z, val
    return best, best_val


# ---------------------------------------------------------------------------
# NLP


def _projected_gradient(z, g, lo, hi):
    return np.max(np.abs(z - np.clip(z - g, lo, hi)), initial=0.0)


def solve_nlp(p: NlpProblem, tol: float = NLP_TOL, max_iter: int = NLP_MAX_INNER,
              max_outer: int = NLP_MAX_OUTER, rho0: float = 10.0,
              multipliers=None, rho_max: float = 1e8) -> NlpResult:
    """Augmented Lagrangian on the equalities, box-constrained quasi-Newton inside.

    The inner problem is solved by L-BFGS-B. The penalty grows tenfold per
    outer round. On failure the last iterate is returned with
    ``converged=False`` rather than raising.
    """
    lo, hi = p.lower, p.upper
    z = np.clip(p.x0, lo, hi)
    bounds = optimize.Bounds(lo, hi)

    if p.constraints is None:
        res = optimize.minimize(p.objective, z, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 0.1 * tol})
        z = np.clip(res.x, lo, hi)
        f, g = p.objective(z)
        stat = _projected_gradient(z, g, lo, hi)
        return NlpResult(z, float(f), 0.0, stat, stat <= tol, int(res.nit), np.zeros(0))

    h0, _ = p.constraints(z)
    mu = np.zeros(h0.size) if multipliers is None else _as_vector(multipliers).copy()
    rho = rho0
    iters = 0
    viol = stat = np.inf
    for _ in range(max_outer):
        def lagrangian(v, mu=mu, rho=rho):
            f, g = p.objective(v)
            h, J = p.constraints(v)
            y = mu + rho * h
            return f + mu @ h + 0.5 * rho * (h @ h), g + J.T @ y

        res = optimize.minimize(lagrangian, z, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": max_iter, "ftol": 1e-15,
                                         "gtol": 0.1 * tol, "maxls": 40})
        iters += int(res.nit)
        z = np.clip(res.x, lo, hi)
        f, g = p.objective(z)
        h, J = p.constraints(z)
        mu = mu + rho * h
        viol = np.max(np.abs(h), initial=0.0)
        stat = _projected_gradient(z, g + J.T @ mu, lo, hi)
        if viol <= tol and stat <= tol:
            break
        rho = min(rho * 10.0, rho_max)
    f, _ = p.objective(z)
    return NlpResult(z, float(f), float(viol), float(stat),
                     bool(viol <= tol and stat <= tol), iters, mu)
