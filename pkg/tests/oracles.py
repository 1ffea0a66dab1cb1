"""Independent reference computations used by the tests.

Nothing here imports the solvers under test.
"""
import itertools

import numpy as np


def random_monotone(rng, r, skew=1.0):
    """``M = G G' + S`` with ``S`` skew-symmetric, so ``M + M'`` is PD."""
    G = rng.uniform(-1, 1, (r, r)) + 0.5 * np.eye(r)
    S = rng.uniform(-skew, skew, (r, r))
    return G @ G.T + 1e-2 * np.eye(r) + (S - S.T), rng.uniform(-2, 2, r)


def random_spd(rng, k):
    X = rng.normal(size=(k, k))
    return X @ X.T + 0.5 * np.eye(k)


def lcp_residual(M, q, lam):
    w = M @ lam + q
    return max(-lam.min(initial=0), -w.min(initial=0), abs(lam @ w))


def riccati_lqr(A, B, Q, R, QT, x0, T, d=None):
    """Finite-horizon LQR with an optional affine drift, by backward recursion.

    Returns the optimal input sequence ``(T, m)`` and the optimal cost
    ``sum_{t<T} x'Qx + u'Ru + x_T'QT x_T``.
    """
    n = A.shape[0]
    d = np.zeros(n) if d is None else d
    P, p = QT.copy(), np.zeros(n)
    gains = []
    for _ in range(T):
        S = R + B.T @ P @ B
        K = np.linalg.solve(S, B.T @ P @ A)
        k = np.linalg.solve(S, B.T @ (P @ d + p))
        Acl = A - B @ K
        p = Acl.T @ (P @ (d - B @ k) + p) + K.T @ R @ k
        P = Q + K.T @ R @ K + Acl.T @ P @ Acl
        gains.append((K, k))
    gains.reverse()
    x = np.asarray(x0, float)
    U, J = [], 0.0
    for K, k in gains:
        u = -K @ x - k
        J += x @ Q @ x + u @ R @ u
        U.append(u)
        x = A @ x + B @ u + d
    return np.array(U), J + x @ QT @ x


def scalar_lcs_step(a, b, c, d, D, E, F, cc, x, u):
    """Closed-form step of a 1-D LCS with ``F > 0``."""
    q = D * x + E * u + cc
    lam = max(0.0, -q / F)
    return a * x + b * u + c * lam + d, lam


def scalar_grid_plan(params, x0, T, lo, hi, step):
    """Exhaustive search over an input grid for a scalar LCS and unit weights.

    ``lo`` and ``hi`` may be scalars or per-step arrays of length ``T``.
    """
    lo, hi = np.broadcast_to(lo, (T,)), np.broadcast_to(hi, (T,))
    grids = [np.arange(lo[t], hi[t] + 0.5 * step, step) for t in range(T)]
    U = np.array(np.meshgrid(*grids, indexing="ij")).reshape(T, -1)
    a, b, c, d, D, E, F, cc = params
    x = np.full(U.shape[1], float(x0))
    J = np.zeros(U.shape[1])
    for t in range(T):
        u = U[t]
        J += x * x + u * u
        lam = np.maximum(0.0, -(D * x + E * u + cc) / F)
        x = a * x + b * u + c * lam + d
    J += x * x
    i = int(np.argmin(J))
    return U[:, i], float(J[i])


def refined_grid_plan(params, x0, T, lo, hi, coarse=2e-2, fine=1e-3):
    """Coarse exhaustive grid, then a 1e-3 grid in a window around its optimum."""
    u, _ = scalar_grid_plan(params, x0, T, lo, hi, coarse)
    w = 1.5 * coarse
    return scalar_grid_plan(params, x0, T, np.maximum(u - w, lo), np.minimum(u + w, hi), fine)


def enumerate_qp(P, b):
    k = b.size
    best = 0.0
    for mask in itertools.product((False, True), repeat=k):
        idx = np.flatnonzero(mask)
        if not idx.size:
            continue
        z = np.zeros(k)
        z[idx] = np.linalg.solve(P[np.ix_(idx, idx)], -b[idx])
        if z.min() >= 0:
            best = min(best, 0.5 * z @ P @ z + b @ z)
    return best
