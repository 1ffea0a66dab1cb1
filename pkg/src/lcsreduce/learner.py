"""Violation-loss learning of reduced-order LCS parameters.

For one transition ``(x, u, x')`` and parameters ``theta`` the loss is::

    min_{lam, phi >= 0}  0.5 |A x + B u + C lam + d - x'|^2
                         + (1/eps) (lam'phi + |D x + E u + F lam + c - phi|^2 / (2 gamma))

with ``gamma`` the smallest eigenvalue of ``F + F'``. The inner problem is a
strongly convex QP in ``z = (lam, phi)`` whose Hessian depends only on
``theta``, so a whole batch shares one factorization. Gradients with respect
to ``theta`` follow from the envelope theorem: differentiate the objective at
the fixed minimizer.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .env import make_rng
from .errors import GenerationExhausted, InvalidParams
from .lcs import PARAM_NAMES, LcsParams
from .solvers import QP_MAX_ITER, QP_TOL, solve_qp_nonneg_batch

log = logging.getLogger(__name__)

# ridge added to the inner Hessian only when it is numerically singular
_HESS_FLOOR = 1e-12


@dataclass(frozen=True)
class ViolationHyper:
    """Hyperparameters of the violation loss and its outer optimizer."""

    eps: float = 0.1
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 300
    qp_tol: float = QP_TOL
    max_skip_frac: float = 0.1

    def __post_init__(self):
        if not 1e-3 < self.eps < 1.0:
            raise ValueError("eps must lie in (1e-3, 1)")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")


@dataclass(frozen=True)
class DataPoint:
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray


@dataclass
class Dataset:
    """Stacked transitions ``X (N, n)``, ``U (N, m)``, ``Xn (N, n)``."""

    X: np.ndarray
    U: np.ndarray
    Xn: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        self.Xn = np.atleast_2d(np.asarray(self.Xn, dtype=float))
        if not (len(self.X) == len(self.U) == len(self.Xn)):
            raise ValueError("X, U and Xn must have the same number of rows")
        if self.X.shape != self.Xn.shape:
            raise ValueError("X and Xn must share a shape")

    def __len__(self):
        return len(self.X)

    @classmethod
    def from_points(cls, points):
        points = list(points)
        if not points:
            raise ValueError("empty dataset")
        return cls(np.array([p.x for p in points]), np.array([p.u for p in points]),
                   np.array([p.x_next for p in points]))

    def subset(self, idx):
        return Dataset(self.X[idx], self.U[idx], self.Xn[idx])


def as_dataset(data) -> Dataset:
    if isinstance(data, Dataset):
        return data
    if isinstance(data, DataPoint):
        return Dataset.from_points([data])
    return Dataset.from_points(data)


# ---------------------------------------------------------------------------
# inner QP


def inner_hessian(theta: LcsParams, eps: float, gamma: float | None = None):
    """The ``2r x 2r`` Hessian of the inner problem in ``(lam, phi)``."""
    gamma = theta.gamma if gamma is None else gamma
    C, F = theta.C, theta.F
    r = theta.r
    eg = eps * gamma
    I = np.eye(r)
    P = np.empty((2 * r, 2 * r))
    P[:r, :r] = C.T @ C + F.T @ F / eg
    P[:r, r:] = (I - F.T / gamma) / eps
    P[r:, :r] = (I - F / gamma) / eps
    P[r:, r:] = I / eg
    return 0.5 * (P + P.T)


def _residuals(theta, data: Dataset, lam, phi):
    a = data.X @ theta.A.T + data.U @ theta.B.T + theta.d - data.Xn
    b = data.X @ theta.D.T + data.U @ theta.E.T + theta.c
    return a + lam @ theta.C.T, b + lam @ theta.F.T - phi


def _loss_from_residuals(R_dyn, R_c, lam, phi, eps, gamma):
    return (0.5 * np.sum(R_dyn ** 2, axis=1)
            + (np.sum(lam * phi, axis=1) + np.sum(R_c ** 2, axis=1) / (2 * gamma)) / eps)


def solve_inner(theta: LcsParams, data, eps=0.1, tol=QP_TOL, Z0=None, max_iter=QP_MAX_ITER):
    """Batched inner QP.

    Returns
    -------
    lam, phi : (N, r) ndarray
    loss : (N,) ndarray
    ok : (N,) bool ndarray
        Rows whose QP met ``tol``.
    """
    data = as_dataset(data)
    r = theta.r
    gamma = theta.gamma
    eg = eps * gamma
    P = inner_hessian(theta, eps)
    lo = np.linalg.eigvalsh(P)[0]
    if lo <= _HESS_FLOOR * np.abs(P).max():
        P = P + _HESS_FLOOR * np.abs(P).max() * np.eye(2 * r)
    a = data.X @ theta.A.T + data.U @ theta.B.T + theta.d - data.Xn
    b = data.X @ theta.D.T + data.U @ theta.E.T + theta.c
    q = np.hstack([a @ theta.C + b @ theta.F / eg, -b / eg])
    # normalize so the KKT tolerance does not depend on the 1/(eps gamma) scale
    scale = float(np.max(np.diag(P)))
    Z, ok = solve_qp_nonneg_batch(P / scale, q / scale, tol=tol, max_iter=max_iter, Z0=Z0)
    lam, phi = Z[:, :r], Z[:, r:]
    R_dyn = a + lam @ theta.C.T
    R_c = b + lam @ theta.F.T - phi
    return lam, phi, _loss_from_residuals(R_dyn, R_c, lam, phi, eps, gamma), ok


def inner_violation_qp(theta: LcsParams, dp: DataPoint, hyper: ViolationHyper = ViolationHyper()):
    """Solve the inner problem for one transition; returns ``(lam, phi, loss)``."""
    lam, phi, loss, ok = solve_inner(theta, dp, hyper.eps, tol=hyper.qp_tol)
    if not ok[0]:
        from .errors import NoConvergence
        raise NoConvergence("inner violation QP did not converge", best=(lam[0], phi[0]))
    return lam[0], phi[0], float(loss[0])


def violation_loss(theta: LcsParams, data, hyper: ViolationHyper = ViolationHyper()):
    """Mean violation loss over a dataset."""
    return float(np.mean(solve_inner(theta, data, hyper.eps, tol=hyper.qp_tol)[2]))


# ---------------------------------------------------------------------------
# envelope gradient


def violation_grad_batch(theta: LcsParams, data, lam, phi, eps=0.1):
    """Gradient of the *mean* loss with the inner minimizers held fixed.

    Returns a dict keyed by parameter name. ``gamma`` is treated as the
    function ``lambda_min(2 G G')`` of ``G``, so its derivative is included.
    """
    data = as_dataset(data)
    lam = np.atleast_2d(lam)
    phi = np.atleast_2d(phi)
    N = len(data)
    gamma = theta.gamma
    eg = eps * gamma
    R_dyn, R_c = _residuals(theta, data, lam, phi)
    S = R_c / eg
    g = {
        "A": R_dyn.T @ data.X / N,
        "B": R_dyn.T @ data.U / N,
        "C": R_dyn.T @ lam / N,
        "d": R_dyn.mean(axis=0),
        "D": S.T @ data.X / N,
        "E": S.T @ data.U / N,
        "c": S.mean(axis=0),
    }
    K = S.T @ lam / N
    G = theta.G
    GG = G @ G.T
    w, V = np.linalg.eigh(GG)
    v = V[:, 0]
    dl_dgamma = -np.sum(R_c ** 2) / (2 * eps * gamma ** 2) / N
    g["G"] = (K + K.T) @ G + dl_dgamma * 4.0 * np.outer(v, v) @ G
    g["H"] = K - K.T
    return g


def violation_grad(theta: LcsParams, dp, lam, phi, hyper: ViolationHyper = ViolationHyper()):
    """Envelope gradient for a single transition (dict keyed by parameter name)."""
    return violation_grad_batch(theta, dp, lam, phi, hyper.eps)


def grad_to_vector(g):
    return np.concatenate([np.ravel(g[k]) for k in PARAM_NAMES])


# ---------------------------------------------------------------------------
# initialization and training


def init_params(n, m, r, rng=None, scale=0.5, max_attempts=100) -> LcsParams:
    """Every entry i.i.d. ``U[-scale, scale]``; redrawn until ``F + F'`` is PD."""
    if rng is None:
        rng = make_rng(0)
    size = sum(int(np.prod(s)) for s in LcsParams.shapes(n, m, r).values())
    for _ in range(max_attempts):
        try:
            return LcsParams.from_vector(rng.uniform(-scale, scale, size=size), n, m, r)
        except InvalidParams:
            continue
    raise GenerationExhausted(f"no valid initial parameters in {max_attempts} draws")


@dataclass
class TrainResult:
    theta: LcsParams
    history: list = field(default_factory=list)  # (epoch, mean loss, best loss)
    skipped: int = 0
    initial_loss: float = float("nan")

    @property
    def best_loss(self):
        return self.history[-1][2] if self.history else self.initial_loss

    def history_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss", "min_loss"])
            for row in self.history:
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])


class _Adam:
    def __init__(self, size, hyper: ViolationHyper):
        self.h = hyper
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad):
        h = self.h
        self.t += 1
        self.m = h.beta1 * self.m + (1 - h.beta1) * grad
        self.v = h.beta2 * self.v + (1 - h.beta2) * grad * grad
        mh = self.m / (1 - h.beta1 ** self.t)
        vh = self.v / (1 - h.beta2 ** self.t)
        return -h.lr * mh / (np.sqrt(vh) + h.adam_eps)


def train(theta_in: LcsParams, buffer, hyper: ViolationHyper = ViolationHyper(),
          rng=None, epochs=None) -> TrainResult:
    """Minimize the mean violation loss over ``buffer`` with minibatch Adam.

    The returned parameters are the best full-buffer iterate seen (including
    ``theta_in``), so the mean loss never increases. Datapoints whose inner
    QP fails are skipped; an epoch is abandoned once more than
    ``hyper.max_skip_frac`` of the buffer has been skipped in it.
    """
    data = as_dataset(buffer)
    N = len(data)
    if N == 0:
        raise ValueError("buffer is empty")
    if rng is None:
        rng = make_rng(0)
    epochs = hyper.epochs if epochs is None else epochs
    n, m, r = theta_in.dims
    Z = np.zeros((N, 2 * r))

    def full_loss(th):
        lam, phi, loss, ok = solve_inner(th, data, hyper.eps, hyper.qp_tol, Z0=Z)
        Z[:, :r], Z[:, r:] = lam, phi
        return float(np.mean(loss))

    theta = theta_in
    best, best_loss = theta_in, full_loss(theta_in)
    result = TrainResult(theta_in, initial_loss=best_loss)
    vec = theta.to_vector()
    adam = _Adam(vec.size, hyper)
    skipped_total = 0
    for epoch in range(epochs):
        perm = rng.permutation(N)
        skipped = 0
        for start in range(0, N, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            batch = data.subset(idx)
            lam, phi, _, ok = solve_inner(theta, batch, hyper.eps, hyper.qp_tol, Z0=Z[idx])
            Z[idx[ok], :r], Z[idx[ok], r:] = lam[ok], phi[ok]
            if not ok.all():
                skipped += int((~ok).sum())
                log.warning("epoch %d: skipped %d datapoints with unsolved inner QP",
                            epoch, int((~ok).sum()))
                if skipped > hyper.max_skip_frac * N:
                    log.warning("epoch %d abandoned after %d skips", epoch, skipped)
                    break
                if not ok.any():
                    continue
                batch, lam, phi = batch.subset(ok), lam[ok], phi[ok]
            grad = grad_to_vector(violation_grad_batch(theta, batch, lam, phi, hyper.eps))
            if not np.all(np.isfinite(grad)):
                log.warning("epoch %d: non-finite gradient, update skipped", epoch)
                continue
            trial = vec + adam.step(grad)
            try:
                theta = LcsParams.from_vector(trial, n, m, r)
            except InvalidParams:
                # step would make G singular; keep the current iterate
                continue
            vec = trial
        skipped_total += skipped
        loss = full_loss(theta)
        if loss < best_loss:
            best, best_loss = theta, loss
        result.history.append((epoch, loss, best_loss))
    result.theta = best
    result.skipped = skipped_total
    return result
