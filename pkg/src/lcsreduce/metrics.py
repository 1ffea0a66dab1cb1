"""Evaluation quantities: model error, closed-loop cost, performance gap,
mode counts and first/zeroth-order trajectory diagnostics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateBaseline, SchemaError
from .lcs import LcsParams, lcs_rollout, lcs_step, mode_signature
from .learner import Dataset, as_dataset
from .mpc import QuadCost, TrustRegion, receding_rollout

REPORT_SCHEMA = "lcsreduce.report/1"
ME_FLOOR = 1e-6

TABLE_COLUMNS = (
    ("rand_modes_f", "random-policy modes in f"),
    ("rand_me", "random-policy ME(g) %"),
    ("gmpc_modes_f", "g-MPC modes in f"),
    ("onpolicy_me", "on-policy ME(g) %"),
    ("modes_g", "modes in g"),
    ("gap", "gap L(g) %"),
)


def predict_next(theta: LcsParams, data):
    """One-step predictions ``g(x, u)`` for every transition, plus multipliers."""
    data = as_dataset(data)
    out = np.empty_like(data.X)
    lams = np.empty((len(data), theta.r))
    lam = None
    for k in range(len(data)):
        out[k], lam = lcs_step(theta, data.X[k], data.U[k], lam0=lam)
        lams[k] = lam
    return out, lams


def relative_model_error(theta: LcsParams, data) -> float:
    """Mean of ``|g(x,u) - f(x,u)|^2 / (|f(x,u)|^2 + 1e-6)`` in percent."""
    data = as_dataset(data)
    if len(data) == 0:
        raise ValueError("dataset is empty")
    pred, _ = predict_next(theta, data)
    num = np.sum((pred - data.Xn) ** 2, axis=1)
    den = np.sum(data.Xn ** 2, axis=1) + ME_FLOOR
    return float(np.mean(num / den) * 100.0)


def model_modes(theta: LcsParams, data, threshold=1e-6) -> int:
    """Distinct signatures of the model's own multipliers along a dataset."""
    _, lams = predict_next(theta, data)
    return len({mode_signature(l, threshold) for l in lams})


def rollout_cost(rollout, cost: QuadCost, convention: str = "terminal") -> float:
    """Closed-loop cost of a realized trajectory.

    ``"stage"`` sums ``x_t'Q x_t + u_t'R u_t`` for ``t = 0..H`` with no input
    at the final state. ``"terminal"`` adds ``x_H'Q_T x_H`` on top, matching
    the planning objective.
    """
    X = np.asarray(rollout.states) - cost.target
    U = np.asarray(rollout.inputs)
    stage = float(np.einsum("ti,ij,tj->", X, cost.Q, X) + np.einsum("ti,ij,tj->", U, cost.R, U))
    if convention == "stage":
        return stage
    if convention == "terminal":
        return stage + float(X[-1] @ cost.Q_T @ X[-1])
    raise ValueError(f"unknown cost convention {convention!r}")


def performance_gap(J_g: float, J_f: float) -> float:
    if not J_f > 0:
        raise DegenerateBaseline(f"baseline cost must be positive, got {J_f}")
    return (J_g - J_f) / J_f * 100.0


@dataclass
class BaselineResult:
    mean_cost: float
    costs: list
    degraded_rates: list
    rollouts: list = field(default_factory=list, repr=False)


def f_mpc_baseline(env, cost: QuadCost, x0s, T: int, H: int, u_range: float | None = None,
                   convention: str = "terminal", planner_kw=None) -> BaselineResult:
    """Receding-horizon MPC on the true model over a fixed input box."""
    x0s = list(x0s)
    if not x0s:
        raise ValueError("x0 batch is empty")
    u_range = env.cfg.u_range if u_range is None else u_range
    tr = TrustRegion(np.zeros(env.theta.m), np.full(env.theta.m, u_range))
    rollouts = [receding_rollout(env.clone(), env.theta, cost, tr, H, T, x0, planner_kw)
                for x0 in x0s]
    costs = [rollout_cost(r, cost, convention) for r in rollouts]
    return BaselineResult(float(np.mean(costs)), costs, [r.degraded_rate() for r in rollouts],
                          rollouts)


def _stacked(theta, x0, U):
    tr = lcs_rollout(theta, x0, U)
    return tr.states[1:].ravel(), tr.signatures


def lemma_diagnostics(theta_g: LcsParams, env, rollouts, delta: float = 1e-4):
    """Zeroth- and first-order mismatch between true and model rollouts.

    For each rollout, both systems are re-simulated open loop from its
    ``x0`` under its applied inputs. The zeroth-order term is the norm of the
    stacked state difference. The first-order term is the Frobenius norm of
    the difference of central-difference input Jacobians, skipping input
    coordinates whose perturbation changes either system's mode sequence.

    Returns
    -------
    dict
        ``zeroth``, ``first`` (means over rollouts) and ``excluded`` (count of
        skipped input coordinates).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    theta_f = env.theta
    z0, z1, excluded = [], [], 0
    for ro in rollouts:
        x0 = ro.states[0]
        U = np.asarray(ro.inputs, dtype=float)
        Ff, sf = _stacked(theta_f, x0, U)
        Fg, sg = _stacked(theta_g, x0, U)
        z0.append(float(np.linalg.norm(Ff - Fg)))
        cols = []
        for idx in np.ndindex(U.shape):
            outs = []
            ok = True
            for sgn in (1.0, -1.0):
                Up = U.copy()
                Up[idx] += sgn * delta
                pf, tf = _stacked(theta_f, x0, Up)
                pg, tg = _stacked(theta_g, x0, Up)
                if tf != sf or tg != sg:
                    ok = False
                    break
                outs.append(pf - pg)
            if not ok:
                excluded += 1
                continue
            cols.append((outs[0] - outs[1]) / (2.0 * delta))
        z1.append(float(np.linalg.norm(np.array(cols))) if cols else 0.0)
    return {"zeroth": float(np.mean(z0)) if z0 else 0.0,
            "first": float(np.mean(z1)) if z1 else 0.0,
            "excluded": excluded}


@dataclass
class EvalReport:
    """Per-trial Table-II quantities; lists hold one value per trial."""

    rand_modes_f: list = field(default_factory=list)
    rand_me: list = field(default_factory=list)
    gmpc_modes_f: list = field(default_factory=list)
    onpolicy_me: list = field(default_factory=list)
    modes_g: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    label: str = ""

    def add(self, **values):
        for key, _ in TABLE_COLUMNS:
            getattr(self, key).append(values[key])

    def extend(self, other: "EvalReport"):
        for key, _ in TABLE_COLUMNS:
            getattr(self, key).extend(getattr(other, key))

    @property
    def trials(self):
        return len(self.gap)

    def stat(self, key):
        v = np.asarray(getattr(self, key), dtype=float)
        if v.size == 0:
            return float("nan"), float("nan")
        return float(v.mean()), float(v.std())

    def to_dict(self):
        doc = {"schema": REPORT_SCHEMA, "label": self.label, "trials": self.trials}
        for key, _ in TABLE_COLUMNS:
            mean, std = self.stat(key)
            doc[key] = {"values": list(map(float, getattr(self, key))), "mean": mean, "std": std}
        return doc

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema") != REPORT_SCHEMA:
            raise SchemaError(f"expected schema {REPORT_SCHEMA!r}, got {doc.get('schema')!r}")
        try:
            rep = cls(label=doc.get("label", ""))
            for key, _ in TABLE_COLUMNS:
                setattr(rep, key, list(doc[key]["values"]))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed report: {exc}") from exc
        return rep

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def table_row(self, fmt="{:.1f}"):
        cells = [self.label]
        for key, _ in TABLE_COLUMNS:
            mean, std = self.stat(key)
            cells.append(f"{fmt.format(mean)} ± {fmt.format(std)}")
        return cells


def write_table2(reports, path):
    """Table-II shaped CSV: one row per case, ``mean ± std`` cells."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "trials"] + [title for _, title in TABLE_COLUMNS])
        for rep in reports:
            row = rep.table_row()
            w.writerow([row[0], rep.trials] + row[1:])


def dataset_from_rollouts(rollouts) -> Dataset:
    X, U, Xn = [], [], []
    for ro in rollouts:
        x, u, xn = ro.states[:-1], ro.inputs, ro.states[1:]
        k = len(u)
        X.append(x[:k]); U.append(u); Xn.append(xn[:k])
    return Dataset(np.vstack(X), np.vstack(U), np.vstack(Xn))
