"""Multi-trial experiment protocols: Table-II style case sweeps and ablations.

Each trial draws a fresh full-order system from its seed, runs the whole
reduction loop and reads the final held-out evaluation. Trials are
independent, so they may fan out over threads; deterministic mode runs them
in order.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ABLATION_AXES, CASES, Config
from .env import generate_full_lcs
from .errors import LcsReduceError, PartialAggregation
from .loop import run
from .metrics import TABLE_COLUMNS, EvalReport, write_table2

log = logging.getLogger(__name__)

HEAVY_CASES = {"case7"}


@dataclass
class TrialOutcome:
    seed: int
    values: dict | None = None
    error: str | None = None
    curves: list = field(default_factory=list, repr=False)
    seconds: float = 0.0

    @property
    def ok(self):
        return self.values is not None


def case_config(cfg: Config, case: str) -> Config:
    """``cfg`` with env dims and model size replaced by a preset case."""
    n, m, R_full, lam_dim = CASES[case]
    return dataclasses.replace(
        cfg, env=dataclasses.replace(cfg.env, n=n, m=m, R_full=R_full),
        loop=dataclasses.replace(cfg.loop, lam_dim=lam_dim),
        experiment=dataclasses.replace(cfg.experiment, case=case))


def run_trial(cfg: Config, seed: int, out_dir=None, **loop_overrides) -> TrialOutcome:
    """One full trial; solver and generation failures are captured, not raised."""
    t0 = time.perf_counter()
    try:
        env = generate_full_lcs(cfg.env_config(seed))
        res = run(cfg.loop_config(seed, **loop_overrides), env, cfg.hyper(), out_dir=out_dir)
    except LcsReduceError as exc:
        log.warning("trial seed=%d failed: %s", seed, exc)
        return TrialOutcome(seed, error=f"{type(exc).__name__}: {exc}",
                            seconds=time.perf_counter() - t0)
    final = res.summary.get("final")
    values = {key: final[key] for key, _ in TABLE_COLUMNS} if final else None
    out = TrialOutcome(seed, values, None if final else "no evaluation (zero iterations)",
                       res.curves.records, time.perf_counter() - t0)
    if final:
        out.values.update({k: final[k] for k in ("diag_zeroth", "diag_first") if k in final})
        evals = res.summary["evaluations"]
        first = evals[min(evals, key=int)]
        out.values.update({"gap_first": first["gap"], "onpolicy_me_first": first["onpolicy_me"],
                           "diag_zeroth_first": first.get("diag_zeroth"),
                           "diag_first_first": first.get("diag_first")})
    return out


def _fan_out(fn, items, parallel, deterministic):
    if deterministic or parallel <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(fn, items))


def _aggregate(label, outcomes, min_success):
    rep = EvalReport(label=label)
    for o in outcomes:
        if o.ok:
            rep.add(**o.values)
    failed = [o for o in outcomes if not o.ok]
    frac = rep.trials / len(outcomes) if outcomes else 0.0
    return rep, failed, frac


def write_curves(outcomes, path):
    """Per-iteration mean and std across trials of every numeric curve column."""
    records = [o.curves for o in outcomes if o.ok and o.curves]
    if not records:
        return
    n_iter = min(len(r) for r in records)
    keys = [k for k, v in records[0][0].items() if k != "iteration" and isinstance(v, (int, float))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration"] + [f"{k}_{s}" for k in keys for s in ("mean", "std")])
        for i in range(n_iter):
            row = [i]
            for k in keys:
                v = np.array([r[i][k] for r in records], dtype=float)
                row += [repr(float(v.mean())), repr(float(v.std()))]
            w.writerow(row)


def _trial_dir(out, *parts):
    if out is None:
        return None
    d = Path(out).joinpath(*map(str, parts))
    d.mkdir(parents=True, exist_ok=True)
    return d


def table2(cfg: Config, cases, seeds, out_dir=None):
    """Run every case over every seed and aggregate Table-II columns.

    Returns ``(reports, outcomes)``; raises :class:`PartialAggregation` after
    writing the aggregate when some trials failed but at least
    ``experiment.min_success`` of each case succeeded, and
    :class:`LcsReduceError` when a case falls below that fraction.
    """
    exp = cfg.experiment
    reports, all_outcomes, partial = [], {}, []
    for case in cases:
        if case not in CASES:
            raise ValueError(f"unknown case {case!r}")
        if case in HEAVY_CASES:
            log.warning("%s has a 30-dimensional state; expect long runtimes", case)
        ccfg = case_config(cfg, case)
        outcomes = _fan_out(lambda s: run_trial(ccfg, s, _trial_dir(out_dir, case, f"seed_{s}")),
                            list(seeds), exp.parallel, exp.deterministic)
        rep, failed, frac = _aggregate(case, outcomes, exp.min_success)
        all_outcomes[case] = outcomes
        if frac < exp.min_success:
            raise LcsReduceError(f"{case}: only {rep.trials}/{len(outcomes)} trials succeeded")
        if failed:
            partial.append(f"{case}: {len(failed)} failed ({'; '.join(o.error for o in failed)})")
        reports.append(rep)
        if out_dir is not None:
            rep.save_json(Path(out_dir) / f"{case}_report.json")
            write_curves(outcomes, Path(out_dir) / f"{case}_curves.csv")
    if out_dir is not None:
        write_table2(reports, Path(out_dir) / "table2.csv")
    if partial:
        raise PartialAggregation("; ".join(partial), reports)
    return reports, all_outcomes


def _axis_value(axis, value):
    if axis == "eta":
        return float(value)
    return int(value)


def ablation(cfg: Config, axis: str, grid, seeds, out_dir=None):
    """One loop run per (grid value, seed); mean and std of on-policy ME and gap.

    Returns a list of row dicts, one per grid value.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}")
    grid = list(grid)
    if not grid:
        raise ValueError("grid must be nonempty")
    exp = cfg.experiment
    field_name = ABLATION_AXES[axis]
    rows, partial = [], []
    for value in grid:
        v = _axis_value(axis, value)
        over = {field_name: v}
        if axis == "R_buffer" and cfg.loop.R_new > v:
            raise ValueError(f"R_buffer={v} is smaller than R_new={cfg.loop.R_new}")
        outcomes = _fan_out(
            lambda s: run_trial(cfg, s, _trial_dir(out_dir, f"{axis}_{v}", f"seed_{s}"), **over),
            list(seeds), exp.parallel, exp.deterministic)
        rep, failed, frac = _aggregate(f"{axis}={v}", outcomes, exp.min_success)
        if frac < exp.min_success:
            raise LcsReduceError(f"{axis}={v}: only {rep.trials}/{len(outcomes)} trials succeeded")
        if failed:
            partial.append(f"{axis}={v}: {len(failed)} failed")
        me, me_sd = rep.stat("onpolicy_me")
        gap, gap_sd = rep.stat("gap")
        rows.append({"axis": axis, "value": v, "trials": rep.trials, "onpolicy_me_mean": me,
                     "onpolicy_me_std": me_sd, "gap_mean": gap, "gap_std": gap_sd})
    if out_dir is not None:
        with open(Path(out_dir) / f"ablation_{axis}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    if partial:
        raise PartialAggregation("; ".join(partial), rows)
    return rows
