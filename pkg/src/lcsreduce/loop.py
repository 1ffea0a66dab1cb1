"""Task-driven reduction loop.

Each iteration trains the reduced model on the rollout buffer, sets the
trust region from the same buffer, collects new closed-loop rollouts with
the reduced-model MPC on the true system, and appends them to the buffer
with oldest-first eviction.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import Environment, make_rng, random_policy, sample_x0
from .errors import LcsReduceError
from .lcs import LcsParams, mode_signature
from .learner import Dataset, ViolationHyper, init_params, train
from .metrics import (dataset_from_rollouts, f_mpc_baseline, lemma_diagnostics, model_modes,
                      performance_gap, relative_model_error, rollout_cost)
from .mpc import QuadCost, Rollout, TrustRegion, receding_rollout, trust_region_from_buffer

log = logging.getLogger(__name__)

SUMMARY_SCHEMA = "lcsreduce.summary/1"

# RNG stream ids; every consumer owns an independent Philox stream
_S_INIT, _S_BUFFER, _S_EVAL, _S_RANDOM_EVAL = 1, 2, 3, 4
_S_TRAIN, _S_ROLLOUT = 1000, 2000
EVAL_STREAM, RANDOM_EVAL_STREAM = _S_EVAL, _S_RANDOM_EVAL


@dataclass(frozen=True)
class LoopConfig:
    """Hyperparameters of the reduction loop.

    ``eta`` may be a scalar or a per-iteration sequence (the last value is
    reused once the sequence runs out).
    """

    lam_dim: int = 3
    T: int = 5
    H: int = 15
    R_new: int = 5
    R_buffer: int = 50
    eta: float | tuple = 20.0
    iterations: int = 25
    init_rollouts: int | None = None
    eval_rollouts: int = 20
    random_eval_rollouts: int = 500
    random_eval_horizon: int = 20
    diagnostics_rollouts: int = 5
    fd_delta: float = 1e-4
    seed: int = 0
    planner: str = "active-set"
    planner_options: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        for name in ("lam_dim", "T", "H", "R_new", "R_buffer", "eval_rollouts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.R_new > self.R_buffer:
            raise ValueError("R_new cannot exceed R_buffer")
        etas = self.eta if isinstance(self.eta, (tuple, list)) else (self.eta,)
        if not etas or min(etas) < 0:
            raise ValueError("eta must be non-negative")
        if isinstance(self.eta, list):
            object.__setattr__(self, "eta", tuple(self.eta))

    def eta_at(self, i):
        if isinstance(self.eta, tuple):
            return float(self.eta[min(i, len(self.eta) - 1)])
        return float(self.eta)

    @property
    def planner_kw(self):
        return {"method": self.planner, **self.planner_options}

    @property
    def n_init(self):
        return self.R_new if self.init_rollouts is None else self.init_rollouts


class RolloutBuffer:
    """FIFO store of whole rollouts with a fixed capacity."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque()
        self._counter = itertools.count()

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return (ro for _, ro in self._items)

    @property
    def ids(self):
        """Insertion ids of the stored rollouts, oldest first."""
        return [i for i, _ in self._items]

    def push(self, rollout):
        self._items.append((next(self._counter), rollout))
        evicted = []
        while len(self._items) > self.capacity:
            evicted.append(self._items.popleft()[0])
        return evicted

    def extend(self, rollouts):
        evicted = []
        for ro in rollouts:
            evicted += self.push(ro)
        return evicted

    def dataset(self) -> Dataset:
        return dataset_from_rollouts(list(self))

    def inputs(self):
        return np.vstack([ro.inputs for ro in self])


@dataclass
class LearningCurves:
    records: list = field(default_factory=list)

    def append(self, rec: dict):
        self.records.append(dict(rec))

    def __len__(self):
        return len(self.records)

    def column(self, key):
        return [r[key] for r in self.records]

    def to_csv(self, path):
        if not self.records:
            Path(path).write_text("iteration\n")
            return
        keys = list(self.records[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


@dataclass
class LoopState:
    theta: LcsParams
    buffer: RolloutBuffer
    curves: LearningCurves = field(default_factory=LearningCurves)
    iteration: int = 0
    trust_region: TrustRegion | None = None
    last_rollouts: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    timings: list = field(default_factory=list)


def random_rollout_record(env: Environment, x0, H, rng) -> Rollout:
    """Random-policy episode stored in the same record type as MPC rollouts."""
    states = [np.asarray(x0, dtype=float)]
    inputs, lams, sigs = [], [], []
    lam = None
    for _ in range(H):
        u = random_policy(env.cfg, rng)
        x, lam = env.step(states[-1], u, lam0=lam)
        inputs.append(u)
        lams.append(lam)
        sigs.append(mode_signature(lam, env.threshold))
        states.append(x)
        if np.linalg.norm(x) > 1e6:
            break
    return Rollout(np.array(states), np.array(inputs), np.array(lams), sigs)


def init_buffer(env: Environment, cfg: LoopConfig, rng) -> RolloutBuffer:
    buf = RolloutBuffer(cfg.R_buffer)
    for _ in range(cfg.n_init):
        buf.push(random_rollout_record(env, sample_x0(env.cfg, rng), cfg.H, rng))
    return buf


def default_cost(n, m) -> QuadCost:
    return QuadCost.identity(n, m)


def _collect(env, theta, cost, tr, cfg: LoopConfig, rng):
    """``R_new`` receding-horizon rollouts; a failed x0 is resampled once."""
    rollouts, failures = [], 0
    for _ in range(cfg.R_new):
        for attempt in range(2):
            x0 = sample_x0(env.cfg, rng)
            try:
                ro = receding_rollout(env, theta, cost, tr, cfg.H, cfg.T, x0,
                                      cfg.planner_kw)
            except LcsReduceError as exc:
                failures += 1
                log.warning("rollout failed (%s)%s", exc, "; resampling x0" if attempt == 0 else "")
                continue
            if len(ro.inputs) < cfg.H:
                failures += 1
                continue
            ro.x0_resampled = attempt > 0
            rollouts.append(ro)
            break
    return rollouts, failures


def run_iteration(state: LoopState, env: Environment, cfg: LoopConfig,
                  hyper: ViolationHyper, cost: QuadCost, rng_train=None, rng_roll=None):
    """One pass of the loop; returns the updated state (mutated in place).

    Order: train on the current buffer, trust region from the current
    buffer, new rollouts with the freshly trained model, append with
    eviction, record curves. If more than half of the rollouts fail, the
    state is left unchanged and ``False`` is returned.
    """
    if len(state.buffer) == 0:
        raise ValueError("buffer is empty")
    i = state.iteration
    rng_train = rng_train if rng_train is not None else make_rng(cfg.seed, _S_TRAIN + i)
    rng_roll = rng_roll if rng_roll is not None else make_rng(cfg.seed, _S_ROLLOUT + i)

    trace = [("train", tuple(state.buffer.ids))]
    res = train(state.theta, state.buffer.dataset(), hyper, rng_train)
    theta = res.theta
    tr = trust_region_from_buffer(state.buffer.inputs(), cfg.eta_at(i))
    trace.append(("trust_region", tuple(state.buffer.ids)))

    t0 = time.perf_counter()
    rollouts, failures = _collect(env, theta, cost, tr, cfg, rng_roll)
    elapsed = time.perf_counter() - t0
    trace.append(("rollouts", tuple(state.buffer.ids)))
    if len(rollouts) < (cfg.R_new + 1) // 2:
        log.error("iteration %d aborted: %d of %d rollouts failed", i, cfg.R_new - len(rollouts),
                  cfg.R_new)
        return False

    evicted = state.buffer.extend(rollouts)
    trace.append(("append", tuple(state.buffer.ids), tuple(evicted)))
    data = dataset_from_rollouts(rollouts)
    n_plans = sum(len(r.plan_times) for r in rollouts)
    rec = {
        "iteration": i,
        "onpolicy_me": relative_model_error(theta, data),
        "cost": float(np.mean([rollout_cost(r, cost) for r in rollouts])),
        "cost_stage": float(np.mean([rollout_cost(r, cost, "stage") for r in rollouts])),
        "buffer_size": len(state.buffer),
        "modes_f": len({s for r in rollouts for s in r.signatures}),
        "modes_g": model_modes(theta, data),
        "train_loss": res.best_loss,
        "train_loss_init": res.initial_loss,
        "failures": failures,
        "degraded_rate": float(np.mean([r.degraded_rate() for r in rollouts])),
    }
    for j in range(theta.m):
        rec[f"tr_lower_{j}"] = float(tr.lower[j])
        rec[f"tr_upper_{j}"] = float(tr.upper[j])
    state.curves.append(rec)
    # wall-clock figures stay out of the curves so those remain reproducible
    state.timings.append({
        "iteration": i,
        "plan_rate_hz": n_plans / max(sum(sum(r.plan_times) for r in rollouts), 1e-12),
        "rollout_seconds": elapsed,
    })
    state.theta = theta
    state.trust_region = tr
    state.last_rollouts = rollouts
    state.trace.append(trace)
    state.iteration += 1
    return True


def evaluate_policy(theta: LcsParams, env: Environment, cost: QuadCost, tr: TrustRegion,
                    x0s, cfg: LoopConfig, J_f: float, diagnostics=True):
    """Held-out g-MPC evaluation on fixed initial states."""
    rollouts = [receding_rollout(env.clone(), theta, cost, tr, cfg.H, cfg.T, x0,
                                 cfg.planner_kw) for x0 in x0s]
    data = dataset_from_rollouts(rollouts)
    J_g = float(np.mean([rollout_cost(r, cost) for r in rollouts]))
    out = {
        "J_g": J_g,
        "J_g_stage": float(np.mean([rollout_cost(r, cost, "stage") for r in rollouts])),
        "gap": performance_gap(J_g, J_f),
        "onpolicy_me": relative_model_error(theta, data),
        "gmpc_modes_f": len({s for r in rollouts for s in r.signatures}),
        "modes_g": model_modes(theta, data),
        "degraded_rate": float(np.mean([r.degraded_rate() for r in rollouts])),
    }
    if diagnostics and cfg.diagnostics_rollouts > 0:
        diag = lemma_diagnostics(theta, env, rollouts[:cfg.diagnostics_rollouts], cfg.fd_delta)
        out.update({"diag_zeroth": diag["zeroth"], "diag_first": diag["first"],
                    "diag_excluded": diag["excluded"]})
    return out, rollouts


def random_policy_eval(theta: LcsParams, env: Environment, cfg: LoopConfig, rng):
    """Mode count of the true system and model error under the random policy."""
    probe = env.clone()
    rollouts = [random_rollout_record(probe, sample_x0(env.cfg, rng), cfg.random_eval_horizon, rng)
                for _ in range(cfg.random_eval_rollouts)]
    data = dataset_from_rollouts(rollouts)
    return {"rand_modes_f": probe.distinct_modes(),
            "rand_me": relative_model_error(theta, data)}


@dataclass
class RunResult:
    theta: LcsParams
    curves: LearningCurves
    summary: dict
    state: LoopState | None = None
    timing: dict = field(default_factory=dict)


def run(cfg: LoopConfig, env: Environment, hyper: ViolationHyper = ViolationHyper(),
        cost: QuadCost | None = None, out_dir=None, evaluate=True,
        baseline: float | None = None, eval_iterations=None) -> RunResult:
    """Run the full loop on ``env``.

    Held-out evaluation (20 fresh initial states by default, drawn from a
    stream never used for training) runs after the first and the last
    iteration; the final evaluation also includes the random-policy
    quantities. With zero iterations the initial guess is evaluated instead
    and stored under ``summary["initial"]``. ``baseline`` skips the full-model MPC baseline when the
    caller already has it.
    """
    t_start = time.perf_counter()
    n, m = env.theta.n, env.theta.m
    cost = cost or default_cost(n, m)
    theta0 = init_params(n, m, cfg.lam_dim, make_rng(cfg.seed, _S_INIT))
    state = LoopState(theta0, init_buffer(env, cfg, make_rng(cfg.seed, _S_BUFFER)))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        theta0.save(out / "theta_iter_0.json")

    rng_eval = make_rng(cfg.seed, _S_EVAL)
    x0s = [sample_x0(env.cfg, rng_eval) for _ in range(cfg.eval_rollouts)]
    summary = {"schema": SUMMARY_SCHEMA, "seed": cfg.seed, "config": _jsonable(asdict(cfg)),
               "dims": {"n": n, "m": m, "R_full": env.theta.r, "r": cfg.lam_dim}}
    J_f = None
    if evaluate:
        if baseline is None:
            base = f_mpc_baseline(env, cost, x0s, cfg.T, cfg.H, planner_kw=cfg.planner_kw)
            J_f = base.mean_cost
            summary["f_mpc_degraded_rate"] = float(np.mean(base.degraded_rates))
        else:
            J_f = float(baseline)
        summary["J_f"] = J_f
    eval_at = set(eval_iterations) if eval_iterations is not None else {0, cfg.iterations - 1}
    evaluations = {}
    aborted = 0
    while state.iteration < cfg.iterations:
        i = state.iteration
        ok = run_iteration(state, env, cfg, hyper, cost)
        if not ok:
            aborted += 1
            if aborted > 3:
                raise LcsReduceError(f"iteration {i}: repeated rollout failures")
            continue
        if out is not None:
            state.theta.save(out / f"theta_iter_{i + 1}.json")
        if evaluate and i in eval_at:
            ev, _ = evaluate_policy(state.theta, env, cost, state.trust_region, x0s, cfg, J_f)
            evaluations[i] = ev
            log.info("iteration %d: gap %.2f%%, on-policy ME %.2f%%", i, ev["gap"], ev["onpolicy_me"])
    summary["evaluations"] = {str(k): v for k, v in sorted(evaluations.items())}
    if evaluate and cfg.iterations == 0:
        # nothing trained: report the initial guess under the initial-buffer trust region
        tr0 = trust_region_from_buffer(state.buffer.inputs(), cfg.eta_at(0))
        summary["initial"], _ = evaluate_policy(state.theta, env, cost, tr0, x0s, cfg, J_f)
    if evaluations:
        final = evaluations[max(evaluations)]
        summary["final"] = dict(final)
        summary["final"].update(random_policy_eval(state.theta, env, cfg,
                                                   make_rng(cfg.seed, _S_RANDOM_EVAL)))
    summary["aborted_iterations"] = aborted
    summary["iterations"] = state.iteration
    # sidecar: everything wall-clock dependent, so summary.json is reproducible
    timing = {"wall_seconds": time.perf_counter() - t_start, "per_iteration": state.timings}
    if state.timings:
        timing["plan_rate_hz"] = float(np.mean([t["plan_rate_hz"] for t in state.timings]))
    if out is not None:
        state.curves.to_csv(out / "curves.csv")
        (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        (out / "timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    return RunResult(state.theta, state.curves, summary, state, timing)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
