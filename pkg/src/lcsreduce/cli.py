"""Command-line entry point: ``lcsreduce <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure, 4 partial aggregation (some trials failed, aggregate written).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import CASES, Config, load_config
from .env import Environment, generate_full_lcs, make_rng, random_rollout, sample_x0
from .errors import ConfigError, LcsReduceError, PartialAggregation, SchemaError
from .lcs import LcsParams
from .loop import (EVAL_STREAM, RANDOM_EVAL_STREAM, default_cost, evaluate_policy,
                   random_policy_eval, run)
from .metrics import EvalReport, f_mpc_baseline, write_table2
from .mpc import TrustRegion

log = logging.getLogger("lcsreduce")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
TR_SCHEMA = "lcsreduce.trust_region/1"


def _fail(code, exc):
    report = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(report), file=sys.stderr)
    return code


def _config(args) -> Config:
    cfg = load_config(args.config)
    exp = cfg.experiment
    changes = {}
    if getattr(args, "deterministic", False):
        changes["deterministic"] = True
    if getattr(args, "parallel", None):
        changes["parallel"] = args.parallel
        if not args.deterministic:
            changes["deterministic"] = False
    if getattr(args, "seeds", None):
        changes["seeds"] = tuple(args.seeds)
    if changes:
        cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(exp, **changes))
    return cfg


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.experiment.seeds[0]


def save_trust_region(tr: TrustRegion, path):
    doc = {"schema": TR_SCHEMA, "center": tr.center.tolist(), "delta": tr.delta.tolist()}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_trust_region(path) -> TrustRegion:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("schema") != TR_SCHEMA:
        raise SchemaError(f"{path}: expected schema {TR_SCHEMA!r}")
    return TrustRegion(np.asarray(doc["center"], float), np.asarray(doc["delta"], float))


def cmd_generate_env(args):
    cfg = _config(args)
    env = generate_full_lcs(cfg.env_config(_seed(args, cfg)))
    env.save(args.out)
    th = env.theta
    probe = env.clone()
    rng = make_rng(env.cfg.seed, 9)
    random_rollout(probe, sample_x0(env.cfg, rng), 20, rng)
    rho = float(np.max(np.abs(np.linalg.eigvals(th.A))))
    print(f"n={th.n} m={th.m} R_full={th.r} spectral_radius={rho:.4f} "
          f"screening_modes={probe.distinct_modes()} -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    env = Environment.load(args.env)
    seed = _seed(args, cfg)
    loop_cfg = cfg.loop_config(seed)
    if args.iterations is not None:
        loop_cfg = dataclasses.replace(loop_cfg, iterations=args.iterations)
    res = run(loop_cfg, env, cfg.hyper(), out_dir=args.out)
    if res.state is not None and res.state.trust_region is not None:
        save_trust_region(res.state.trust_region, Path(args.out) / "trust_region.json")
    final = res.summary.get("final", {})
    print(json.dumps({k: final.get(k) for k in ("gap", "onpolicy_me", "modes_g", "gmpc_modes_f")}
                     | {"plan_rate_hz": res.timing.get("plan_rate_hz"),
                        "iterations": res.summary["iterations"]}))
    return EXIT_OK


def cmd_evaluate(args):
    cfg = _config(args)
    env = Environment.load(args.env)
    theta = LcsParams.load(args.theta)
    if theta.n != env.theta.n or theta.m != env.theta.m:
        raise SchemaError(f"model dims (n={theta.n}, m={theta.m}) do not match environment "
                          f"(n={env.theta.n}, m={env.theta.m})")
    if args.trust_region:
        tr = load_trust_region(args.trust_region)
    else:
        tr = TrustRegion(np.zeros(theta.m), np.full(theta.m, env.cfg.u_range))
    loop_cfg = cfg.loop_config(_seed(args, cfg), lam_dim=theta.r)
    cost = default_cost(theta.n, theta.m)
    rng = make_rng(loop_cfg.seed, EVAL_STREAM)
    x0s = [sample_x0(env.cfg, rng) for _ in range(loop_cfg.eval_rollouts)]
    base = f_mpc_baseline(env, cost, x0s, loop_cfg.T, loop_cfg.H, planner_kw=loop_cfg.planner_kw)
    ev, _ = evaluate_policy(theta, env, cost, tr, x0s, loop_cfg, base.mean_cost)
    ev.update(random_policy_eval(theta, env, loop_cfg, make_rng(loop_cfg.seed, RANDOM_EVAL_STREAM)))
    ev["J_f"] = base.mean_cost
    rep = EvalReport(label=Path(args.theta).stem)
    rep.add(**ev)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.save_json(out / "report.json")
    write_table2([rep], out / "table2.csv")
    (out / "evaluation.json").write_text(json.dumps(ev, indent=1, sort_keys=True) + "\n")
    print(json.dumps({k: ev[k] for k in ("gap", "onpolicy_me", "rand_me", "modes_g")}))
    return EXIT_OK


def cmd_table2(args):
    from .experiments import table2
    cfg = _config(args)
    cases = [c if c.startswith("case") else f"case{c}" for c in args.cases]
    for c in cases:
        if c not in CASES:
            raise ConfigError(f"unknown case {c!r}; expected one of {sorted(CASES)}")
    reports, _ = table2(cfg, cases, cfg.experiment.seeds, args.out)
    for rep in reports:
        print(" | ".join(rep.table_row()))
    return EXIT_OK


def cmd_ablation(args):
    from .experiments import ablation
    cfg = _config(args)
    rows = ablation(cfg, args.axis, args.grid, cfg.experiment.seeds, args.out)
    for r in rows:
        print(f"{r['axis']}={r['value']}: ME {r['onpolicy_me_mean']:.2f} ± {r['onpolicy_me_std']:.2f}"
              f"  gap {r['gap_mean']:.2f} ± {r['gap_std']:.2f}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="lcsreduce", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=False):
        sp.add_argument("--config", help="YAML config with env/loop/learner/mpc/solvers/experiment blocks")
        sp.add_argument("--deterministic", action="store_true", help="force sequential execution")
        if seeds:
            sp.add_argument("--seeds", type=int, nargs="+")
            sp.add_argument("--parallel", type=int, help="worker threads for independent trials")
        else:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("generate-env", help="draw and save a full-order system")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate_env)

    sp = sub.add_parser("train", help="run the reduction loop on a saved system")
    common(sp)
    sp.add_argument("--env", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="held-out evaluation of a saved model")
    common(sp)
    sp.add_argument("--env", required=True)
    sp.add_argument("--theta", required=True)
    sp.add_argument("--trust-region", help="trust_region.json written by train")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("table2", help="multi-trial sweep over preset cases")
    common(sp, seeds=True)
    sp.add_argument("--cases", nargs="+", default=["case1"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_table2)

    sp = sub.add_parser("ablation", help="sweep one loop hyperparameter")
    common(sp, seeds=True)
    sp.add_argument("--axis", required=True, choices=["T", "R_new", "R_buffer", "eta"])
    sp.add_argument("--grid", required=True, type=float, nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablation)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except PartialAggregation as exc:
        return _fail(EXIT_PARTIAL, exc)
    except (LcsReduceError, ValueError) as exc:
        return _fail(EXIT_NUMERIC, exc)


if __name__ == "__main__":
    sys.exit(main())
