"""Reduce a six-state, eight-contact system to a three-contact model.

Generates a random full-order system, then alternates training the
reduced model on the rollout buffer with collecting new closed-loop
rollouts under the reduced model's controller. Prints the learning curve
and the held-out evaluation. A short run (default 8 iterations) takes a
few minutes; pass the iteration count to change it:

    python3 demos/case1_reduction.py 25
"""
import sys

from lcsreduce.config import config_from_dict
from lcsreduce.env import generate_full_lcs
from lcsreduce.loop import run


def main(iterations=8, seed=0):
    cfg = config_from_dict({"experiment": {"case": "case1"},
                            "loop": {"iterations": iterations}}, environ={})
    env = generate_full_lcs(cfg.env_config(seed))
    print(f"full system: n={env.theta.n}, m={env.theta.m}, contacts={env.theta.r}; "
          f"reduced model contacts={cfg.loop.lam_dim}")
    res = run(cfg.loop_config(seed), env, cfg.hyper())
    print(f"\nfull-model MPC cost on the held-out starts: {res.summary['J_f']:.2f}")
    print(f"{'iter':>4} {'cost':>9} {'on-policy ME %':>15} {'modes f':>8} {'modes g':>8}")
    for rec in res.curves.records:
        print(f"{rec['iteration']:>4} {rec['cost']:>9.2f} {rec['onpolicy_me']:>15.2f} "
              f"{rec['modes_f']:>8} {rec['modes_g']:>8}")
    final = res.summary["final"]
    print(f"\nheld-out gap {final['gap']:.2f}%, on-policy ME {final['onpolicy_me']:.2f}%")
    print(f"modes used by the reduced model: {final['modes_g']}; "
          f"modes the full system visits under random inputs: {final['rand_modes_f']}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 8)
