"""Compare the two planners on a learned-size model.

The mode-descent planner fixes a contact sequence, solves a convex QP over
the inputs and hops to neighbouring sequences. The transcription planner
solves the full nonconvex program with a relaxed complementarity constraint.
Both return plans that are re-simulated through the exact model.

    python3 demos/planner_comparison.py
"""
import time

import numpy as np

from lcsreduce.env import make_rng
from lcsreduce.learner import init_params
from lcsreduce.mpc import QuadCost, TrustRegion, plan


def main():
    theta = init_params(6, 2, 3, make_rng(7))
    cost = QuadCost.identity(6, 2)
    box = TrustRegion.box(-3.0, 3.0, 2)
    rng = make_rng(8)
    totals = {"active-set": [], "transcription": []}
    print(f"{'start':>5} {'active-set':>12} {'transcription':>14}")
    for k in range(6):
        x0 = rng.uniform(-3, 3, 6)
        row = []
        for method in totals:
            t0 = time.perf_counter()
            p = plan(theta, x0, cost, box, T=5, method=method)
            totals[method].append(time.perf_counter() - t0)
            row.append(p.objective)
        print(f"{k:>5} {row[0]:>12.4f} {row[1]:>14.4f}")
    for method, secs in totals.items():
        print(f"{method:>14}: {1 / np.mean(secs):7.1f} plans/s")


if __name__ == "__main__":
    main()
