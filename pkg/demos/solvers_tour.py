"""A short tour of the numerical building blocks.

Solves a small complementarity problem two ways, a nonnegative QP, and
steps a random complementarity system to show how contact modes are
labelled. Runs in a second or two:

    python3 demos/solvers_tour.py
"""
import numpy as np

from lcsreduce.env import make_rng
from lcsreduce.lcs import lcs_rollout, signature_string
from lcsreduce.learner import init_params
from lcsreduce.solvers import LcpProblem, QpNonneg, solve_lcp, solve_lcp_enum, solve_qp_nonneg


def main():
    rng = np.random.default_rng(0)

    # a monotone LCP: find lam >= 0 with M lam + q >= 0 and lam'(M lam + q) = 0
    G = rng.uniform(-1, 1, (3, 3)) + np.eye(3)
    S = rng.uniform(-1, 1, (3, 3))
    M, q = G @ G.T + (S - S.T), np.array([-1.0, 0.5, -2.0])
    p = LcpProblem(M, q)
    lam = solve_lcp(p)
    print("LCP iterative  :", np.round(lam, 6))
    print("LCP enumeration:", np.round(solve_lcp_enum(p), 6))
    print("slack w        :", np.round(M @ lam + q, 6) + 0.0)

    # nonnegative QP: min 0.5 z'Pz + b'z, z >= 0
    X = rng.normal(size=(4, 4))
    qp = QpNonneg(X @ X.T + np.eye(4), rng.normal(size=4))
    z = solve_qp_nonneg(qp)
    print("\nQP solution    :", np.round(z, 6), " objective", round(qp.objective(z), 6))

    # a random complementarity system under random inputs
    theta = init_params(4, 2, 3, make_rng(1))
    print(f"\nmodel dims (n, m, r) = {theta.dims}, complementarity scale {theta.gamma:.3f}")
    traj = lcs_rollout(theta, rng.uniform(-2, 2, 4), rng.uniform(-3, 3, (8, 2)))
    for t, sig in enumerate(traj.signatures):
        print(f"  step {t}: active contacts {signature_string(sig, theta.r)}"
              f"  |x| = {np.linalg.norm(traj.states[t + 1]):.3f}")
    print("distinct modes visited:", len(set(traj.signatures)))


if __name__ == "__main__":
    main()
