import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lcsreduce.env import EnvConfig, Environment, generate_full_lcs, make_rng, sample_x0
from lcsreduce.errors import DegenerateBaseline, SchemaError
from lcsreduce.learner import Dataset, init_params
from lcsreduce.lcs import LcsParams, Trajectory, lcs_rollout
from lcsreduce.metrics import (EvalReport, dataset_from_rollouts, f_mpc_baseline,
                               lemma_diagnostics, model_modes, performance_gap,
                               relative_model_error, rollout_cost, write_table2)
from lcsreduce.mpc import QuadCost, TrustRegion, receding_rollout

from oracles import riccati_lqr


def affine_theta(A, B, d):
    n, m = B.shape
    return LcsParams(A=A, B=B, C=np.zeros((n, 1)), d=d, D=np.zeros((1, n)),
                     E=np.zeros((1, m)), G=[[1.0]], H=[[0.0]], c=[1.0])


def transitions(theta, rng, k=30):
    X = rng.uniform(-3, 3, (k, theta.n))
    U = rng.uniform(-3, 3, (k, theta.m))
    Xn = np.array([lcs_rollout(theta, x, u[None]).states[1] for x, u in zip(X, U)])
    return Dataset(X, U, Xn)


# -- model error ---------------------------------------------------------------

def test_model_error_zero_for_true_model(rng):
    theta = init_params(3, 2, 3, make_rng(1))
    assert relative_model_error(theta, transitions(theta, rng)) == 0.0


def test_model_error_ratio_arithmetic():
    theta = affine_theta(np.eye(2), np.zeros((2, 1)), np.zeros(2))
    # model predicts x, truth recorded as 2x
    data = Dataset([[3.0, 4.0]], [[0.0]], [[6.0, 8.0]])
    assert relative_model_error(theta, data) == pytest.approx(100 * 25 / (100 + 1e-6))
    data = Dataset([[3.0, 4.0]], [[0.0]], [[1.5, 2.0]])
    assert relative_model_error(theta, data) == pytest.approx(100.0, rel=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_model_error_order_and_duplication_invariant(seed):
    rng = np.random.default_rng(seed)
    truth, model = init_params(2, 1, 2, rng), init_params(2, 1, 2, rng)
    data = transitions(truth, rng, 12)
    base = relative_model_error(model, data)
    perm = rng.permutation(12)
    assert relative_model_error(model, data.subset(perm)) == pytest.approx(base, rel=1e-12)
    doubled = Dataset(np.vstack([data.X] * 2), np.vstack([data.U] * 2), np.vstack([data.Xn] * 2))
    assert relative_model_error(model, doubled) == pytest.approx(base, rel=1e-12)


def test_model_error_rejects_empty():
    theta = init_params(2, 1, 1)
    with pytest.raises(ValueError):
        relative_model_error(theta, Dataset(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros((0, 2))))


def test_model_modes_counts_signatures(rng):
    theta = init_params(2, 1, 3, make_rng(2))
    data = transitions(theta, rng, 50)
    assert 1 <= model_modes(theta, data) <= 8


# -- costs and gap -------------------------------------------------------------

def test_rollout_cost_examples():
    cost = QuadCost.identity(1, 1)
    zero = Trajectory(np.zeros((4, 1)), np.zeros((3, 1)), np.zeros((3, 1)), [0] * 3)
    assert rollout_cost(zero, cost) == 0.0
    H = 5
    ones = Trajectory(np.ones((H + 1, 1)), np.zeros((H, 1)), np.zeros((H, 1)), [0] * H)
    assert rollout_cost(ones, cost) == H + 2
    assert rollout_cost(ones, cost, "stage") == H + 1
    with pytest.raises(ValueError):
        rollout_cost(ones, cost, "other")


def test_rollout_cost_matches_csv_resummation(tmp_path, rng):
    theta = init_params(3, 2, 2, make_rng(3))
    tr = lcs_rollout(theta, rng.uniform(-2, 2, 3), rng.uniform(-3, 3, (8, 2)))
    tr.to_csv(tmp_path / "t.csv")
    back = Trajectory.read_csv(tmp_path / "t.csv")
    cost = QuadCost.identity(3, 2)
    ref = (np.sum(back.states ** 2) + np.sum(back.inputs ** 2) + np.sum(back.states[-1] ** 2))
    assert rollout_cost(tr, cost) == pytest.approx(ref, rel=1e-12)


def test_performance_gap():
    assert performance_gap(7.0, 7.0) == 0.0
    assert performance_gap(1.05 * 40, 40) == pytest.approx(5.0)
    assert performance_gap(30, 40) < 0
    with pytest.raises(DegenerateBaseline):
        performance_gap(1.0, 0.0)


@settings(max_examples=50)
@given(st.floats(1e-6, 1e6))
def test_gap_zero_for_equal_costs(J):
    assert performance_gap(J, J) == 0.0


# -- f-MPC baseline -------------------------------------------------------------

def test_baseline_matches_receding_lqr():
    rng = make_rng(4)
    n, m, T, H = 2, 1, 3, 6
    A, B = rng.uniform(-0.8, 0.8, (n, n)), rng.uniform(-1, 1, (n, m))
    theta = affine_theta(A, B, np.zeros(n))
    env = Environment(theta, EnvConfig(n=n, m=m, R_full=1, u_range=50.0))
    cost = QuadCost.identity(n, m)
    x0s = [np.array([1.0, -1.0]), np.array([2.0, 0.5])]
    base = f_mpc_baseline(env, cost, x0s, T, H)
    ref = []
    for x0 in x0s:
        X, U, x = [x0], [], x0
        for _ in range(H):
            u = riccati_lqr(A, B, np.eye(n), np.eye(m), np.eye(n), x, T)[0][0]
            x = A @ x + B @ u
            X.append(x)
            U.append(u)
        ref.append(rollout_cost(Trajectory(np.array(X), np.array(U), np.zeros((H, 1)), [0] * H),
                                cost))
    assert base.mean_cost == pytest.approx(np.mean(ref), rel=1e-3)
    assert base.degraded_rates == [0.0, 0.0]


def test_same_model_gap_is_zero():
    env = generate_full_lcs(EnvConfig(n=4, m=2, R_full=4, seed=5))
    cost = QuadCost.identity(4, 2)
    rng = make_rng(5, 3)
    x0s = [sample_x0(env.cfg, rng) for _ in range(3)]
    base = f_mpc_baseline(env, cost, x0s, 5, 10)
    tr = TrustRegion(np.zeros(2), np.full(2, env.cfg.u_range))
    rolls = [receding_rollout(env.clone(), env.theta, cost, tr, 10, 5, x0) for x0 in x0s]
    J_g = np.mean([rollout_cost(r, cost) for r in rolls])
    assert abs(performance_gap(J_g, base.mean_cost)) <= 1.0


def test_baseline_rejects_empty_batch():
    env = generate_full_lcs(EnvConfig(n=2, m=1, R_full=2, seed=6))
    with pytest.raises(ValueError):
        f_mpc_baseline(env, QuadCost.identity(2, 1), [], 3, 3)


# -- diagnostics ---------------------------------------------------------------

def test_diagnostics_vanish_for_true_model(rng):
    env = generate_full_lcs(EnvConfig(n=3, m=2, R_full=3, seed=7))
    tr = TrustRegion(np.zeros(2), np.full(2, 3.0))
    rolls = [receding_rollout(env.clone(), env.theta, QuadCost.identity(3, 2), tr, 6, 4,
                              sample_x0(env.cfg, rng)) for _ in range(3)]
    diag = lemma_diagnostics(env.theta, env, rolls, 1e-4)
    assert diag["zeroth"] < 1e-6 and diag["first"] < 1e-6


def test_zeroth_order_matches_affine_closed_form(rng):
    A = rng.uniform(-0.5, 0.5, (2, 2))
    B = rng.uniform(-1, 1, (2, 1))
    truth = affine_theta(A, B, np.zeros(2))
    model = affine_theta(1.1 * A, B, np.zeros(2))
    env = Environment(truth)
    x0, U = np.array([1.0, -2.0]), rng.uniform(-1, 1, (5, 1))
    ro = Trajectory(*_rollout_arrays(truth, x0, U))
    diag = lemma_diagnostics(model, env, [ro])
    xf, xg, diff = x0, x0, []
    for u in U:
        xf, xg = A @ xf + B @ u, 1.1 * A @ xg + B @ u
        diff.append(xf - xg)
    assert diag["zeroth"] == pytest.approx(np.linalg.norm(np.concatenate(diff)), abs=1e-8)
    assert diag["excluded"] == 0


def _rollout_arrays(theta, x0, U):
    tr = lcs_rollout(theta, x0, U)
    return tr.states, tr.inputs, tr.lams, tr.signatures


def test_diagnostics_reject_bad_delta():
    env = generate_full_lcs(EnvConfig(n=2, m=1, R_full=2, seed=8))
    with pytest.raises(ValueError):
        lemma_diagnostics(env.theta, env, [], delta=0.0)


# -- reports -------------------------------------------------------------------

def test_report_roundtrip_and_csv(tmp_path):
    rep = EvalReport(label="case1")
    for k in range(3):
        rep.add(rand_modes_f=100 + k, rand_me=30.0 + k, gmpc_modes_f=20, onpolicy_me=1.0 + k,
                modes_g=4, gap=0.1 * k)
    assert rep.trials == 3
    mean, std = rep.stat("onpolicy_me")
    assert mean == pytest.approx(2.0) and std == pytest.approx(np.std([1.0, 2.0, 3.0]))
    rep.save_json(tmp_path / "r.json")

    back = EvalReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert back.onpolicy_me == rep.onpolicy_me
    with pytest.raises(SchemaError):
        EvalReport.from_dict({"schema": "nope"})
    write_table2([rep], tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[1].startswith("case1,3,")


def test_dataset_from_rollouts(rng):
    theta = init_params(2, 1, 1, make_rng(9))
    rolls = [lcs_rollout(theta, rng.normal(size=2), rng.normal(size=(4, 1))) for _ in range(3)]
    data = dataset_from_rollouts(rolls)
    assert len(data) == 12
    np.testing.assert_array_equal(data.Xn[:4], rolls[0].states[1:])
