import json

import numpy as np
import pytest

from lcsreduce.env import EnvConfig, generate_full_lcs, make_rng
from lcsreduce.learner import ViolationHyper, init_params
from lcsreduce.loop import (LoopConfig, LoopState, RolloutBuffer, default_cost, init_buffer,
                            run, run_iteration)
from lcsreduce.mpc import trust_region_from_buffer

FAST = ViolationHyper(epochs=3)


def small_env(seed=0):
    return generate_full_lcs(EnvConfig(n=3, m=1, R_full=3, seed=seed))


def small_cfg(**kw):
    base = dict(lam_dim=2, T=3, H=6, R_new=2, R_buffer=6, iterations=3, eval_rollouts=3,
                random_eval_rollouts=20, random_eval_horizon=5, diagnostics_rollouts=1)
    base.update(kw)
    return LoopConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        LoopConfig(R_new=10, R_buffer=5)
    with pytest.raises(ValueError):
        LoopConfig(T=0)
    with pytest.raises(ValueError):
        LoopConfig(eta=-1.0)
    cfg = LoopConfig(eta=[20.0, 10.0])
    assert cfg.eta_at(0) == 20.0 and cfg.eta_at(5) == 10.0


def test_buffer_fifo_arithmetic():
    buf = RolloutBuffer(50)
    buf.extend(range(5))
    for _ in range(11):
        buf.extend(range(5))
        assert len(buf) <= 50
    assert len(buf) == 50
    assert buf.ids == list(range(10, 60))


def test_buffer_evicts_oldest_first():
    buf = RolloutBuffer(3)
    assert buf.extend(["a", "b", "c"]) == []
    assert buf.push("d") == [0]
    assert list(buf) == ["b", "c", "d"]
    with pytest.raises(ValueError):
        RolloutBuffer(0)


def test_iteration_ordering_and_first_input_only():
    env = small_env()
    cfg = small_cfg()
    state = LoopState(init_params(3, 1, 2, make_rng(0, 1)), init_buffer(env, cfg, make_rng(0, 2)))
    before = tuple(state.buffer.ids)
    assert run_iteration(state, env, cfg, FAST, default_cost(3, 1))
    (tag0, ids0), (tag1, ids1), (tag2, ids2), (tag3, ids3, evicted) = state.trace[-1]
    assert [tag0, tag1, tag2, tag3] == ["train", "trust_region", "rollouts", "append"]
    # training and trust region both see the buffer before new rollouts land
    assert ids0 == ids1 == ids2 == before
    assert len(ids3) == len(before) + cfg.R_new and evicted == ()
    # every applied input is the first input of a plan inside the trust region
    tr = state.trust_region
    for ro in state.last_rollouts:
        assert np.all(ro.inputs >= tr.lower) and np.all(ro.inputs <= tr.upper)
        assert len(ro.plan_objectives) == ro.horizon == cfg.H
    assert len(state.curves) == 1 and state.iteration == 1


def test_trust_region_from_pre_rollout_buffer():
    env = small_env(1)
    cfg = small_cfg()
    state = LoopState(init_params(3, 1, 2, make_rng(1, 1)), init_buffer(env, cfg, make_rng(1, 2)))
    expected = trust_region_from_buffer(state.buffer.inputs(), cfg.eta_at(0))
    run_iteration(state, env, cfg, FAST, default_cost(3, 1))
    np.testing.assert_array_equal(state.trust_region.center, expected.center)
    np.testing.assert_array_equal(state.trust_region.delta, expected.delta)


def test_zero_iterations_returns_initial_model(tmp_path):
    env = small_env()
    res = run(small_cfg(iterations=0), env, FAST, out_dir=tmp_path)
    assert len(res.curves) == 0
    assert "final" not in res.summary
    assert res.summary["initial"]["onpolicy_me"] >= 0
    assert (tmp_path / "theta_iter_0.json").exists()


def test_run_artifacts_and_curve_count(tmp_path):
    env = small_env()
    cfg = small_cfg(iterations=3, R_buffer=4)
    res = run(cfg, env, FAST, out_dir=tmp_path)
    assert len(res.curves) == res.summary["iterations"] == 3
    assert all(r["buffer_size"] <= 4 for r in res.curves.records)
    for i in range(4):
        assert (tmp_path / f"theta_iter_{i}.json").exists()
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("iteration,")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["evaluations"]) == {"0", "2"}
    for key in ("gap", "onpolicy_me", "modes_g", "gmpc_modes_f", "rand_me", "rand_modes_f",
                "diag_zeroth", "diag_first"):
        assert key in summary["final"]
    assert "wall_seconds" in json.loads((tmp_path / "timing.json").read_text())


def test_run_is_deterministic(tmp_path):
    env = small_env(2)
    cfg = small_cfg(iterations=2)
    a = run(cfg, env, FAST, out_dir=tmp_path / "a")
    b = run(cfg, small_env(2), FAST, out_dir=tmp_path / "b")
    assert np.array_equal(a.theta.to_vector(), b.theta.to_vector())
    for name in ("summary.json", "curves.csv", "theta_iter_2.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_true_model_is_a_fixed_point():
    # with the environment's own parameters the on-policy error stays zero
    env = small_env(3)
    cfg = small_cfg(lam_dim=3)
    state = LoopState(env.theta, init_buffer(env, cfg, make_rng(3, 2)))
    for _ in range(2):
        run_iteration(state, env, cfg, FAST, default_cost(3, 1))
    assert state.theta.allclose(env.theta)
    assert all(r["onpolicy_me"] < 1e-10 for r in state.curves.records)


def test_run_iteration_rejects_empty_buffer():
    env = small_env()
    state = LoopState(env.theta, RolloutBuffer(3))
    with pytest.raises(ValueError):
        run_iteration(state, env, small_cfg(), FAST, default_cost(3, 1))
