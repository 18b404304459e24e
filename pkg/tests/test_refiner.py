import numpy as np
import pytest

from diffik import kinematics as kin, refiner as rf
from diffik.denoiser import GoalSet
from helpers import planar_chain


@pytest.fixture(scope="module")
def chain3(robots_dir):
    return kin.parse_robot_file(robots_dir / "chain3_len03.yaml")


@pytest.fixture(scope="module")
def dual(robots_dir):
    return kin.parse_robot_file(robots_dir / "dual_waist.yaml")


@pytest.fixture(scope="module")
def arm(robots_dir):
    return kin.parse_robot_file(robots_dir / "arm7.yaml")


def goal_of(model, q):
    return GoalSet(kin.forward_kinematics(model, q))


def test_seed_at_solution_converges_immediately(chain3):
    rng = np.random.default_rng(0)
    q = kin.sample_config(chain3, rng)
    res = rf.refine(chain3, goal_of(chain3, q), q)
    assert res.success
    assert res.iters_used == 0
    assert res.pos_errors[0] < 1e-4
    assert res.ang_errors[0] < 0.01


def test_perturbed_seed_converges(arm):
    # near seeds should essentially always land; far ones may hit a
    # limit-pinned local minimum, which is expected for a local method
    rng = np.random.default_rng(1)
    cfg = rf.RefineConfig()
    wins = 0
    for _ in range(10):
        q = kin.sample_config(arm, rng)
        seed = np.clip(q + rng.normal(scale=0.2, size=arm.dof), *arm.joint_limits)
        res = rf.refine(arm, goal_of(arm, q), seed)
        if res.success:
            wins += 1
            assert res.pos_errors[0] < cfg.pos_tol
            assert res.ang_errors[0] < cfg.ang_tol
            assert 0 < res.iters_used <= cfg.max_iters
    assert wins >= 9


def test_result_stays_within_limits(arm):
    rng = np.random.default_rng(2)
    lo, hi = arm.joint_limits
    for _ in range(5):
        q = kin.sample_config(arm, rng)
        seed = kin.sample_config(arm, rng)
        res = rf.refine(arm, goal_of(arm, q), seed)
        assert np.all(res.q >= lo) and np.all(res.q <= hi)


def test_step_clamp_limits_first_move(chain3):
    goal = goal_of(chain3, np.array([2.5, 0.5, -0.5]))
    seed = np.zeros(3)
    cfg = rf.RefineConfig(max_iters=1, step_clamp=0.5)
    res = rf.refine(chain3, goal, seed, cfg)
    assert np.max(np.abs(res.q - seed)) <= 0.5 + 1e-12


def test_unreachable_goal_fails_with_shortfall_error(chain3):
    # reach is 0.9; ask for 1.2 along +x with tool yaw zero
    goal = GoalSet([kin.Pose(np.array([1.2, 0.0, 0.0]), np.array([1.0, 0, 0, 0]))])
    rng = np.random.default_rng(3)
    seeds = kin.sample_configs(chain3, rng, 16)
    best, results = rf.solve_batch(chain3, goal, seeds)
    assert not best.success
    assert all(not r.success for r in results)
    assert all(r.iters_used == rf.RefineConfig().max_iters or r.cost > 0
               for r in results)
    # the best configuration stretches toward the goal: error near 0.3 m
    assert abs(best.pos_errors[0] - 0.3) < 0.06


def test_dual_arm_both_slots(dual):
    rng = np.random.default_rng(4)
    for _ in range(5):
        q = kin.sample_config(dual, rng)
        seed = np.clip(q + rng.normal(scale=0.2, size=dual.dof), *dual.joint_limits)
        res = rf.refine(dual, goal_of(dual, q), seed)
        assert res.success
        assert np.all(res.pos_errors < 1e-4)


def test_partial_goal_refines_specified_slot_only(dual):
    rng = np.random.default_rng(5)
    q = kin.sample_config(dual, rng)
    full = kin.forward_kinematics(dual, q)
    goal = GoalSet([full[0], None])
    seed = np.clip(q + rng.normal(scale=0.2, size=dual.dof), *dual.joint_limits)
    res = rf.refine(dual, goal, seed)
    assert res.success
    assert res.pos_errors[0] < 1e-4
    assert np.isnan(res.pos_errors[1]) and np.isnan(res.ang_errors[1])


def test_all_slots_free_errors(dual):
    with pytest.raises(rf.RefinerError, match="free"):
        rf.refine(dual, GoalSet([None, None]), np.zeros(dual.dof))


def test_wrong_seed_width_errors(chain3):
    goal = goal_of(chain3, np.zeros(3))
    with pytest.raises(rf.RefinerError, match="dof"):
        rf.refine(chain3, goal, np.zeros(5))


def test_goal_slot_count_checked(chain3):
    with pytest.raises(rf.RefinerError, match="slots"):
        rf.refine(chain3, GoalSet([None, None]), np.zeros(3))


def test_solve_batch_picks_success_over_failure(chain3):
    rng = np.random.default_rng(6)
    q = kin.sample_config(chain3, rng)
    goal = goal_of(chain3, q)
    # one seed at the answer, others far away
    seeds = np.vstack([q, np.full(3, 3.0), np.full(3, -3.0)])
    best, results = rf.solve_batch(chain3, goal, seeds,
                                   sources=["model", "random", "random"])
    assert best.success
    assert best.seed_source == "model"
    assert len(results) == 3


def test_solve_batch_empty_seeds(chain3):
    goal = goal_of(chain3, np.zeros(3))
    with pytest.raises(rf.RefinerError, match="seeds"):
        rf.solve_batch(chain3, goal, np.zeros((0, 3)))


def test_batch_matches_individual_refines(arm):
    rng = np.random.default_rng(7)
    q = kin.sample_config(arm, rng)
    goal = goal_of(arm, q)
    seeds = np.stack([np.clip(q + rng.normal(scale=0.25, size=arm.dof),
                              *arm.joint_limits) for _ in range(4)])
    batch = rf.refine_batch(arm, goal, seeds, rf.RefineConfig())
    for i in range(4):
        solo = rf.refine(arm, goal, seeds[i])
        assert batch[i].success == solo.success
        np.testing.assert_allclose(batch[i].q, solo.q, atol=1e-12)
        assert batch[i].iters_used == solo.iters_used


def test_straight_singular_seed_still_improves(chain3):
    # J is rank-deficient at the straight arm; damping keeps the step finite
    goal = goal_of(chain3, np.array([0.9, 0.7, -0.4]))
    res = rf.refine(chain3, goal, np.zeros(3))
    assert np.all(np.isfinite(res.q))
    assert res.success


def test_config_validation():
    with pytest.raises(rf.RefinerError):
        rf.RefineConfig(max_iters=0)
    with pytest.raises(rf.RefinerError):
        rf.RefineConfig(pos_tol=-1.0)


def test_2r_random_seeds_mostly_converge():
    m = kin.parse_robot(planar_chain(2, 1.0))
    rng = np.random.default_rng(31)
    goal = GoalSet.full(kin.forward_kinematics(m, np.array([0.7, -1.1])))
    seeds = kin.sample_configs(m, rng, 100)
    results = rf.refine_batch(m, goal, seeds, rf.RefineConfig())
    rate = np.mean([r.success for r in results])
    assert rate > 0.8, rate
    for r in results:
        if r.success:
            assert np.all(r.pos_errors <= 1e-4) and np.all(r.ang_errors <= 0.01)
