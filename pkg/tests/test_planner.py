import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poseqa.config import PipelineConfig
from poseqa.annotations import annotate_frame
from poseqa.errors import PlanError
from poseqa.planner import (
    ObstacleSet,
    PlannerParams,
    PlanStats,
    plan_pair_trajectories,
    rdp_indices,
    rdp_simplify,
    rrt_plan,
    sample_config,
    sampling_bounds,
    simplify_safely,
)
from poseqa.world_frame import build_world_transform

from conftest import rendered
from oracles import random_path, removed_point_deviation, revalidate

RDP_TOL = 30.0


# ------------------------------------------------------------ goal bias


def test_goal_bias_fraction_over_ten_thousand_samples():
    rng = np.random.default_rng(99)
    bounds = sampling_bounds(np.array([[0, 0, 50], [300, 200, 60]]), 200.0, 120.0)
    goal = np.array([300.0, 200.0, 60.0])
    hits = sum(sample_config(rng, bounds, goal, 0.10, 0.7)[1] for _ in range(10_000))
    assert 0.08 <= hits / 10_000 <= 0.12


def test_goal_bias_counted_inside_the_planner():
    stats = PlanStats()
    # an unreachable goal forces the planner to use every iteration
    wall = ObstacleSet(np.array([[-5.0, -1000, 0]]), np.array([[5.0, 1000, 1000]]), inflation=0.0)
    with pytest.raises(PlanError):
        rrt_plan([-100, 0, 50], [100, 0, 50], wall, PlannerParams(max_iters=10_000), 3,
                 sampling_bounds(np.array([[-100, 0, 50], [100, 0, 50]]), 200.0, 1000.0), stats)
    assert stats.samples == 10_000
    assert 0.08 <= stats.goal_samples / stats.samples <= 0.12


# ------------------------------------------------------------------ RDP


def test_rdp_contract_on_1000_random_paths():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        P = random_path(rng, int(rng.integers(2, 60)))
        keep = rdp_indices(P, RDP_TOL)
        assert keep[0] == 0 and keep[-1] == len(P) - 1
        worst = max(worst, removed_point_deviation(P, keep))
        simple = np.array(rdp_simplify(P, RDP_TOL))
        again = np.array(rdp_simplify(simple, RDP_TOL))
        np.testing.assert_array_equal(again, simple)
    assert worst <= RDP_TOL


@given(st.integers(0, 2**31), st.integers(2, 40))
@settings(max_examples=100, deadline=None)
def test_rdp_keeps_endpoints_and_order(seed, n):
    P = random_path(np.random.default_rng(seed), n)
    keep = rdp_indices(P, RDP_TOL)
    assert keep == sorted(set(keep))
    assert keep[0] == 0 and keep[-1] == n - 1


def test_rdp_straight_line_collapses():
    P = np.linspace([0, 0, 0], [500, 0, 0], 20)
    assert rdp_indices(P, RDP_TOL) == [0, 19]
    with pytest.raises(ValueError):
        rdp_indices(P[:1], RDP_TOL)


def test_simplify_safely_resplits_colliding_shortcut():
    # a U-shaped path over a wall: RDP with a huge tolerance would cut through it
    P = np.array([[-100, 0, 10], [-100, 0, 300], [0, 0, 300], [100, 0, 300], [100, 0, 10]], dtype=float)
    wall = ObstacleSet(np.array([[-10.0, -50, 0]]), np.array([[10.0, 50, 250]]), inflation=5.0)
    out = simplify_safely(P, 1e4, wall)
    assert revalidate(np.array(out), [], 0.0)
    assert all(wall.segment_free(a, b) for a, b in zip(out[:-1], out[1:]))


# ------------------------------------------------------------ collisions


@given(st.integers(0, 2**31))
@settings(max_examples=200, deadline=None)
def test_segment_test_agrees_with_dense_sampling(seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-50, 0, (2, 3))
    obs = ObstacleSet(lo, lo + rng.uniform(10, 60, (2, 3)), inflation=2.0, table_z=None)
    a, b = rng.uniform(-80, 80, 3), rng.uniform(-80, 80, 3)
    dense = np.linspace(a, b, 4001)
    ilo, ihi = obs.inflated
    hit = np.any(np.all((dense[:, None, :] >= ilo) & (dense[:, None, :] <= ihi), axis=2))
    # a free verdict must never hide a sampled collision
    if obs.segment_free(a, b):
        assert not hit


# -------------------------------------------------------------- fixtures


def annotated(name, seed=0):
    spec, frame, gt, table = rendered(name)
    cfg = PipelineConfig(seed=seed)
    return frame, annotate_frame(frame, table, cfg, plan=True, grasp=False)


def test_every_emitted_trajectory_revalidates(fixture_name):
    frame, ann = annotated(fixture_name)
    cubs = ann.cuboids_world()
    inflation = PlannerParams().inflation
    for t in ann.trajectories:
        others = [c for i, c in cubs.items() if i not in (t.source_id, t.target_id)]
        assert revalidate(t.waypoints_3d, others, inflation), (fixture_name, t.source_id, t.target_id)
        assert len(t.waypoints_2d) == len(t.waypoints_3d) >= 2


def test_line3_has_all_three_pairs():
    frame, ann = annotated("line3")
    assert [(t.source_id, t.target_id) for t in ann.trajectories] == [(0, 1), (0, 2), (1, 2)]
    assert not [f for f in ann.failures if f["kind"] == "trajectory"]


def test_sealed_box_pair_has_no_path():
    spec, frame, gt, table = rendered("sealed_box")
    frame, ann = annotated("sealed_box")
    a, b = spec.notes["sealed_pair"]
    reasons = {(f["source"], f["target"]): f["reason"] for f in ann.failures if f["kind"] == "trajectory"}
    assert reasons[(a, b)] == "no_path"
    assert (a, b) not in {(t.source_id, t.target_id) for t in ann.trajectories}


def test_planning_is_deterministic():
    spec, frame, gt, table = rendered("tilted30")
    world = build_world_transform(frame, table)
    a, _ = plan_pair_trajectories(frame, world, table, seed=5)
    b, _ = plan_pair_trajectories(frame, world, table, seed=5)
    assert [t.to_dict() for t in a] == [t.to_dict() for t in b]


def test_start_inside_obstacle_rejected():
    obs = ObstacleSet(np.array([[-10.0, -10, 0]]), np.array([[10.0, 10, 10]]))
    with pytest.raises(PlanError) as e:
        rrt_plan([0, 0, 5], [100, 0, 5], obs)
    assert e.value.kind == "start_in_collision"
