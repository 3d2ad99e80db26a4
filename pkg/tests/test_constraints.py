import math

import numpy as np
import pytest
from _support import (
    fd_plan_gradient,
    max_rel_err,
    sample_boundary_config,
    sample_collision_config,
    sample_direction_config,
    sample_imitation_config,
)

from vecplan.constraints import (
    ConstraintParams,
    LossWeights,
    boundary_loss,
    collision_loss,
    direction_loss,
    imitation_loss,
    total_planning_loss,
)
from vecplan.errors import ShapeError
from vecplan.geometry import Point2, Polyline
from vecplan.scene import (
    AgentPrediction,
    MapClass,
    MapVector,
    PlanTrajectory,
    generate_scenario,
)

PAPER_PARAMS = ConstraintParams()  # thresholds 0.5/0.5, 3.0, 1.0, 2.0, 1.5, 3.0


def agent_at(x, y, t_f=1):
    track = np.tile([x, y], (t_f, 1)).astype(np.float64)
    return AgentPrediction(
        position=Point2(float(x), float(y)),
        heading=math.pi / 2,
        size=(4.5, 1.9),
        confidence=1.0,
        modes=track[None],
        mode_scores=np.array([1.0]),
    )


def boundary_line(x, lo=-10.0, hi=10.0):
    return MapVector(
        MapClass.ROAD_BOUNDARY, Polyline([Point2(x, lo), Point2(x, hi)]), 1.0, "left"
    )


def divider_line(x, lo=-10.0, hi=10.0):
    return MapVector(MapClass.LANE_DIVIDER, Polyline([Point2(x, lo), Point2(x, hi)]), 1.0)


class TestCollisionLoss:
    def test_no_agent_in_range(self):
        plan = PlanTrajectory(np.zeros((1, 2)))
        res = collision_loss(plan, [agent_at(20.0, 20.0)], PAPER_PARAMS)
        assert res.value == 0.0
        assert not res.grad.any()

    def test_lateral_hinge_only(self):
        # per-axis distances (1.0, 3.5) with a wide search radius: lateral
        # hinge gives 1.5 - 1.0 = 0.5, longitudinal 3.5 >= 3.0 contributes 0
        params = ConstraintParams(agent_search_range=100.0)
        plan = PlanTrajectory(np.zeros((1, 2)))
        res = collision_loss(plan, [agent_at(1.0, 3.5)], params)
        assert res.value == pytest.approx(0.5, abs=1e-12)

    def test_search_radius_gates_candidates(self):
        # same agent at Euclidean distance 3.64 > 3.0: not a candidate
        plan = PlanTrajectory(np.zeros((1, 2)))
        res = collision_loss(plan, [agent_at(1.0, 3.5)], PAPER_PARAMS)
        assert res.value == 0.0
        assert not res.grad.any()

    def test_both_hinges_active(self):
        # per-axis distances (1.0, 2.0), Euclidean 2.24 < 3.0:
        # 0.5 lateral + 1.0 longitudinal
        plan = PlanTrajectory(np.zeros((1, 2)))
        res = collision_loss(plan, [agent_at(1.0, 2.0)], PAPER_PARAMS)
        assert res.value == pytest.approx(1.5, abs=1e-12)

    def test_hinge_boundary_uses_zero_branch(self):
        params = ConstraintParams(agent_search_range=100.0)
        plan = PlanTrajectory(np.zeros((1, 2)))
        res = collision_loss(plan, [agent_at(1.5, 3.0)], params)
        assert res.value == 0.0

    def test_empty_agent_list(self):
        plan = PlanTrajectory(np.zeros((3, 2)))
        res = collision_loss(plan, [], PAPER_PARAMS)
        assert res.value == 0.0

    def test_mean_over_horizon(self):
        plan = PlanTrajectory(np.zeros((2, 2)))
        res = collision_loss(plan, [agent_at(1.0, 2.0, t_f=2)], PAPER_PARAMS)
        assert res.value == pytest.approx(1.5, abs=1e-12)  # same term both steps

    def test_per_axis_minima_can_come_from_different_agents(self):
        params = ConstraintParams(agent_search_range=10.0)
        plan = PlanTrajectory(np.zeros((1, 2)))
        agents = [agent_at(1.0, 2.9), agent_at(2.9, 2.0)]
        res = collision_loss(plan, agents, params)
        # lateral min 1.0 from agent 0, longitudinal min 2.0 from agent 1
        assert res.value == pytest.approx(0.5 + 1.0, abs=1e-12)

    def test_single_nearest_mode(self):
        params = ConstraintParams(collision_mode="single_nearest")
        plan = PlanTrajectory(np.zeros((1, 2)))
        agents = [agent_at(1.0, 2.0), agent_at(0.5, 2.8)]
        # Euclidean nearest is agent 0 at sqrt(5)=2.24 (< 2.84), its per-axis
        # distances (1.0, 2.0) drive both hinges
        res = collision_loss(plan, agents, params)
        assert res.value == pytest.approx(1.5, abs=1e-12)

    def test_monotone_in_active_agent_distance(self):
        plan = PlanTrajectory(np.zeros((1, 2)))
        prev = math.inf
        for dx in np.linspace(0.1, 3.5, 30):
            value = collision_loss(plan, [agent_at(dx, 0.5)], PAPER_PARAMS).value
            assert value <= prev + 1e-12
            prev = value

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        plan, agents = sample_collision_config(rng, PAPER_PARAMS)
        shift = np.array([3.7, -2.1])
        moved_agents = []
        for a in agents:
            moved_agents.append(
                AgentPrediction(
                    position=Point2(a.position.x + shift[0], a.position.y + shift[1]),
                    heading=a.heading,
                    size=a.size,
                    confidence=a.confidence,
                    modes=a.modes + shift,
                    mode_scores=a.mode_scores,
                )
            )
        moved_plan = PlanTrajectory(plan.waypoints + shift)
        assert collision_loss(moved_plan, moved_agents, PAPER_PARAMS).value == pytest.approx(
            collision_loss(plan, agents, PAPER_PARAMS).value, abs=1e-12
        )

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            plan, agents = sample_collision_config(rng, PAPER_PARAMS)
            res = collision_loss(plan, agents, PAPER_PARAMS)
            fd = fd_plan_gradient(
                lambda w: collision_loss(PlanTrajectory(w), agents, PAPER_PARAMS).value,
                plan.waypoints,
            )
            assert max_rel_err(res.grad, fd) < 1e-6

    def test_gradient_matches_fd_single_nearest(self):
        params = ConstraintParams(collision_mode="single_nearest")
        rng = np.random.default_rng(43)
        for _ in range(10):
            plan, agents = sample_collision_config(rng, params)
            res = collision_loss(plan, agents, params)
            fd = fd_plan_gradient(
                lambda w: collision_loss(PlanTrajectory(w), agents, params).value,
                plan.waypoints,
            )
            assert max_rel_err(res.grad, fd) < 1e-6


class TestBoundaryLoss:
    def test_all_waypoints_clear(self):
        plan = PlanTrajectory(np.zeros((2, 2)))
        res = boundary_loss(plan, [boundary_line(5.0)], PAPER_PARAMS)
        assert res.value == 0.0

    def test_hand_case(self):
        # waypoint 0.4 m from the boundary, clearance 1.0 -> penalty 0.6
        plan = PlanTrajectory(np.array([[4.6, 0.0]]))
        res = boundary_loss(plan, [boundary_line(5.0)], PAPER_PARAMS)
        assert res.value == pytest.approx(0.6, abs=1e-12)

    def test_waypoint_on_boundary_gets_max_penalty(self):
        plan = PlanTrajectory(np.array([[5.0, 0.0]]))
        res = boundary_loss(plan, [boundary_line(5.0)], PAPER_PARAMS)
        assert res.value == pytest.approx(1.0, abs=1e-12)
        assert not res.grad.any()  # zero subgradient exactly on the line

    def test_no_boundaries(self):
        plan = PlanTrajectory(np.zeros((2, 2)))
        assert boundary_loss(plan, [], PAPER_PARAMS).value == 0.0

    def test_translation_invariance(self):
        rng = np.random.default_rng(1)
        plan, boundaries = sample_boundary_config(rng, PAPER_PARAMS)
        shift = np.array([-1.3, 4.2])
        moved = [
            MapVector(
                b.kind,
                Polyline([Point2(p.x + shift[0], p.y + shift[1]) for p in b.points.points]),
                b.confidence,
                b.drivable_side,
            )
            for b in boundaries
        ]
        moved_plan = PlanTrajectory(plan.waypoints + shift)
        assert boundary_loss(moved_plan, moved, PAPER_PARAMS).value == pytest.approx(
            boundary_loss(plan, boundaries, PAPER_PARAMS).value, abs=1e-12
        )

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(44)
        active = 0
        for _ in range(25):
            plan, boundaries = sample_boundary_config(rng, PAPER_PARAMS)
            res = boundary_loss(plan, boundaries, PAPER_PARAMS)
            if res.value > 0:
                active += 1
            fd = fd_plan_gradient(
                lambda w: boundary_loss(PlanTrajectory(w), boundaries, PAPER_PARAMS).value,
                plan.waypoints,
            )
            assert max_rel_err(res.grad, fd) < 1e-6
        assert active > 5  # the check must exercise active hinges


class TestDirectionLoss:
    def test_parallel_to_divider(self):
        # plan runs straight up from the origin, divider is 0.5 m to the side
        plan = PlanTrajectory(np.array([[0.0, 1.0], [0.0, 2.0]]))
        res = direction_loss(plan, [divider_line(0.5)], PAPER_PARAMS)
        assert res.value == pytest.approx(0.0, abs=1e-12)

    def test_diagonal_motion_hand_case(self):
        # divider along +y, single step (1, 1): angle pi/4
        plan = PlanTrajectory(np.array([[1.0, 1.0]]))
        res = direction_loss(plan, [divider_line(0.0)], PAPER_PARAMS)
        assert res.value == pytest.approx(math.pi / 4, abs=1e-12)

    def test_out_of_range_divider_contributes_nothing(self):
        plan = PlanTrajectory(np.array([[0.0, 1.0]]))
        res = direction_loss(plan, [divider_line(2.5)], PAPER_PARAMS)
        assert res.value == 0.0

    def test_zero_step_contributes_nothing(self):
        plan = PlanTrajectory(np.zeros((2, 2)))
        res = direction_loss(plan, [divider_line(0.5)], PAPER_PARAMS)
        assert res.value == 0.0

    def test_no_dividers(self):
        plan = PlanTrajectory(np.ones((2, 2)))
        assert direction_loss(plan, [], PAPER_PARAMS).value == 0.0

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        plan, dividers = sample_direction_config(rng, PAPER_PARAMS)
        base = direction_loss(plan, dividers, PAPER_PARAMS).value
        phi = 0.7
        c, s = math.cos(phi), math.sin(phi)
        rot = np.array([[c, -s], [s, c]])
        rplan = PlanTrajectory(plan.waypoints @ rot.T)
        rdividers = [
            MapVector(
                d.kind,
                Polyline([tuple(rot @ np.array([p.x, p.y])) for p in d.points.points]),
                d.confidence,
            )
            for d in dividers
        ]
        assert direction_loss(rplan, rdividers, PAPER_PARAMS).value == pytest.approx(
            base, abs=1e-9
        )

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(45)
        active = 0
        for _ in range(25):
            plan, dividers = sample_direction_config(rng, PAPER_PARAMS)
            res = direction_loss(plan, dividers, PAPER_PARAMS)
            if res.value > 0:
                active += 1
            fd = fd_plan_gradient(
                lambda w: direction_loss(PlanTrajectory(w), dividers, PAPER_PARAMS).value,
                plan.waypoints,
            )
            assert max_rel_err(res.grad, fd) < 1e-6
        assert active > 5


class TestImitationLoss:
    def test_exact_match(self):
        plan = PlanTrajectory(np.ones((3, 2)))
        res = imitation_loss(plan, np.ones((3, 2)))
        assert res.value == 0.0
        assert not res.grad.any()

    def test_single_step_hand_case(self):
        plan = PlanTrajectory(np.zeros((1, 2)))
        res = imitation_loss(plan, np.array([[1.0, 2.0]]))
        assert res.value == pytest.approx(3.0, abs=1e-12)

    def test_two_step_hand_case(self):
        plan = PlanTrajectory(np.zeros((2, 2)))
        expert = np.array([[1.0, 0.0], [0.0, 1.0]])
        res = imitation_loss(plan, expert)
        assert res.value == pytest.approx(1.0, abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            imitation_loss(PlanTrajectory(np.zeros((2, 2))), np.zeros((3, 2)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(46)
        for _ in range(25):
            plan, expert = sample_imitation_config(rng)
            res = imitation_loss(plan, expert)
            fd = fd_plan_gradient(
                lambda w: imitation_loss(PlanTrajectory(w), expert).value, plan.waypoints
            )
            assert max_rel_err(res.grad, fd) < 1e-6


class TestTotalPlanningLoss:
    def test_zero_weights(self):
        s = generate_scenario(0)
        plan = PlanTrajectory(s.expert + 0.5)
        weights = LossWeights(collision=0, boundary=0, direction=0, imitation=0)
        res = total_planning_loss(plan, s, PAPER_PARAMS, weights)
        assert res.value == 0.0
        assert not res.grad.any()

    def test_single_active_term_equals_standalone(self):
        s = generate_scenario(1)
        plan = PlanTrajectory(s.expert + np.array([0.7, -0.4]))
        weights = LossWeights(collision=0, boundary=0, direction=0, imitation=2.5)
        res = total_planning_loss(plan, s, PAPER_PARAMS, weights)
        standalone = imitation_loss(plan, s.expert)
        assert res.value == pytest.approx(2.5 * standalone.value, abs=1e-12)
        np.testing.assert_allclose(res.grad, 2.5 * standalone.grad, atol=1e-12)

    def test_value_equals_weighted_breakdown(self):
        rng = np.random.default_rng(9)
        for seed in range(20):
            s = generate_scenario(seed)
            plan = PlanTrajectory(s.expert + rng.uniform(-2, 2, size=s.expert.shape))
            weights = LossWeights(
                collision=rng.uniform(0, 3),
                boundary=rng.uniform(0, 3),
                direction=rng.uniform(0, 3),
                imitation=rng.uniform(0, 3),
            )
            res = total_planning_loss(plan, s, PAPER_PARAMS, weights)
            hand = (
                weights.collision * res.breakdown["collision"]
                + weights.boundary * res.breakdown["boundary"]
                + weights.direction * res.breakdown["direction"]
                + weights.imitation * res.breakdown["imitation"]
            )
            assert res.value == pytest.approx(hand, abs=1e-12)

    def test_linear_in_weights(self):
        s = generate_scenario(5)
        plan = PlanTrajectory(s.expert + 1.0)
        base = total_planning_loss(plan, s, PAPER_PARAMS, LossWeights())
        doubled = total_planning_loss(
            plan, s, PAPER_PARAMS, LossWeights(collision=2.0)
        )
        assert doubled.value - base.value == pytest.approx(
            base.breakdown["collision"], abs=1e-12
        )

    def test_respects_confidence_filters(self):
        s = generate_scenario(6)
        low_conf = []
        for a in s.agents:
            low_conf.append(
                AgentPrediction(a.position, a.heading, a.size, 0.1, a.modes, a.mode_scores)
            )
        s2_map = [MapVector(m.kind, m.points, 0.1, m.drivable_side) for m in s.map]
        from vecplan.scene import Scenario

        s2 = Scenario(
            map=s2_map,
            agents=low_conf,
            agent_gt_futures=s.agent_gt_futures,
            ego=s.ego,
            expert=s.expert,
            horizon_dt=s.horizon_dt,
            perception_range=s.perception_range,
        )
        plan = PlanTrajectory(s.expert + 0.8)
        res = total_planning_loss(plan, s2, PAPER_PARAMS, LossWeights())
        assert res.breakdown["collision"] == 0.0
        assert res.breakdown["boundary"] == 0.0
        assert res.breakdown["direction"] == 0.0


class TestConstraintParams:
    def test_rejects_non_positive_distances(self):
        with pytest.raises(ValueError):
            ConstraintParams(boundary_clearance=0.0)

    def test_warns_when_search_range_below_safety(self):
        with pytest.warns(UserWarning):
            ConstraintParams(agent_search_range=1.0)

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError):
            ConstraintParams(collision_mode="fancy")
