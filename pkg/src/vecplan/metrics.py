"""Open-loop planning metrics and the constraint/interaction ablation sweep.

Displacement error compares planned and expert waypoints at fixed horizons;
the collision rate is cumulative and box-aware: a sample counts as colliding
at horizon h if the ego footprint placed on any planned waypoint up to h
overlaps any agent's ground-truth box at the same tick.  These are artifact
protocol numbers for synthetic scenes, not comparable to published benchmark
absolutes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .geometry import Point2, oriented_rect_overlap, point_polyline_distance, rect_corners
from .scene import MapClass, PlanTrajectory, Scenario

DEFAULT_HORIZONS = (1.0, 2.0, 3.0)
DEFAULT_EGO_DIMS = (4.0, 1.85)


@dataclass(frozen=True)
class HorizonStats:
    """A metric evaluated at each horizon plus their mean."""

    horizons: tuple[float, ...]
    values: tuple[float, ...]
    avg: float


@dataclass(frozen=True)
class PlanMetrics:
    l2: HorizonStats  # meters
    collision: HorizonStats  # percent
    boundary_overstep_rate: float  # percent, artifact extension


def _horizon_tick(h: float, dt: float, t_f: int) -> int:
    """1-based tick closest to horizon h."""
    tick = round(h / dt)
    if tick < 1 or tick > t_f:
        raise ConfigError(
            f"horizon {h} s needs tick {tick}, but the plan covers 1..{t_f}"
        )
    return tick


def displacement_error(
    plan: PlanTrajectory,
    expert: np.ndarray,
    horizon_dt: float,
    horizons: Sequence[float] = DEFAULT_HORIZONS,
) -> HorizonStats:
    """L2 distance between planned and expert waypoints at each horizon."""
    expert = np.asarray(expert, dtype=np.float64)
    t_f = plan.horizon
    values = []
    for h in horizons:
        tick = _horizon_tick(h, horizon_dt, t_f)
        d = plan.waypoints[tick - 1] - expert[tick - 1]
        values.append(float(math.hypot(d[0], d[1])))
    return HorizonStats(tuple(horizons), tuple(values), float(np.mean(values)))


def plan_pose_track(plan: PlanTrajectory, initial_heading: float = math.pi / 2):
    """(position, heading) of the ego at each planned tick.

    Headings follow the executed per-step vectors; a zero-length step keeps
    the previous heading.
    """
    poses = []
    prev = np.zeros(2)
    heading = initial_heading
    for wp in plan.waypoints:
        step = wp - prev
        if step[0] != 0.0 or step[1] != 0.0:
            heading = math.atan2(step[1], step[0])
        poses.append((Point2(float(wp[0]), float(wp[1])), heading))
        prev = wp
    return poses


def agent_pose_track(scenario: Scenario, agent_index: int):
    """(position, heading) of an agent along its ground-truth future."""
    agent = scenario.agents[agent_index]
    future = scenario.agent_gt_futures[agent_index]
    poses = []
    prev = np.array([agent.position.x, agent.position.y])
    heading = agent.heading
    for p in future:
        step = p - prev
        if step[0] != 0.0 or step[1] != 0.0:
            heading = math.atan2(step[1], step[0])
        poses.append((Point2(float(p[0]), float(p[1])), heading))
        prev = p
    return poses


def collision_ticks(
    scenario: Scenario, plan: PlanTrajectory, ego_dims: tuple[float, float] = DEFAULT_EGO_DIMS
) -> list[bool]:
    """Per-tick flags: does the ego box on the plan hit any agent's gt box?"""
    ego_poses = plan_pose_track(plan)
    agent_tracks = [agent_pose_track(scenario, i) for i in range(len(scenario.agents))]
    flags = []
    for t, (ego_pos, ego_heading) in enumerate(ego_poses):
        hit = False
        for agent, track in zip(scenario.agents, agent_tracks):
            apos, aheading = track[t]
            if oriented_rect_overlap(ego_pos, ego_heading, ego_dims, apos, aheading, agent.size):
                hit = True
                break
        flags.append(hit)
    return flags


def collision_rate(
    scenarios: Sequence[Scenario],
    plans: Sequence[PlanTrajectory],
    ego_dims: tuple[float, float] = DEFAULT_EGO_DIMS,
    horizons: Sequence[float] = DEFAULT_HORIZONS,
) -> HorizonStats:
    """Cumulative open-loop collision rate (percent) at each horizon."""
    if len(scenarios) != len(plans):
        raise ConfigError(f"{len(scenarios)} scenarios vs {len(plans)} plans")
    if not scenarios:
        return HorizonStats(tuple(horizons), tuple(0.0 for _ in horizons), 0.0)
    counts = np.zeros(len(horizons))
    for scenario, plan in zip(scenarios, plans):
        flags = collision_ticks(scenario, plan, ego_dims)
        for i, h in enumerate(horizons):
            tick = _horizon_tick(h, scenario.horizon_dt, plan.horizon)
            if any(flags[:tick]):
                counts[i] += 1
    rates = tuple(float(c) * 100.0 / len(scenarios) for c in counts)
    return HorizonStats(tuple(horizons), rates, float(np.mean(rates)))


def pose_oversteps_boundary(
    boundaries: Sequence, position: Point2, heading: float, ego_dims: tuple[float, float]
) -> bool:
    """Does any corner of the ego box at this pose sit on the non-drivable
    side of its nearest labeled boundary?"""
    labeled = [m for m in boundaries if m.drivable_side]
    if not labeled:
        return False
    for corner in rect_corners(position, heading, ego_dims):
        p = Point2(float(corner[0]), float(corner[1]))
        best = None
        for mv in labeled:
            d, seg = point_polyline_distance(p, mv.points)
            if best is None or d < best[0]:
                best = (d, seg, mv)
        _d, seg, mv = best
        a, b = mv.points.points[seg], mv.points.points[seg + 1]
        cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
        side = "left" if cross > 0 else ("right" if cross < 0 else mv.drivable_side)
        if side != mv.drivable_side:
            return True
    return False


def boundary_overstep(
    scenario: Scenario,
    plan: PlanTrajectory,
    ego_dims: tuple[float, float] = DEFAULT_EGO_DIMS,
    max_tick: Optional[int] = None,
) -> bool:
    """Does the planned ego footprint cross a boundary at any tick?

    Uses the generator-provided side labels; boundaries without a label are
    skipped.
    """
    boundaries = [m for m in scenario.map if m.kind == MapClass.ROAD_BOUNDARY]
    poses = plan_pose_track(plan)
    if max_tick is not None:
        poses = poses[:max_tick]
    return any(
        pose_oversteps_boundary(boundaries, pos, heading, ego_dims) for pos, heading in poses
    )


def plan_metrics(
    scenarios: Sequence[Scenario],
    plans: Sequence[PlanTrajectory],
    ego_dims: tuple[float, float] = DEFAULT_EGO_DIMS,
    horizons: Sequence[float] = DEFAULT_HORIZONS,
) -> PlanMetrics:
    """Aggregate the full open-loop metric set over a scenario/plan pairing."""
    if len(scenarios) != len(plans):
        raise ConfigError(f"{len(scenarios)} scenarios vs {len(plans)} plans")
    per_horizon = []
    for scenario, plan in zip(scenarios, plans):
        per_horizon.append(
            displacement_error(plan, scenario.expert, scenario.horizon_dt, horizons).values
        )
    if per_horizon:
        l2_values = tuple(float(v) for v in np.mean(per_horizon, axis=0))
    else:
        l2_values = tuple(0.0 for _ in horizons)
    l2 = HorizonStats(tuple(horizons), l2_values, float(np.mean(l2_values)) if l2_values else 0.0)
    collision = collision_rate(scenarios, plans, ego_dims, horizons)
    if scenarios:
        max_tick = _horizon_tick(max(horizons), scenarios[0].horizon_dt, plans[0].horizon)
        oversteps = sum(
            boundary_overstep(s, p, ego_dims, max_tick) for s, p in zip(scenarios, plans)
        )
        overstep_rate = oversteps * 100.0 / len(scenarios)
    else:
        overstep_rate = 0.0
    return PlanMetrics(l2=l2, collision=collision, boundary_overstep_rate=overstep_rate)


# ---------------------------------------------------------------------------
# ablation sweep


@dataclass(frozen=True)
class AblationArm:
    """One row of the ablation: interaction and constraint toggles."""

    name: str
    agent_interaction: bool = True
    map_interaction: bool = True
    collision_constraint: bool = True
    boundary_constraint: bool = True
    direction_constraint: bool = True


@dataclass
class AblationRow:
    arm: AblationArm
    metrics: PlanMetrics
    collision_count_3s: int


@dataclass
class AblationReport:
    rows: list[AblationRow]
    eval_count: int

    CSV_COLUMNS = [
        "arm", "agent_inter", "map_inter", "col_const", "bd_const", "dir_const",
        "l2_1s", "l2_2s", "l2_3s", "l2_avg",
        "cr_1s", "cr_2s", "cr_3s", "cr_avg",
    ]

    def to_csv(self) -> str:
        lines = [",".join(self.CSV_COLUMNS)]
        for row in self.rows:
            arm = row.arm
            m = row.metrics
            lines.append(
                ",".join(
                    [arm.name]
                    + [
                        str(int(v))
                        for v in (
                            arm.agent_interaction,
                            arm.map_interaction,
                            arm.collision_constraint,
                            arm.boundary_constraint,
                            arm.direction_constraint,
                        )
                    ]
                    + [repr(v) for v in m.l2.values]
                    + [repr(m.l2.avg)]
                    + [repr(v) for v in m.collision.values]
                    + [repr(m.collision.avg)]
                )
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = (
            f"{'arm':<18}{'AgI':>4}{'MapI':>5}{'Col':>4}{'Bd':>4}{'Dir':>4}"
            f"{'L2@1s':>8}{'L2@2s':>8}{'L2@3s':>8}{'L2avg':>8}"
            f"{'CR@1s':>8}{'CR@2s':>8}{'CR@3s':>8}{'CRavg':>8}"
        )
        mark = lambda b: "x" if b else "-"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            arm = row.arm
            m = row.metrics
            lines.append(
                f"{arm.name:<18}{mark(arm.agent_interaction):>4}{mark(arm.map_interaction):>5}"
                f"{mark(arm.collision_constraint):>4}{mark(arm.boundary_constraint):>4}"
                f"{mark(arm.direction_constraint):>4}"
                + "".join(f"{v:8.3f}" for v in m.l2.values)
                + f"{m.l2.avg:8.3f}"
                + "".join(f"{v:8.2f}" for v in m.collision.values)
                + f"{m.collision.avg:8.2f}"
            )
        lines.append(f"(open-loop over {self.eval_count} synthetic scenarios; artifact protocol)")
        return "\n".join(lines) + "\n"


def ablation_report(
    arms: Sequence[AblationArm],
    train_config,
    gen_config,
    interact_config=None,
    constraint_params=None,
    eval_count: int = 200,
    eval_seed_offset: int = 900_000,
    ego_dims: tuple[float, float] = DEFAULT_EGO_DIMS,
    progress=None,
) -> AblationReport:
    """Train one model per arm (identical except toggles) and evaluate all
    arms open-loop on the same seeded scenario set."""
    from dataclasses import replace as dc_replace

    from .interact import InteractionConfig, forward_plan
    from .learning import train
    from .scene import generate_scenario

    if interact_config is None:
        interact_config = InteractionConfig(t_future=gen_config.t_future)

    eval_set = [
        generate_scenario(eval_seed_offset + i, gen_config) for i in range(eval_count)
    ]
    rows = []
    for arm in arms:
        arm_interact = dc_replace(
            interact_config,
            use_agent_interaction=arm.agent_interaction,
            use_map_interaction=arm.map_interaction,
        )
        arm_weights = dc_replace(
            train_config.weights,
            collision=train_config.weights.collision if arm.collision_constraint else 0.0,
            boundary=train_config.weights.boundary if arm.boundary_constraint else 0.0,
            direction=train_config.weights.direction if arm.direction_constraint else 0.0,
        )
        arm_train = dc_replace(train_config, weights=arm_weights)
        params, _log = train(arm_train, gen_config, arm_interact, constraint_params)
        plans = [forward_plan(s, params).plan for s in eval_set]
        metrics = plan_metrics(eval_set, plans, ego_dims)
        flags_3s = sum(
            any(collision_ticks(s, p, ego_dims)[: _horizon_tick(3.0, s.horizon_dt, p.horizon)])
            for s, p in zip(eval_set, plans)
        )
        rows.append(AblationRow(arm=arm, metrics=metrics, collision_count_3s=int(flags_3s)))
        if progress is not None:
            progress(rows[-1])
    return AblationReport(rows=rows, eval_count=eval_count)
