"""Training losses for vectorized scene learning and the end-to-end training
loop for the interaction planner.

The default objective is the weighted sum of the three planning constraints
and the imitation term, differentiated through the network tape by seeding
the plan node with the analytic constraint gradients.  Optional auxiliary
heads re-predict map points and agent futures from their queries, adding the
scene-learning regression/classification terms (winner-take-all by minimum
final displacement error, Manhattan map regression, focal classification);
they are off by default since the scene inputs are already ground truth.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .constraints import ConstraintParams, LossWeights, total_planning_loss
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .interact import (
    ForwardResult,
    InteractionConfig,
    InteractionParams,
    forward_plan,
    plan_gradient_seed,
)
from .scene import GeneratorConfig, Scenario, generate_scenario

PROB_CLAMP = 1e-7


def minfde_select(modes: np.ndarray, gt: np.ndarray) -> int:
    """Index of the mode with minimum final displacement error; first wins ties."""
    modes = np.asarray(modes, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if modes.ndim != 3 or modes.shape[1:] != gt.shape:
        raise ShapeError(f"modes {modes.shape} incompatible with gt {gt.shape}")
    fde = np.hypot(modes[:, -1, 0] - gt[-1, 0], modes[:, -1, 1] - gt[-1, 1])
    return int(np.argmin(fde))


@dataclass
class MotionRegression:
    value: float
    mode_grads: np.ndarray  # (N_k, T_f, 2); zero for non-selected modes
    selected: int


def motion_regression_loss(modes: np.ndarray, scores: np.ndarray, gt: np.ndarray) -> MotionRegression:
    """L1 regression on the minFDE-selected mode only.

    `scores` identifies the modes (and is validated) but does not affect the
    selection, which is winner-take-all by final displacement error; the
    paired mode-classification loss consumes the scores.
    """
    modes = np.asarray(modes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (modes.shape[0],):
        raise ShapeError(f"{scores.shape[0] if scores.ndim else 0} scores for {modes.shape[0]} modes")
    k = minfde_select(modes, gt)
    t_f = modes.shape[1]
    diff = modes[k] - gt
    grads = np.zeros_like(modes)
    grads[k] = np.sign(diff) / t_f
    return MotionRegression(float(np.abs(diff).sum() / t_f), grads, k)


def map_regression_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean Manhattan distance over the points of one map vector."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred points {pred.shape} vs gt {gt.shape}")
    n = pred.shape[0]
    diff = pred - gt
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def focal_loss(
    pred_prob: float, target: int, gamma: float = 2.0, alpha: float = 0.25
) -> tuple[float, float]:
    """Binary focal loss and its derivative w.r.t. the predicted probability.

    The probability is clamped to [1e-7, 1 - 1e-7] before evaluation.  With
    gamma=0 and alpha=0.5 this reduces to half the standard cross-entropy.
    """
    p = min(1.0 - PROB_CLAMP, max(PROB_CLAMP, float(pred_prob)))
    if target == 1:
        value = -alpha * (1.0 - p) ** gamma * math.log(p)
        grad = -alpha * (-gamma * (1.0 - p) ** (gamma - 1.0) * math.log(p) if gamma != 0.0 else 0.0)
        grad += -alpha * (1.0 - p) ** gamma / p
    elif target == 0:
        value = -(1.0 - alpha) * p**gamma * math.log(1.0 - p)
        grad = -(1.0 - alpha) * (gamma * p ** (gamma - 1.0) * math.log(1.0 - p) if gamma != 0.0 else 0.0)
        grad += (1.0 - alpha) * p**gamma / (1.0 - p)
    else:
        raise ValueError(f"target must be 0 or 1, got {target}")
    return value, grad


def _focal_array(probs: np.ndarray, targets: np.ndarray, gamma: float, alpha: float):
    """Mean focal loss over an array of probabilities plus d/d prob."""
    value = 0.0
    grads = np.zeros_like(probs)
    n = probs.size
    it = np.nditer(probs, flags=["multi_index"])
    for p in it:
        v, g = focal_loss(float(p), int(targets[it.multi_index]), gamma, alpha)
        value += v
        grads[it.multi_index] = g
    return value / n, grads / n


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, shapes: dict[str, tuple], weight_decay: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros(s) for n, s in shapes.items()}
        self.v = {n: np.zeros(s) for n, s in shapes.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, theta in tensors.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            theta -= lr * (update + self.weight_decay * theta)


def cosine_lr(initial: float, epoch: int, total_epochs: int) -> float:
    """Cosine annealing from `initial` down to zero over the run."""
    if total_epochs <= 1:
        return initial
    return 0.5 * initial * (1.0 + math.cos(math.pi * epoch / total_epochs))


# ---------------------------------------------------------------------------
# training configuration and log


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 1
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    scheduler: str = "cosine"
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    train_scenarios: int = 512
    val_scenarios: int = 64
    enable_aux_heads: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.train_scenarios < 1 or self.val_scenarios < 0:
            raise ConfigError("epochs and dataset sizes must be positive")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.scheduler not in ("cosine", "constant"):
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss_total: float
    loss_imitation: float
    loss_collision: float
    loss_boundary: float
    loss_direction: float
    loss_map: float
    loss_motion: float
    val_l2_avg: float
    val_collision_rate: float


TRAIN_LOG_COLUMNS = [
    "epoch", "lr", "loss_total", "loss_imitation", "loss_collision",
    "loss_boundary", "loss_direction", "loss_map", "loss_motion",
    "val_l2_avg", "val_collision_rate",
]


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)

    def to_table(self) -> str:
        lines = [",".join(TRAIN_LOG_COLUMNS)]
        for e in self.epochs:
            lines.append(
                ",".join(
                    [str(e.epoch)]
                    + [
                        repr(getattr(e, c))
                        for c in TRAIN_LOG_COLUMNS[1:]
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def regression_epochs(self, window: int = 5, warmup: int = 10) -> list[int]:
        """Epochs whose `window`-epoch moving-average training loss rose.

        Used to flag runs that stop making progress after warmup.
        """
        totals = [e.loss_total for e in self.epochs]
        flagged = []
        prev = None
        for i in range(warmup, len(totals)):
            if i + 1 < window:
                continue
            avg = sum(totals[i + 1 - window : i + 1]) / window
            if prev is not None and avg > prev + 1e-9:
                flagged.append(self.epochs[i].epoch)
            prev = avg
        return flagged


# ---------------------------------------------------------------------------
# auxiliary scene-learning heads (optional)

MAP_KIND_ORDER = ("lane_divider", "road_boundary", "pedestrian_crossing")


def aux_head_shapes(config: InteractionConfig, gen_config: GeneratorConfig):
    d = config.d_model
    n_p, n_k, t_f = gen_config.n_points, gen_config.mode_count, config.t_future
    return [
        ("aux.map_pts.w", (d, 2 * n_p), d),
        ("aux.map_pts.b", (1, 2 * n_p), d),
        ("aux.map_cls.w", (d, 3), d),
        ("aux.map_cls.b", (1, 3), d),
        ("aux.motion.w", (d, n_k * 2 * t_f), d),
        ("aux.motion.b", (1, n_k * 2 * t_f), d),
        ("aux.mode_cls.w", (d, n_k), d),
        ("aux.mode_cls.b", (1, n_k), d),
    ]


def _sigmoid_on_tape(x):
    # sigmoid(z) = 0.5 * (tanh(z / 2) + 1), built from tape primitives
    half = ad.scalar_mul(ad.tanh(ad.scalar_mul(x, 0.5)), 0.5)
    ones = x.tape.leaf(np.full(x.shape, 0.5))
    return ad.add(half, ones)


def _aux_losses(result: ForwardResult, scenario: Scenario, weights: LossWeights):
    """Scene-learning terms on the tape; returns (value_map, value_motion, seeds)."""
    seeds = []
    p = result.params
    map_value = 0.0
    motion_value = 0.0

    n_m = len(scenario.map)
    if n_m:
        gt_pts = np.stack([mv.points.xy().reshape(-1) for mv in scenario.map])
        pred = ad.add_bias_row(
            ad.matmul(result.features.map_queries, p["aux.map_pts.w"]), p["aux.map_pts.b"]
        )
        n_p = gt_pts.shape[1] // 2
        # l1_to_target averages over rows (map vectors); a further 1/N_p
        # yields the mean Manhattan distance per point
        reg = ad.scalar_mul(ad.l1_to_target(pred, gt_pts), 1.0 / n_p)
        map_value += float(reg.data[0, 0])
        seeds.append((reg, np.array([[weights.map]])))

        logits = ad.add_bias_row(
            ad.matmul(result.features.map_queries, p["aux.map_cls.w"]), p["aux.map_cls.b"]
        )
        probs = _sigmoid_on_tape(logits)
        targets = np.zeros((n_m, 3), dtype=int)
        for i, mv in enumerate(scenario.map):
            targets[i, MAP_KIND_ORDER.index(mv.kind.value)] = 1
        cls_value, dprobs = _focal_array(probs.data, targets, gamma=2.0, alpha=0.25)
        map_value += cls_value
        seeds.append((probs, weights.map * dprobs))

    n_a = len(scenario.agents)
    if n_a:
        t_f = scenario.t_future
        n_k = scenario.agents[0].n_modes
        pred = ad.add_bias_row(
            ad.matmul(result.features.agent_queries, p["aux.motion.w"]), p["aux.motion.b"]
        )
        pred_modes = pred.data.reshape(n_a, n_k, t_f, 2)
        dpred = np.zeros_like(pred_modes)
        selected = np.zeros(n_a, dtype=int)
        for i, gt in enumerate(scenario.agent_gt_futures):
            reg = motion_regression_loss(pred_modes[i], scenario.agents[i].mode_scores, gt)
            motion_value += reg.value / n_a
            dpred[i] = reg.mode_grads / n_a
            selected[i] = reg.selected
        seeds.append((pred, weights.motion * dpred.reshape(n_a, -1)))

        logits = ad.add_bias_row(
            ad.matmul(result.features.agent_queries, p["aux.mode_cls.w"]), p["aux.mode_cls.b"]
        )
        probs = _sigmoid_on_tape(logits)
        targets = np.zeros((n_a, n_k), dtype=int)
        targets[np.arange(n_a), selected] = 1
        cls_value, dprobs = _focal_array(probs.data, targets, gamma=2.0, alpha=0.25)
        motion_value += cls_value
        seeds.append((probs, weights.motion * dprobs))

    return map_value, motion_value, seeds


# ---------------------------------------------------------------------------
# training loop


def _scenario_seeds(seed: int, train_count: int, val_count: int):
    ss = np.random.SeedSequence(seed)
    train_ss, val_ss, shuffle_ss = ss.spawn(3)
    train_seeds = [int(v) for v in train_ss.generate_state(train_count)]
    val_seeds = [int(v) for v in val_ss.generate_state(max(val_count, 1))][:val_count]
    return train_seeds, val_seeds, shuffle_ss


def train(
    config: TrainConfig,
    gen_config: GeneratorConfig,
    interact_config: Optional[InteractionConfig] = None,
    constraint_params: Optional[ConstraintParams] = None,
    progress: Optional[Callable[[EpochStats], None]] = None,
) -> tuple[InteractionParams, TrainLog]:
    """End-to-end training of the interaction planner on generated scenes.

    Deterministic for a given config: scenario seeds, parameter init, and the
    per-epoch shuffle all derive from `config.seed`.  Aborts with
    TrainingDivergedError if a loss goes non-finite.
    """
    if interact_config is None:
        interact_config = InteractionConfig(t_future=gen_config.t_future)
    if interact_config.t_future != gen_config.t_future:
        raise ConfigError("interact t_future must match generator t_future")
    cparams = constraint_params if constraint_params is not None else ConstraintParams()
    weights = config.weights

    train_seeds, val_seeds, shuffle_ss = _scenario_seeds(
        config.seed, config.train_scenarios, config.val_scenarios
    )
    train_set = [generate_scenario(s, gen_config) for s in train_seeds]
    val_set = [generate_scenario(s, gen_config) for s in val_seeds]

    params = InteractionParams.initialize(interact_config, seed=config.seed)
    if config.enable_aux_heads:
        params.extend(aux_head_shapes(interact_config, gen_config), seed=config.seed + 1)
    optimizer = AdamW(
        {n: a.shape for n, a in params.tensors.items()}, weight_decay=config.weight_decay
    )
    shuffle_rng = np.random.default_rng(shuffle_ss.generate_state(1)[0])

    log = TrainLog()
    for epoch in range(config.epochs):
        lr = (
            cosine_lr(config.learning_rate, epoch, config.epochs)
            if config.scheduler == "cosine"
            else config.learning_rate
        )
        order = shuffle_rng.permutation(len(train_set)) if config.shuffle else np.arange(len(train_set))
        sums = {"total": 0.0, "imitation": 0.0, "collision": 0.0, "boundary": 0.0,
                "direction": 0.0, "map": 0.0, "motion": 0.0}
        for idx in order:
            scenario = train_set[idx]
            result = forward_plan(scenario, params)
            plan_loss = total_planning_loss(result.plan, scenario, cparams, weights)
            seeds = [(result.plan_node, plan_gradient_seed(plan_loss.grad))]
            step_total = plan_loss.value
            if config.enable_aux_heads:
                map_value, motion_value, aux_seeds = _aux_losses(result, scenario, weights)
                seeds.extend(aux_seeds)
                step_total += weights.map * map_value + weights.motion * motion_value
                sums["map"] += map_value
                sums["motion"] += motion_value
            if not math.isfinite(step_total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, scenario seed {train_seeds[idx]}"
                )
            sums["total"] += step_total
            for key in ("imitation", "collision", "boundary", "direction"):
                sums[key] += plan_loss.breakdown[key]
            grads = result.tape.backward_from(seeds)
            optimizer.step(
                params.tensors, {n: grads[result.params[n]] for n in params.tensors}, lr
            )
            for name, arr in params.tensors.items():
                if not np.all(np.isfinite(arr)):
                    raise TrainingDivergedError(
                        f"non-finite parameter {name} after epoch {epoch}, "
                        f"scenario seed {train_seeds[idx]}"
                    )

        n = len(train_set)
        val_l2, val_cr = _validate(params, val_set, gen_config)
        stats = EpochStats(
            epoch=epoch,
            lr=lr,
            loss_total=sums["total"] / n,
            loss_imitation=sums["imitation"] / n,
            loss_collision=sums["collision"] / n,
            loss_boundary=sums["boundary"] / n,
            loss_direction=sums["direction"] / n,
            loss_map=sums["map"] / n,
            loss_motion=sums["motion"] / n,
            val_l2_avg=val_l2,
            val_collision_rate=val_cr,
        )
        log.epochs.append(stats)
        if progress is not None:
            progress(stats)

    regressions = log.regression_epochs()
    if regressions:
        warnings.warn(
            f"training loss moving average rose at epochs {regressions}", stacklevel=2
        )
    return params, log


def _validate(params: InteractionParams, val_set: list[Scenario], gen_config: GeneratorConfig):
    """Open-loop validation: average L2 over horizons and collision rate."""
    if not val_set:
        return 0.0, 0.0
    from .metrics import collision_rate, displacement_error

    plans = [forward_plan(s, params).plan for s in val_set]
    l2s = [
        displacement_error(plan, s.expert, s.horizon_dt).avg
        for plan, s in zip(plans, val_set)
    ]
    cr = collision_rate(val_set, plans, ego_dims=gen_config.ego_dims).avg
    return float(np.mean(l2s)), cr
