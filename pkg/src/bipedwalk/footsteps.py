"""Footstep planning on a discretized unicycle path.

Feet candidates are anchored to path samples: at sample pose (x, theta) the
ideal feet sit at x +- R2(theta) (0, m).  Steps are chosen one at a time by
an exhaustive scan over admissible impact times, minimizing

    cost = k_t / dt^2 + k_x ||dx||^2

where dt is the time since the previous impact and dx the displacement
between the candidate foot and the stance foot (the double-support pair).
Hard bounds: dt in [t_min, t_max], ||dx|| <= d_max, |dtheta| <= theta_max,
and the left foot expressed in the right foot frame must keep a lateral
clearance w_min (no leg crossing).  Ties are broken by the earliest impact
time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import rot2, wrap_angle
from .unicycle import DiscretizedPath


class FootSide(str, Enum):
    LEFT = "left"
    RIGHT = "right"

    @property
    def other(self) -> "FootSide":
        return FootSide.RIGHT if self is FootSide.LEFT else FootSide.LEFT


@dataclass(frozen=True)
class FootPose:
    """Planar foot pose: sole center position and yaw."""

    position: np.ndarray
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=float).reshape(2).copy())
        object.__setattr__(self, "theta", wrap_angle(self.theta))


@dataclass(frozen=True)
class Footstep:
    side: FootSide
    position: np.ndarray
    theta: float
    t_imp: float

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=float).reshape(2).copy())
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def pose(self) -> FootPose:
        return FootPose(self.position, self.theta)


@dataclass(frozen=True)
class StepConstraints:
    t_min: float = 1.3
    t_max: float = 5.0
    d_max: float = 0.175
    theta_max: float = 0.3
    w_min: float = 0.04

    def __post_init__(self):
        if not (0.0 < self.t_min <= self.t_max):
            raise ValueError("need 0 < t_min <= t_max")
        if self.d_max <= 0.0:
            raise ValueError("d_max must be positive")
        if not (0.0 < self.theta_max < np.pi):
            raise ValueError("theta_max must lie in (0, pi)")
        if self.w_min <= 0.0:
            raise ValueError("w_min must be positive")


@dataclass(frozen=True)
class CostWeights:
    k_t: float = 1.0
    k_x: float = 10.0

    def __post_init__(self):
        if self.k_t <= 0.0 or self.k_x <= 0.0:
            raise ValueError("cost weights must be positive")


@dataclass(frozen=True)
class InitialFeet:
    """Current feet poses plus the time each foot last touched down."""

    left: FootPose
    right: FootPose
    t_impact_left: float = 0.0
    t_impact_right: float = 0.0

    def pose(self, side: FootSide) -> FootPose:
        return self.left if side is FootSide.LEFT else self.right

    def t_impact(self, side: FootSide) -> float:
        return self.t_impact_left if side is FootSide.LEFT else self.t_impact_right

    @property
    def last_impact(self) -> float:
        return max(self.t_impact_left, self.t_impact_right)


@dataclass(frozen=True)
class PlannerConfig:
    constraints: StepConstraints = field(default_factory=StepConstraints)
    weights: CostWeights = field(default_factory=CostWeights)
    m: float = 0.05               # half distance between the feet centers
    stop_pos_tol: float = 5e-3    # terminal "feet already ideal" tolerances
    stop_yaw_tol: float = 0.02

    def __post_init__(self):
        if self.m <= 0.0:
            raise ValueError("half feet separation m must be positive")


def feet_from_sample(x: np.ndarray, theta: float, m: float) -> tuple[FootPose, FootPose]:
    """Ideal (left, right) feet for a unicycle sample pose."""
    r = rot2(theta)
    x = np.asarray(x, dtype=float).reshape(2)
    left = FootPose(x + r @ np.array([0.0, m]), theta)
    right = FootPose(x + r @ np.array([0.0, -m]), theta)
    return left, right


def ideal_foot(side: FootSide, x: np.ndarray, theta: float, m: float) -> FootPose:
    left, right = feet_from_sample(x, theta, m)
    return left if side is FootSide.LEFT else right


def step_cost(delta_t: float, delta_x: np.ndarray, weights: CostWeights) -> float:
    """Step cost penalizing fast steps and wide double-support stances."""
    dx = np.asarray(delta_x, dtype=float).reshape(2)
    return weights.k_t / (delta_t * delta_t) + weights.k_x * float(dx @ dx)


def _lateral_clearance(left: FootPose, right: FootPose) -> float:
    """y-component of the left foot expressed in the right foot frame."""
    rel = rot2(right.theta).T @ (left.position - right.position)
    return float(rel[1])


def check_step_pair(cand: FootPose, cand_side: FootSide, stance: FootPose,
                    delta_t: float, constraints: StepConstraints) -> str | None:
    """Name of the first violated bound for a candidate/stance pair, or None."""
    c = constraints
    if delta_t < c.t_min - 1e-9:
        return "t_min"
    if delta_t > c.t_max + 1e-9:
        return "t_max"
    if np.linalg.norm(cand.position - stance.position) > c.d_max + 1e-12:
        return "d_max"
    if abs(wrap_angle(cand.theta - stance.theta)) > c.theta_max + 1e-12:
        return "theta_max"
    if cand_side is FootSide.LEFT:
        clearance = _lateral_clearance(cand, stance)
    else:
        clearance = _lateral_clearance(stance, cand)
    if clearance < c.w_min - 1e-12:
        return "w_min"
    return None


class PlanInfeasibleError(RuntimeError):
    """No admissible impact time exists for a step."""

    def __init__(self, step_index: int, violations: dict[str, int]):
        dominant = max(violations, key=violations.get) if violations else "empty window"
        super().__init__(
            f"footstep {step_index} has no feasible impact time; "
            f"violated bounds: {violations} (dominant: {dominant})")
        self.step_index = step_index
        self.violations = violations


@dataclass
class PlanResult:
    steps: list[Footstep]
    horizon_exhausted: bool


def _farther_from_ideal(initial: InitialFeet, x: np.ndarray, theta: float,
                        m: float) -> FootSide:
    """Default first-swing heuristic: the foot farther from its ideal pose."""
    dl = np.linalg.norm(initial.left.position - ideal_foot(FootSide.LEFT, x, theta, m).position)
    dr = np.linalg.norm(initial.right.position - ideal_foot(FootSide.RIGHT, x, theta, m).position)
    return FootSide.LEFT if dl >= dr else FootSide.RIGHT


def plan_footsteps(path: DiscretizedPath, initial: InitialFeet, config: PlannerConfig,
                   first_swing: FootSide | None = None) -> PlanResult:
    """Greedy exhaustive scan over sampled impact times.

    Returns the chosen steps and whether planning stopped because the path
    horizon ran out (True) rather than because the feet reached their ideal
    terminal poses (False).  Raises PlanInfeasibleError when a non-empty
    candidate window contains no admissible step.
    """
    c = config.constraints
    times = path.times
    n = len(times)
    if n == 0:
        return PlanResult(steps=[], horizon_exhausted=False)

    term_xy, term_theta = path.pose_at_index(n - 1)
    poses = {FootSide.LEFT: initial.left, FootSide.RIGHT: initial.right}
    swing = first_swing or _farther_from_ideal(initial, *path.pose_at_index(0), config.m)
    t_prev = initial.last_impact
    steps: list[Footstep] = []

    def at_terminal_ideal(side: FootSide) -> bool:
        ideal = ideal_foot(side, term_xy, term_theta, config.m)
        return (np.linalg.norm(poses[side].position - ideal.position) <= config.stop_pos_tol
                and abs(wrap_angle(poses[side].theta - ideal.theta)) <= config.stop_yaw_tol)

    while True:
        if at_terminal_ideal(FootSide.LEFT) and at_terminal_ideal(FootSide.RIGHT):
            return PlanResult(steps=steps, horizon_exhausted=False)
        k_lo = int(np.searchsorted(times, t_prev + c.t_min - 1e-9, side="left"))
        k_hi = int(np.searchsorted(times, t_prev + c.t_max + 1e-9, side="right")) - 1
        if k_lo >= n:
            return PlanResult(steps=steps, horizon_exhausted=True)
        k_hi = min(k_hi, n - 1)
        stance = poses[swing.other]
        best_cost, best_k, best_pose = np.inf, -1, None
        violations: dict[str, int] = {}
        for k in range(k_lo, k_hi + 1):
            xy, theta = path.pose_at_index(k)
            cand = ideal_foot(swing, xy, theta, config.m)
            delta_t = float(times[k] - t_prev)
            bad = check_step_pair(cand, swing, stance, delta_t, c)
            if bad is not None:
                violations[bad] = violations.get(bad, 0) + 1
                continue
            cost = step_cost(delta_t, cand.position - stance.position, config.weights)
            if cost < best_cost - 1e-15:
                best_cost, best_k, best_pose = cost, k, cand
        if best_k < 0:
            raise PlanInfeasibleError(len(steps), violations)
        steps.append(Footstep(side=swing, position=best_pose.position,
                              theta=best_pose.theta, t_imp=float(times[best_k])))
        poses[swing] = best_pose
        t_prev = float(times[best_k])
        swing = swing.other
