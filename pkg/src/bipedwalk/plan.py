"""Walking plan bundle: unicycle path, footsteps, timeline and references.

A WalkingPlan is everything the control layers need to run a walk: sampled
feet/ZMP references, phase flags, weight fractions and support geometry as
functions of time.  Plans are replaced at merge points: the replanner
re-initializes the unicycle from the measured feet midpose, keeps the foot
that was being unloaded as the first swing foot, and starts the new timeline
with the half-duration first switch, which makes references continuous at
the splice.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .footsteps import (
    FootPose,
    FootSide,
    Footstep,
    InitialFeet,
    PlannerConfig,
    PlanResult,
    plan_footsteps,
)
from .gait import (
    FeetReference,
    FootSample,
    GaitTimeline,
    Phase,
    build_feet_reference,
    build_gait_timeline,
    zmp_reference,
)
from .geometry import wrap_angle
from .unicycle import (
    DiscretizedPath,
    ReferenceSignal,
    UnicycleParams,
    UnicycleState,
    simulate_closed_loop,
)


@dataclass(frozen=True)
class PlanningSetup:
    """Everything fixed across replans: guidance gains and gait parameters."""

    unicycle: UnicycleParams = field(default_factory=UnicycleParams)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    horizon: float = 6.0
    dt: float = 0.01
    switch_ratio: float = 0.52
    apex: float = 0.02

    def __post_init__(self):
        if not (0.0 < self.switch_ratio < 1.0):
            raise ValueError("switch_ratio must lie in (0, 1)")
        if self.dt <= 0.0 or self.horizon <= 0.0:
            raise ValueError("dt and horizon must be positive")


@dataclass(frozen=True)
class PlanSample:
    t: float
    feet: dict[FootSide, FootSample]
    loads: tuple[float, float]
    phases: dict[FootSide, Phase]
    contact: dict[FootSide, bool]
    zmp: np.ndarray


@dataclass(frozen=True)
class SupportFoot:
    side: FootSide
    center: np.ndarray  # xy of the sole center
    yaw: float


class WalkingPlan:
    def __init__(self, path: DiscretizedPath, initial: InitialFeet,
                 result: PlanResult, timeline: GaitTimeline,
                 feet_ref: FeetReference, setup: PlanningSetup, t0: float):
        self.path = path
        self.initial = initial
        self.steps = result.steps
        self.horizon_exhausted = result.horizon_exhausted
        self.timeline = timeline
        self.feet_ref = feet_ref
        self.setup = setup
        self.t0 = float(t0)

    # -- per-instant queries -------------------------------------------------
    def foot(self, side: FootSide, t: float) -> FootSample:
        return self.feet_ref.sample(side, t)

    def loads(self, t: float) -> tuple[float, float]:
        return self.timeline.loads(t)

    def zmp_ref(self, t: float) -> np.ndarray:
        return zmp_reference(self.timeline, self.feet_ref, t)

    def support(self, t: float) -> list[SupportFoot]:
        out = []
        for side in FootSide:
            if self.timeline.in_contact(side, t):
                pose = self.feet_ref.planar_pose(side, t)
                out.append(SupportFoot(side=side, center=pose.position, yaw=pose.theta))
        return out

    def sample(self, t: float) -> PlanSample:
        feet = {side: self.feet_ref.sample(side, t) for side in FootSide}
        return PlanSample(
            t=t, feet=feet, loads=self.timeline.loads(t),
            phases={side: self.timeline.phase_at(side, t) for side in FootSide},
            contact={side: self.timeline.in_contact(side, t) for side in FootSide},
            zmp=self.zmp_ref(t))

    def next_merge_time(self, t: float) -> float:
        return self.timeline.next_merge_time(t)

    @property
    def end_time(self) -> float:
        return self.timeline.end_time


def feet_midpose(left: FootPose, right: FootPose) -> UnicycleState:
    """Unicycle pose implied by a feet pair (positions average, yaw bisects)."""
    x = 0.5 * (left.position + right.position)
    theta = right.theta + 0.5 * wrap_angle(left.theta - right.theta)
    return UnicycleState(x=x, theta=theta)


def make_plan(reference: ReferenceSignal, initial: InitialFeet, setup: PlanningSetup,
              t0: float = 0.0, first_swing: FootSide | None = None) -> WalkingPlan:
    """Plan a walk from a standing double support at t0."""
    state0 = feet_midpose(initial.left, initial.right)
    path = simulate_closed_loop(state0, reference, setup.unicycle,
                                horizon=setup.horizon, dt=setup.dt, t0=t0)
    result = plan_footsteps(path, initial, setup.planner, first_swing=first_swing)
    timeline = build_gait_timeline(result.steps, initial, t0=t0,
                                   switch_ratio=setup.switch_ratio)
    feet_ref = build_feet_reference(result.steps, initial, timeline, apex=setup.apex)
    return WalkingPlan(path, initial, result, timeline, feet_ref, setup, t0)


class MergeUnavailableError(RuntimeError):
    """No merge point at or after the requested time; wait for the next
    double support."""


@dataclass(frozen=True)
class FeetPoses:
    left: FootPose
    right: FootPose


def merge_plan(active: WalkingPlan, new_reference: ReferenceSignal,
               measured: FeetPoses, t_now: float) -> tuple[WalkingPlan, float]:
    """Replan from the earliest merge point at or after t_now.

    Merge points fall at instants where both feet are on the ground with
    weight fractions (0.5, 0.5), so the new plan's feet poses at the merge
    time equal the measured poses exactly and the blended ZMP is continuous.
    """
    tm = active.timeline.next_merge_time(t_now)
    if tm is None or tm < t_now - 1e-9:  # pragma: no cover - defensive
        raise MergeUnavailableError("no merge point at or after t_now; "
                                    "wait for the next double support")
    if tm >= active.timeline.final_merge_time - 1e-12:
        # settle end or terminal standing region: both feet planted for at
        # least the settle already, so restart the step-time clock here and
        # leave the swing side free
        t_left = t_right = tm
        first_swing = None
    else:
        idx = _last_impact_index(active.steps, tm)
        if idx < 0:
            # merge at the plan start, before the first impact
            t_left = active.initial.t_impact_left
            t_right = active.initial.t_impact_right
            first_swing = active.steps[0].side if active.steps else None
        else:
            landing = active.steps[idx]
            t_other = (active.steps[idx - 1].t_imp if idx > 0
                       else active.initial.t_impact(landing.side.other))
            if landing.side is FootSide.LEFT:
                t_left, t_right = landing.t_imp, t_other
            else:
                t_left, t_right = t_other, landing.t_imp
            # the double support is unloading the foot that steps next;
            # keep that choice so the load ramp continues smoothly
            first_swing = landing.side.other
    initial = InitialFeet(left=measured.left, right=measured.right,
                          t_impact_left=t_left, t_impact_right=t_right)
    new_plan = make_plan(new_reference, initial, active.setup, t0=tm,
                         first_swing=first_swing)
    return new_plan, tm


def _last_impact_index(steps: list[Footstep], t: float) -> int:
    idx = -1
    for i, s in enumerate(steps):
        if s.t_imp <= t + 1e-12:
            idx = i
    return idx


def standing_feet(x=np.zeros(2), theta: float = 0.0, m: float = 0.05,
                  t0: float = 0.0) -> InitialFeet:
    """Feet at their ideal offsets around a unicycle pose, freshly landed."""
    from .footsteps import feet_from_sample
    left, right = feet_from_sample(np.asarray(x, dtype=float), theta, m)
    return InitialFeet(left=left, right=right, t_impact_left=t0, t_impact_right=t0)


# -- serialization ------------------------------------------------------------

def steps_to_json(steps: list[Footstep]) -> list[dict]:
    return [{"side": s.side.value, "x": float(s.position[0]), "y": float(s.position[1]),
             "theta": float(s.theta), "t_imp": float(s.t_imp)} for s in steps]


def steps_from_json(items: list[dict]) -> list[Footstep]:
    return [Footstep(side=FootSide(d["side"]), position=[d["x"], d["y"]],
                     theta=d["theta"], t_imp=d["t_imp"]) for d in items]


def save_steps(path, steps: list[Footstep]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(steps_to_json(steps), f, indent=2)


def load_steps(path) -> list[Footstep]:
    with open(path, "r", encoding="utf-8") as f:
        return steps_from_json(json.load(f))


PLAN_CSV_HEADER = ("t,phase_l,phase_r,lx,ly,lz,lyaw,rx,ry,rz,ryaw,"
                   "zmpx,zmpy,Fl,Fr")


def plan_to_csv(plan: WalkingPlan, path, dt: float = 0.01,
                t_end: float | None = None) -> None:
    """Sampled plan rows: phases, feet poses, blended ZMP, weight fractions."""
    t_end = plan.end_time if t_end is None else t_end
    n = int(np.floor((t_end - plan.t0) / dt + 1e-9)) + 1
    with open(path, "w", encoding="utf-8") as f:
        f.write(PLAN_CSV_HEADER + "\n")
        for k in range(n):
            t = plan.t0 + k * dt
            s = plan.sample(t)
            left, right = s.feet[FootSide.LEFT], s.feet[FootSide.RIGHT]
            row = [t,
                   s.phases[FootSide.LEFT].value, s.phases[FootSide.RIGHT].value,
                   *left.position, left.yaw, *right.position, right.yaw,
                   s.zmp[0], s.zmp[1], s.loads[0], s.loads[1]]
            f.write(",".join(str(v) if isinstance(v, str) else repr(float(v))
                             for v in row) + "\n")


# -- canonical gait fixture ----------------------------------------------------

def straight_walk_setup(step_length: float = 0.14, step_duration: float = 1.25,
                        ds_duration: float = 0.65, m: float = 0.05,
                        walk_time: float = 16.0, horizon: float | None = None,
                        d_slack: float = 5e-3) -> tuple[PlanningSetup, ReferenceSignal, InitialFeet]:
    """Fixed-step straight-walk fixture.

    Pins the step time (t_min = t_max = step_duration) so the planner emits
    steps of exactly step_length while the reference moves, giving a gait
    with the requested double-support duration.
    """
    from .footsteps import CostWeights, StepConstraints
    from .unicycle import LineReference

    speed = step_length / step_duration
    ratio = ds_duration / step_duration
    v_max = max(2 * speed, 0.2)
    # pin the step time to one path sample: the window must stay wider than
    # the sample spacing or it can fall between samples on replan grids
    dt = 0.01
    # reach must cover catch-up steps after a replan, where the path briefly
    # moves at v_max while the pose converges back onto the reference
    d_need = float(np.hypot(v_max * (step_duration + 0.6 * dt), 2.0 * m)) + d_slack
    theta_max = 0.3
    constraints = StepConstraints(t_min=step_duration - 0.6 * dt,
                                  t_max=step_duration + 0.6 * dt,
                                  d_max=d_need, theta_max=theta_max, w_min=min(0.04, m))
    # with the step time pinned there is no earlier candidate to fall back
    # on, so the yaw accumulated over one step must respect theta_max
    omega_max = 0.8 * theta_max / step_duration
    params = UnicycleParams(K=np.diag([2.0, 2.0]), v_max=v_max, omega_max=omega_max)
    planner = PlannerConfig(constraints=constraints, weights=CostWeights(), m=m)
    setup = PlanningSetup(unicycle=params, planner=planner,
                          horizon=horizon if horizon is not None else walk_time + 8.0,
                          dt=dt, switch_ratio=ratio)
    initial = standing_feet(m=m)
    # reference starts on the control point so tracking is exact from t = 0
    start = feet_midpose(initial.left, initial.right).control_point(params.d)
    reference = LineReference(start=start, velocity=[speed, 0.0], t_stop=walk_time)
    return setup, reference, initial
