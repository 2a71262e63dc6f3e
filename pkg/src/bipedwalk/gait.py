"""Gait timeline, feet interpolation, weight distribution and ZMP reference.

Each foot cycles switch-in -> stance -> switch-out -> swing.  A landing at
t_i opens a double support of duration ratio * (t_{i+1} - t_i) during which
the landing foot ramps its weight fraction 0 -> 1 (half cosine) while the
other foot ramps 1 -> 0 and then swings.  A fresh plan starts standing, so
its first switch lasts half the nominal time (ramps from 0.5); symmetric-
ally the final double support ends at its midpoint with both feet holding
0.5 forever.  Merge points are the start, every full double-support mid-
point, and the trajectory end; the weight fractions there are (0.5, 0.5),
which is what makes plans splice continuously.
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .footsteps import FootPose, FootSide, Footstep, InitialFeet
from .geometry import half_cosine, poly_eval, quintic_coeffs, rot2, wrap_angle


class Phase(str, Enum):
    SWITCH_IN = "switch_in"
    STANCE = "stance"
    SWITCH_OUT = "switch_out"
    SWING = "swing"


# phases with ground contact (everything except swing)
CONTACT_PHASES = (Phase.SWITCH_IN, Phase.STANCE, Phase.SWITCH_OUT)


@dataclass(frozen=True)
class PhaseInterval:
    phase: Phase
    t_start: float
    t_end: float          # np.inf on the terminal interval
    load_start: float     # weight fraction at t_start
    load_end: float       # weight fraction at t_end

    def load_at(self, t: float) -> float:
        if not np.isfinite(self.t_end) or self.t_end <= self.t_start:
            return self.load_start
        s = (t - self.t_start) / (self.t_end - self.t_start)
        return self.load_start + (self.load_end - self.load_start) * half_cosine(s)


class GaitTimeline:
    """Per-foot phase interval lists over [t0, inf)."""

    def __init__(self, t0: float, intervals: dict[FootSide, list[PhaseInterval]],
                 merge_times: list[float], final_merge_time: float):
        self.t0 = float(t0)
        self.intervals = intervals
        self.merge_times = sorted(merge_times)
        self.final_merge_time = float(final_merge_time)
        self._starts = {side: [iv.t_start for iv in ivs] for side, ivs in intervals.items()}

    def _interval_at(self, side: FootSide, t: float) -> PhaseInterval:
        ivs = self.intervals[side]
        idx = bisect_right(self._starts[side], t) - 1
        return ivs[max(idx, 0)]

    def phase_at(self, side: FootSide, t: float) -> Phase:
        return self._interval_at(side, t).phase

    def load_at(self, side: FootSide, t: float) -> float:
        return self._interval_at(side, max(t, self.t0)).load_at(max(t, self.t0))

    def loads(self, t: float) -> tuple[float, float]:
        return self.load_at(FootSide.LEFT, t), self.load_at(FootSide.RIGHT, t)

    def in_contact(self, side: FootSide, t: float) -> bool:
        return self.phase_at(side, t) in CONTACT_PHASES

    def next_merge_time(self, t: float) -> float:
        """Earliest merge point at or after t.  Any instant in the terminal
        standing region is itself a merge point (the robot holds a double
        support forever)."""
        if t >= self.final_merge_time:
            return float(t)
        idx = bisect_right(self.merge_times, t - 1e-12)
        if idx < len(self.merge_times):
            return self.merge_times[idx]
        return float(max(t, self.final_merge_time))  # pragma: no cover

    @property
    def end_time(self) -> float:
        return self.final_merge_time


def build_gait_timeline(steps: list[Footstep], initial: InitialFeet, t0: float,
                        switch_ratio: float = 0.52) -> GaitTimeline:
    """Assemble phase intervals and weight-fraction ramps from footsteps.

    The first switch starts at t0 with half its nominal duration (ramping the
    weight fractions from 0.5); the nominal duration of the switch opened by
    impact t_i is switch_ratio * (t_{i+1} - t_i), with the last step reusing
    its own step duration.  The final double support is truncated at its
    midpoint (the trajectory-end merge point) into a permanent 0.5/0.5 stand.
    """
    if not (0.0 < switch_ratio < 1.0):
        raise ValueError("switch_ratio must lie in (0, 1)")
    if not steps:
        ivs = {side: [PhaseInterval(Phase.STANCE, t0, np.inf, 0.5, 0.5)]
               for side in FootSide}
        return GaitTimeline(t0, ivs, [t0], final_merge_time=t0)

    t_imp = [s.t_imp for s in steps]
    if any(t_imp[i + 1] <= t_imp[i] for i in range(len(t_imp) - 1)):
        raise ValueError("footstep impact times must be strictly increasing")
    for i in range(len(steps) - 1):
        if steps[i + 1].side is steps[i].side:
            raise ValueError("footsteps must alternate sides")
    t_prev = initial.last_impact
    if t_imp[0] <= t0:
        raise ValueError("first impact must lie after the timeline start")

    ivs: dict[FootSide, list[PhaseInterval]] = {FootSide.LEFT: [], FootSide.RIGHT: []}
    merge_times = [t0]

    # initial half switch: the first swing foot unloads 0.5 -> 0
    first = steps[0].side
    e0 = t0 + 0.5 * switch_ratio * (t_imp[0] - t_prev)
    if e0 >= t_imp[0]:
        raise ValueError("first switch does not finish before the first impact")
    ivs[first].append(PhaseInterval(Phase.SWITCH_OUT, t0, e0, 0.5, 0.0))
    ivs[first].append(PhaseInterval(Phase.SWING, e0, t_imp[0], 0.0, 0.0))
    ivs[first.other].append(PhaseInterval(Phase.SWITCH_IN, t0, e0, 0.5, 1.0))
    ivs[first.other].append(PhaseInterval(Phase.STANCE, e0, t_imp[0], 1.0, 1.0))

    for i, step in enumerate(steps):
        t_i = step.t_imp
        lander, other = step.side, step.side.other
        last = i == len(steps) - 1
        dt_next = (t_imp[i + 1] - t_i) if not last else (
            t_i - (t_imp[i - 1] if i > 0 else t_prev))
        ds = switch_ratio * dt_next
        if last:
            settle_end = t_i + 0.5 * ds
            ivs[lander].append(PhaseInterval(Phase.SWITCH_IN, t_i, settle_end, 0.0, 0.5))
            ivs[lander].append(PhaseInterval(Phase.STANCE, settle_end, np.inf, 0.5, 0.5))
            ivs[other].append(PhaseInterval(Phase.SWITCH_OUT, t_i, settle_end, 1.0, 0.5))
            ivs[other].append(PhaseInterval(Phase.STANCE, settle_end, np.inf, 0.5, 0.5))
            merge_times.append(settle_end)
            return GaitTimeline(t0, ivs, merge_times, final_merge_time=settle_end)
        ds_end = t_i + ds
        ivs[lander].append(PhaseInterval(Phase.SWITCH_IN, t_i, ds_end, 0.0, 1.0))
        ivs[lander].append(PhaseInterval(Phase.STANCE, ds_end, t_imp[i + 1], 1.0, 1.0))
        ivs[other].append(PhaseInterval(Phase.SWITCH_OUT, t_i, ds_end, 1.0, 0.0))
        ivs[other].append(PhaseInterval(Phase.SWING, ds_end, t_imp[i + 1], 0.0, 0.0))
        merge_times.append(t_i + 0.5 * ds)
    raise AssertionError("unreachable")  # pragma: no cover


@dataclass(frozen=True)
class FootSample:
    """Reference pose/velocity/acceleration of one foot at one instant."""

    position: np.ndarray      # (3,) world, z measured from the ground plane
    yaw: float
    velocity: np.ndarray      # (3,)
    yaw_rate: float
    acceleration: np.ndarray  # (3,)
    yaw_acc: float

    @property
    def planar_pose(self) -> FootPose:
        return FootPose(self.position[:2], self.yaw)


class _Segment:
    """One foot-trajectory segment: a hold or a swing."""

    def __init__(self, t_start: float, t_end: float, pose: FootPose,
                 target: FootPose | None = None, apex: float = 0.0):
        self.t_start = t_start
        self.t_end = t_end
        self.pose = pose
        self.target = target
        self.apex = apex
        if target is not None:
            T = t_end - t_start
            yaw1 = pose.theta + wrap_angle(target.theta - pose.theta)
            self.cx = quintic_coeffs(pose.position[0], 0, 0, target.position[0], 0, 0, T)
            self.cy = quintic_coeffs(pose.position[1], 0, 0, target.position[1], 0, 0, T)
            self.cyaw = quintic_coeffs(pose.theta, 0, 0, yaw1, 0, 0, T)

    def sample(self, t: float) -> FootSample:
        if self.target is None:
            return FootSample(
                position=np.array([self.pose.position[0], self.pose.position[1], 0.0]),
                yaw=self.pose.theta, velocity=np.zeros(3), yaw_rate=0.0,
                acceleration=np.zeros(3), yaw_acc=0.0)
        tau = min(max(t - self.t_start, 0.0), self.t_end - self.t_start)
        x, vx, ax = poly_eval(self.cx, tau)
        y, vy, ay = poly_eval(self.cy, tau)
        yaw, wyaw, ayaw = poly_eval(self.cyaw, tau)
        z, vz, az = _swing_height(tau, self.t_end - self.t_start, self.apex)
        return FootSample(position=np.array([x, y, z]), yaw=wrap_angle(yaw),
                          velocity=np.array([vx, vy, vz]), yaw_rate=wyaw,
                          acceleration=np.array([ax, ay, az]), yaw_acc=ayaw)


def _swing_height(tau: float, T: float, apex: float):
    """Vertical swing profile: two mirrored cubics peaking at the apex at
    mid-swing, with zero height and vertical velocity at both ends."""
    if T <= 0.0:
        return 0.0, 0.0, 0.0
    half = 0.5 * T
    if tau <= half:
        s = tau / half
        up = True
    else:
        s = (T - tau) / half
        up = False
    z = apex * (3.0 * s * s - 2.0 * s ** 3)
    dz_ds = apex * (6.0 * s - 6.0 * s * s)
    d2z_ds2 = apex * (6.0 - 12.0 * s)
    sign = 1.0 if up else -1.0
    vz = sign * dz_ds / half
    az = d2z_ds2 / (half * half)
    return z, vz, az


class FeetReference:
    """Piecewise feet trajectories consistent with a gait timeline: constant
    ground-level holds outside swing, quintic xy/yaw plus a cubic height
    profile inside swing."""

    def __init__(self, segments: dict[FootSide, list[_Segment]]):
        self._segments = segments
        self._starts = {side: [s.t_start for s in segs] for side, segs in segments.items()}

    def sample(self, side: FootSide, t: float) -> FootSample:
        segs = self._segments[side]
        idx = bisect_right(self._starts[side], t) - 1
        return segs[max(idx, 0)].sample(t)

    def planar_pose(self, side: FootSide, t: float) -> FootPose:
        return self.sample(side, t).planar_pose


def build_feet_reference(steps: list[Footstep], initial: InitialFeet,
                         timeline: GaitTimeline, apex: float = 0.02) -> FeetReference:
    """Swing segments follow the timeline's swing intervals exactly and land
    on the planned footsteps."""
    segments: dict[FootSide, list[_Segment]] = {}
    next_step: dict[FootSide, list[Footstep]] = {
        FootSide.LEFT: [s for s in steps if s.side is FootSide.LEFT],
        FootSide.RIGHT: [s for s in steps if s.side is FootSide.RIGHT],
    }
    for side in FootSide:
        pose = initial.pose(side)
        queue = list(next_step[side])
        segs: list[_Segment] = []
        for iv in timeline.intervals[side]:
            if iv.phase is Phase.SWING:
                if not queue:
                    raise ValueError("swing interval without a matching footstep")
                target = queue.pop(0).pose
                segs.append(_Segment(iv.t_start, iv.t_end, pose, target, apex))
                pose = target
            else:
                if segs and segs[-1].target is None:
                    continue  # merge consecutive holds
                segs.append(_Segment(iv.t_start, iv.t_end, pose))
        if queue:
            raise ValueError("footsteps left over after consuming swing intervals")
        segments[side] = segs
    return FeetReference(segments)


def weight_distribution(timeline: GaitTimeline, t: float) -> tuple[float, float]:
    """Weight fractions (F_left, F_right); they always sum to one."""
    return timeline.loads(t)


def zmp_reference(timeline: GaitTimeline, feet: FeetReference, t: float,
                  offsets: dict[FootSide, np.ndarray] | None = None) -> np.ndarray:
    """Load-weighted combination of the per-foot ZMP anchor points.

    During single support this is the stance sole point; during switches it
    blends smoothly (half cosine) from the outgoing to the incoming foot and
    completes exactly within the double-support interval.
    """
    out = np.zeros(2)
    for side in FootSide:
        load = timeline.load_at(side, t)
        if load == 0.0:
            continue
        pose = feet.planar_pose(side, t)
        p = pose.position
        if offsets is not None:
            p = p + rot2(pose.theta) @ np.asarray(offsets[side], dtype=float)
        out += load * p
    return out
