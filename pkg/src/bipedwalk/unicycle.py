"""Planar unicycle model with feedback tracking of an offset control point.

The robot is abstracted as a unicycle with pose (x, theta).  A control point
F is rigidly attached at a body-frame offset d (d1 > 0), which makes the map
from (v, omega) to the point-F velocity invertible and allows exact
input/output linearization:

    x_F = x + R2(theta) d
    xdot_F = B(theta) u,   B(theta) = [R2(theta) e1 | R2(theta) S2 d]

with det B = d1.  The tracking law u = B^-1 (xdot_F* - K (x_F - x_F*))
renders the point-F error linear with dynamics -K.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import S2, rot2, wrap_angle


@dataclass(frozen=True)
class UnicycleState:
    """Planar pose of the unicycle body frame."""

    x: np.ndarray
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(2).copy())
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def control_point(self, d: np.ndarray) -> np.ndarray:
        """World position of the point rigidly attached at body offset d."""
        return self.x + rot2(self.theta) @ np.asarray(d, dtype=float)


@dataclass(frozen=True)
class UnicycleCommand:
    v: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.omega])


@dataclass(frozen=True)
class UnicycleParams:
    """Control-point offset, tracking gain and command saturation bounds."""

    d: np.ndarray = field(default_factory=lambda: np.array([0.2, 0.0]))
    K: np.ndarray = field(default_factory=lambda: np.diag([2.0, 2.0]))
    v_max: float = 0.5
    omega_max: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float).reshape(2)
        if d[0] <= 0.0:
            raise ValueError("control point offset d1 must be positive (B singular at d1 = 0)")
        K = np.asarray(self.K, dtype=float).reshape(2, 2)
        eigs = np.linalg.eigvalsh(0.5 * (K + K.T))
        if np.any(eigs <= 0.0):
            raise ValueError("tracking gain K must be positive definite")
        if self.v_max <= 0.0 or self.omega_max <= 0.0:
            raise ValueError("saturation bounds must be positive")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "K", K)


def output_matrix(theta: float, d: np.ndarray) -> np.ndarray:
    """Map B(theta) from (v, omega) to the velocity of the control point."""
    d = np.asarray(d, dtype=float).reshape(2)
    r = rot2(theta)
    return np.column_stack((r @ np.array([1.0, 0.0]), r @ (S2 @ d)))


def feedback_control(state: UnicycleState, ref_position: np.ndarray,
                     ref_velocity: np.ndarray, params: UnicycleParams) -> UnicycleCommand:
    """Input/output linearizing tracking law for the control point, saturated.

    u = B(theta)^-1 (xdot_F* - K (x_F - x_F*)), then v and omega are clipped
    to the configured bounds independently.
    """
    x_f = state.control_point(params.d)
    err = x_f - np.asarray(ref_position, dtype=float).reshape(2)
    rhs = np.asarray(ref_velocity, dtype=float).reshape(2) - params.K @ err
    u = np.linalg.solve(output_matrix(state.theta, params.d), rhs)
    v = float(np.clip(u[0], -params.v_max, params.v_max))
    omega = float(np.clip(u[1], -params.omega_max, params.omega_max))
    return UnicycleCommand(v=v, omega=omega)


def integrate(state: UnicycleState, command: UnicycleCommand, dt: float) -> UnicycleState:
    """Exact zero-order-hold integration of the unicycle (arc segment).

    For |omega| below a tiny threshold the limit (straight line) is used;
    otherwise the state moves along a circular arc.  The map is exactly
    reversible: integrating (-v, -omega) for the same dt returns the state.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    v, omega = command.v, command.omega
    theta0 = state.theta
    theta1 = theta0 + omega * dt
    if abs(omega) < 1e-12:
        dx = v * dt * np.array([np.cos(theta0), np.sin(theta0)])
    else:
        rho = v / omega
        dx = rho * np.array([np.sin(theta1) - np.sin(theta0),
                             -np.cos(theta1) + np.cos(theta0)])
    return UnicycleState(x=state.x + dx, theta=theta1)


class ReferenceSignal:
    """Time-parameterized reference for the control point F."""

    def position(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def velocity(self, t: float) -> np.ndarray:
        raise NotImplementedError


class ConstantReference(ReferenceSignal):
    """Fixed target point with zero feedforward velocity."""

    def __init__(self, position):
        self._p = np.asarray(position, dtype=float).reshape(2)

    def position(self, t: float) -> np.ndarray:
        return self._p.copy()

    def velocity(self, t: float) -> np.ndarray:
        return np.zeros(2)


class LineReference(ReferenceSignal):
    """Point moving at constant velocity from a start position at t = t0."""

    def __init__(self, start, velocity, t0: float = 0.0, t_stop: float = np.inf):
        self._p0 = np.asarray(start, dtype=float).reshape(2)
        self._v = np.asarray(velocity, dtype=float).reshape(2)
        self._t0 = float(t0)
        self._t_stop = float(t_stop)

    def position(self, t: float) -> np.ndarray:
        tc = min(max(t, self._t0), self._t_stop)
        return self._p0 + self._v * (tc - self._t0)

    def velocity(self, t: float) -> np.ndarray:
        if self._t0 <= t < self._t_stop:
            return self._v.copy()
        return np.zeros(2)


class SampledReference(ReferenceSignal):
    """Reference tabulated on a time grid, linearly interpolated and clamped
    at the ends.  Matches the CSV interface ``t,xf_x,xf_y,vxf_x,vxf_y``."""

    def __init__(self, times, positions, velocities):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        self.velocities = np.asarray(velocities, dtype=float).reshape(-1, 2)
        if len(self.times) < 1:
            raise ValueError("reference needs at least one sample")
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("reference times must be strictly increasing")
        if len(self.times) != len(self.positions) or len(self.times) != len(self.velocities):
            raise ValueError("reference columns must have equal length")

    def position(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.positions[:, i]) for i in range(2)])

    def velocity(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.velocities[:, i]) for i in range(2)])

    @classmethod
    def from_csv(cls, path) -> "SampledReference":
        data = np.genfromtxt(path, delimiter=",", names=True)
        cols = ("t", "xf_x", "xf_y", "vxf_x", "vxf_y")
        names = data.dtype.names or ()
        missing = [c for c in cols if c not in names]
        if missing:
            raise ValueError(f"reference CSV missing columns: {missing}")
        data = np.atleast_1d(data)
        return cls(data["t"],
                   np.column_stack((data["xf_x"], data["xf_y"])),
                   np.column_stack((data["vxf_x"], data["vxf_y"])))

    def to_csv(self, path) -> None:
        rows = np.column_stack((self.times, self.positions, self.velocities))
        header = "t,xf_x,xf_y,vxf_x,vxf_y"
        np.savetxt(path, rows, delimiter=",", header=header, comments="")


@dataclass
class DiscretizedPath:
    """Closed-loop unicycle trajectory sampled on a uniform grid."""

    times: np.ndarray
    xy: np.ndarray
    theta: np.ndarray
    commands: np.ndarray  # (N-1, 2) applied (v, omega) per interval

    def __len__(self) -> int:
        return len(self.times)

    def pose_at_index(self, k: int) -> tuple[np.ndarray, float]:
        return self.xy[k], float(self.theta[k])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0


def simulate_closed_loop(state0: UnicycleState, reference: ReferenceSignal,
                         params: UnicycleParams, horizon: float, dt: float,
                         t0: float = 0.0, max_samples: int = 1_000_000) -> DiscretizedPath:
    """Roll out the saturated tracking loop at a fixed control rate.

    Samples the state at t0 + k dt for k = 0 .. floor(horizon/dt); raises
    ValueError naming the sample budget when the grid would exceed it.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if horizon < 0.0:
        raise ValueError("horizon must be non-negative")
    n = int(np.floor(horizon / dt + 1e-9)) + 1
    if n > max_samples:
        raise ValueError(
            f"horizon/dt needs {n} samples, exceeding the sample budget of {max_samples}")
    times = t0 + dt * np.arange(n)
    xy = np.zeros((n, 2))
    theta = np.zeros(n)
    commands = np.zeros((max(n - 1, 0), 2))
    state = state0
    for k in range(n):
        xy[k] = state.x
        theta[k] = state.theta
        if k == n - 1:
            break
        t = times[k]
        cmd = feedback_control(state, reference.position(t), reference.velocity(t), params)
        commands[k] = (cmd.v, cmd.omega)
        state = integrate(state, cmd, dt)
    return DiscretizedPath(times=times, xy=xy, theta=theta, commands=commands)
