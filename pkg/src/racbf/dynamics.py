"""Planar unicycle dynamics with acceleration and yaw-rate inputs.

State: x = [x, y, v, theta], control: u = [a, omega].  The system is
control-affine,

    xdot = f(x) + g(x) u,   f(x) = [v*cos(theta), v*sin(theta), 0, 0],
                            g(x) = [[0, 0], [0, 0], [1, 0], [0, 1]],

so the drift carries the kinematics and the input directly drives v and
theta.  The zero-input ("idle") flow is available in closed form together
with its state jacobian, which downstream barrier code chains through for
analytic gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return -((-theta + math.pi) % TWO_PI - math.pi)


@dataclass(frozen=True)
class AgentState:
    """Planar vehicle state: position (m), forward speed (m/s), yaw (rad)."""

    x: float
    y: float
    v: float
    theta: float

    def __post_init__(self):
        vals = (self.x, self.y, self.v, self.theta)
        if not all(math.isfinite(f) for f in vals):
            raise ValueError(f"non-finite agent state {vals}")
        # keep the heading invariant at construction so heading differences
        # are always well defined
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.theta])

    @staticmethod
    def from_array(arr) -> "AgentState":
        return AgentState(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(frozen=True)
class ControlInput:
    """Acceleration (m/s^2) and yaw rate (rad/s)."""

    a: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.omega])

    @staticmethod
    def from_array(arr) -> "ControlInput":
        return ControlInput(float(arr[0]), float(arr[1]))


ZERO_INPUT = ControlInput(0.0, 0.0)


@dataclass(frozen=True)
class InputBounds:
    """Symmetric box of admissible inputs: |a| <= a_max, |omega| <= omega_max."""

    a_max: float = 4.0
    omega_max: float = 1.0

    def __post_init__(self):
        if not (self.a_max > 0 and self.omega_max > 0):
            raise ValueError("input bounds must be strictly positive")

    def clip(self, u: ControlInput) -> ControlInput:
        return ControlInput(
            min(max(u.a, -self.a_max), self.a_max),
            min(max(u.omega, -self.omega_max), self.omega_max),
        )

    def contains(self, u: ControlInput, tol: float = 1e-9) -> bool:
        return abs(u.a) <= self.a_max + tol and abs(u.omega) <= self.omega_max + tol


@dataclass(frozen=True)
class InputGrid:
    """Regular discretization of an input box at spacing (delta_a, delta_omega).

    Points lie on multiples of the spacing, clipped to the box, and always
    include the axis extremes so the box is covered end to end.
    """

    delta_a: float
    delta_omega: float
    points: np.ndarray  # (K, 2), columns [a, omega]

    @staticmethod
    def from_bounds(
        bounds: InputBounds, delta_a: float = 0.25, delta_omega: float = 0.1
    ) -> "InputGrid":
        if delta_a <= 0 or delta_omega <= 0:
            raise ValueError("grid spacing must be positive")
        a_vals = np.arange(-bounds.a_max, bounds.a_max + 1e-12, delta_a)
        w_vals = np.arange(-bounds.omega_max, bounds.omega_max + 1e-12, delta_omega)
        aa, ww = np.meshgrid(a_vals, w_vals, indexing="ij")
        pts = np.column_stack([aa.ravel(), ww.ravel()])
        return InputGrid(delta_a, delta_omega, pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def unicycle_deriv(state: AgentState, u: ControlInput) -> np.ndarray:
    """Time derivative [xdot, ydot, vdot, thetadot] = f(x) + g(x) u."""
    return np.array(
        [
            state.v * math.cos(state.theta),
            state.v * math.sin(state.theta),
            u.a,
            u.omega,
        ]
    )


def _deriv_scalars(x, y, v, theta, a, omega):
    return (v * math.cos(theta), v * math.sin(theta), a, omega)


def step_rk4(state: AgentState, u: ControlInput, dt: float) -> AgentState:
    """Classical RK4 step with the input held constant over dt."""
    if not (dt > 0):
        raise ValueError(f"dt must be positive, got {dt}")
    if not all(math.isfinite(f) for f in (u.a, u.omega)):
        raise ValueError(f"non-finite input ({u.a}, {u.omega})")
    x, y, v, th = state.x, state.y, state.v, state.theta
    a, w = u.a, u.omega

    k1 = _deriv_scalars(x, y, v, th, a, w)
    k2 = _deriv_scalars(
        x + 0.5 * dt * k1[0], y + 0.5 * dt * k1[1], v + 0.5 * dt * k1[2], th + 0.5 * dt * k1[3], a, w
    )
    k3 = _deriv_scalars(
        x + 0.5 * dt * k2[0], y + 0.5 * dt * k2[1], v + 0.5 * dt * k2[2], th + 0.5 * dt * k2[3], a, w
    )
    k4 = _deriv_scalars(
        x + dt * k3[0], y + dt * k3[1], v + dt * k3[2], th + dt * k3[3], a, w
    )
    sixth = dt / 6.0
    return AgentState(
        x + sixth * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        y + sixth * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        v + sixth * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
        wrap_angle(th + sixth * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])),
    )


def idle_flow(state: AgentState, tau: float) -> AgentState:
    """Zero-input flow for time tau: straight-line coasting at constant v, theta.

    Exact closed-form solution, so no integration error enters the barrier.
    """
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    return AgentState(
        state.x + state.v * tau * math.cos(state.theta),
        state.y + state.v * tau * math.sin(state.theta),
        state.v,
        state.theta,
    )


def idle_flow_jacobian(state: AgentState, tau: float) -> np.ndarray:
    """Jacobian of idle_flow w.r.t. the state, rows/cols ordered (x, y, v, theta)."""
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    c, s = math.cos(state.theta), math.sin(state.theta)
    v = state.v
    return np.array(
        [
            [1.0, 0.0, tau * c, -v * tau * s],
            [0.0, 1.0, tau * s, v * tau * c],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
