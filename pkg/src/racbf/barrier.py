"""Flow-projected pairwise safety barriers for planar vehicles.

The instantaneous clearance between two disc-footprint agents is pushed
through the zero-input coasting flow over a horizon [0, T]: the barrier is
the (soft) minimum of the projected clearance over a regular grid of
projection times, minus the required standoff d_bar.  Coasting both
agents forward makes the barrier sensitive to speed and heading, so it has
relative degree 1 in both acceleration and yaw rate, and a smooth soft
minimum keeps it differentiable for gradient-based filters and learning.

The global scene barrier is the hard minimum of the pairwise values; the
safety filter enforces the condition pair by pair, so the global value is
only used for reporting and never differentiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import AgentState

_TAU_CACHE: dict = {}


@dataclass(frozen=True)
class BarrierConfig:
    """Barrier hyperparameters.

    d_bar: required minimum clearance between footprints (m).
    horizon: projection horizon T (s).
    flow_dt: spacing of the projection-time grid (s); 0.01 gives the
        100 Hz grid used throughout.
    rho: soft-min temperature (1/m); the soft minimum under-shoots the
        hard minimum by at most ln(K)/rho for K grid points.
    radius: disc footprint radius applied to every agent (m).
    alpha_slope: slope of the linear extended class-K function
        alpha(h) = alpha_slope * h (1/s).
    """

    d_bar: float = 0.4
    horizon: float = 1.0
    flow_dt: float = 0.01
    rho: float = 20.0
    radius: float = 1.0
    alpha_slope: float = 0.5

    def __post_init__(self):
        if not (self.d_bar > 0):
            raise ValueError("d_bar must be positive")
        if not (self.horizon > 0):
            raise ValueError("horizon must be positive")
        if not (0 < self.flow_dt <= self.horizon):
            raise ValueError("flow_dt must lie in (0, horizon]")
        if not (self.rho > 0):
            raise ValueError("rho must be positive")
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        if not (self.alpha_slope > 0):
            raise ValueError("alpha_slope must be positive")

    def taus(self) -> np.ndarray:
        """Projection-time grid {0, flow_dt, ..., horizon} (cached)."""
        key = (self.horizon, self.flow_dt)
        grid = _TAU_CACHE.get(key)
        if grid is None:
            n = int(round(self.horizon / self.flow_dt))
            grid = np.linspace(0.0, n * self.flow_dt, n + 1)
            _TAU_CACHE[key] = grid
        return grid

    def alpha(self, h: float) -> float:
        """Linear extended class-K function, defined for all real h."""
        return self.alpha_slope * h


@dataclass(frozen=True)
class BarrierEval:
    """Barrier value with gradients and Lie derivatives for one agent pair.

    grad_i/grad_j are d(value)/d(state) in (x, y, v, theta) order.  For the
    unicycle actuation matrix, lg_i is just (grad_i[2], grad_i[3]): the
    input enters only through vdot and thetadot.
    """

    value: float
    grad_i: np.ndarray
    grad_j: np.ndarray
    lf: float
    lg_i: np.ndarray
    lg_j: np.ndarray


def pairwise_distance(si: AgentState, sj: AgentState, ri: float, rj: float) -> float:
    """Center distance minus combined footprint radii; negative means overlap."""
    if ri < 0 or rj < 0:
        raise ValueError("footprint radii must be nonnegative")
    return math.hypot(si.x - sj.x, si.y - sj.y) - (ri + rj)


def softmin(values, rho: float) -> float:
    """Smooth minimum -(1/rho) * log sum_k exp(-rho * v_k).

    Lies within [min - ln(K)/rho, min].  Evaluated in shifted form so large
    rho or widely spread values do not overflow.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        raise ValueError("softmin of an empty collection")
    m = vals.min()
    return float(m - math.log(np.exp(-rho * (vals - m)).sum()) / rho)


def _flow_clearances(si: AgentState, sj: AgentState, cfg: BarrierConfig, taus: np.ndarray):
    """Projected clearance d(tau) over the grid plus the geometry needed for grads."""
    ci, si_ = math.cos(si.theta), math.sin(si.theta)
    cj, sj_ = math.cos(sj.theta), math.sin(sj.theta)
    # coasting positions: p(tau) = p + v*tau*heading
    dx = (si.x - sj.x) + taus * (si.v * ci - sj.v * cj)
    dy = (si.y - sj.y) + taus * (si.v * si_ - sj.v * sj_)
    dist = np.hypot(dx, dy)
    clearance = dist - 2.0 * cfg.radius
    return clearance, dx, dy, dist, (ci, si_, cj, sj_)


def barrier_value(si: AgentState, sj: AgentState, cfg: BarrierConfig) -> float:
    """Soft minimum of the projected clearance over the grid, minus d_bar."""
    taus = cfg.taus()
    clearance, *_ = _flow_clearances(si, sj, cfg, taus)
    return softmin(clearance, cfg.rho) - cfg.d_bar


def barrier_eval(si: AgentState, sj: AgentState, cfg: BarrierConfig) -> BarrierEval:
    """Barrier value plus analytic gradients and Lie derivatives.

    Gradients chain the soft-min weights through the clearance direction and
    the closed-form jacobian of the coasting flow.  Coincident projected
    centers make the clearance direction undefined; those grid points get a
    zero direction, which matches the (subgradient) convention used by the
    tests and only occurs for already-colliding geometry.
    """
    taus = cfg.taus()
    clearance, dx, dy, dist, trig = _flow_clearances(si, sj, cfg, taus)
    ci, si_, cj, sj_ = trig

    m = clearance.min()
    w = np.exp(-cfg.rho * (clearance - m))
    w_sum = w.sum()
    value = float(m - math.log(w_sum) / cfg.rho) - cfg.d_bar
    w /= w_sum  # soft-min weights, sum to 1

    safe = np.where(dist > 1e-12, dist, 1.0)
    ux = np.where(dist > 1e-12, dx / safe, 0.0)
    uy = np.where(dist > 1e-12, dy / safe, 0.0)

    # d clearance/d state_i = (ux, uy, tau*(u . e_i), v_i*tau*(u x e_i-ish));
    # the v and theta columns come from the coasting-flow jacobian.
    along_i = ux * ci + uy * si_
    turn_i = -ux * si_ + uy * ci
    along_j = ux * cj + uy * sj_
    turn_j = -ux * sj_ + uy * cj

    grad_i = np.array(
        [
            float(w @ ux),
            float(w @ uy),
            float(w @ (taus * along_i)),
            si.v * float(w @ (taus * turn_i)),
        ]
    )
    grad_j = np.array(
        [
            -float(w @ ux),
            -float(w @ uy),
            -float(w @ (taus * along_j)),
            -sj.v * float(w @ (taus * turn_j)),
        ]
    )

    lf = grad_i[0] * si.v * ci + grad_i[1] * si.v * si_ + grad_j[0] * sj.v * cj + grad_j[1] * sj.v * sj_
    return BarrierEval(
        value=value,
        grad_i=grad_i,
        grad_j=grad_j,
        lf=float(lf),
        lg_i=grad_i[2:4].copy(),
        lg_j=grad_j[2:4].copy(),
    )


def global_barrier(scene, cfg: BarrierConfig) -> float:
    """Hard minimum of the pairwise barrier over all unordered agent pairs."""
    n = len(scene)
    if n < 2:
        raise ValueError(f"global barrier needs at least 2 agents, got {n}")
    best = math.inf
    for i in range(n):
        for j in range(i + 1, n):
            best = min(best, barrier_value(scene[i], scene[j], cfg))
    return best
