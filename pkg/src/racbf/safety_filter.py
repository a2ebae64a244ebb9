"""Minimal-deviation input filtering under pairwise safety constraints.

Given a desired input for one agent, the filter solves

    min  |u - u_des|^2 + slack_weight * sum_j s_j^2
    s.t. margin_j(u) + s_j >= 0   for every other agent j,
         u in the input box,  s_j >= 0,

where margin_j is the constraint of the selected mode:

    "learned": c_i(x, u) - gamma(i, x)   with gamma from a trained model,
    "even":    c_i(x, u)                 (gamma identically zero),
    "worst":   lf + alpha(h) + lg_i.u + inf over the other agent's box.

Quadratic slack keeps the program strictly convex and feasible for any
geometry while staying at zero whenever the hard constraints can be met.
Each agent filters only its own input; nothing here couples the agents'
programs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .barrier import BarrierConfig, barrier_eval
from .dynamics import AgentState, ControlInput, InputBounds, InputGrid
from .qp import QPInfeasibleError, QPProblem, solve_qp
from .responsibility import gamma_eval

MODES = ("learned", "even", "worst")


@dataclass(frozen=True)
class FilterResult:
    input: ControlInput
    slack: np.ndarray  # one entry per pairwise constraint, ordered by other-agent index
    active_set: tuple  # stacked QP row indices tight at the optimum
    objective_value: float  # |u - u_des|^2 + slack_weight * sum s^2


def _pair_eval(scene, ego: int, other: int, cfg: BarrierConfig, evals):
    """Barrier eval for (ego, other) plus which side the ego occupies."""
    if evals is not None:
        if (ego, other) in evals:
            return evals[(ego, other)], "i"
        if (other, ego) in evals:
            return evals[(other, ego)], "j"
    return barrier_eval(scene[ego], scene[other], cfg), "i"


def constraint_rows(
    scene,
    ego: int,
    mode: str,
    model,
    cfg: BarrierConfig,
    bounds: InputBounds,
    evals=None,
):
    """Linear constraint data for the ego agent: rows R, rhs b with R u >= b.

    Row p corresponds to the p-th other agent in index order; the mode's
    margin at input u is exactly R u - b.
    """
    if mode not in MODES:
        raise ValueError(f"unknown filter mode {mode!r}; expected one of {MODES}")
    if len(scene) < 2:
        raise ValueError(f"pairwise constraints need at least 2 agents, got {len(scene)}")
    if not 0 <= ego < len(scene):
        raise IndexError(f"ego index {ego} out of range for {len(scene)} agents")
    rows, rhs = [], []
    for other in range(len(scene)):
        if other == ego:
            continue
        ev, side = _pair_eval(scene, ego, other, cfg, evals)
        lg_ego = ev.lg_i if side == "i" else ev.lg_j
        lg_other = ev.lg_j if side == "i" else ev.lg_i
        ah = cfg.alpha(ev.value)
        if mode == "worst":
            robust = abs(lg_other[0]) * bounds.a_max + abs(lg_other[1]) * bounds.omega_max
            b = robust - ev.lf - ah
        else:
            gamma = 0.0
            if mode == "learned":
                gamma = gamma_eval(model, scene[ego], scene[other])
            b = gamma - 0.5 * (ah + ev.lf)
        rows.append(lg_ego)
        rhs.append(b)
    return np.array(rows).reshape(-1, 2), np.array(rhs)


def mode_margins(
    scene,
    ego: int,
    u: ControlInput,
    mode: str,
    model,
    cfg: BarrierConfig,
    bounds: InputBounds,
    evals=None,
) -> np.ndarray:
    """Per-pair margin of the mode's constraint at a given input."""
    rows, rhs = constraint_rows(scene, ego, mode, model, cfg, bounds, evals)
    return rows @ u.as_array() - rhs


def safety_filter(
    scene,
    ego: int,
    u_des: ControlInput,
    mode: str,
    model,
    cfg: BarrierConfig,
    bounds: InputBounds,
    slack_weight: float = 1e4,
    evals=None,
) -> FilterResult:
    """Minimally modify u_des so every pairwise constraint holds (up to slack).

    Solved hierarchically: the hard problem first, and only if the
    constraints conflict with the input box is the slack-penalized program
    solved instead.  A pure quadratic penalty would leave slack slightly
    positive whenever a constraint is merely active, so this is what makes
    "slack is zero whenever the hard problem is feasible" hold exactly.
    """
    rows, rhs = constraint_rows(scene, ego, mode, model, cfg, bounds, evals)
    n_pairs = rows.shape[0]

    box_lb = np.array([-bounds.a_max, -bounds.omega_max])
    box_ub = np.array([bounds.a_max, bounds.omega_max])
    u0 = np.clip([u_des.a, u_des.omega], box_lb, box_ub)
    f_u = np.array([-2.0 * u_des.a, -2.0 * u_des.omega])

    try:
        hard = QPProblem(
            np.diag([2.0, 2.0]), f_u, rows, rhs,
            lb=box_lb, ub=box_ub, slack_weight=slack_weight,
        )
        x0 = u0 if n_pairs == 0 or (rows @ u0 - rhs).min() >= 0.0 else None
        sol = solve_qp(hard, x0=x0)
        u = ControlInput(float(sol.z[0]), float(sol.z[1]))
        dev = (u.a - u_des.a) ** 2 + (u.omega - u_des.omega) ** 2
        return FilterResult(
            input=u,
            slack=np.zeros(n_pairs),
            active_set=sol.active,
            objective_value=float(dev),
        )
    except QPInfeasibleError:
        pass

    # relaxed program over (u, s): quadratic slack penalty keeps it strictly
    # convex and the violation as small as the box allows
    n = 2 + n_pairs
    H = np.diag([2.0, 2.0] + [2.0 * slack_weight] * n_pairs)
    f = np.concatenate([f_u, np.zeros(n_pairs)])
    A = np.zeros((n_pairs, n))
    A[:, :2] = rows
    A[:, 2:] = np.eye(n_pairs)
    lb = np.concatenate([box_lb, np.zeros(n_pairs)])
    ub = np.concatenate([box_ub, np.full(n_pairs, np.inf)])
    s0 = np.maximum(0.0, rhs - rows @ u0)
    x0 = np.concatenate([u0, s0])

    sol = solve_qp(QPProblem(H, f, A, rhs, lb=lb, ub=ub, slack_weight=slack_weight), x0=x0)
    u = ControlInput(float(sol.z[0]), float(sol.z[1]))
    slack = np.maximum(sol.z[2:], 0.0)
    dev = (u.a - u_des.a) ** 2 + (u.omega - u_des.omega) ** 2
    return FilterResult(
        input=u,
        slack=slack,
        active_set=sol.active,
        objective_value=float(dev + slack_weight * float(slack @ slack)),
    )


def brute_force_filter(
    scene,
    ego: int,
    u_des: ControlInput,
    mode: str,
    model,
    cfg: BarrierConfig,
    grid: InputGrid,
    bounds: InputBounds,
    evals=None,
) -> ControlInput:
    """Grid-search oracle for the slack-free filter.

    Picks the feasible grid point closest to u_des; if no grid point is
    feasible, falls back to the point with the largest worst margin.  Ties
    resolve to the lowest grid index for determinism.
    """
    if len(grid) == 0:
        raise ValueError("empty input grid")
    rows, rhs = constraint_rows(scene, ego, mode, model, cfg, bounds, evals)
    pts = grid.points
    margins = pts @ rows.T - rhs  # (K, P)
    worst = margins.min(axis=1)
    des = u_des.as_array()
    cost = ((pts - des) ** 2).sum(axis=1)
    feasible = worst >= -1e-12
    if feasible.any():
        masked = np.where(feasible, cost, np.inf)
        k = int(np.argmin(masked))
    else:
        k = int(np.argmax(worst))
    return ControlInput(float(pts[k, 0]), float(pts[k, 1]))
