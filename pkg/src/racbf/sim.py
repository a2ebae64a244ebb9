"""Seeded traffic scenarios, scripted controllers, and the filtered closed loop.

Scenario kinds mirror the geometries the barrier and responsibility code
care about: same-lane following, perpendicular intersection crossing, a
shallow-angle merge, and free-space encounters.  Nominal behavior is a
scripted lane-keeping / speed-tracking law (optionally made irresponsible
with a constant acceleration bias, or adversarial by homing on another
agent); safety comes only from the per-agent filter.

The outer loop runs at a fixed step with zero-order hold of the filtered
input, integrates every agent with RK4, and logs states, inputs, barrier
values, responsibilities, margins, and slack on a uniform grid (one record
per step including the initial and final states).
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .barrier import BarrierConfig, barrier_eval
from .dynamics import AgentState, ControlInput, InputBounds, step_rk4, wrap_angle
from .responsibility import gamma_eval
from .safety_filter import constraint_rows, safety_filter

EPS0 = 0.05  # required initial clearance of the global barrier (m)

SCENARIO_KINDS = ("car_follow", "intersection", "merge", "random")


class ScenarioError(RuntimeError):
    pass


class SimulationError(RuntimeError):
    def __init__(self, msg, log=None):
        super().__init__(msg)
        self.log = log


@dataclass(frozen=True)
class LaneSegment:
    """Polyline centerline with a constant-width corridor."""

    centerline: np.ndarray  # (M, 2)
    width: float

    def __post_init__(self):
        cl = np.asarray(self.centerline, dtype=float)
        if cl.ndim != 2 or cl.shape[0] < 2 or cl.shape[1] != 2:
            raise ValueError("centerline must be an (M>=2, 2) array")
        if self.width <= 0:
            raise ValueError("lane width must be positive")
        object.__setattr__(self, "centerline", cl)

    def project(self, x: float, y: float):
        """Nearest-point data: (arc length, signed lateral offset, local heading).

        Lateral is positive to the left of the travel direction.
        """
        p = np.array([x, y])
        best = None
        s_base = 0.0
        for a, b in zip(self.centerline[:-1], self.centerline[1:]):
            d = b - a
            seg_len = float(np.hypot(d[0], d[1]))
            if seg_len < 1e-12:
                continue
            u = d / seg_len
            t = float(np.clip((p - a) @ u, 0.0, seg_len))
            q = a + t * u
            vec = p - q
            d2 = float(vec @ vec)
            if best is None or d2 < best[0] - 1e-15:
                lateral = float(u[0] * vec[1] - u[1] * vec[0])
                best = (d2, s_base + t, lateral, math.atan2(u[1], u[0]))
            s_base += seg_len
        return best[1], best[2], best[3]

    def distance_to(self, x: float, y: float) -> float:
        p = np.array([x, y])
        dmin = math.inf
        for a, b in zip(self.centerline[:-1], self.centerline[1:]):
            d = b - a
            seg_len2 = float(d @ d)
            if seg_len2 < 1e-18:
                continue
            t = float(np.clip((p - a) @ d / seg_len2, 0.0, 1.0))
            q = a + t * d
            dmin = min(dmin, float(np.hypot(*(p - q))))
        return dmin

    def contains(self, x: float, y: float) -> bool:
        return self.distance_to(x, y) <= 0.5 * self.width


@dataclass
class TrackingProfile:
    """Scripted nominal: follow a lane at a target speed, with optional events.

    brake_time switches the target speed to v_brake from that time on.
    chase, when set, ignores the lane and homes on another agent instead
    (used to script adversarial behavior).
    """

    lane: LaneSegment
    v_target: float
    brake_time: float | None = None
    v_brake: float = 0.0
    chase: int | None = None

    def target_speed(self, t: float) -> float:
        if self.brake_time is not None and t >= self.brake_time:
            return self.v_brake
        return self.v_target


@dataclass
class AgentPolicy:
    """Controller assignment for one agent in the closed loop."""

    profile: TrackingProfile
    filtered: bool = False
    accel_bias: float = 0.0


@dataclass(frozen=True)
class Scenario:
    kind: str
    scene: tuple  # initial AgentStates
    lanes: tuple  # LaneSegments (one per agent, in agent order)
    profiles: tuple  # TrackingProfiles, one per agent
    horizon: float
    dt: float
    seed: int


@dataclass
class TrajectoryLog:
    """Uniform-grid record of one rollout; horizon/dt + 1 rows."""

    t: np.ndarray  # (S,)
    states: np.ndarray  # (S, N, 4)
    u_des: np.ndarray  # (S, N, 2)
    u_app: np.ndarray  # (S, N, 2)
    pair_h: np.ndarray  # (S, P)
    pairs: tuple  # P ordered (i, j) with i < j
    gamma: np.ndarray  # (S, N), gamma of each agent's tightest pair
    margin: np.ndarray  # (S, N), min mode margin at the applied input
    slack: np.ndarray  # (S, N), largest filter slack (0 if unfiltered)
    mode: str
    scenario: Scenario

    @property
    def n_agents(self) -> int:
        return self.states.shape[1]

    def min_global_barrier(self) -> float:
        if self.pair_h.size == 0:
            return math.inf
        return float(self.pair_h.min())


@dataclass
class Metrics:
    constraint_violation_rate: float
    safety_violation_rate: float
    offroad_time_fraction: float
    distance_covered: float


def nominal_input(
    scene,
    idx: int,
    t: float,
    profile: TrackingProfile,
    bounds: InputBounds,
    k_speed: float = 1.5,
    k_heading: float = 2.5,
    k_lateral: float = 0.4,
) -> ControlInput:
    """Lane-keeping + speed-tracking law, or target homing in chase mode."""
    s = scene[idx]
    if profile.chase is not None:
        target = scene[profile.chase]
        bearing = math.atan2(target.y - s.y, target.x - s.x)
        omega = k_heading * wrap_angle(bearing - s.theta)
        accel = k_speed * (profile.target_speed(t) - s.v)
    else:
        _, lateral, lane_heading = profile.lane.project(s.x, s.y)
        heading_err = wrap_angle(s.theta - lane_heading)
        omega = -k_heading * heading_err - k_lateral * lateral
        accel = k_speed * (profile.target_speed(t) - s.v)
    return bounds.clip(ControlInput(accel, omega))


def expert_controller(
    scene,
    agent: int,
    gamma_star,
    profile: TrackingProfile,
    cfg: BarrierConfig,
    bounds: InputBounds,
    t: float = 0.0,
    evals=None,
):
    """Nominal tracking input passed through the filter under a known allocation."""
    u_nom = nominal_input(scene, agent, t, profile, bounds)
    return safety_filter(scene, agent, u_nom, "learned", gamma_star, cfg, bounds, evals=evals)


def _lane_along(p, heading, back: float = 60.0, ahead: float = 400.0, width: float = 3.7):
    d = np.array([math.cos(heading), math.sin(heading)])
    p = np.asarray(p, dtype=float)
    return LaneSegment(np.vstack([p - back * d, p + ahead * d]), width)


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    if lo > hi:
        raise ScenarioError(f"invalid range ({lo}, {hi})")
    return float(rng.uniform(lo, hi))


def build_scenario(
    kind: str,
    params: dict | None = None,
    seed: int = 0,
    horizon: float = 10.0,
    dt: float = 0.1,
    cfg: BarrierConfig | None = None,
) -> Scenario:
    """Deterministic scenario construction with an initial-clearance gate.

    Initial states are rejection-sampled until the global barrier is at
    least EPS0.  Supported params (all optional, shown with defaults):

    car_follow:   gap_range (8, 18), v_trail_range (4, 7), v_lead_range (3, 6),
                  pursuit (1.0, trailing target speed excess over its start),
                  brake_prob (0.6), brake_time_range (1, 3), brake_drop_range (0.5, 1.5)
    intersection: approach_range (10, 22), v_range (3, 6), timing_jitter (0.5)
    merge:        approach_range (12, 25), v_range (4, 7)
    random:       n_agents (2), radius (18), v_range (1, 6), aim (True)
    """
    if kind not in SCENARIO_KINDS:
        raise ScenarioError(f"unknown scenario kind {kind!r}; valid kinds: {', '.join(SCENARIO_KINDS)}")
    cfg = cfg or BarrierConfig()
    params = dict(params or {})
    unknown = set(params) - _PARAM_KEYS[kind]
    if unknown:
        raise ScenarioError(
            f"unknown parameter(s) for {kind}: {', '.join(sorted(unknown))}; "
            f"valid: {', '.join(sorted(_PARAM_KEYS[kind]))}"
        )
    from .barrier import global_barrier

    for attempt in range(200):
        rng = np.random.default_rng((seed, attempt))
        scene, lanes, profiles = _build_once(kind, params, rng)
        if global_barrier(scene, cfg) >= EPS0:
            return Scenario(
                kind=kind,
                scene=tuple(scene),
                lanes=tuple(lanes),
                profiles=tuple(profiles),
                horizon=horizon,
                dt=dt,
                seed=seed,
            )
    raise ScenarioError(
        f"could not sample a {kind} scenario with initial clearance >= {EPS0} "
        f"(seed {seed}); loosen the geometry parameters"
    )


_PARAM_KEYS = {
    "car_follow": {
        "gap_range", "v_trail_range", "v_lead_range", "pursuit",
        "brake_prob", "brake_time_range", "brake_drop_range",
    },
    "intersection": {"approach_range", "v_range", "timing_jitter"},
    "merge": {"approach_range", "v_range"},
    "random": {"n_agents", "radius", "v_range", "aim"},
}


def _build_once(kind, params, rng):
    if kind == "car_follow":
        gap = _uniform(rng, params.get("gap_range", (8.0, 18.0)))
        v_trail = _uniform(rng, params.get("v_trail_range", (4.0, 7.0)))
        v_lead = _uniform(rng, params.get("v_lead_range", (3.0, 6.0)))
        lane = LaneSegment(np.array([[-60.0, 0.0], [400.0, 0.0]]), 3.7)
        scene = [AgentState(0.0, 0.0, v_trail, 0.0), AgentState(gap, 0.0, v_lead, 0.0)]
        lanes = [lane, lane]
        trail = TrackingProfile(lane=lane, v_target=v_trail + float(params.get("pursuit", 1.0)))
        lead = TrackingProfile(lane=lane, v_target=v_lead)
        if rng.uniform() < float(params.get("brake_prob", 0.6)):
            lead.brake_time = _uniform(rng, params.get("brake_time_range", (1.0, 3.0)))
            lead.v_brake = max(0.0, v_lead - _uniform(rng, params.get("brake_drop_range", (0.5, 1.5))))
        return scene, lanes, [trail, lead]

    if kind == "intersection":
        v0 = _uniform(rng, params.get("v_range", (3.0, 6.0)))
        v1 = _uniform(rng, params.get("v_range", (3.0, 6.0)))
        d0 = _uniform(rng, params.get("approach_range", (10.0, 22.0)))
        jitter = float(params.get("timing_jitter", 0.5))
        d1 = max(6.0, v1 * (d0 / v0 + rng.uniform(-jitter, jitter)))
        lane_x = LaneSegment(np.array([[-80.0, 0.0], [400.0, 0.0]]), 3.7)
        lane_y = LaneSegment(np.array([[0.0, -80.0], [0.0, 400.0]]), 3.7)
        scene = [AgentState(-d0, 0.0, v0, 0.0), AgentState(0.0, -d1, v1, math.pi / 2)]
        profiles = [
            TrackingProfile(lane=lane_x, v_target=v0),
            TrackingProfile(lane=lane_y, v_target=v1),
        ]
        return scene, [lane_x, lane_y], profiles

    if kind == "merge":
        v0 = _uniform(rng, params.get("v_range", (4.0, 7.0)))
        v1 = _uniform(rng, params.get("v_range", (4.0, 7.0)))
        a0 = _uniform(rng, params.get("approach_range", (12.0, 25.0)))
        a1 = _uniform(rng, params.get("approach_range", (12.0, 25.0)))
        main = LaneSegment(np.array([[-80.0, 0.0], [400.0, 0.0]]), 3.7)
        ramp = LaneSegment(np.array([[-48.0, -12.0], [0.0, 0.0], [400.0, 0.0]]), 3.7)
        ramp_heading = math.atan2(12.0, 48.0)
        rd = np.array([math.cos(ramp_heading), math.sin(ramp_heading)])
        ramp_pos = np.array([0.0, 0.0]) - a1 * rd
        scene = [
            AgentState(-a0, 0.0, v0, 0.0),
            AgentState(float(ramp_pos[0]), float(ramp_pos[1]), v1, ramp_heading),
        ]
        profiles = [
            TrackingProfile(lane=main, v_target=v0),
            TrackingProfile(lane=ramp, v_target=v1),
        ]
        return scene, [main, ramp], profiles

    # free-space encounters, optionally aimed at the scene center so the
    # agents actually interact
    n = int(params.get("n_agents", 2))
    if not 2 <= n <= 6:
        raise ScenarioError("random scenarios support 2..6 agents")
    radius = float(params.get("radius", 18.0))
    aim = bool(params.get("aim", True))
    scene, lanes, profiles = [], [], []
    for _ in range(n):
        ang = rng.uniform(-math.pi, math.pi)
        r = radius * math.sqrt(rng.uniform(0.3, 1.0))
        px, py = r * math.cos(ang), r * math.sin(ang)
        if aim:
            heading = wrap_angle(math.atan2(-py, -px) + rng.uniform(-0.4, 0.4))
        else:
            heading = rng.uniform(-math.pi, math.pi)
        v = _uniform(rng, params.get("v_range", (1.0, 6.0)))
        state = AgentState(px, py, v, heading)
        scene.append(state)
        lane = _lane_along((px, py), heading)
        lanes.append(lane)
        profiles.append(TrackingProfile(lane=lane, v_target=v))
    return scene, lanes, profiles


def default_policies(
    scenario: Scenario,
    filtered: str = "ego",
    accel_bias: float = 1.0,
) -> list:
    """Standard controller assignments.

    filtered = "ego": only agent 0 is filtered and gets the irresponsible
    acceleration bias; "all": every agent filtered (no bias); "none": nobody
    filtered (useful for generating crashes to analyze).
    """
    if filtered not in ("ego", "all", "none"):
        raise ValueError(f"filtered must be ego|all|none, got {filtered!r}")
    policies = []
    for idx, prof in enumerate(scenario.profiles):
        if filtered == "all":
            policies.append(AgentPolicy(profile=prof, filtered=True))
        elif filtered == "ego" and idx == 0:
            policies.append(AgentPolicy(profile=prof, filtered=True, accel_bias=accel_bias))
        else:
            policies.append(AgentPolicy(profile=prof, filtered=False))
    return policies


def run_closed_loop(
    scenario: Scenario,
    policies,
    mode: str,
    model,
    cfg: BarrierConfig,
    bounds: InputBounds,
) -> TrajectoryLog:
    """Roll the scenario forward under the assigned controllers.

    Filtered agents pass their (optionally biased) nominal through the
    mode's safety filter each step; everyone is integrated with RK4 under
    zero-order hold.  Raises SimulationError (carrying the partial log) if
    a state goes non-finite.
    """
    n = len(scenario.scene)
    if len(policies) != n:
        raise ValueError(f"{n} agents but {len(policies)} policies")
    steps = int(round(scenario.horizon / scenario.dt))
    S = steps + 1
    pairs = tuple((i, j) for i in range(n) for j in range(i + 1, n))

    t_grid = np.arange(S) * scenario.dt
    states = np.zeros((S, n, 4))
    u_des_log = np.zeros((S, n, 2))
    u_app_log = np.zeros((S, n, 2))
    pair_h = np.zeros((S, len(pairs)))
    gamma_log = np.zeros((S, n))
    margin_log = np.zeros((S, n))
    slack_log = np.zeros((S, n))

    scene = list(scenario.scene)
    for k in range(S):
        t = float(t_grid[k])
        evals = {(i, j): barrier_eval(scene[i], scene[j], cfg) for i, j in pairs}
        for p, (i, j) in enumerate(pairs):
            pair_h[k, p] = evals[(i, j)].value

        applied = []
        for idx, pol in enumerate(policies):
            u_nom = nominal_input(scene, idx, t, pol.profile, bounds)
            u_des = ControlInput(u_nom.a + pol.accel_bias, u_nom.omega)
            u_des_log[k, idx] = (u_des.a, u_des.omega)
            if pol.filtered:
                res = safety_filter(scene, idx, u_des, mode, model, cfg, bounds, evals=evals)
                u_app = res.input
                slack_log[k, idx] = res.slack.max(initial=0.0)
            else:
                u_app = bounds.clip(u_des)
            applied.append(u_app)
            u_app_log[k, idx] = (u_app.a, u_app.omega)

            if n >= 2:
                rows, rhs = constraint_rows(scene, idx, mode, model, cfg, bounds, evals=evals)
                margins = rows @ u_app.as_array() - rhs
                p_star = int(np.argmin(margins))
                margin_log[k, idx] = margins[p_star]
                if mode == "learned":
                    others = [o for o in range(n) if o != idx]
                    gamma_log[k, idx] = gamma_eval(model, scene[idx], scene[others[p_star]])

        for idx, s in enumerate(scene):
            states[k, idx] = (s.x, s.y, s.v, s.theta)

        if not np.all(np.isfinite(states[k])):
            raise SimulationError(
                f"non-finite state at t={t:.3f}",
                log=_partial_log(t_grid, states, u_des_log, u_app_log, pair_h, pairs,
                                 gamma_log, margin_log, slack_log, mode, scenario, k + 1),
            )

        if k < steps:
            scene = [step_rk4(scene[idx], applied[idx], scenario.dt) for idx in range(n)]

    return TrajectoryLog(
        t=t_grid,
        states=states,
        u_des=u_des_log,
        u_app=u_app_log,
        pair_h=pair_h,
        pairs=pairs,
        gamma=gamma_log,
        margin=margin_log,
        slack=slack_log,
        mode=mode,
        scenario=scenario,
    )


def _partial_log(t, states, u_des, u_app, pair_h, pairs, gamma, margin, slack, mode, scenario, k):
    return TrajectoryLog(
        t=t[:k], states=states[:k], u_des=u_des[:k], u_app=u_app[:k],
        pair_h=pair_h[:k], pairs=pairs, gamma=gamma[:k], margin=margin[:k],
        slack=slack[:k], mode=mode, scenario=scenario,
    )


def run_suite(
    scenarios,
    mode: str,
    model,
    cfg: BarrierConfig,
    bounds: InputBounds,
    filtered: str = "ego",
    accel_bias: float = 1.0,
    max_workers: int | None = None,
) -> list:
    """Roll out a list of scenarios under one mode; order-preserving.

    max_workers > 1 runs rollouts on a thread pool; results are collected
    in submission order so aggregation stays deterministic.
    """
    def one(sc):
        return run_closed_loop(sc, default_policies(sc, filtered, accel_bias),
                               mode, model, cfg, bounds)

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(one, scenarios))
    return [one(sc) for sc in scenarios]


def compute_metrics(logs, lanes=None) -> Metrics:
    """Suite-level metrics; ego is agent 0 of every log.

    Off-road uses each log's own lane corridors unless an explicit list of
    lanes is supplied.
    """
    if not logs:
        raise ValueError("no logs to aggregate")
    viol = 0
    total = 0
    unsafe_runs = 0
    offroad = 0
    off_total = 0
    dist = 0.0
    for log in logs:
        viol += int((log.margin < -1e-9).sum())
        total += log.margin.size
        if log.min_global_barrier() < 0.0:
            unsafe_runs += 1
        corridors = lanes if lanes is not None else log.scenario.lanes
        for k in range(log.t.size):
            x, y = log.states[k, 0, 0], log.states[k, 0, 1]
            if not any(lane.contains(x, y) for lane in corridors):
                offroad += 1
            off_total += 1
        v = log.states[:, 0, 2]
        dt = log.scenario.dt
        dist += float(np.trapezoid(v, dx=dt)) if hasattr(np, "trapezoid") else float(np.trapz(v, dx=dt))
    return Metrics(
        constraint_violation_rate=viol / total,
        safety_violation_rate=unsafe_runs / len(logs),
        offroad_time_fraction=offroad / off_total,
        distance_covered=dist / len(logs),
    )


LOG_COLUMNS = [
    "t", "agent_id", "x", "y", "v", "theta",
    "a_des", "omega_des", "a", "omega", "gamma", "margin", "slack", "h_min",
]


def write_log_csv(log: TrajectoryLog, path) -> None:
    """One row per (step, agent); h_min repeats the scene-wide pair minimum."""
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for k in range(log.t.size):
            h_min = float(log.pair_h[k].min())
            for idx in range(log.n_agents):
                x, y, v, th = log.states[k, idx]
                w.writerow([
                    f"{log.t[k]:.17g}", idx,
                    f"{x:.17g}", f"{y:.17g}", f"{v:.17g}", f"{th:.17g}",
                    f"{log.u_des[k, idx, 0]:.17g}", f"{log.u_des[k, idx, 1]:.17g}",
                    f"{log.u_app[k, idx, 0]:.17g}", f"{log.u_app[k, idx, 1]:.17g}",
                    f"{log.gamma[k, idx]:.17g}", f"{log.margin[k, idx]:.17g}",
                    f"{log.slack[k, idx]:.17g}", f"{h_min:.17g}",
                ])
    os.replace(tmp, path)
