"""Post-facto attribution of unsafe driving from recorded trajectories.

The input is raw position/yaw time series (or a full rollout log that
already carries speeds and inputs).  Raw series are smoothed with a
centered moving average and differentiated with central differences to
recover speed, acceleration, and yaw rate; the analysis then replays the
responsibility-shifted constraint at every step for every agent and
aggregates each agent's violations into an integral, a first-violation
time, and a peak.

The resulting ranking (largest violation integral first, peak breaks ties)
is an interpretive aid for assigning culpability, not a verdict: it orders
agents by how much demonstrated safety burden they failed to carry.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .barrier import BarrierConfig, barrier_eval
from .dynamics import AgentState, ControlInput, InputBounds
from .responsibility import c_term, gamma_eval, worst_case_margin


class ForensicsError(ValueError):
    pass


RAW_COLUMNS = ["t", "agent_id", "x", "y", "theta"]


@dataclass
class RawTrajectory:
    """Time-aligned raw series: t plus per-agent (x, y, theta) arrays."""

    t: np.ndarray  # (S,), uniform and strictly increasing
    agents: dict  # agent_id -> (S, 3) array of x, y, theta

    def __post_init__(self):
        if self.t.size < 5:
            raise ForensicsError(f"need at least 5 aligned samples, got {self.t.size}")
        if len(self.agents) < 2:
            raise ForensicsError(f"need at least 2 agents, got {len(self.agents)}")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])


def _check_uniform(t: np.ndarray, context: str):
    if t.size < 2:
        raise ForensicsError(f"{context}: too few samples")
    diffs = np.diff(t)
    if diffs.min() <= 0:
        raise ForensicsError(f"{context}: timestamps are not strictly increasing")
    if diffs.max() - diffs.min() > 1e-6 * max(diffs.mean(), 1e-12):
        raise ForensicsError(f"{context}: timestamps are not uniformly spaced")


def ingest_trajectory_csv(path) -> RawTrajectory:
    """Parse and align a raw trajectory CSV (columns t, agent_id, x, y, theta).

    Extra columns are ignored, so full rollout logs are also accepted.
    Agents are aligned on the intersection of their time stamps.
    """
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ForensicsError(f"{path}: empty file")
        missing = [c for c in RAW_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ForensicsError(f"{path}: missing column(s) {', '.join(missing)}")
        per_agent: dict = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                aid = int(row["agent_id"])
                rec = (float(row["t"]), float(row["x"]), float(row["y"]), float(row["theta"]))
            except (TypeError, ValueError) as exc:
                raise ForensicsError(f"{path}:{lineno}: malformed row ({exc})") from None
            per_agent.setdefault(aid, []).append(rec)
    if len(per_agent) < 2:
        raise ForensicsError(f"{path}: need at least 2 agents, found {len(per_agent)}")

    times = None
    for aid, recs in per_agent.items():
        recs.sort(key=lambda r: r[0])
        t = np.array([r[0] for r in recs])
        _check_uniform(t, f"{path}: agent {aid}")
        keys = set(np.round(t, 9).tolist())
        times = keys if times is None else (times & keys)
    if not times:
        raise ForensicsError(f"{path}: agents share no common time stamps")
    common = np.array(sorted(times))
    _check_uniform(common, f"{path}: aligned grid")

    agents = {}
    for aid, recs in sorted(per_agent.items()):
        lookup = {round(r[0], 9): r for r in recs}
        data = np.array([lookup[tk][1:] for tk in np.round(common, 9)])
        agents[aid] = data
    return RawTrajectory(t=common, agents=agents)


def _smooth(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average where the full window fits; edges pass through."""
    if window == 1:
        return x.copy()
    half = window // 2
    out = x.copy()
    kernel = np.full(window, 1.0 / window)
    if x.size >= window:
        out[half : x.size - half] = np.convolve(x, kernel, mode="valid")
    return out


def _central_diff(x: np.ndarray, dt: float) -> np.ndarray:
    """Central differences with one-sided stencils at the ends."""
    d = np.empty_like(x)
    d[1:-1] = (x[2:] - x[:-2]) / (2.0 * dt)
    d[0] = (x[1] - x[0]) / dt
    d[-1] = (x[-1] - x[-2]) / dt
    return d


def differentiate(raw: RawTrajectory, window: int = 5):
    """Recover (states, inputs) from raw series by smoothing and differencing.

    Speed is the position derivative projected on the smoothed heading;
    acceleration and yaw rate come from a second differencing stage.
    Returns (t, scenes, inputs) where scenes[k] is a list of AgentStates in
    agent-id order and inputs[k] the matching ControlInputs.
    """
    if window < 1 or window % 2 == 0:
        raise ForensicsError(f"smoothing window must be odd and >= 1, got {window}")
    if raw.t.size < max(window, 5):
        raise ForensicsError(
            f"series of length {raw.t.size} is shorter than required ({max(window, 5)})"
        )
    dt = raw.dt
    ids = sorted(raw.agents)
    per_agent = []
    for aid in ids:
        data = raw.agents[aid]
        xs = _smooth(data[:, 0], window)
        ys = _smooth(data[:, 1], window)
        th = _smooth(np.unwrap(data[:, 2]), window)
        vx = _central_diff(xs, dt)
        vy = _central_diff(ys, dt)
        v = vx * np.cos(th) + vy * np.sin(th)
        a = _central_diff(v, dt)
        omega = _central_diff(th, dt)
        per_agent.append((xs, ys, v, th, a, omega))

    scenes, inputs = [], []
    for k in range(raw.t.size):
        scenes.append([
            AgentState(float(xs[k]), float(ys[k]), float(v[k]), float(th[k]))
            for xs, ys, v, th, _, _ in per_agent
        ])
        inputs.append([
            ControlInput(float(a[k]), float(om[k])) for _, _, _, _, a, om in per_agent
        ])
    return raw.t.copy(), scenes, inputs


@dataclass
class AgentSummary:
    agent: int
    violation_integral: float  # sum of max(0, -margin) * dt
    first_violation_time: float | None
    peak_violation: float


@dataclass
class ForensicReport:
    t: np.ndarray
    agent_ids: list
    gamma: np.ndarray  # (S, N)
    c: np.ndarray  # (S, N), constraint budget term of the tightest pair
    margin: np.ndarray  # (S, N)
    wc_margin: np.ndarray  # (S, N), worst-case margin alongside for comparison
    summaries: list


def analyze(
    t: np.ndarray,
    scenes,
    inputs,
    model,
    cfg: BarrierConfig,
    bounds: InputBounds,
    agent_ids=None,
) -> ForensicReport:
    """Replay the responsibility-shifted constraint over a recovered trajectory.

    For every step and every ordered agent pair the pairwise constraint is
    evaluated at the recorded input; each agent's reported series uses its
    tightest pair.  Worst-case margins are computed alongside so the
    conservativeness gap is visible per timestep.
    """
    S = len(scenes)
    n = len(scenes[0])
    if n < 2:
        raise ForensicsError("analysis needs at least 2 agents")
    ids = list(agent_ids) if agent_ids is not None else list(range(n))
    dt = float(t[1] - t[0]) if S > 1 else 0.0

    gamma = np.zeros((S, n))
    c_arr = np.zeros((S, n))
    margin = np.zeros((S, n))
    wc = np.zeros((S, n))
    for k in range(S):
        scene = scenes[k]
        u = inputs[k]
        for i in range(n):
            best = None
            wc_best = math.inf
            for j in range(n):
                if j == i:
                    continue
                ev = barrier_eval(scene[i], scene[j], cfg)
                g = gamma_eval(model, scene[i], scene[j])
                c_val = c_term("i", ev, u[i], 2, cfg)
                m = c_val - g
                if best is None or m < best[0]:
                    best = (m, c_val, g)
                wc_best = min(wc_best, worst_case_margin(ev, u[i], bounds, cfg))
            margin[k, i], c_arr[k, i], gamma[k, i] = best
            wc[k, i] = wc_best

    summaries = []
    for i in range(n):
        neg = np.maximum(0.0, -margin[:, i])
        integral = float(neg.sum() * dt)
        viol_steps = np.flatnonzero(margin[:, i] < 0)
        summaries.append(
            AgentSummary(
                agent=ids[i],
                violation_integral=integral,
                first_violation_time=float(t[viol_steps[0]]) if viol_steps.size else None,
                peak_violation=float(neg.max(initial=0.0)),
            )
        )
    return ForensicReport(
        t=np.asarray(t, dtype=float).copy(),
        agent_ids=ids,
        gamma=gamma,
        c=c_arr,
        margin=margin,
        wc_margin=wc,
        summaries=summaries,
    )


def attribute(report: ForensicReport):
    """Rank agents by violation integral (peak breaks ties), worst first.

    Agents with no violations are omitted; an empty list means the recorded
    behavior satisfied every constraint.  The ordering is an interpretive
    aid, not a legal determination.
    """
    offenders = [s for s in report.summaries if s.violation_integral > 1e-12]
    return sorted(
        offenders,
        key=lambda s: (-s.violation_integral, -s.peak_violation, s.agent),
    )


def load_log_states_csv(path):
    """Read states and inputs from a full rollout log CSV.

    Requires the v, a, omega columns written by the simulator; returns
    (t, scenes, inputs, extras) with extras holding logged gamma/margin
    columns when present (keyed by column name, arrays of shape (S, N)).
    """
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ForensicsError(f"{path}: empty file")
        needed = ["t", "agent_id", "x", "y", "v", "theta", "a", "omega"]
        missing = [col for col in needed if col not in reader.fieldnames]
        if missing:
            raise ForensicsError(f"{path}: missing column(s) {', '.join(missing)}")
        extra_cols = [col for col in ("gamma", "margin", "slack", "h_min") if col in reader.fieldnames]
        rows = list(reader)
    by_time: dict = {}
    for r in rows:
        by_time.setdefault(float(r["t"]), []).append(r)
    t = np.array(sorted(by_time))
    scenes, inputs = [], []
    extras = {col: [] for col in extra_cols}
    for tk in t:
        recs = sorted(by_time[tk], key=lambda r: int(r["agent_id"]))
        scenes.append([
            AgentState(float(r["x"]), float(r["y"]), float(r["v"]), float(r["theta"]))
            for r in recs
        ])
        inputs.append([ControlInput(float(r["a"]), float(r["omega"])) for r in recs])
        for col in extra_cols:
            extras[col].append([float(r[col]) for r in recs])
    extras = {col: np.array(vals) for col, vals in extras.items()}
    return t, scenes, inputs, extras


def write_report_csv(report: ForensicReport, steps_path, summary_path) -> None:
    """Per-step series plus per-agent summaries, both with documented headers."""
    tmp = str(steps_path) + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "agent_id", "gamma", "c", "margin", "wc_margin"])
        for k in range(report.t.size):
            for col, aid in enumerate(report.agent_ids):
                w.writerow([
                    f"{report.t[k]:.17g}", aid,
                    f"{report.gamma[k, col]:.17g}", f"{report.c[k, col]:.17g}",
                    f"{report.margin[k, col]:.17g}", f"{report.wc_margin[k, col]:.17g}",
                ])
    os.replace(tmp, steps_path)

    tmp = str(summary_path) + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["agent_id", "violation_integral", "first_violation_time", "peak_violation", "rank"])
        ranked = attribute(report)
        rank_of = {s.agent: r + 1 for r, s in enumerate(ranked)}
        for s in report.summaries:
            w.writerow([
                s.agent,
                f"{s.violation_integral:.17g}",
                "" if s.first_violation_time is None else f"{s.first_violation_time:.17g}",
                f"{s.peak_violation:.17g}",
                rank_of.get(s.agent, ""),
            ])
    os.replace(tmp, summary_path)
