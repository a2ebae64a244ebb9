"""Learning responsibility allocations from demonstrations.

A demonstration is one recorded (scene, joint input) sample.  Each agent of
a pair contributes a hinge penalty when its constraint c - gamma >= 0 fails
at the recorded input, the pair contributes a hinge when gamma_i + gamma_j
drops below zero, and a small linear bonus for large gamma resolves the
"wanted to vs. had to" ambiguity: among allocations consistent with the
data, prefer the one that makes the demonstrated inputs look as constrained
as possible (raising gamma only ever shrinks the feasible input set, which
feasible_input_fraction lets you measure directly).

The c terms depend only on the recorded states and inputs, so they are
precomputed once and training touches nothing but the gamma network: a
numpy MLP trained with Adam on minibatches, deterministic for a fixed seed.
Training datasets are two-agent scenes, matching the pairwise constraint
structure used everywhere else.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .barrier import BarrierConfig, barrier_eval
from .dynamics import AgentState, ControlInput, InputBounds, InputGrid
from .responsibility import GammaModel, c_term, features, gamma_eval, worst_case_margin
from .safety_filter import constraint_rows
from .sim import Scenario, run_closed_loop, AgentPolicy

__all__ = [
    "Demonstration", "TrainConfig", "TrainResult", "InputGrid",
    "generate_synthetic_dataset", "heading_filter", "hinge_loss",
    "regularized_loss", "train", "feasible_input_fraction",
    "demonstration_violation_rate", "save_dataset", "load_dataset",
    "car_follow_rule", "audit_dataset",
]


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Demonstration:
    scene: tuple  # AgentStates
    joint_input: tuple  # ControlInputs, one per agent
    timestamp: float
    scenario_id: str

    def __post_init__(self):
        if len(self.scene) != len(self.joint_input):
            raise ValueError("scene and joint_input must have equal agent counts")


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 0.01
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    theta_max: float = math.radians(100.0)
    hidden: tuple = (128, 128)
    l1: float = 0.1
    l2: float = 0.01
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (0 < self.theta_max <= math.pi):
            raise ValueError("theta_max must lie in (0, pi]")


@dataclass
class TrainResult:
    model: GammaModel
    history: list  # rows of (epoch, loss, hinge_rate, mean_gamma)


def car_follow_rule(gamma_trail: float = 0.3, gamma_lead: float = -0.3):
    """Ground-truth allocation: the agent with the other ahead of it carries more.

    "Ahead" is the sign of the other agent's longitudinal offset in the ego
    frame, so the rule is geometry-only and the pair sums to
    gamma_trail + gamma_lead (>= 0 required).
    """
    if gamma_trail + gamma_lead < 0:
        raise ValueError("rule must sum to a nonnegative allocation")

    def rule(si: AgentState, sj: AgentState) -> float:
        ahead = (sj.x - si.x) * math.cos(si.theta) + (sj.y - si.y) * math.sin(si.theta)
        return gamma_trail if ahead > 0 else gamma_lead

    return rule


def generate_synthetic_dataset(
    scenario_suite,
    gamma_star,
    seed: int = 0,
    cfg: BarrierConfig | None = None,
    bounds: InputBounds | None = None,
    margin_tol: float = 1e-6,
    horizon: float = 10.0,
    dt: float = 0.1,
    caution: float = 0.1,
) -> list:
    """Expert rollouts under a known allocation, audited at generation time.

    scenario_suite is a list of (kind, params, count) triples; per-scenario
    seeds derive deterministically from `seed`.  Every agent is filtered
    under gamma_star, and every emitted sample is re-checked to satisfy the
    allocation's constraint with margin >= -margin_tol; a sample that fails
    even though the filter ran aborts generation (the scenario was not
    expert-solvable, e.g. the slack had to activate).

    caution adds a per-scenario habitual extra margin (|N(0, caution)| on
    top of gamma_star when filtering), so demonstrated constraint values
    spread above the allocation floor instead of sitting exactly on it;
    set it to 0 for boundary-riding experts.
    """
    from .sim import build_scenario

    suite = list(scenario_suite)
    if not suite:
        raise GenerationError("empty scenario suite")
    cfg = cfg or BarrierConfig()
    bounds = bounds or InputBounds()
    rng = np.random.default_rng(seed)

    demos = []
    sid = 0
    for kind, params, count in suite:
        for _ in range(int(count)):
            sc_seed = int(rng.integers(0, 2**31 - 1))
            scenario = build_scenario(kind, params, seed=sc_seed, horizon=horizon, dt=dt, cfg=cfg)
            policies = [AgentPolicy(profile=p, filtered=True) for p in scenario.profiles]
            extra = abs(rng.normal(0.0, caution)) if caution > 0 else 0.0
            cautious = _with_caution(gamma_star, extra)
            log = run_closed_loop(scenario, policies, "learned", cautious, cfg, bounds)
            scenario_id = f"{kind}-{sid:04d}"
            if log.slack.max(initial=0.0) > margin_tol or log.margin.min() < -margin_tol:
                raise GenerationError(
                    f"expert rollout for {scenario_id} (seed {sc_seed}) could not satisfy "
                    f"the allocation: min margin {log.margin.min():.3g}, "
                    f"max slack {log.slack.max():.3g}"
                )
            for k in range(log.t.size):
                scene = tuple(AgentState(*log.states[k, a]) for a in range(log.n_agents))
                joint = tuple(ControlInput(*log.u_app[k, a]) for a in range(log.n_agents))
                demos.append(Demonstration(scene, joint, float(log.t[k]), scenario_id))
            sid += 1
    return demos


def _with_caution(gamma_star, extra: float):
    if extra == 0.0:
        return gamma_star

    def cautious(si, sj):
        return gamma_eval(gamma_star, si, sj) + extra

    return cautious


def audit_dataset(demos, gamma_star, cfg: BarrierConfig, bounds: InputBounds):
    """Worst constraint margin over all (sample, agent) pairs under gamma_star."""
    worst = math.inf
    for d in demos:
        for i in range(len(d.scene)):
            rows, rhs = constraint_rows(d.scene, i, "learned", gamma_star, cfg, bounds)
            m = float((rows @ d.joint_input[i].as_array() - rhs).min())
            worst = min(worst, m)
    return worst


def heading_filter(dataset, theta_max: float):
    """Keep demonstrations whose agent pairs all have |heading difference| <= theta_max."""
    if not (0 < theta_max <= math.pi + 1e-12):
        raise ValueError("theta_max must lie in (0, pi]")
    kept = []
    for d in dataset:
        ok = True
        n = len(d.scene)
        for i in range(n):
            for j in range(i + 1, n):
                diff = abs(_wrap(d.scene[i].theta - d.scene[j].theta))
                if diff > theta_max + 1e-12:
                    ok = False
        if ok:
            kept.append(d)
    return kept


def _wrap(a: float) -> float:
    return -((-a + math.pi) % (2 * math.pi) - math.pi)


@dataclass
class PairData:
    """Precomputed per-demonstration arrays for two-agent scenes.

    Row 2k is demonstration k seen from agent 0, row 2k+1 from agent 1.
    """

    feats: np.ndarray  # (2D, 8)
    c: np.ndarray  # (2D,)
    scenario_ids: list  # length D
    timestamps: np.ndarray  # (D,)

    @property
    def n_demos(self) -> int:
        return len(self.scenario_ids)


def build_pair_data(dataset, cfg: BarrierConfig) -> PairData:
    demos = list(dataset)
    if not demos:
        raise ValueError("empty dataset")
    feats = np.zeros((2 * len(demos), 8))
    c = np.zeros(2 * len(demos))
    ids = []
    ts = np.zeros(len(demos))
    for k, d in enumerate(demos):
        if len(d.scene) != 2:
            raise ValueError("training datasets must contain two-agent scenes")
        si, sj = d.scene
        ui, uj = d.joint_input
        ev = barrier_eval(si, sj, cfg)
        feats[2 * k] = features(si, sj)
        feats[2 * k + 1] = features(sj, si)
        c[2 * k] = c_term("i", ev, ui, 2, cfg)
        c[2 * k + 1] = c_term("j", ev, uj, 2, cfg)
        ids.append(d.scenario_id)
        ts[k] = d.timestamp
    return PairData(feats=feats, c=c, scenario_ids=ids, timestamps=ts)


def _loss_core(feats, c, model: GammaModel, tc: TrainConfig, regularized: bool):
    """Loss value and parameter gradients on precomputed rows.

    Rows come in (i, j) pairs; the gamma-norm term is the batch mean of
    gamma^2 (a function-norm estimate on the data), the rest are sums.
    """
    n_rows = feats.shape[0]
    zero_model = model.variant == "zero"
    if zero_model:
        gamma = np.zeros(n_rows)
    else:
        gamma = model.forward(feats)

    slack1 = gamma - c  # hinge active when the constraint is violated
    act1 = slack1 > 0
    pair_sum = gamma[0::2] + gamma[1::2]
    act2 = pair_sum < 0

    loss = float((gamma**2).mean())
    loss += tc.lambda1 * float(slack1[act1].sum())
    loss += tc.lambda2 * float(-pair_sum[act2].sum())
    if regularized:
        loss += tc.lambda3 * float(-gamma.sum())

    if zero_model:
        return loss, [], act1, act2

    dgamma = 2.0 * gamma / n_rows
    dgamma += tc.lambda1 * act1.astype(float)
    d2 = np.zeros(n_rows)
    d2[0::2] = -tc.lambda2 * act2
    d2[1::2] = -tc.lambda2 * act2
    dgamma += d2
    if regularized:
        dgamma -= tc.lambda3
    _, grads = model.forward_backward(feats, dgamma)
    return loss, grads, act1, act2


def hinge_loss(batch, model: GammaModel, cfg: TrainConfig, barrier_cfg: BarrierConfig | None = None):
    """Constraint-consistency loss on a batch of demonstrations.

    Returns (loss, grads) where grads matches model.weights; a zero-variant
    model yields an empty gradient list.
    """
    pd = build_pair_data(batch, barrier_cfg or BarrierConfig())
    loss, grads, _, _ = _loss_core(pd.feats, pd.c, model, cfg, regularized=False)
    return loss, grads


def regularized_loss(batch, model: GammaModel, cfg: TrainConfig, barrier_cfg: BarrierConfig | None = None):
    """hinge_loss plus the linear gamma-maximization term weighted by lambda3."""
    pd = build_pair_data(batch, barrier_cfg or BarrierConfig())
    loss, grads, _, _ = _loss_core(pd.feats, pd.c, model, cfg, regularized=True)
    return loss, grads


def split_by_scenario(pair_data: PairData, holdout_fraction: float, seed: int):
    """Deterministic train/holdout demo indices, split at scenario granularity."""
    ids = sorted(set(pair_data.scenario_ids))
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n_hold = int(round(holdout_fraction * len(ids)))
    holdout = set(ids[:n_hold])
    train_idx = [k for k, s in enumerate(pair_data.scenario_ids) if s not in holdout]
    hold_idx = [k for k, s in enumerate(pair_data.scenario_ids) if s in holdout]
    return np.array(train_idx, dtype=int), np.array(hold_idx, dtype=int)


def _rows_of(demo_idx: np.ndarray) -> np.ndarray:
    return np.stack([2 * demo_idx, 2 * demo_idx + 1], axis=1).ravel()


def train(
    dataset,
    cfg: TrainConfig,
    barrier_cfg: BarrierConfig | None = None,
) -> TrainResult:
    """Minibatch Adam on the regularized loss; returns the best-loss parameters.

    The heading filter runs first; the per-epoch history rows are
    (epoch, full-train loss, fraction of demos with any active hinge,
    mean gamma).  The learning rate halves every quarter of the run so the
    iterate settles on the feasible side of the hinge kinks instead of
    oscillating across them.  Identical seeds and data reproduce the result
    exactly.
    """
    barrier_cfg = barrier_cfg or BarrierConfig()
    data = heading_filter(dataset, cfg.theta_max)
    if not data:
        raise ValueError("dataset is empty after the heading filter")
    pd = build_pair_data(data, barrier_cfg)
    train_idx, _ = split_by_scenario(pd, cfg.holdout_fraction, cfg.seed)
    if train_idx.size == 0:
        raise ValueError("no training demonstrations after the scenario split")

    model = GammaModel.mlp(hidden=cfg.hidden, seed=cfg.seed, l1=cfg.l1, l2=cfg.l2)
    m_state = [np.zeros_like(w) for w in model.weights]
    v_state = [np.zeros_like(w) for w in model.weights]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    rng = np.random.default_rng(cfg.seed)
    best_loss = math.inf
    best_weights = [w.copy() for w in model.weights]
    history = []

    train_rows = _rows_of(train_idx)
    decay_every = max(1, cfg.epochs // 4)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * 0.5 ** (epoch // decay_every)
        order = train_idx[rng.permutation(train_idx.size)]
        for start in range(0, order.size, cfg.batch_size):
            batch_rows = _rows_of(order[start : start + cfg.batch_size])
            loss, grads, _, _ = _loss_core(
                pd.feats[batch_rows], pd.c[batch_rows], model, cfg, regularized=True
            )
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"training diverged at epoch {epoch} (loss {loss}); "
                    "lower the learning rate or the loss weights"
                )
            step += 1
            corr1 = 1.0 - beta1**step
            corr2 = 1.0 - beta2**step
            for w, g, m_s, v_s in zip(model.weights, grads, m_state, v_state):
                m_s *= beta1
                m_s += (1 - beta1) * g
                v_s *= beta2
                v_s += (1 - beta2) * g * g
                w -= lr * (m_s / corr1) / (np.sqrt(v_s / corr2) + eps)

        full_loss, _, act1, act2 = _loss_core(
            pd.feats[train_rows], pd.c[train_rows], model, cfg, regularized=True
        )
        pair_active = act1[0::2] | act1[1::2] | act2
        hinge_rate = float(pair_active.mean())
        mean_gamma = float(model.forward(pd.feats[train_rows]).mean())
        history.append((epoch, full_loss, hinge_rate, mean_gamma))
        if full_loss < best_loss:
            best_loss = full_loss
            best_weights = [w.copy() for w in model.weights]

    model.weights = best_weights
    return TrainResult(model=model, history=history)


def feasible_input_fraction(
    scene,
    agent: int,
    model,
    grid: InputGrid,
    cfg: BarrierConfig,
    bounds: InputBounds,
) -> float:
    """Fraction of the discretized input box satisfying the agent's constraints."""
    if len(grid) == 0:
        raise ValueError("empty input grid")
    rows, rhs = constraint_rows(scene, agent, "learned", model, cfg, bounds)
    margins = grid.points @ rows.T - rhs
    return float((margins >= 0.0).all(axis=1).mean())


def demonstration_violation_rate(
    dataset,
    mode: str,
    model,
    cfg: BarrierConfig,
    bounds: InputBounds,
) -> float:
    """Fraction of (sample, agent) pairs whose recorded input violates the mode.

    This is the compatibility-with-demonstrations metric: a conservative
    constraint flags many expert inputs as inadmissible even though the
    demonstrations were safe.
    """
    demos = list(dataset)
    if not demos:
        raise ValueError("empty dataset")
    viol = 0
    total = 0
    for d in demos:
        si, sj = d.scene[0], d.scene[1]
        ui, uj = d.joint_input[0], d.joint_input[1]
        ev = barrier_eval(si, sj, cfg)
        if mode == "worst":
            mi = worst_case_margin(ev, ui, bounds, cfg, which="i")
            mj = worst_case_margin(ev, uj, bounds, cfg, which="j")
        else:
            gi = gamma_eval(model, si, sj) if mode == "learned" else 0.0
            gj = gamma_eval(model, sj, si) if mode == "learned" else 0.0
            mi = c_term("i", ev, ui, 2, cfg) - gi
            mj = c_term("j", ev, uj, 2, cfg) - gj
        viol += int(mi < 0) + int(mj < 0)
        total += 2
    return viol / total


DATASET_COLUMNS = ["scenario_id", "t", "agent_idx", "x", "y", "v", "theta", "a", "omega"]


def save_dataset(demos, path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DATASET_COLUMNS)
        for d in demos:
            for idx, (s, u) in enumerate(zip(d.scene, d.joint_input)):
                w.writerow([
                    d.scenario_id, f"{d.timestamp:.17g}", idx,
                    f"{s.x:.17g}", f"{s.y:.17g}", f"{s.v:.17g}", f"{s.theta:.17g}",
                    f"{u.a:.17g}", f"{u.omega:.17g}",
                ])
    os.replace(tmp, path)


def load_dataset(path) -> list:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty dataset file")
        missing = [c for c in DATASET_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        groups: dict = {}
        order = []
        for row in reader:
            key = (row["scenario_id"], row["t"])
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(row)
    demos = []
    for key in order:
        rows = sorted(groups[key], key=lambda r: int(r["agent_idx"]))
        scene = tuple(
            AgentState(float(r["x"]), float(r["y"]), float(r["v"]), float(r["theta"]))
            for r in rows
        )
        joint = tuple(ControlInput(float(r["a"]), float(r["omega"])) for r in rows)
        demos.append(Demonstration(scene, joint, float(key[1]), key[0]))
    return demos
