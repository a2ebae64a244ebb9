"""Responsibility allocation and the per-agent decentralized safety terms.

Each agent i in a pair owes the shared safety condition a contribution

    c_i(x, u) = lg_i . u_i + (1/N) * (alpha(h) + lf),      N = 2 pairwise,

and its constraint is c_i - gamma(i, x) >= 0, where gamma shifts the burden
between the agents.  Summing the two constraints recovers the centralized
condition dh/dt + alpha(h) >= 0 whenever gamma_i + gamma_j >= 0, which is
the decomposition the tests pin down exactly.

gamma is either identically zero (even sharing), a small MLP over
ego-frame relative-state features (so it is invariant to rigid transforms
of the scene by construction), or any plain callable (si, sj) -> float for
scripted ground-truth rules.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .barrier import BarrierConfig, BarrierEval
from .dynamics import AgentState, ControlInput, InputBounds

FEATURE_DIM = 8

_MAGIC = b"RGAMMA\x00\x01"  # 8-byte magic
_VERSION = 1


def features(si: AgentState, sj: AgentState) -> np.ndarray:
    """Ordered-pair feature vector for gamma, ego = si.

    [other position in ego frame (2), ego speed, other speed,
     cos/sin of heading difference, other-minus-ego velocity in ego frame (2)].

    Every entry depends only on relative geometry, so jointly translating or
    rotating both agents leaves the vector unchanged.
    """
    c, s = math.cos(si.theta), math.sin(si.theta)
    rx = sj.x - si.x
    ry = sj.y - si.y
    dth = sj.theta - si.theta
    cd, sd = math.cos(dth), math.sin(dth)
    return np.array(
        [
            c * rx + s * ry,
            -s * rx + c * ry,
            si.v,
            sj.v,
            cd,
            sd,
            sj.v * cd - si.v,
            sj.v * sd,
        ]
    )


@dataclass
class GammaModel:
    """Responsibility model: variant "zero" or a 2-hidden-layer leaky-ReLU MLP.

    weights holds [W1, b1, W2, b2, W3, b3]; l1 and l2 are the negative
    slopes of the first and second hidden activations.
    """

    variant: str = "zero"
    l1: float = 0.1
    l2: float = 0.01
    weights: list = field(default_factory=list)

    @staticmethod
    def zero() -> "GammaModel":
        return GammaModel(variant="zero")

    @staticmethod
    def mlp(
        hidden: tuple = (128, 128),
        seed: int = 0,
        l1: float = 0.1,
        l2: float = 0.01,
        feature_dim: int = FEATURE_DIM,
        scale: float = 0.1,
    ) -> "GammaModel":
        """Fresh MLP with small seeded Gaussian weights and zero biases."""
        rng = np.random.default_rng(seed)
        dims = (feature_dim, hidden[0], hidden[1], 1)
        weights = []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, scale / math.sqrt(n_in), size=(n_out, n_in)))
            weights.append(np.zeros(n_out))
        return GammaModel(variant="mlp", l1=l1, l2=l2, weights=weights)

    @staticmethod
    def constant(value: float) -> "GammaModel":
        """MLP that outputs a constant (zero weights, output bias = value)."""
        m = GammaModel.mlp(hidden=(2, 2))
        for w in m.weights:
            w[...] = 0.0
        m.weights[5][0] = value
        return m

    def _check_mlp(self):
        if self.variant != "mlp":
            raise ValueError(f"unsupported gamma variant {self.variant!r}")
        if len(self.weights) != 6:
            raise ValueError("mlp gamma model expects 6 weight arrays")

    def forward(self, feats: np.ndarray) -> np.ndarray:
        """Evaluate gamma on a (n, feature_dim) feature matrix, returns (n,)."""
        feats = np.atleast_2d(feats)
        if self.variant == "zero":
            return np.zeros(feats.shape[0])
        self._check_mlp()
        w1, b1, w2, b2, w3, b3 = self.weights
        z1 = feats @ w1.T + b1
        a1 = np.where(z1 > 0, z1, self.l1 * z1)
        z2 = a1 @ w2.T + b2
        a2 = np.where(z2 > 0, z2, self.l2 * z2)
        return (a2 @ w3.T + b3).ravel()

    def forward_backward(self, feats: np.ndarray, dout: np.ndarray):
        """Gamma values plus loss gradients w.r.t. every parameter.

        dout[k] is dL/dgamma for row k; the leaky-ReLU subgradient at the
        kink uses the negative-slope branch.
        Returns (values, [dW1, db1, dW2, db2, dW3, db3]).
        """
        self._check_mlp()
        w1, b1, w2, b2, w3, b3 = self.weights
        z1 = feats @ w1.T + b1
        a1 = np.where(z1 > 0, z1, self.l1 * z1)
        z2 = a1 @ w2.T + b2
        a2 = np.where(z2 > 0, z2, self.l2 * z2)
        out = (a2 @ w3.T + b3).ravel()

        d = dout[:, None]  # (n, 1)
        dW3 = d.T @ a2
        db3 = d.sum(axis=0)
        da2 = d @ w3
        dz2 = da2 * np.where(z2 > 0, 1.0, self.l2)
        dW2 = dz2.T @ a1
        db2 = dz2.sum(axis=0)
        da1 = dz2 @ w2
        dz1 = da1 * np.where(z1 > 0, 1.0, self.l1)
        dW1 = dz1.T @ feats
        db1 = dz1.sum(axis=0)
        return out, [dW1, db1, dW2, db2, dW3, db3]

    def copy(self) -> "GammaModel":
        return GammaModel(
            variant=self.variant,
            l1=self.l1,
            l2=self.l2,
            weights=[w.copy() for w in self.weights],
        )


def gamma_eval(model, si: AgentState, sj: AgentState) -> float:
    """gamma(i, x) for the ordered pair with ego si.

    model may be a GammaModel or any callable (si, sj) -> float (used for
    scripted ground-truth allocation rules).
    """
    if isinstance(model, GammaModel):
        if model.variant == "zero":
            return 0.0
        return float(model.forward(features(si, sj)[None, :])[0])
    if callable(model):
        return float(model(si, sj))
    raise TypeError(f"cannot evaluate gamma on {type(model).__name__}")


@dataclass(frozen=True)
class ConstraintTerms:
    """One agent's constraint bookkeeping: margin = c - gamma exactly."""

    c: float
    gamma: float
    margin: float


def c_term(
    which: str,
    ev: BarrierEval,
    u: ControlInput,
    n_agents: int,
    cfg: BarrierConfig,
) -> float:
    """The brace term c_i = lg_i . u_i + (1/N)(alpha(h) + lf) for agent "i" or "j"."""
    if n_agents < 2:
        raise ValueError("the shared term needs at least 2 agents")
    lg = ev.lg_i if which == "i" else ev.lg_j if which == "j" else None
    if lg is None:
        raise ValueError(f"which must be 'i' or 'j', got {which!r}")
    shared = (cfg.alpha(ev.value) + ev.lf) / n_agents
    return float(lg[0] * u.a + lg[1] * u.omega + shared)


def racbf_margin(
    which: str,
    ev: BarrierEval,
    u: ControlInput,
    model,
    si: AgentState,
    sj: AgentState,
    cfg: BarrierConfig,
) -> ConstraintTerms:
    """Responsibility-shifted constraint value for one side of a pair.

    which selects the agent whose input u is being checked; the gamma
    evaluation always puts that agent in the ego slot.
    """
    c = c_term(which, ev, u, 2, cfg)
    if which == "i":
        gamma = gamma_eval(model, si, sj)
    else:
        gamma = gamma_eval(model, sj, si)
    return ConstraintTerms(c=c, gamma=gamma, margin=c - gamma)


def worst_case_margin(
    ev: BarrierEval,
    u_i: ControlInput,
    bounds: InputBounds,
    cfg: BarrierConfig,
    which: str = "i",
) -> float:
    """Robust constraint value assuming the other agent picks its worst input.

    The infimum of lg_j . u_j over the input box is attained at a vertex and
    equals -(|lg_j[0]|*a_max + |lg_j[1]|*omega_max).  which selects whose
    input u_i is (the other side of the pair supplies the infimum).
    """
    if which == "i":
        lg_ego, lg_other = ev.lg_i, ev.lg_j
    elif which == "j":
        lg_ego, lg_other = ev.lg_j, ev.lg_i
    else:
        raise ValueError(f"which must be 'i' or 'j', got {which!r}")
    robust = -(abs(lg_other[0]) * bounds.a_max + abs(lg_other[1]) * bounds.omega_max)
    return float(
        ev.lf
        + cfg.alpha(ev.value)
        + lg_ego[0] * u_i.a
        + lg_ego[1] * u_i.omega
        + robust
    )


def save_model(model: GammaModel, path) -> None:
    """Serialize a gamma model: magic, version byte, variant byte, slopes, arrays.

    Arrays are stored as (rows, cols) uint32 headers followed by row-major
    float64 data; cols == 0 marks a 1-D bias vector.
    """
    chunks = [_MAGIC, struct.pack("<B", _VERSION)]
    if model.variant == "zero":
        chunks.append(struct.pack("<B", 0))
    else:
        model._check_mlp()
        chunks.append(struct.pack("<B", 1))
        chunks.append(struct.pack("<dd", model.l1, model.l2))
        chunks.append(struct.pack("<I", len(model.weights)))
        for arr in model.weights:
            a = np.ascontiguousarray(arr, dtype="<f8")
            if a.ndim == 2:
                chunks.append(struct.pack("<II", a.shape[0], a.shape[1]))
            else:
                chunks.append(struct.pack("<II", a.shape[0], 0))
            chunks.append(a.tobytes())
    data = b"".join(chunks)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    import os

    os.replace(tmp, path)


class ModelFormatError(ValueError):
    """Raised on malformed model files; the message names the byte offset."""


def load_model(path) -> GammaModel:
    """Inverse of save_model; raises ModelFormatError naming the bad offset."""
    with open(path, "rb") as f:
        data = f.read()

    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ModelFormatError(f"truncated model file at offset {pos} reading {what}")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(8, "magic") != _MAGIC:
        raise ModelFormatError("bad magic header at offset 0")
    (version,) = struct.unpack("<B", take(1, "version"))
    if version != _VERSION:
        raise ModelFormatError(f"unsupported version {version} at offset 8")
    (variant,) = struct.unpack("<B", take(1, "variant"))
    if variant == 0:
        if pos != len(data):
            raise ModelFormatError(f"trailing bytes at offset {pos}")
        return GammaModel.zero()
    if variant != 1:
        raise ModelFormatError(f"unknown variant {variant} at offset 9")
    l1, l2 = struct.unpack("<dd", take(16, "slopes"))
    (n_arrays,) = struct.unpack("<I", take(4, "array count"))
    if n_arrays != 6:
        raise ModelFormatError(f"expected 6 weight arrays, got {n_arrays} at offset 26")
    weights = []
    for k in range(n_arrays):
        rows, cols = struct.unpack("<II", take(8, f"shape of array {k}"))
        count = rows * max(cols, 1)
        raw = take(8 * count, f"data of array {k}")
        arr = np.frombuffer(raw, dtype="<f8").copy()
        if cols > 0:
            arr = arr.reshape(rows, cols)
        if not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"non-finite parameters in array {k} near offset {pos}")
        weights.append(arr)
    if pos != len(data):
        raise ModelFormatError(f"trailing bytes at offset {pos}")
    return GammaModel(variant="mlp", l1=l1, l2=l2, weights=weights)
