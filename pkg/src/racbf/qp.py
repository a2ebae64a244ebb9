"""Small dense quadratic programs via a primal active-set method.

Solves   min  1/2 z' H z + f' z   s.t.  A z >= b,  lb <= z <= ub

for strictly convex H.  Problems here are tiny (an input pair plus a few
slack variables), so every working-set change does a fresh dense KKT solve
and exact active sets fall out for free, which the filter's reporting
needs.  Ties in the add/drop choices always go to the smallest constraint
index (Bland's rule), making the iteration deterministic and cycle-free.

Box bounds are handled by stacking them under the user rows as
e_k z >= lb_k and -e_k z >= -ub_k; active-set indices in the solution refer
to that stacked ordering (user rows first).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class QPError(RuntimeError):
    pass


class QPInfeasibleError(QPError):
    pass


@dataclass
class QPProblem:
    """min 1/2 z'Hz + f'z s.t. A z >= b and optional box bounds on z.

    slack_weight is carried along for problem builders that embed quadratic
    slack penalties into H; the solver itself does not read it.
    """

    H: np.ndarray
    f: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    slack_weight: float = 1e4

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        n = self.f.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.A.shape[0] != self.b.size:
            raise ValueError("A and b row counts differ")
        if not np.allclose(self.H, self.H.T, atol=1e-12):
            raise ValueError("H must be symmetric")
        if not np.all(np.isfinite(self.H)) or not np.all(np.isfinite(self.f)):
            raise ValueError("non-finite objective data")
        if self.A.size and not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))):
            raise ValueError("non-finite constraint data")
        eigmin = np.linalg.eigvalsh(self.H).min() if n else 1.0
        if eigmin <= 0:
            raise ValueError(f"H must be positive definite (min eigenvalue {eigmin:g})")


@dataclass
class QPSolution:
    z: np.ndarray
    active: tuple  # indices into the stacked constraint rows, sorted
    lam: np.ndarray  # multipliers per stacked row (zero off the active set)
    objective: float
    iterations: int
    n_user_rows: int  # rows < n_user_rows are the caller's A; the rest are box rows

    def user_active(self) -> tuple:
        return tuple(k for k in self.active if k < self.n_user_rows)


def _stack_box(problem: QPProblem):
    """Append box bounds to (A, b) as ordinary half-space rows."""
    n = problem.f.size
    rows = [problem.A] if problem.A.size else []
    rhs = [problem.b] if problem.b.size else []
    if problem.lb is not None:
        lb = np.asarray(problem.lb, dtype=float)
        for k in range(n):
            if np.isfinite(lb[k]):
                e = np.zeros(n)
                e[k] = 1.0
                rows.append(e[None, :])
                rhs.append(np.array([lb[k]]))
    if problem.ub is not None:
        ub = np.asarray(problem.ub, dtype=float)
        for k in range(n):
            if np.isfinite(ub[k]):
                e = np.zeros(n)
                e[k] = -1.0
                rows.append(e[None, :])
                rhs.append(np.array([-ub[k]]))
    if rows:
        return np.vstack(rows), np.concatenate(rhs)
    return np.empty((0, n)), np.empty(0)


def _kkt_step(H, f, A, work, z):
    """Equality-constrained step: min over p of the local model with A_W p = 0.

    Returns (p, lam) where H p - A_W' lam = -(H z + f).  lam >= 0 at a
    stationary point certifies optimality for the >= constraints.
    """
    g = H @ z + f
    nw = len(work)
    if nw == 0:
        return np.linalg.solve(H, -g), np.empty(0)
    Aw = A[work]
    n = H.shape[0]
    kkt = np.zeros((n + nw, n + nw))
    kkt[:n, :n] = H
    kkt[:n, n:] = -Aw.T
    kkt[n:, :n] = Aw
    rhs = np.concatenate([-g, np.zeros(nw)])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _active_set_solve(H, f, A, b, z0, max_iter):
    """Primal active-set loop from a feasible start."""
    z = z0.copy()
    m = A.shape[0]
    work: list = sorted(np.flatnonzero(A @ z - b <= 1e-10).tolist())

    for it in range(1, max_iter + 1):
        p, lam_w = _kkt_step(H, f, A, work, z)
        if np.abs(p).max(initial=0.0) <= 1e-10:
            if lam_w.size == 0 or lam_w.min() >= -1e-9:
                lam = np.zeros(m)
                for k, idx in enumerate(work):
                    lam[idx] = max(lam_w[k], 0.0) if lam_w.size else 0.0
                return z, tuple(sorted(work)), lam, it
            # drop the lowest-index constraint with a negative multiplier
            drop = min(idx for k, idx in enumerate(work) if lam_w[k] < -1e-9)
            work.remove(drop)
            continue
        # longest feasible step along p; first (lowest-index) blocker wins ties
        alpha = 1.0
        blocker = -1
        for k in range(m):
            if k in work:
                continue
            d = float(A[k] @ p)
            if d < -1e-12:
                ak = (float(A[k] @ z) - b[k]) / (-d)
                if ak < alpha - 1e-12:
                    alpha = ak
                    blocker = k
        alpha = max(alpha, 0.0)
        z = z + alpha * p
        if blocker >= 0:
            work.append(blocker)
            work.sort()
    raise QPError(
        f"active-set iteration cap {max_iter} exceeded "
        f"(n={H.shape[0]}, m={m}, working set {work})"
    )


def _phase1(H_shape, A, b, max_iter):
    """Find a feasible point by minimizing a heavily penalized violation bound t.

    Solves min 1/2 (mu |z|^2 + t^2) + M t  s.t.  A z + t >= b, t >= 0.
    If the region is nonempty the optimizer pins t = 0 exactly and the z
    part is feasible; otherwise the optimal t is the best achievable bound
    and the problem is reported infeasible.
    """
    n = H_shape
    m = A.shape[0]
    scale = 1.0 + (np.abs(b).max() if m else 0.0)
    M = 10.0 * scale
    H1 = np.diag(np.concatenate([np.full(n, 1e-6), [1.0]]))
    f1 = np.zeros(n + 1)
    f1[-1] = M
    A1 = np.zeros((m + 1, n + 1))
    A1[:m, :n] = A
    A1[:m, -1] = 1.0
    A1[m, -1] = 1.0  # t >= 0
    b1 = np.concatenate([b, [0.0]])
    z0 = np.zeros(n + 1)
    z0[-1] = max(0.0, (b.max() if m else 0.0)) + 1.0
    z, _, _, _ = _active_set_solve(H1, f1, A1, b1, z0, max_iter)
    t = z[-1]
    if t > 1e-7 * scale:
        raise QPInfeasibleError(f"constraints are infeasible (best violation bound {t:g})")
    return z[:n]


def solve_qp(problem: QPProblem, x0: np.ndarray | None = None) -> QPSolution:
    """Solve the QP to KKT optimality.

    x0, when given, must be feasible and skips the phase-1 search; the
    safety filter always constructs one.  Raises QPInfeasibleError when the
    constraint set is empty and QPError if the iteration cap trips.
    """
    A, b = _stack_box(problem)
    n = problem.f.size
    m = A.shape[0]
    max_iter = 50 + 10 * max(m, 1)

    if x0 is not None:
        z0 = np.asarray(x0, dtype=float).copy()
        resid = A @ z0 - b if m else np.empty(0)
        if m and resid.min() < -1e-8:
            raise QPError(
                f"supplied start violates constraint {int(np.argmin(resid))} "
                f"by {-resid.min():g}"
            )
    elif m:
        z0 = _phase1(n, A, b, max_iter)
    else:
        z0 = np.zeros(n)

    z, active, lam, iters = _active_set_solve(problem.H, problem.f, A, b, z0, max_iter)
    obj = 0.5 * float(z @ problem.H @ z) + float(problem.f @ z)
    return QPSolution(
        z=z,
        active=active,
        lam=lam,
        objective=obj,
        iterations=iters,
        n_user_rows=problem.b.size,
    )


def kkt_residuals(problem: QPProblem, sol: QPSolution) -> dict:
    """Stationarity, primal/dual feasibility, and complementarity residuals."""
    A, b = _stack_box(problem)
    z, lam = sol.z, sol.lam
    stationarity = problem.H @ z + problem.f - (A.T @ lam if A.size else 0.0)
    resid = A @ z - b if A.size else np.empty(0)
    return {
        "stationarity": float(np.abs(stationarity).max(initial=0.0)),
        "primal": float(max(0.0, -(resid.min(initial=0.0)))),
        "dual": float(max(0.0, -(lam.min(initial=0.0)))),
        "complementarity": float(np.abs(lam * resid).max(initial=0.0)),
    }
