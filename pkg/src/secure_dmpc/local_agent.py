"""Local allocation-constrained problems, their dual prices and the attack map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_model import AgentProblem
from .qp import solve_qp

__all__ = [
    "RoomAgent",
    "LocalSolution",
    "ExplicitPiece",
    "AttackSpec",
    "InfeasibleAllocation",
    "DegeneratePiece",
    "solve_local_qp",
    "explicit_dual_piece",
    "unconstrained_solution",
    "apply_attack",
    "constraint_rows",
]


class InfeasibleAllocation(ValueError):
    """The allocation leaves ``{u >= 0, gamma_bar u <= theta}`` empty."""

    def __init__(self, row: int, value: float):
        super().__init__(f"allocation row {row} is negative ({value:.3e}); local problem infeasible")
        self.row = row


class DegeneratePiece(ValueError):
    """Active constraint gradients are linearly dependent."""


@dataclass
class LocalSolution:
    """Primal/dual solution of one local problem.

    ``active_set`` indexes the stacked rows ``[gamma_bar; -I]``: indices
    ``0..c-1`` are coupling rows, ``c..2c-1`` are nonnegativity rows.
    """

    u_star: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    active_set: frozenset

    @property
    def coupling_active(self) -> frozenset:
        c = self.u_star.size
        return frozenset(i for i in self.active_set if i < c)


@dataclass
class ExplicitPiece:
    p_mat: np.ndarray
    s_vec: np.ndarray
    active_set: frozenset

    def dual(self, theta):
        return -self.p_mat @ np.asarray(theta, dtype=float) - self.s_vec


@dataclass
class AttackSpec:
    """Linear falsification ``lam -> t_mat @ lam`` from step ``active_from`` on."""

    t_mat: np.ndarray
    active_from: int = 0

    def __post_init__(self):
        self.t_mat = np.atleast_2d(np.asarray(self.t_mat, dtype=float))
        n = self.t_mat.shape[0]
        if self.t_mat.shape != (n, n):
            raise ValueError(f"attack matrix must be square, got {self.t_mat.shape}")
        cond = np.linalg.cond(self.t_mat)
        if not np.isfinite(cond) or cond > 1e12:
            raise ValueError(f"attack matrix is not invertible (cond={cond:.3e})")


def constraint_rows(prob: AgentProblem, theta):
    """Stacked inequality data ``a u <= b`` of the local problem."""
    c = prob.size
    a = np.vstack([prob.gamma_bar, -np.eye(c)])
    b = np.concatenate([np.asarray(theta, dtype=float), np.zeros(c)])
    return a, b


def solve_local_qp(prob: AgentProblem, theta, *, tol=1e-10, max_changes=500) -> LocalSolution:
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("allocation must be finite")
    c = prob.size
    # gamma_bar has nonnegative entries, so u = 0 is feasible iff theta >= 0
    scale = max(1.0, float(np.max(np.abs(theta), initial=0.0)))
    bad = np.flatnonzero(theta < -tol * scale)
    if bad.size:
        raise InfeasibleAllocation(int(bad[0]), float(theta[bad[0]]))
    theta = np.maximum(theta, 0.0)
    a, b = constraint_rows(prob, theta)
    res = solve_qp(prob.h, prob.f, a, b, np.zeros(c), tol=tol, max_changes=max_changes)
    return LocalSolution(
        u_star=res.x,
        lam=res.multipliers[:c].copy(),
        mu=res.multipliers[c:].copy(),
        active_set=frozenset(res.active),
    )


def explicit_dual_piece(prob: AgentProblem, active_set) -> ExplicitPiece:
    """Affine dual map ``lam(theta) = -P theta - s`` valid on one zone.

    With all coupling rows active and no bound active this is
    ``P = (G H^-1 G')^-1`` and ``s = P G H^-1 f`` (``G`` the coupling matrix).
    Rows of inactive coupling constraints are identically zero.
    """
    c = prob.size
    work = sorted(int(i) for i in active_set)
    a, _ = constraint_rows(prob, np.zeros(c))
    p_mat = np.zeros((c, c))
    s_vec = np.zeros(c)
    if not work:
        return ExplicitPiece(p_mat, s_vec, frozenset())
    a_w = a[work]
    hinv_at = np.linalg.solve(prob.h, a_w.T)
    schur = a_w @ hinv_at
    if np.linalg.matrix_rank(schur) < len(work):
        raise DegeneratePiece(f"active set {work} has dependent constraint gradients")
    s_inv = np.linalg.inv(schur)
    coupling = [j for j, i in enumerate(work) if i < c]
    rows = [work[j] for j in coupling]
    # nu = -S^-1 (E theta + a_w H^-1 f), E selects theta on the coupling rows
    sel = np.zeros((len(work), c))
    for j, i in enumerate(work):
        if i < c:
            sel[j, i] = 1.0
    full_p = s_inv @ sel
    full_s = s_inv @ (a_w @ np.linalg.solve(prob.h, prob.f))
    p_mat[rows] = full_p[coupling]
    s_vec[rows] = full_s[coupling]
    return ExplicitPiece(p_mat, s_vec, frozenset(work))


def unconstrained_solution(prob: AgentProblem) -> np.ndarray:
    return -np.linalg.solve(prob.h, prob.f)


def apply_attack(spec: AttackSpec | None, lam, k: int):
    lam = np.asarray(lam, dtype=float)
    if spec is None or k < spec.active_from:
        return lam
    return spec.t_mat @ lam


class RoomAgent:
    """One MPC agent: builds its condensed problem and answers allocations.

    The attack (if any) is applied to the outgoing dual after the local
    solve, so it never changes which constraints are active.
    """

    def __init__(self, name, model, n_p, q, r, reference, gamma, u_max, attack=None):
        from .core_model import prediction_matrices

        self.name = name
        self.model = model
        self.n_p = int(n_p)
        self.q = np.atleast_2d(np.asarray(q, dtype=float))
        self.r = np.atleast_2d(np.asarray(r, dtype=float))
        self.reference = np.atleast_1d(np.asarray(reference, dtype=float))
        self.gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
        self.u_max = np.atleast_1d(np.asarray(u_max, dtype=float))
        self.attack = attack
        self.pred = prediction_matrices(model, self.n_p)
        self.gamma_bar = np.kron(np.eye(self.n_p), self.gamma)
        if np.any(self.gamma_bar < 0):
            raise ValueError(f"{name}: coupling weights must be nonnegative")

    def problem(self, x) -> AgentProblem:
        from .core_model import condense_qp

        h, f = condense_qp(self.pred, self.q, self.r, x, self.reference)
        return AgentProblem(h=h, f=f, gamma_bar=self.gamma_bar, u_max=self.u_max,
                            q_weight=self.q, r_weight=self.r, reference=self.reference)

    def respond(self, prob: AgentProblem, theta, k: int):
        sol = solve_local_qp(prob, theta)
        return apply_attack(self.attack, sol.lam, k), sol
