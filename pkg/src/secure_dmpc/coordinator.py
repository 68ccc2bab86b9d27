"""Master problem: projected-subgradient negotiation over resource allocations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core_model import AgentProblem
from .local_agent import LocalSolution, solve_local_qp
from .qp import solve_qp

__all__ = [
    "NegotiationConfig",
    "NegotiationResult",
    "project_onto_allocation_set",
    "in_allocation_set",
    "negotiate",
    "truthful_source",
    "solve_centralized",
    "warm_start",
]

log = logging.getLogger(__name__)

# dual_source(agent_index, theta_i) -> (dual seen by the coordinator, local solution)
DualSource = Callable[[int, np.ndarray], "tuple[np.ndarray, LocalSolution]"]


@dataclass
class NegotiationConfig:
    """Step-size schedule ``rho_p = rho0 / (1 + p / beta)`` and stopping rule.

    ``None`` entries are resolved against the budget vector by :meth:`resolve`.
    """

    rho0: float | None = None
    beta: float = 10.0
    eps_theta: float | None = None
    max_iters: int = 5000

    def resolve(self, u_max, u_max_stacked) -> "NegotiationConfig":
        rho0 = 0.05 * float(np.linalg.norm(u_max)) if self.rho0 is None else self.rho0
        eps = self.eps_theta
        if eps is None:
            eps = 1e-8 * max(1.0, float(np.linalg.norm(u_max_stacked)))
        out = NegotiationConfig(rho0=rho0, beta=self.beta, eps_theta=eps, max_iters=self.max_iters)
        out.validate()
        return out

    def validate(self):
        if self.rho0 is not None and not self.rho0 > 0:
            raise ValueError(f"rho0 must be positive, got {self.rho0}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.eps_theta is not None and not self.eps_theta > 0:
            raise ValueError(f"eps_theta must be positive, got {self.eps_theta}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")

    def step(self, p: int) -> float:
        return self.rho0 / (1.0 + p / self.beta)


@dataclass
class NegotiationResult:
    thetas: np.ndarray  # (M, c)
    solutions: list  # LocalSolution per agent at ``thetas``
    duals: np.ndarray  # (M, c) duals as used by the coordinator at ``thetas``
    iterations: int
    residual: float
    converged: bool
    history: list = field(default_factory=list, repr=False)


def project_onto_allocation_set(v, u_max_stacked) -> np.ndarray:
    """Euclidean projection onto ``{theta >= 0, sum_i theta_i <= U_max}``.

    The set is a product over resource coordinates, so each column
    ``v[:, r]`` is projected on the capped simplex
    ``{x >= 0, sum(x) <= U_max[r]}``: ``x = max(v - tau, 0)`` with
    ``tau = 0`` when the clamped vector already fits the budget.

    Parameters
    ----------
    v : ndarray, shape (M, c)
    u_max_stacked : ndarray, shape (c,)
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    cap = np.broadcast_to(np.asarray(u_max_stacked, dtype=float), (v.shape[1],))
    out = np.maximum(v, 0.0)
    over = out.sum(axis=0) > cap
    if not np.any(over):
        return out
    cols = np.flatnonzero(over)
    srt = -np.sort(-v[:, cols], axis=0)  # descending per column
    css = np.cumsum(srt, axis=0) - cap[cols]
    idx = np.arange(1, v.shape[0] + 1)[:, None]
    count = np.count_nonzero(srt - css / idx > 0, axis=0)
    tau = css[count - 1, np.arange(cols.size)] / count
    out[:, cols] = np.maximum(v[:, cols] - tau, 0.0)
    return out


def in_allocation_set(thetas, u_max_stacked, tol=1e-12) -> bool:
    thetas = np.atleast_2d(thetas)
    return bool(np.all(thetas >= -tol) and np.all(thetas.sum(axis=0) <= np.asarray(u_max_stacked) + tol))


def truthful_source(problems: Sequence[AgentProblem]) -> DualSource:
    def source(i, theta):
        sol = solve_local_qp(problems[i], theta)
        return sol.lam, sol

    return source


def negotiate(problems: Sequence[AgentProblem], theta_init, cfg: NegotiationConfig,
              dual_source: DualSource | None = None, *, keep_history=False) -> NegotiationResult:
    """Quantity-decomposition negotiation.

    Iterates ``theta <- Proj_S(theta + rho_p * lam)`` until the allocation
    moves by at most ``eps_theta``.  Non-convergence is reported on the
    result, never raised: a falsified dual may keep the loop from settling.
    """
    thetas = np.array(theta_init, dtype=float)
    m = len(problems)
    u_max_stacked = np.tile(problems[0].u_max, thetas.shape[1] // problems[0].u_max.size)
    cfg = cfg.resolve(problems[0].u_max, u_max_stacked)
    source = dual_source or truthful_source(problems)
    history = []
    residual = np.inf
    converged = False
    p = 0
    while p < cfg.max_iters:
        duals = np.vstack([source(i, thetas[i])[0] for i in range(m)])
        new = project_onto_allocation_set(thetas + cfg.step(p) * duals, u_max_stacked)
        residual = float(np.linalg.norm(new - thetas))
        thetas = new
        p += 1
        if keep_history:
            history.append(thetas.copy())
        if residual <= cfg.eps_theta:
            converged = True
            break
    if not converged:
        log.warning("negotiation stopped after %d iterations (residual %.3e)", p, residual)
    final = [source(i, thetas[i]) for i in range(m)]
    return NegotiationResult(
        thetas=thetas,
        solutions=[s for _, s in final],
        duals=np.vstack([d for d, _ in final]),
        iterations=p,
        residual=residual,
        converged=converged,
        history=history,
    )


def warm_start(previous, u_max_stacked, n_agents: int, n_u: int) -> np.ndarray:
    """Initial allocation: shifted previous solution, or an equal budget split."""
    if previous is None:
        return np.tile(np.asarray(u_max_stacked, dtype=float) / n_agents, (n_agents, 1))
    prev = np.asarray(previous, dtype=float)
    shifted = np.concatenate([prev[:, n_u:], prev[:, -n_u:]], axis=1)
    return project_onto_allocation_set(shifted, u_max_stacked)


def solve_centralized(problems: Sequence[AgentProblem]):
    """Monolithic QP over all agents' input sequences.

    ``min sum_i 1/2 U_i'H_iU_i + f_i'U_i`` s.t. ``sum_i G_i U_i <= U_max``, ``U >= 0``.

    Returns
    -------
    us : list of ndarray
        Optimal input sequence per agent.
    """
    sizes = [p.size for p in problems]
    n = sum(sizes)
    c = sizes[0]
    h = np.zeros((n, n))
    f = np.zeros(n)
    coupling = np.zeros((c, n))
    off = 0
    for p, s in zip(problems, sizes):
        h[off:off + s, off:off + s] = p.h
        f[off:off + s] = p.f
        coupling[:, off:off + s] = p.gamma_bar
        off += s
    u_max_stacked = np.tile(problems[0].u_max, c // problems[0].u_max.size)
    a = np.vstack([coupling, -np.eye(n)])
    b = np.concatenate([u_max_stacked, np.zeros(n)])
    res = solve_qp(h, f, a, b, np.zeros(n), max_changes=2000)
    return np.split(res.x, np.cumsum(sizes)[:-1])
