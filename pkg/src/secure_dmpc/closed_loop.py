"""Receding-horizon simulation of the negotiated (and optionally supervised) MPC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coordinator import NegotiationConfig, negotiate, warm_start
from .em_defense.supervision import SupervisionConfig, nominal_record, secure_round
from .local_agent import DegeneratePiece, InfeasibleAllocation, RoomAgent
from .qp import QPError

__all__ = ["ClosedLoopSetup", "ClosedLoopTrace", "run_closed_loop", "SimulationAborted"]


class SimulationAborted(RuntimeError):
    def __init__(self, k, cause):
        super().__init__(f"closed loop aborted at step {k}: {cause}")
        self.step = k
        self.cause = cause


@dataclass
class ClosedLoopSetup:
    agents: list  # RoomAgent
    x0: list
    n_steps: int
    u_max: np.ndarray
    negotiation: NegotiationConfig = field(default_factory=NegotiationConfig)
    supervision: SupervisionConfig | None = None
    seed: int = 0


@dataclass
class ClosedLoopTrace:
    """Per-step records; agent is the second axis of every array.

    ``y[k]`` is the output reached after applying ``u[k]`` (time k+1).
    """

    names: list
    x: np.ndarray  # (N, M, n_x) state at k
    u: np.ndarray  # (N, M, n_u) applied input
    y: np.ndarray  # (N, M, n_y)
    theta: np.ndarray  # (N, M, c)
    duals: np.ndarray  # (N, M, c) as used by the coordinator
    u_plan: np.ndarray  # (N, M, c) converged local sequences
    iterations: np.ndarray  # (N,)
    converged: np.ndarray  # (N,)
    residual: np.ndarray  # (N,)
    e_val: np.ndarray  # (N, M), NaN without supervision
    flag: np.ndarray  # (N, M) int
    warnings: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.u.shape[0]

    @property
    def n_agents(self) -> int:
        return self.u.shape[1]


def run_closed_loop(setup: ClosedLoopSetup) -> ClosedLoopTrace:
    agents: list[RoomAgent] = setup.agents
    m, n_steps = len(agents), setup.n_steps
    n_p, n_u = agents[0].n_p, agents[0].u_max.size
    c = n_p * n_u
    u_max_stacked = np.tile(np.asarray(setup.u_max, dtype=float), n_p)
    xs = [np.asarray(x, dtype=float).copy() for x in setup.x0]
    n_x, n_y = xs[0].size, agents[0].model.n_y

    rec = dict(
        x=np.zeros((n_steps, m, n_x)), u=np.zeros((n_steps, m, n_u)), y=np.zeros((n_steps, m, n_y)),
        theta=np.zeros((n_steps, m, c)), duals=np.zeros((n_steps, m, c)), u_plan=np.zeros((n_steps, m, c)),
        iterations=np.zeros(n_steps, dtype=int), converged=np.zeros(n_steps, dtype=bool),
        residual=np.zeros(n_steps), e_val=np.full((n_steps, m), np.nan), flag=np.zeros((n_steps, m), dtype=int),
    )
    warnings = []
    sup = setup.supervision
    nominals = None
    detections = None
    previous = None
    for k in range(n_steps):
        problems = [a.problem(x) for a, x in zip(agents, xs)]
        theta0 = warm_start(previous, u_max_stacked, m, n_u)
        try:
            if sup is None:
                def source(i, theta, _k=k, _p=problems):
                    return agents[i].respond(_p[i], theta, _k)

                result = negotiate(problems, theta0, setup.negotiation, source)
            else:
                if nominals is None:
                    nominals = [nominal_record(p) for p in problems]
                responders = [
                    (lambda theta, _a=a, _p=p, _k=k: _a.respond(_p, theta, _k))
                    for a, p in zip(agents, problems)
                ]
                reuse = detections if (k % max(sup.stride, 1)) else None
                detections, result = secure_round(
                    problems, responders, nominals, theta0, setup.negotiation, sup,
                    seed=[setup.seed, k], detections=reuse,
                )
                for i, det in enumerate(detections):
                    rec["e_val"][k, i] = det.e_val
                    rec["flag"][k, i] = int(det.flag)
                    if det.warning:
                        warnings.append((k, agents[i].name, det.warning))
        except (QPError, InfeasibleAllocation, DegeneratePiece, np.linalg.LinAlgError) as exc:
            raise SimulationAborted(k, exc) from exc
        if not result.converged:
            warnings.append((k, "coordinator", f"negotiation not converged (residual {result.residual:.3e})"))
        for i, (a, sol) in enumerate(zip(agents, result.solutions)):
            u_now = sol.u_star[:n_u]
            rec["x"][k, i] = xs[i]
            xs[i] = a.model.step(xs[i], u_now)
            rec["u"][k, i] = u_now
            rec["y"][k, i] = a.model.output(xs[i])
            rec["theta"][k, i] = result.thetas[i]
            rec["duals"][k, i] = result.duals[i]
            rec["u_plan"][k, i] = sol.u_star
        rec["iterations"][k] = result.iterations
        rec["converged"][k] = result.converged
        rec["residual"][k] = result.residual
        previous = result.thetas
    return ClosedLoopTrace(names=[a.name for a in agents], warnings=warnings, **rec)
