"""Per-agent supervision: probing, identification, detection and dual repair."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..coordinator import NegotiationConfig, NegotiationResult, negotiate
from ..core_model import AgentProblem
from ..local_agent import InfeasibleAllocation, explicit_dual_piece
from ..qp import QPError
from .mixture import EMResult, match_one_zone, run_em

__all__ = [
    "SupervisionConfig",
    "ProbeSet",
    "NominalRecord",
    "DetectionResult",
    "ReconstructionError",
    "generate_probes",
    "collect_probe_responses",
    "nominal_record",
    "detect",
    "estimate_t_inv",
    "reconstruct_lambda",
    "supervise_agent",
    "secure_round",
]

log = logging.getLogger(__name__)

# respond(theta) -> (dual as sent, local solution)
Responder = Callable[[np.ndarray], tuple]


class ReconstructionError(ValueError):
    """Identified slope matrix too ill-conditioned to invert."""


@dataclass
class SupervisionConfig:
    eps_p: float = 1e-4
    n_zones: int = 2
    n_probes: int | None = None  # default max(c + 1, 5c)
    delta: float | None = None  # default 1e-3 * |u_max|
    probe_retries: int = 3
    anneal: float = 0.5
    em_tol: float = 1e-9
    em_max_iter: int = 500
    stride: int = 1
    correct: bool = True

    def probe_count(self, c: int) -> int:
        return self.n_probes if self.n_probes is not None else max(c + 1, 5 * c)


@dataclass
class ProbeSet:
    thetas: np.ndarray  # (c, O)
    lambdas: np.ndarray  # (c, O)
    zero_index: int = 0
    active_sets: list = field(default_factory=list)

    def __post_init__(self):
        c, o = self.thetas.shape
        if self.lambdas.shape != (c, o):
            raise ValueError(f"responses have shape {self.lambdas.shape}, expected {(c, o)}")
        if o < c + 1:
            raise ValueError(f"need at least {c + 1} probes, got {o}")


@dataclass
class NominalRecord:
    p1_bar: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p1_bar, dtype=float)
        if not np.allclose(p, p.T, rtol=1e-9, atol=1e-14 * max(1.0, np.abs(p).max())):
            raise ValueError("nominal slope matrix must be symmetric")
        if np.linalg.eigvalsh(0.5 * (p + p.T)).min() <= 0:
            raise ValueError("nominal slope matrix must be positive definite")
        self.p1_bar = p


@dataclass
class DetectionResult:
    e_val: float
    flag: bool
    t_inv_hat: np.ndarray | None = None
    p1_hat: np.ndarray | None = None
    s1_hat: np.ndarray | None = None
    warning: str | None = None
    em: EMResult | None = field(default=None, repr=False)


def _affine_rank(points) -> int:
    return int(np.linalg.matrix_rank(points[:, 1:] - points[:, [0]]))


def generate_probes(c: int, o_count: int, delta: float, seed) -> np.ndarray:
    """Zero allocation plus ``o_count - 1`` uniform draws in ``[0, delta]^c``.

    Column 0 is the zero vector.  Draws are repeated until the set spans
    ``c + 1`` affinely independent points.
    """
    if o_count < c + 1:
        raise ValueError(f"need at least {c + 1} probes, got {o_count}")
    if not delta > 0:
        raise ValueError(f"probe spread must be positive, got {delta}")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        pts = np.hstack([np.zeros((c, 1)), rng.uniform(0.0, delta, size=(c, o_count - 1))])
        if _affine_rank(pts) == c:
            return pts
    raise RuntimeError("could not draw an affinely independent probe set")


def collect_probe_responses(respond: Responder, probes: np.ndarray) -> ProbeSet:
    """Send every probe allocation and gather the returned duals.

    Probes on which the agent fails to answer are dropped.
    """
    thetas, lambdas, actives = [], [], []
    zero_index = None
    for o in range(probes.shape[1]):
        try:
            lam, sol = respond(probes[:, o])
        except (QPError, InfeasibleAllocation) as exc:
            log.warning("probe %d dropped: %s", o, exc)
            continue
        if zero_index is None and not np.any(probes[:, o]):
            zero_index = len(thetas)
        thetas.append(probes[:, o])
        lambdas.append(np.asarray(lam, dtype=float))
        actives.append(sol.active_set)
    if zero_index is None:
        raise ValueError("zero probe missing or dropped")
    return ProbeSet(np.array(thetas).T, np.array(lambdas).T, zero_index, actives)


def nominal_record(prob: AgentProblem) -> NominalRecord:
    """Nominal all-active slope ``(G H^-1 G')^-1`` from the declared model."""
    c = prob.size
    return NominalRecord(explicit_dual_piece(prob, range(c)).p_mat)


def detect(p1_hat, nominal: NominalRecord, eps_p: float) -> DetectionResult:
    p1_hat = np.asarray(p1_hat, dtype=float)
    if p1_hat.shape != nominal.p1_bar.shape:
        raise ValueError(f"shape mismatch {p1_hat.shape} vs {nominal.p1_bar.shape}")
    e_val = float(np.linalg.norm(p1_hat - nominal.p1_bar, "fro"))
    return DetectionResult(e_val=e_val, flag=bool(e_val >= eps_p), p1_hat=p1_hat)


def estimate_t_inv(nominal: NominalRecord, p1_hat, max_cond: float = 1e12) -> np.ndarray:
    p1_hat = np.asarray(p1_hat, dtype=float)
    cond = np.linalg.cond(p1_hat)
    if not np.isfinite(cond) or cond >= max_cond:
        raise ReconstructionError(f"identified slope matrix is near-singular (cond={cond:.3e})")
    # P_bar @ inv(P_hat), without forming the inverse
    return np.linalg.solve(p1_hat.T, nominal.p1_bar.T).T


def reconstruct_lambda(t_inv_hat, lambda_tilde, tol: float = 1e-9):
    """Undo the falsification; returns ``(lam_rec, inconsistent)``.

    Negative entries are clipped to zero; ``inconsistent`` is set when any
    was below ``-tol``.
    """
    lam = np.asarray(t_inv_hat, dtype=float) @ np.asarray(lambda_tilde, dtype=float)
    inconsistent = bool(np.any(lam < -tol))
    return np.maximum(lam, 0.0), inconsistent


def _all_coupling_active(active_set, c):
    return all(r in active_set for r in range(c))


def supervise_agent(respond: Responder, prob: AgentProblem, nominal: NominalRecord,
                    cfg: SupervisionConfig, seed) -> DetectionResult:
    """Detection phase for one agent at one time step."""
    c = prob.size
    delta = cfg.delta if cfg.delta is not None else 1e-3 * float(np.linalg.norm(prob.u_max))
    o_count = cfg.probe_count(c)
    rng = np.random.default_rng(seed)
    warning = None
    for attempt in range(cfg.probe_retries + 1):
        probes = generate_probes(c, o_count, delta, rng.integers(2**63))
        data = collect_probe_responses(respond, probes)
        if all(_all_coupling_active(a, c) for a in data.active_sets):
            break
        if attempt == cfg.probe_retries:
            warning = "probes left the all-active zone"
            log.warning("%s after %d retries (delta=%.3e)", warning, attempt, delta)
            break
        delta *= 0.1
    if not np.any(data.lambdas):
        # a satisfied agent answers zero for any linear map, so there is nothing to identify
        return DetectionResult(e_val=0.0, flag=False, warning="zero duals at every probe; identification skipped")
    em = run_em(data.thetas, data.lambdas, cfg.n_zones, anneal=cfg.anneal, seed=rng.integers(2**63),
                center=nominal.p1_bar, tol=cfg.em_tol, max_iter=cfg.em_max_iter)
    zone = match_one_zone(em.resp, data.zero_index)
    result = detect(em.params.p_mats[zone], nominal, cfg.eps_p)
    result.s1_hat = em.params.s_vecs[zone]
    result.em = em
    if not em.converged:
        warning = "EM did not converge"
    if result.flag:
        try:
            result.t_inv_hat = estimate_t_inv(nominal, result.p1_hat)
        except ReconstructionError as exc:
            warning = str(exc)
            log.warning("reconstruction unavailable: %s", exc)
    result.warning = warning
    return result


def secure_round(problems: Sequence[AgentProblem], responders: Sequence[Callable], nominals,
                 theta_init, neg_cfg: NegotiationConfig, sup_cfg: SupervisionConfig, seed,
                 detections=None) -> tuple[list, NegotiationResult]:
    """Detection phase followed by a negotiation on trusted or repaired duals.

    ``responders[i](theta)`` returns ``(dual as sent, local solution)``.
    Pass ``detections`` to reuse results from an earlier step instead of
    probing again.  An agent flagged without a usable inverse keeps its raw
    duals and the result carries a warning.
    """
    if detections is None:
        ss = np.random.SeedSequence(seed)
        detections = [
            supervise_agent(responders[i], problems[i], nominals[i], sup_cfg, child)
            for i, child in enumerate(ss.spawn(len(problems)))
        ]
    clips = [0] * len(problems)

    def source(i, theta):
        lam_tilde, sol = responders[i](theta)
        det = detections[i]
        if sup_cfg.correct and det.flag and det.t_inv_hat is not None:
            lam_rec, bad = reconstruct_lambda(det.t_inv_hat, lam_tilde)
            clips[i] += int(bad)
            return lam_rec, sol
        return lam_tilde, sol

    result = negotiate(problems, theta_init, neg_cfg, source)
    for i, n in enumerate(clips):
        if n:
            msg = f"{n} inconsistent reconstructions clipped"
            detections[i].warning = f"{detections[i].warning}; {msg}" if detections[i].warning else msg
    return detections, result
