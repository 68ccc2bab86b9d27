"""Scenario configuration, benchmark construction and objective accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .closed_loop import ClosedLoopSetup, ClosedLoopTrace, run_closed_loop
from .coordinator import NegotiationConfig
from .core_model import ThermalParams, build_thermal_model, discretize_zoh
from .em_defense.supervision import SupervisionConfig
from .local_agent import AttackSpec, RoomAgent

__all__ = [
    "ConfigError",
    "RoomConfig",
    "AttackConfig",
    "ScenarioConfig",
    "ObjectiveReport",
    "MODES",
    "load_config",
    "benchmark_path",
    "build_setup",
    "run_scenario",
    "compute_objectives",
]

MODES = ("nominal", "selfish", "corrected")


class ConfigError(ValueError):
    """Unreadable or invalid scenario configuration."""


Matrix = Union[float, list[float], list[list[float]]]


def _as_matrix(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return arr * np.eye(n)
    if arr.ndim == 1:
        return np.diag(arr)
    if arr.shape != (n, n):
        raise ValueError(f"{name} must be {n}x{n}, got {arr.shape}")
    return arr


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RoomConfig(_Strict):
    name: str
    c_air: float = Field(gt=0)
    c_walls: float = Field(gt=0)
    r_oa_ia: float = Field(gt=0)
    r_iw_ia: float = Field(gt=0)
    r_ow_oa: float = Field(gt=0)
    reference: float = 25.5
    x0: list[float] = Field(default_factory=lambda: [0.0, 0.0], min_length=2, max_length=2)
    q: Matrix = 1.0
    r: Matrix = 1e-4
    gamma: Matrix = 1.0

    def thermal(self) -> ThermalParams:
        return ThermalParams(self.c_air, self.c_walls, self.r_oa_ia, self.r_iw_ia, self.r_ow_oa)


class AttackConfig(_Strict):
    agent: str
    t_mat: Optional[list[list[float]]] = None
    t_diag: Optional[list[float]] = None
    active_from: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _one_form(self):
        if (self.t_mat is None) == (self.t_diag is None):
            raise ValueError("give exactly one of t_mat or t_diag")
        return self

    def matrix(self) -> np.ndarray:
        return np.diag(self.t_diag) if self.t_diag is not None else np.asarray(self.t_mat, dtype=float)


class NegotiationSection(_Strict):
    rho0: Optional[float] = Field(default=None, gt=0)
    beta: float = Field(default=10.0, gt=0)
    eps_theta: Optional[float] = Field(default=None, gt=0)
    max_iters: int = Field(default=5000, ge=1)


class SupervisionSection(_Strict):
    enabled: bool = True
    eps_p: float = Field(default=1e-4, ge=0)
    n_zones: int = Field(default=2, ge=1)
    n_probes: Optional[int] = Field(default=None, ge=2)
    delta: Optional[float] = Field(default=None, gt=0)
    probe_retries: int = Field(default=3, ge=0)
    anneal: float = Field(default=0.5, gt=0, le=1)
    em_tol: float = Field(default=1e-9, gt=0)
    em_max_iter: int = Field(default=500, ge=1)
    stride: int = Field(default=1, ge=1)


class ScenarioConfig(_Strict):
    rooms: list[RoomConfig] = Field(min_length=1)
    ts: float = Field(default=0.25, gt=0)
    ts_unit_seconds: float = Field(default=3600.0, gt=0)
    ro_resistance: Literal["r_ow_oa", "r_oa_ia", "r_iw_ia"] = "r_ow_oa"
    n_p: int = Field(default=4, ge=1)
    n_steps: int = Field(default=50, ge=1)
    budget: float = Field(default=4.0, gt=0)
    attack: Optional[AttackConfig] = None
    defense_enabled: bool = True
    negotiation: NegotiationSection = Field(default_factory=NegotiationSection)
    supervision: SupervisionSection = Field(default_factory=SupervisionSection)
    seed: int = 0

    @field_validator("rooms")
    @classmethod
    def _unique_names(cls, rooms):
        names = [r.name for r in rooms]
        if len(set(names)) != len(names):
            raise ValueError("room names must be unique")
        return rooms

    @model_validator(mode="after")
    def _attack_target(self):
        if self.attack is not None:
            if self.attack.agent not in [r.name for r in self.rooms]:
                raise ValueError(f"attack targets unknown room {self.attack.agent!r}")
            t = self.attack.matrix()
            if t.shape != (self.n_p, self.n_p):
                raise ValueError(f"attack matrix must be {self.n_p}x{self.n_p}, got {t.shape}")
        return self

    @property
    def room_names(self) -> list[str]:
        return [r.name for r in self.rooms]


def benchmark_path() -> Path:
    return Path(str(resources.files("secure_dmpc") / "data" / "benchmark.yaml"))


def load_config(path=None, **overrides) -> ScenarioConfig:
    """Parse and validate a YAML scenario (the bundled benchmark by default)."""
    path = benchmark_path() if path is None else Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: parse error{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    raw.update(overrides)
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
        ]
        raise ConfigError(f"{path}: invalid config\n  " + "\n  ".join(lines)) from exc


def build_setup(cfg: ScenarioConfig, mode: str = "nominal", *, defense: bool | None = None) -> ClosedLoopSetup:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode != "nominal" and cfg.attack is None:
        raise ConfigError(f"mode {mode!r} needs an attack section")
    ts_seconds = cfg.ts * cfg.ts_unit_seconds
    agents = []
    for room in cfg.rooms:
        model = discretize_zoh(build_thermal_model(room.thermal(), ro=cfg.ro_resistance), ts_seconds)
        n_u, n_y = model.n_u, model.n_y
        attack = None
        if mode != "nominal" and room.name == cfg.attack.agent:
            attack = AttackSpec(cfg.attack.matrix(), cfg.attack.active_from)
        agents.append(RoomAgent(
            room.name, model, cfg.n_p,
            q=_as_matrix(room.q, n_y, "q"), r=_as_matrix(room.r, n_u, "r"),
            reference=[room.reference], gamma=_as_matrix(room.gamma, n_u, "gamma"),
            u_max=np.full(n_u, cfg.budget), attack=attack,
        ))
    sup = None
    if cfg.supervision.enabled:
        s = cfg.supervision
        correct = mode == "corrected" and cfg.defense_enabled
        if defense is not None:
            correct = correct and defense
        sup = SupervisionConfig(
            eps_p=s.eps_p, n_zones=s.n_zones, n_probes=s.n_probes, delta=s.delta,
            probe_retries=s.probe_retries, anneal=s.anneal, em_tol=s.em_tol,
            em_max_iter=s.em_max_iter, stride=s.stride, correct=correct,
        )
    elif mode == "corrected":
        raise ConfigError("corrected mode needs supervision.enabled = true")
    n = cfg.negotiation
    return ClosedLoopSetup(
        agents=agents,
        x0=[np.asarray(r.x0, dtype=float) for r in cfg.rooms],
        n_steps=cfg.n_steps,
        u_max=np.full(agents[0].u_max.size, cfg.budget),
        negotiation=NegotiationConfig(rho0=n.rho0, beta=n.beta, eps_theta=n.eps_theta, max_iters=n.max_iters),
        supervision=sup,
        seed=cfg.seed,
    )


@dataclass
class ObjectiveReport:
    names: list
    per_agent: np.ndarray
    total: float
    percent: np.ndarray | None = None  # per agent, vs baseline
    total_percent: float | None = None
    mode: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "agents": {n: float(j) for n, j in zip(self.names, self.per_agent)},
            "global": float(self.total),
        }
        if self.percent is not None:
            out["percent_error"] = {n: float(p) for n, p in zip(self.names, self.percent)}
            out["percent_error"]["global"] = float(self.total_percent)
        out.update(self.extra)
        return out


def compute_objectives(trace: ClosedLoopTrace, cfg: ScenarioConfig, baseline: ObjectiveReport | None = None,
                       mode: str = "") -> ObjectiveReport:
    """Realized cost ``sum_k |w - y[k+1]|_Q^2 + |u[k]|_R^2`` per agent."""
    if trace.n_agents != len(cfg.rooms):
        raise ValueError(f"trace has {trace.n_agents} agents, config has {len(cfg.rooms)}")
    if trace.y.shape[0] != trace.u.shape[0]:
        raise ValueError("trace outputs and inputs differ in length")
    per_agent = np.zeros(trace.n_agents)
    for i, room in enumerate(cfg.rooms):
        q = _as_matrix(room.q, trace.y.shape[2], "q")
        r = _as_matrix(room.r, trace.u.shape[2], "r")
        err = room.reference - trace.y[:, i, :]
        u = trace.u[:, i, :]
        per_agent[i] = np.einsum("ki,ij,kj->", err, q, err) + np.einsum("ki,ij,kj->", u, r, u)
    total = float(per_agent.sum())
    report = ObjectiveReport(list(trace.names), per_agent, total, mode=mode)
    if baseline is not None:
        if list(baseline.names) != list(trace.names):
            raise ValueError("baseline covers different agents")
        report.percent = 100.0 * (per_agent - baseline.per_agent) / baseline.per_agent
        report.total_percent = 100.0 * (total - baseline.total) / baseline.total
    return report


def run_scenario(cfg: ScenarioConfig, mode: str = "nominal", *, baseline: ObjectiveReport | None = None,
                 defense: bool | None = None) -> tuple[ClosedLoopTrace, ObjectiveReport]:
    trace = run_closed_loop(build_setup(cfg, mode, defense=defense))
    return trace, compute_objectives(trace, cfg, baseline, mode)
