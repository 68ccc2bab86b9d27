"""Room thermal models, zero-order-hold discretization and MPC condensing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

__all__ = [
    "ThermalParams",
    "ContinuousLti",
    "DiscreteLti",
    "PredictionOperator",
    "AgentProblem",
    "build_thermal_model",
    "discretize_zoh",
    "prediction_matrices",
    "condense_qp",
    "INPUT_GAIN",
]

# Heating input enters the wall node as b_c = [INPUT_GAIN / c_walls, 0]^T.
INPUT_GAIN = 10.0


@dataclass(frozen=True)
class ThermalParams:
    """Lumped 3R-2C room parameters (SI units).

    Attributes
    ----------
    c_air, c_walls : float
        Heat capacities of the inside air and of the external walls (J/K).
    r_oa_ia : float
        Resistance between inside and outside air, through windows (K/W).
    r_iw_ia : float
        Resistance between inside air and inside walls (K/W).
    r_ow_oa : float
        Resistance between outside walls and outside air (K/W).
    """

    c_air: float
    c_walls: float
    r_oa_ia: float
    r_iw_ia: float
    r_ow_oa: float

    def __post_init__(self):
        for name in ("c_air", "c_walls", "r_oa_ia", "r_iw_ia", "r_ow_oa"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be strictly positive, got {value!r}")


@dataclass(frozen=True)
class ContinuousLti:
    a_c: np.ndarray
    b_c: np.ndarray
    c_c: np.ndarray

    def __post_init__(self):
        _check_dims(self.a_c, self.b_c, self.c_c)


@dataclass(frozen=True)
class DiscreteLti:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    ts: float

    def __post_init__(self):
        _check_dims(self.a, self.b, self.c)
        if not self.ts > 0:
            raise ValueError(f"sampling time must be positive, got {self.ts!r}")

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.b.shape[1]

    @property
    def n_y(self) -> int:
        return self.c.shape[0]

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.a @ x + self.b @ u

    def output(self, x: np.ndarray) -> np.ndarray:
        return self.c @ x


@dataclass(frozen=True)
class PredictionOperator:
    """Stacked predictions ``Y = m_pred @ x0 + d_pred @ U`` over the horizon.

    ``Y`` stacks outputs at k+1..k+N_p, ``U`` stacks inputs at k..k+N_p-1.
    """

    m_pred: np.ndarray
    d_pred: np.ndarray
    n_p: int
    n_u: int
    n_y: int


@dataclass
class AgentProblem:
    """Condensed local problem ``min 1/2 U'hU + f'U`` s.t. ``gamma_bar U <= theta, U >= 0``."""

    h: np.ndarray
    f: np.ndarray
    gamma_bar: np.ndarray
    u_max: np.ndarray
    q_weight: np.ndarray
    r_weight: np.ndarray
    reference: np.ndarray

    @property
    def size(self) -> int:
        return self.h.shape[0]


def _check_dims(a, b, c):
    a, b, c = np.atleast_2d(a), np.atleast_2d(b), np.atleast_2d(c)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"state matrix must be square, got {a.shape}")
    if b.shape[0] != n:
        raise ValueError(f"input matrix has {b.shape[0]} rows, expected {n}")
    if c.shape[1] != n:
        raise ValueError(f"output matrix has {c.shape[1]} columns, expected {n}")


def build_thermal_model(p: ThermalParams, ro: str = "r_ow_oa") -> ContinuousLti:
    """Continuous-time 3R-2C room model.

    State 0 is the measured temperature (``c_c = [1, 0]``); the heating power
    enters through ``b_c = [INPUT_GAIN / c_walls, 0]``.  ``ro`` names the
    resistance used in the air-loss term of ``a_c[1, 1]``.
    """
    if not isinstance(p, ThermalParams):
        p = ThermalParams(**p)
    r_o = getattr(p, ro)
    a_c = np.array(
        [
            [-1.0 / (p.c_walls * p.r_oa_ia) - 1.0 / (p.c_walls * p.r_iw_ia),
             1.0 / (p.c_walls * p.r_iw_ia)],
            [1.0 / (p.c_air * p.r_iw_ia),
             -1.0 / (p.c_air * r_o) - 1.0 / (p.c_air * p.r_iw_ia)],
        ]
    )
    b_c = np.array([[INPUT_GAIN / p.c_walls], [0.0]])
    c_c = np.array([[1.0, 0.0]])
    return ContinuousLti(a_c, b_c, c_c)


def discretize_zoh(m: ContinuousLti, ts: float) -> DiscreteLti:
    """Exact zero-order-hold discretization.

    Uses the exponential of the augmented matrix ``[[a_c, b_c], [0, 0]] * ts``,
    whose top blocks are ``exp(a_c ts)`` and ``int_0^ts exp(a_c t) dt b_c``.
    """
    if not ts > 0:
        raise ValueError(f"sampling time must be positive, got {ts!r}")
    a_c = np.atleast_2d(np.asarray(m.a_c, dtype=float))
    b_c = np.atleast_2d(np.asarray(m.b_c, dtype=float))
    n, nu = a_c.shape[0], b_c.shape[1]
    aug = np.zeros((n + nu, n + nu))
    aug[:n, :n] = a_c
    aug[:n, n:] = b_c
    phi = expm(aug * ts)
    return DiscreteLti(phi[:n, :n], phi[:n, n:], np.atleast_2d(np.asarray(m.c_c, float)), float(ts))


def prediction_matrices(m: DiscreteLti, n_p: int) -> PredictionOperator:
    if n_p < 1:
        raise ValueError(f"horizon must be >= 1, got {n_p}")
    n_x, n_u, n_y = m.n_x, m.n_u, m.n_y
    # markov[j] = c a^j ; impulse[j] = c a^j b
    powers = [np.eye(n_x)]
    for _ in range(n_p):
        powers.append(powers[-1] @ m.a)
    m_pred = np.vstack([m.c @ powers[j + 1] for j in range(n_p)])
    d_pred = np.zeros((n_p * n_y, n_p * n_u))
    for j in range(n_p):
        for l in range(j + 1):
            d_pred[j * n_y:(j + 1) * n_y, l * n_u:(l + 1) * n_u] = m.c @ powers[j - l] @ m.b
    return PredictionOperator(m_pred, d_pred, n_p, n_u, n_y)


def condense_qp(pred: PredictionOperator, q, r, x0, w, n_p: int | None = None):
    """Hessian and linear term of the condensed tracking objective.

    ``sum_j |y[k+j] - w|_q^2 + |u[k+j-1]|_r^2`` equals
    ``U'hU + 2 f'U + const``, so both problems share the same minimizer.

    Returns
    -------
    h : ndarray, shape (N_p n_u, N_p n_u)
    f : ndarray, shape (N_p n_u,)
    """
    n_p = pred.n_p if n_p is None else n_p
    if n_p != pred.n_p:
        raise ValueError(f"horizon {n_p} does not match prediction operator ({pred.n_p})")
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    if not np.allclose(r, r.T) or np.linalg.eigvalsh(0.5 * (r + r.T)).min() <= 0:
        raise ValueError("input weight r must be symmetric positive definite")
    if not np.allclose(q, q.T) or np.linalg.eigvalsh(0.5 * (q + q.T)).min() < -1e-12:
        raise ValueError("output weight q must be symmetric positive semidefinite")
    q_bar = np.kron(np.eye(n_p), q)
    r_bar = np.kron(np.eye(n_p), r)
    d = pred.d_pred
    w_stack = np.tile(np.atleast_1d(np.asarray(w, dtype=float)), n_p)
    h = d.T @ q_bar @ d + r_bar
    h = 0.5 * (h + h.T)
    f = d.T @ q_bar @ (pred.m_pred @ np.asarray(x0, dtype=float) - w_stack)
    return h, f
