"""Mixture of affine regressions ``lam = -P^z theta - s^z`` fitted by EM."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "MixtureParams",
    "Responsibilities",
    "EMResult",
    "e_step",
    "m_step",
    "m_step_wls",
    "expected_complete_loglik",
    "marginal_loglik",
    "regression_design",
    "run_em",
    "init_params",
    "match_one_zone",
]

log = logging.getLogger(__name__)

SIGMA2_MIN = 1e-12


@dataclass
class MixtureParams:
    """Zone parameters; ``sigmas`` holds the isotropic variances ``sigma_z^2``."""

    p_mats: np.ndarray  # (Z, c, c)
    s_vecs: np.ndarray  # (Z, c)
    pis: np.ndarray  # (Z,)
    sigmas: np.ndarray  # (Z,)

    @property
    def n_zones(self) -> int:
        return self.pis.size

    def copy(self) -> "MixtureParams":
        return MixtureParams(self.p_mats.copy(), self.s_vecs.copy(), self.pis.copy(), self.sigmas.copy())

    def means(self, thetas) -> np.ndarray:
        """Predicted duals, shape (Z, c, O)."""
        return -np.einsum("zij,jo->zio", self.p_mats, thetas) - self.s_vecs[:, :, None]


@dataclass
class Responsibilities:
    zeta: np.ndarray  # (Z, O), columns sum to one
    underflow: np.ndarray = None  # (O,) columns reset to uniform


def _log_joint(params: MixtureParams, thetas, lambdas):
    """``log pi_z + log N(lam_o; -P^z theta_o - s^z, sigma_z^2 I)``, shape (Z, O)."""
    c = thetas.shape[0]
    resid = lambdas[None, :, :] - params.means(thetas)
    sq = np.einsum("zio,zio->zo", resid, resid)
    var = params.sigmas[:, None]
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pis)[:, None]
    return log_pi - 0.5 * sq / var - 0.5 * c * np.log(2 * np.pi * var)


def e_step(params: MixtureParams, thetas, lambdas) -> Responsibilities:
    log_joint = _log_joint(params, thetas, lambdas)
    norm = logsumexp(log_joint, axis=0)
    bad = ~np.isfinite(norm)
    with np.errstate(invalid="ignore"):
        zeta = np.exp(log_joint - norm)
    if np.any(bad):
        log.warning("all component densities vanished for %d observations", int(bad.sum()))
        zeta[:, bad] = 1.0 / params.n_zones
    return Responsibilities(zeta, bad)


def expected_complete_loglik(params: MixtureParams, zeta, thetas, lambdas) -> float:
    """``sum_o sum_z zeta_zo (log pi_z + log N(...))`` with zero-weight terms dropped."""
    zeta = np.asarray(getattr(zeta, "zeta", zeta))
    log_joint = _log_joint(params, thetas, lambdas)
    mask = zeta > 0
    return float(np.sum(zeta[mask] * log_joint[mask]))


def marginal_loglik(params: MixtureParams, thetas, lambdas) -> float:
    return float(np.sum(logsumexp(_log_joint(params, thetas, lambdas), axis=0)))


def regression_design(thetas) -> np.ndarray:
    """Design matrix ``Omega`` of the stacked regression ``vec(Lambda) = Omega phi``.

    Built from the Kronecker factors
    ``Upsilon = 1_c (x) I_c``, ``Delta = I_O (x) 1_c'``, ``G = 1_O' (x) I_c``,
    ``Y = G (x) 1_c`` as ``[(Upsilon Theta Delta) o Y ; G]'``.  ``phi`` stacks
    the row-major coefficient matrix and offset of ``lam = A theta + b``.
    """
    c, o = thetas.shape
    upsilon = np.kron(np.ones((c, 1)), np.eye(c))
    delta = np.kron(np.eye(o), np.ones((1, c)))
    g = np.kron(np.ones((1, o)), np.eye(c))
    y = np.kron(g, np.ones((c, 1)))
    return np.vstack([(upsilon @ thetas @ delta) * y, g]).T


def m_step(zeta, thetas, lambdas, *, design=None):
    """Weighted least-squares update of every zone, vectorized form.

    ``phi^z = pinv(Xi^z Omega) Xi^z vec(Lambda)`` with
    ``Xi^z = diag(sqrt(zeta_zo) I_c)``.

    Returns
    -------
    p_mats, s_vecs, pis, degenerate
        ``degenerate[z]`` marks a rank-deficient weighted design (minimum-norm fit).
    """
    zeta = np.asarray(getattr(zeta, "zeta", zeta))
    c, o = thetas.shape
    n_z = zeta.shape[0]
    omega = regression_design(thetas) if design is None else design
    vec_lam = lambdas.reshape(-1, order="F")
    p_mats = np.zeros((n_z, c, c))
    s_vecs = np.zeros((n_z, c))
    degenerate = np.zeros(n_z, dtype=bool)
    for z in range(n_z):
        xi = np.repeat(np.sqrt(zeta[z]), c)
        weighted = xi[:, None] * omega
        phi = np.linalg.pinv(weighted) @ (xi * vec_lam)
        degenerate[z] = np.linalg.matrix_rank(weighted) < omega.shape[1]
        p_mats[z] = -phi[: c * c].reshape(c, c)
        s_vecs[z] = -phi[c * c:]
    pis = zeta.sum(axis=1) / o
    return p_mats, s_vecs, pis, degenerate


def m_step_wls(zeta, thetas, lambdas):
    """Same update as :func:`m_step`, solved zone by zone on ``[theta', 1]`` rows."""
    zeta = np.asarray(getattr(zeta, "zeta", zeta))
    c, o = thetas.shape
    x = np.hstack([thetas.T, np.ones((o, 1))])
    p_mats = np.zeros((zeta.shape[0], c, c))
    s_vecs = np.zeros((zeta.shape[0], c))
    for z, w in enumerate(zeta):
        sw = np.sqrt(w)[:, None]
        coef, *_ = np.linalg.lstsq(sw * x, sw * lambdas.T, rcond=None)
        p_mats[z] = -coef[:c].T
        s_vecs[z] = -coef[c]
    return p_mats, s_vecs, zeta.sum(axis=1) / o


def init_params(thetas, lambdas, n_zones: int, rng, center=None, sigma2=None) -> MixtureParams:
    """Starting point for EM.

    With ``center`` (a nominal slope matrix) every zone starts from a seeded
    perturbation of it.  Otherwise each zone is fitted exactly on the
    neighbourhood of a seed observation, each new seed being the point the
    fits so far explain worst.
    """
    c, o = thetas.shape
    if center is not None:
        center = np.asarray(center, dtype=float)
        scale = 0.1 * np.linalg.norm(center) / c
        p_mats = center[None] + scale * rng.standard_normal((n_zones, c, c))
    else:
        p_mats = np.empty((n_zones, c, c))
        fitted = []
        worst = np.full(o, np.inf)
        idx = int(rng.integers(o))
        for z in range(n_zones):
            near = np.argsort(np.linalg.norm(thetas - thetas[:, [idx]], axis=0))[: 2 * (c + 1)]
            pz, sz, _ = m_step_wls(np.ones((1, near.size)), thetas[:, near], lambdas[:, near])
            p_mats[z] = pz[0]
            fitted.append(sz[0])
            resid = np.linalg.norm(lambdas + pz[0] @ thetas + sz[0][:, None], axis=0)
            worst = np.minimum(worst, resid)
            # next seed: the observation the zones so far explain worst
            idx = int(np.argmax(worst))
        s_vecs = np.array(fitted)
        if sigma2 is None:
            # start the variance at the spread the seeded fits leave unexplained
            sigma2 = float(np.mean(worst**2)) / c
    if center is not None:
        s_vecs = np.mean(-lambdas[None] - np.einsum("zij,jo->zio", p_mats, thetas), axis=2)
    if sigma2 is None:
        sigma2 = float(np.var(lambdas))
    sigma2 = max(sigma2, SIGMA2_MIN)
    return MixtureParams(p_mats, s_vecs, np.full(n_zones, 1.0 / n_zones), np.full(n_zones, sigma2))


@dataclass
class EMResult:
    params: MixtureParams
    resp: Responsibilities
    iterations: int
    converged: bool
    degenerate: bool = False
    dropped: list = field(default_factory=list)
    # (Q at old params, Q at new params, sigma^2) per E+M pair
    history: list = field(default_factory=list, repr=False)


def run_em(thetas, lambdas, n_zones: int = 2, *, anneal: float = 0.5, seed=0, center=None,
           tol: float = 1e-9, max_iter: int = 500, sigma2_min: float = SIGMA2_MIN,
           init: MixtureParams | None = None) -> EMResult:
    """Fit the mixture by EM with simulated annealing of the variances.

    ``anneal`` multiplies every ``sigma_z^2`` after each M-step (``1.0``
    keeps them fixed).  Stops once no parameter moves by more than ``tol``.
    """
    thetas = np.asarray(thetas, dtype=float)
    lambdas = np.asarray(lambdas, dtype=float)
    c, o = thetas.shape
    if n_zones < 1:
        raise ValueError("need at least one zone")
    if o < c + 1:
        raise ValueError(f"need at least {c + 1} observations, got {o}")
    rng = np.random.default_rng(seed)
    params = init.copy() if init is not None else init_params(thetas, lambdas, n_zones, rng, center)
    design = regression_design(thetas)
    reseeded = set()
    dropped = []
    history = []
    degenerate = False
    converged = False
    resp = e_step(params, thetas, lambdas)
    it = 0
    for it in range(1, max_iter + 1):
        mass = resp.zeta.sum(axis=1)
        weak = np.flatnonzero(mass < 1e-12 * o)
        if weak.size:
            params, resp = _handle_collapse(params, weak, reseeded, dropped, rng, thetas, lambdas)
            continue
        q_old = expected_complete_loglik(params, resp, thetas, lambdas)
        p_mats, s_vecs, pis, degen = m_step(resp, thetas, lambdas, design=design)
        degenerate = bool(degen.any())
        change = max(np.max(np.abs(p_mats - params.p_mats)), np.max(np.abs(s_vecs - params.s_vecs)))
        new = MixtureParams(p_mats, s_vecs, pis, params.sigmas.copy())
        q_new = expected_complete_loglik(new, resp, thetas, lambdas)
        history.append((q_old, q_new, float(params.sigmas.max())))
        new.sigmas = np.maximum(new.sigmas * anneal, sigma2_min)
        params = new
        resp = e_step(params, thetas, lambdas)
        if change <= tol and it >= 2:
            converged = True
            break
    return EMResult(params, resp, it, converged, degenerate, dropped, history)


def _handle_collapse(params, weak, reseeded, dropped, rng, thetas, lambdas):
    keep = np.ones(params.n_zones, dtype=bool)
    best = int(np.argmax(params.pis))
    for z in weak:
        z = int(z)
        if z not in reseeded and params.n_zones > 1:
            reseeded.add(z)
            scale = 0.1 * np.linalg.norm(params.p_mats[best]) / thetas.shape[0] + 1e-12
            params.p_mats[z] = params.p_mats[best] + scale * rng.standard_normal(params.p_mats[z].shape)
            params.s_vecs[z] = np.mean(-lambdas - params.p_mats[z] @ thetas, axis=1)
            params.pis[z] = 1.0 / params.n_zones
            params.sigmas[z] = max(params.sigmas.max(), float(np.var(lambdas)), SIGMA2_MIN)
        else:
            keep[z] = False
    if keep.sum() == 0:
        keep[best] = True
    if not keep.all():
        dropped.extend(int(z) for z in np.flatnonzero(~keep))
        params = MixtureParams(params.p_mats[keep], params.s_vecs[keep], params.pis[keep], params.sigmas[keep])
    params.pis = params.pis / params.pis.sum()
    return params, e_step(params, thetas, lambdas)


def match_one_zone(zeta, zero_index: int) -> int:
    """Zone most likely to contain the zero allocation (ties: lowest index)."""
    zeta = np.asarray(getattr(zeta, "zeta", zeta))
    return int(np.argmax(zeta[:, zero_index]))
