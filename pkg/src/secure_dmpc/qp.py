"""Dense primal active-set solver for small convex QPs.

Solves ``min 1/2 x'Hx + f'x  s.t.  A x <= b`` from a feasible start, with
``H`` symmetric positive definite.  Exact working sets are kept, so callers
can read off which constraints are active at the optimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

__all__ = ["QPResult", "QPError", "solve_qp"]


class QPError(RuntimeError):
    """Raised when the active-set iteration cannot make progress."""


@dataclass
class QPResult:
    x: np.ndarray
    multipliers: np.ndarray  # one per row of A, exactly zero off the working set
    active: tuple  # sorted working-set indices at the optimum
    iterations: int


def _eqp(h_fac, f, a_w, b_w):
    """Minimizer of the objective on ``a_w x = b_w`` and its multipliers."""
    hinv_f = cho_solve(h_fac, f)
    if a_w.shape[0] == 0:
        return -hinv_f, np.zeros(0)
    hinv_at = cho_solve(h_fac, a_w.T)
    schur = a_w @ hinv_at
    try:
        s_fac = cho_factor(schur)
    except LinAlgError as exc:
        raise QPError("working set became linearly dependent") from exc
    nu = -cho_solve(s_fac, b_w + a_w @ hinv_f)
    x = -hinv_f - hinv_at @ nu
    return x, nu


def solve_qp(h, f, a, b, x0, *, working=(), tol=1e-10, max_changes=500) -> QPResult:
    """Primal active-set method.

    Parameters
    ----------
    h, f : objective data, ``h`` symmetric positive definite.
    a, b : inequality rows ``a x <= b``.
    x0 : feasible starting point.
    working : initial working set; must be active at ``x0`` and independent.
    tol : feasibility / multiplier tolerance, scaled by the data magnitude.
    max_changes : cap on working-set additions plus removals.

    Ties are broken deterministically: the most negative multiplier is
    dropped, the first blocking constraint in index order is added.
    """
    h = np.asarray(h, dtype=float)
    f = np.asarray(f, dtype=float)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float)
    x = np.array(x0, dtype=float)
    try:
        h_fac = cho_factor(h)
    except LinAlgError as exc:
        raise QPError("Hessian is not positive definite") from exc

    m = a.shape[0]
    scale_b = max(1.0, float(np.max(np.abs(b), initial=0.0)))
    feas_tol = tol * scale_b
    slack = b - a @ x
    if np.any(slack < -feas_tol):
        raise QPError(f"starting point violates row {int(np.argmin(slack))}")
    work = sorted(working)
    changes = 0
    for it in range(2 * max_changes + 2):
        a_w = a[work]
        x_eq, nu = _eqp(h_fac, f, a_w, b[work])
        step = x_eq - x
        mult_tol = tol * max(1.0, float(np.max(np.abs(h @ x + f), initial=0.0)))
        if np.linalg.norm(step, np.inf) <= tol * max(1.0, np.linalg.norm(x, np.inf)):
            x = x_eq
            if nu.size == 0 or nu.min() >= -mult_tol:
                mult = np.zeros(m)
                mult[work] = np.maximum(nu, 0.0)
                return QPResult(x, mult, tuple(work), it)
            drop = int(np.argmin(nu))
            work.pop(drop)
        else:
            rate = a @ step
            slack = b - a @ x
            alpha, block = 1.0, None
            in_work = np.zeros(m, dtype=bool)
            in_work[work] = True
            # rows orthogonal to the step up to roundoff cannot block it
            rate_tol = 1e-12 * np.linalg.norm(a, axis=1) * np.linalg.norm(step)
            for i in np.flatnonzero(~in_work & (rate > rate_tol)):
                ratio = max(slack[i], 0.0) / rate[i]
                if ratio < alpha:
                    alpha, block = ratio, int(i)
            x = x + alpha * step
            if block is None:
                continue
            work = sorted(work + [block])
        changes += 1
        if changes > max_changes:
            break
    raise QPError(f"no convergence within {max_changes} working-set changes")
