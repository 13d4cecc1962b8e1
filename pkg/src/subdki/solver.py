"""Batched box-constrained Levenberg-Marquardt.

Solves many small, independent least-squares problems at once: every row of
``x0`` is its own problem with its own damping, active set and stopping state,
so the result for a row does not depend on which other rows share the batch.

Steps are computed on the free variables only (a variable sitting on a bound
whose gradient points outward is frozen), then projected onto the box. Damping
follows Nielsen's update with Marquardt's diagonal scaling, which keeps the
method invariant to the units of each parameter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

ResidualFn = Callable[[np.ndarray, np.ndarray], tuple]


@dataclass
class LMResult:
    x: np.ndarray
    cost: np.ndarray  # 0.5 * sum(r^2)
    initial_cost: np.ndarray
    n_iter: np.ndarray
    converged: np.ndarray
    status: np.ndarray  # 0 running/cap, 1 ftol, 2 xtol, 3 gtol, 4 stalled


def least_squares_box(
    fun: ResidualFn,
    x0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    ftol: float = 1e-4,
    xtol: float = 1e-6,
    gtol: float = 1e-12,
    max_iter: int = 400,
) -> LMResult:
    """Minimise ``0.5 * ||r(x)||^2`` row-wise subject to ``lower <= x <= upper``.

    ``fun(x, rows)`` must return ``(r, J)`` for the problems selected by the
    integer index array ``rows``; ``x`` has shape ``(len(rows), P)``, ``r``
    shape ``(len(rows), M)`` and ``J`` shape ``(len(rows), M, P)``.
    """
    x = np.clip(np.array(x0, dtype=float), lower, upper)
    n, p = x.shape
    lower = np.broadcast_to(lower, x.shape)
    upper = np.broadcast_to(upper, x.shape)

    all_rows = np.arange(n)
    r, J = fun(x, all_rows)
    cost = 0.5 * np.einsum("ij,ij->i", r, r)
    initial_cost = cost.copy()

    lam = np.full(n, 1e-3)
    nu = np.full(n, 2.0)
    scale2 = np.zeros((n, p))
    n_iter = np.zeros(n, dtype=int)
    status = np.zeros(n, dtype=int)
    active = np.ones(n, dtype=bool)
    eye = np.eye(p)

    for _ in range(max_iter):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        n_iter[rows] += 1
        xr, rr, Jr, cr = x[rows], r[rows], J[rows], cost[rows]
        lo, hi = lower[rows], upper[rows]

        g = np.einsum("imp,im->ip", Jr, rr)
        A = np.einsum("imp,imq->ipq", Jr, Jr)
        diagA = np.einsum("ipp->ip", A)
        scale2[rows] = np.maximum(scale2[rows], diagA)
        d2 = np.where(scale2[rows] > 0, scale2[rows], 1.0)

        free = ~(((xr <= lo) & (g > 0)) | ((xr >= hi) & (g < 0)))
        pg = np.where(free, g, 0.0)
        gnorm = np.max(np.abs(pg) / np.sqrt(d2), axis=1)
        done_g = gnorm <= gtol * np.maximum(np.sqrt(2.0 * cr), 1e-300) + 1e-300
        status[rows[done_g]] = 3

        fm = free[:, :, None] & free[:, None, :]
        M = np.where(fm, A + lam[rows, None, None] * (d2[:, :, None] * eye), eye)
        step = np.linalg.solve(M, -pg[:, :, None])[:, :, 0]
        x_new = np.clip(xr + step, lo, hi)
        step = x_new - xr

        r_new, J_new = fun(x_new, rows)
        c_new = 0.5 * np.einsum("ij,ij->i", r_new, r_new)
        pred = -(np.einsum("ip,ip->i", g, step) + 0.5 * np.einsum("ip,ipq,iq->i", step, A, step))
        actual = cr - c_new
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.where(pred > 0, actual / pred, np.where(actual > 0, 1.0, -1.0))
        accept = (rho > 1e-4) & np.isfinite(c_new) & ~done_g

        small_step = np.max(np.abs(step) / (np.abs(xr) + xtol), axis=1) <= xtol
        a_rows = rows[accept]
        x[a_rows] = x_new[accept]
        r[a_rows] = r_new[accept]
        J[a_rows] = J_new[accept]
        cost[a_rows] = c_new[accept]
        ra = rho[accept]
        lam[a_rows] *= np.maximum(1.0 / 3.0, 1.0 - (2.0 * ra - 1.0) ** 3)
        nu[a_rows] = 2.0

        f_conv = accept & (actual <= ftol * cr) & (rho > 0.25)
        x_conv = accept & small_step
        status[rows[f_conv]] = 1
        status[rows[x_conv & ~f_conv]] = 2

        rej = ~accept & ~done_g
        rej_rows = rows[rej]
        lam[rej_rows] *= nu[rej_rows]
        nu[rej_rows] *= 2.0
        stalled = rej & (small_step | (lam[rows] > 1e16))
        status[rows[stalled]] = 4

        active[rows[done_g | f_conv | x_conv | stalled]] = False

    return LMResult(x, cost, initial_cost, n_iter, status > 0, status)
