r"""Single-parameter Mittag-Leffler function on the non-positive real axis.

.. math::

    E_\beta(z) = \sum_{n=0}^\infty \frac{z^n}{\Gamma(1 + \beta n)}, \qquad 0 < \beta \le 1

Three evaluation regimes are used, chosen per element:

* ``|z| <= 0.5``: the Taylor series. Every term is bounded by ``1.13 * 0.5**n``
  so there is no cancellation and 64 terms reach double precision for any
  order in ``(0, 1]``.
* ``0.5 < |z| < 40``: inverse Laplace transform of
  ``s**(beta - 1) / (s**beta - z)`` along the parabola
  ``s(u) = mu * (1 + i u)**2`` with the trapezoidal rule (Weideman & Trefethen
  parameters ``h = 3/N``, ``mu = pi N / 12``). For ``z < 0`` and ``beta < 1``
  the transform has no poles on the principal sheet, so no residues are needed.
* ``|z| >= 40``: the algebraic asymptotic expansion
  ``-sum_k z**-k / Gamma(1 - beta k)``, optimally truncated.

``beta == 1`` short-circuits to ``exp(z)``. Parameter derivatives are analytic
in every regime. All functions are pure and thread-safe.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, psi

__all__ = [
    "MittagLefflerError",
    "MittagLefflerDomainError",
    "UnsupportedArgumentError",
    "MittagLefflerConvergenceError",
    "mittag_leffler",
    "mittag_leffler_grad",
    "ml_value_and_grad",
]

SERIES_RADIUS = 0.5
ASYMPTOTIC_RADIUS = 40.0
# positive arguments are only accepted inside the series disc
POSITIVE_LIMIT = SERIES_RADIUS

_SERIES_TERMS = 64
_ASYMPTOTIC_TERMS = 100
_CONTOUR_N = 20


class MittagLefflerError(ValueError):
    """Base class for evaluation errors."""


class MittagLefflerDomainError(MittagLefflerError):
    """The order lies outside ``(0, 1]``."""


class UnsupportedArgumentError(MittagLefflerError):
    """The argument is non-finite or positive beyond the series disc."""


class MittagLefflerConvergenceError(ArithmeticError):
    """A regime produced a non-finite value."""

    def __init__(self, beta: float, z: float):
        super().__init__(f"Mittag-Leffler evaluation failed for beta={beta!r}, z={z!r}")
        self.beta = beta
        self.z = z


def _contour_nodes(n: int = _CONTOUR_N):
    h = 3.0 / n
    mu = math.pi * n / 12.0
    u = h * np.arange(n + 1)
    s = mu * (1.0 + 1j * u) ** 2
    ds = 2j * mu * (1.0 + 1j * u)
    w = np.ones(n + 1)
    w[0] = 0.5
    # the 1/s of s**(beta-1) is folded into the weights
    c = w * np.exp(s) * ds / s
    return h / math.pi, c, np.log(s)


_CONTOUR_SCALE, _CONTOUR_WEIGHTS, _CONTOUR_LOGS = _contour_nodes()
_SERIES_N = np.arange(_SERIES_TERMS, dtype=float)
_ASYM_K = np.arange(1, _ASYMPTOTIC_TERMS + 1, dtype=float)


def _check(beta: np.ndarray, z: np.ndarray) -> None:
    bad = ~((beta > 0.0) & (beta <= 1.0))
    if np.any(bad):
        raise MittagLefflerDomainError(
            f"order must lie in (0, 1], got {float(beta[bad].flat[0])!r}"
        )
    if not np.all(np.isfinite(z)):
        raise UnsupportedArgumentError("argument must be finite")
    if np.any(z > POSITIVE_LIMIT):
        raise UnsupportedArgumentError(
            f"positive arguments above {POSITIVE_LIMIT} are not supported, "
            f"got {float(z[z > POSITIVE_LIMIT].flat[0])!r}"
        )


def _series(beta, z, grad):
    n = _SERIES_N
    bn = beta[:, None] * n
    inv_gamma = np.exp(-gammaln(1.0 + bn))
    zn = z[:, None] ** n
    terms = zn * inv_gamma
    # smallest terms first
    val = terms[:, ::-1].sum(axis=1)
    if not grad:
        return val, None, None
    dbeta = (-(n * psi(1.0 + bn)) * terms)[:, ::-1].sum(axis=1)
    zn1 = np.ones_like(zn)
    zn1[:, 1:] = zn[:, :-1]
    dz = (n * zn1 * inv_gamma)[:, ::-1].sum(axis=1)
    return val, dbeta, dz


def _contour(beta, z, grad):
    sb = np.exp(beta[:, None] * _CONTOUR_LOGS)
    denom = sb - z[:, None]
    ratio = _CONTOUR_WEIGHTS * sb / denom
    val = _CONTOUR_SCALE * ratio.sum(axis=1).imag
    if not grad:
        return val, None, None
    sq = ratio / denom
    dz = _CONTOUR_SCALE * sq.sum(axis=1).imag
    dbeta = _CONTOUR_SCALE * (-z) * (sq * _CONTOUR_LOGS).sum(axis=1).imag
    return val, dbeta, dz


def _asymptotic(beta, z, grad):
    # z < 0 here; write z = -x and use 1/Gamma(1 - a) = Gamma(a) sin(pi a) / pi
    x = -z
    k = _ASYM_K
    a = beta[:, None] * k
    logmag = gammaln(a) - k * np.log(x)[:, None]
    mag = np.exp(logmag) / math.pi
    kstar = np.argmin(logmag, axis=1)
    keep = np.arange(k.size)[None, :] <= kstar[:, None]
    sign = np.where(k % 2 == 0, 1.0, -1.0)  # (-1)**k
    sin_a = np.sin(math.pi * a)
    terms = np.where(keep, -sign * mag * sin_a, 0.0)
    val = terms[:, ::-1].sum(axis=1)
    if not grad:
        return val, None, None
    dz = np.where(keep, sign * k * mag * sin_a, 0.0)[:, ::-1].sum(axis=1) / (-x)
    dterm = -sign * mag * k * (psi(a) * sin_a + math.pi * np.cos(math.pi * a))
    dbeta = np.where(keep, dterm, 0.0)[:, ::-1].sum(axis=1)
    return val, dbeta, dz


def _evaluate(beta, z, grad):
    beta, z = np.broadcast_arrays(np.asarray(beta, dtype=float), np.asarray(z, dtype=float))
    shape = beta.shape
    beta = beta.ravel()
    z = z.ravel()
    _check(beta, z)

    val = np.empty(z.shape)
    dbeta = np.empty(z.shape) if grad else None
    dz = np.empty(z.shape) if grad else None

    expo = beta == 1.0
    az = np.abs(z)
    regimes = (
        (~expo & (az <= SERIES_RADIUS), _series),
        (~expo & (az > SERIES_RADIUS) & (az < ASYMPTOTIC_RADIUS), _contour),
        (~expo & (az >= ASYMPTOTIC_RADIUS), _asymptotic),
    )
    if np.any(expo):
        e = np.exp(z[expo])
        val[expo] = e
        if grad:
            dz[expo] = e
            dbeta[expo] = _exp_order_derivative(z[expo])
    for mask, fn in regimes:
        if np.any(mask):
            v, db, dzz = fn(beta[mask], z[mask], grad)
            val[mask] = v
            if grad:
                dbeta[mask] = db
                dz[mask] = dzz

    bad = ~np.isfinite(val)
    if grad:
        bad |= ~np.isfinite(dbeta) | ~np.isfinite(dz)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise MittagLefflerConvergenceError(float(beta[i]), float(z[i]))

    val = val.reshape(shape)
    if grad:
        return val, dbeta.reshape(shape), dz.reshape(shape)
    return val, None, None


def _exp_order_derivative(z):
    """dE/dbeta at beta = 1, i.e. the one-sided limit from below."""
    out = np.empty(z.shape)
    small = np.abs(z) <= SERIES_RADIUS
    ones = np.ones(z.shape)
    if np.any(small):
        out[small] = _series(ones[small], z[small], True)[1]
    mid = ~small & (np.abs(z) < ASYMPTOTIC_RADIUS)
    if np.any(mid):
        out[mid] = _contour(ones[mid], z[mid], True)[1]
    far = np.abs(z) >= ASYMPTOTIC_RADIUS
    if np.any(far):
        out[far] = _asymptotic(ones[far], z[far], True)[1]
    return out


def _unwrap(x, scalar):
    return float(x) if scalar else x


def mittag_leffler(beta, z):
    """Evaluate :math:`E_\\beta(z)` elementwise.

    Parameters
    ----------
    beta : float or array_like
        Order in ``(0, 1]``.
    z : float or array_like
        Argument; ``z <= 0`` is the supported domain, small positive values
        up to ``0.5`` are accepted through the series.

    Returns
    -------
    float or ndarray
        A float when both inputs are scalars.

    Raises
    ------
    MittagLefflerDomainError
        If any order is outside ``(0, 1]``.
    UnsupportedArgumentError
        If any argument is non-finite or positive beyond ``0.5``.
    MittagLefflerConvergenceError
        If an internal regime produced a non-finite value.
    """
    scalar = np.ndim(beta) == 0 and np.ndim(z) == 0
    val, _, _ = _evaluate(beta, z, grad=False)
    return _unwrap(val, scalar)


def mittag_leffler_grad(beta, z):
    """Return ``(dE/dbeta, dE/dz)`` with the same domain as :func:`mittag_leffler`.

    At ``beta == 1`` the order derivative is the one-sided limit from below.
    """
    scalar = np.ndim(beta) == 0 and np.ndim(z) == 0
    _, dbeta, dz = _evaluate(beta, z, grad=True)
    return _unwrap(dbeta, scalar), _unwrap(dz, scalar)


def ml_value_and_grad(beta, z):
    """Value, order derivative and argument derivative in one pass (arrays)."""
    return _evaluate(beta, z, grad=True)
