"""Acquisition and parameter types, forward signal models and the analytic
conversion from sub-diffusion parameters to diffusivity and kurtosis.

Units throughout: seconds, millimetres, rad/mm and s/mm^2. Millisecond and
mT/m values are converted at the I/O boundary only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gamma, gammaln

from .mlf import mittag_leffler

GAMMA_PROTON = 2.6752218744e8  # rad / (s T)

# Connectome 1.0 protocol: delta = 8 ms, Delta = 19 / 49 ms.
CONNECTOME_SMALL_DELTA = 8e-3
CONNECTOME_DELTAS = (19e-3, 49e-3)
CONNECTOME_G = (31e-3, 68e-3, 105e-3, 142e-3, 179e-3, 216e-3, 253e-3, 290e-3)  # T/m
CONNECTOME_B = (
    (50.0, 350.0, 800.0, 1500.0, 2400.0, 3450.0, 4750.0, 6000.0),
    (200.0, 950.0, 2300.0, 4250.0, 6750.0, 9850.0, 13500.0, 17800.0),
)


class ModelDomainError(ValueError):
    """Parameters or acquisition values violate a model invariant."""


@dataclass(frozen=True)
class PulseSettings:
    """Pulsed-gradient settings. ``delta`` and ``Delta`` in s, ``G`` in T/m."""

    delta: float
    Delta: float
    G: float
    gamma: float = GAMMA_PROTON

    def __post_init__(self):
        if not (0.0 < self.delta <= self.Delta):
            raise ModelDomainError(f"need 0 < delta <= Delta, got {self.delta}, {self.Delta}")
        if self.G < 0.0 or self.gamma <= 0.0:
            raise ModelDomainError("gradient amplitude must be >= 0 and gamma > 0")

    @property
    def q(self) -> float:
        """Wavenumber gamma * delta * G in rad/mm."""
        return self.gamma * self.delta * self.G * 1e-3

    @property
    def dbar(self) -> float:
        """Effective diffusion time Delta - delta/3 in s."""
        return self.Delta - self.delta / 3.0

    @property
    def b(self) -> float:
        return b_value(self)


def b_value(p: PulseSettings) -> float:
    """b = (gamma delta G)^2 (Delta - delta/3) in s/mm^2."""
    return p.q**2 * p.dbar


@dataclass(frozen=True)
class Shell:
    dbar: float
    q: float
    b: float
    n_dir: int = 1


@dataclass(frozen=True)
class AcquisitionScheme:
    """Non-zero b-shells sorted by (dbar, b) plus the number of b = 0 measurements."""

    shells: tuple
    normalization: int = 1

    def __post_init__(self):
        shells = tuple(sorted(self.shells, key=lambda s: (s.dbar, s.b)))
        object.__setattr__(self, "shells", shells)
        seen = set()
        for s in shells:
            if not s.dbar > 0.0:
                raise ModelDomainError(f"effective diffusion time must be positive, got {s.dbar}")
            if s.b < 0.0 or s.q < 0.0:
                raise ModelDomainError("b and q must be non-negative")
            if not math.isclose(s.b, s.q**2 * s.dbar, rel_tol=1e-9, abs_tol=1e-12):
                raise ModelDomainError(f"shell violates b = q^2 dbar: {s}")
            key = (s.dbar, s.b)
            if key in seen:
                raise ModelDomainError(f"duplicate shell (dbar={s.dbar}, b={s.b})")
            seen.add(key)
            if s.n_dir < 1:
                raise ModelDomainError("direction count must be >= 1")

    @classmethod
    def from_b(cls, dbar: Iterable[float], b: Iterable[float], n_dir=1, normalization: int = 1):
        dbar = np.broadcast_to(np.asarray(list(dbar), dtype=float), np.shape(list(b)))
        b = np.asarray(list(b), dtype=float)
        n_dir = np.broadcast_to(np.asarray(n_dir), b.shape)
        shells = [
            Shell(float(d), math.sqrt(bb / d), float(bb), int(n))
            for d, bb, n in zip(dbar, b, n_dir)
        ]
        return cls(tuple(shells), normalization)

    @classmethod
    def from_pulses(cls, pulses: Sequence[PulseSettings], n_dir=1, normalization: int = 1):
        n_dir = np.broadcast_to(np.asarray(n_dir), (len(pulses),))
        shells = [Shell(p.dbar, p.q, p.b, int(n)) for p, n in zip(pulses, n_dir)]
        return cls(tuple(shells), normalization)

    @property
    def dbar(self) -> np.ndarray:
        return np.array([s.dbar for s in self.shells])

    @property
    def b(self) -> np.ndarray:
        return np.array([s.b for s in self.shells])

    @property
    def q(self) -> np.ndarray:
        return np.array([s.q for s in self.shells])

    @property
    def n_dir(self) -> np.ndarray:
        return np.array([s.n_dir for s in self.shells])

    def distinct_dbar(self) -> np.ndarray:
        return np.unique(self.dbar)


def connectome_scheme(nominal: bool = True) -> AcquisitionScheme:
    """The 16-shell two-diffusion-time Connectome 1.0 grid.

    With ``nominal=True`` the published b-values are used and q follows from
    ``b = q^2 dbar``; otherwise b is recomputed from the gradient amplitudes.
    Direction counts are 32 below b = 2400 and 64 from there on.
    """
    if nominal:
        dbar, b = [], []
        for Delta, bs in zip(CONNECTOME_DELTAS, CONNECTOME_B):
            dbar += [Delta - CONNECTOME_SMALL_DELTA / 3.0] * len(bs)
            b += list(bs)
        n_dir = [32 if bb < 2400 else 64 for bb in b]
        return AcquisitionScheme.from_b(dbar, b, n_dir)
    return gradient_scheme(CONNECTOME_DELTAS)


def gradient_scheme(
    Deltas: Sequence[float],
    delta: float = CONNECTOME_SMALL_DELTA,
    G: Sequence[float] = CONNECTOME_G,
    gamma_: float = GAMMA_PROTON,
    n_dir: int = 64,
) -> AcquisitionScheme:
    """Shells from the gradient-amplitude list at each diffusion time (s)."""
    pulses = [PulseSettings(delta, D, g, gamma_) for D in Deltas for g in G]
    return AcquisitionScheme.from_pulses(pulses, n_dir)


@dataclass(frozen=True)
class SubDiffusionParams:
    D_beta: float  # mm^2 / s^beta
    beta: float

    def __post_init__(self):
        if not self.D_beta > 0.0:
            raise ModelDomainError(f"D_beta must be positive, got {self.D_beta}")
        if not 0.0 < self.beta <= 1.0:
            raise ModelDomainError(f"beta must lie in (0, 1], got {self.beta}")


@dataclass(frozen=True)
class DkiParams:
    S0: float
    D_dki: float
    K_dki: float

    def __post_init__(self):
        if not (self.S0 > 0.0 and self.D_dki > 0.0):
            raise ModelDomainError("S0 and D_dki must be positive")
        # K = 0 is kept as the Gaussian limit
        if not 0.0 <= self.K_dki <= 3.0:
            raise ModelDomainError(f"K_dki must lie in [0, 3], got {self.K_dki}")


@dataclass(frozen=True)
class DerivedMetrics:
    """Diffusivities per effective diffusion time and the time-independent kurtosis."""

    dbar: np.ndarray
    D_sub: np.ndarray
    D_star: np.ndarray
    K_star: float


def forward_subdiffusion(params: SubDiffusionParams, q, dbar):
    """Normalized signal E_beta(-D_beta q^2 dbar^beta)."""
    q = np.asarray(q, dtype=float)
    dbar = np.asarray(dbar, dtype=float)
    if np.any(q < 0) or np.any(dbar <= 0):
        raise ModelDomainError("need q >= 0 and dbar > 0")
    z = -params.D_beta * q**2 * dbar**params.beta
    return mittag_leffler(params.beta, z)


def forward_subdiffusion_b(params: SubDiffusionParams, b, dbar):
    """The same signal written in b-space, E_beta(-b D_sub)."""
    D_sub, _ = diffusivity_star(params, dbar)
    return mittag_leffler(params.beta, -np.asarray(b, dtype=float) * D_sub)


def forward_dki(params: DkiParams, b):
    """S0 exp(-b D + b^2 D^2 K / 6)."""
    b = np.asarray(b, dtype=float)
    D, K = params.D_dki, params.K_dki
    return params.S0 * np.exp(-b * D + b**2 * D**2 * K / 6.0)


def kurtosis_from_beta(beta):
    """K* = 6 Gamma(1+beta)^2 / Gamma(1+2 beta) - 3."""
    beta_arr = np.asarray(beta, dtype=float)
    if np.any(~((beta_arr > 0) & (beta_arr <= 1))):
        raise ModelDomainError("beta must lie in (0, 1]")
    k = 6.0 * np.exp(2.0 * gammaln(1.0 + beta_arr) - gammaln(1.0 + 2.0 * beta_arr)) - 3.0
    k = np.where(beta_arr == 1.0, 0.0, k)
    return float(k) if np.ndim(beta) == 0 else k


def beta_from_kurtosis(K: float, tol: float = 1e-13) -> float:
    """Invert :func:`kurtosis_from_beta` by bisection on (0, 1]."""
    if not 0.0 <= K < 3.0:
        raise ModelDomainError("kurtosis must lie in [0, 3)")
    if K == 0.0:
        return 1.0
    lo, hi = 1e-12, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if kurtosis_from_beta(mid) > K:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def diffusivity_star(params: SubDiffusionParams, dbar):
    """Return (D_sub, D_star) at effective diffusion time(s) ``dbar``."""
    dbar_arr = np.asarray(dbar, dtype=float)
    if np.any(dbar_arr <= 0):
        raise ModelDomainError("dbar must be positive")
    D_sub = params.D_beta * dbar_arr ** (params.beta - 1.0)
    D_star = D_sub / gamma(1.0 + params.beta)
    if np.ndim(dbar) == 0:
        return float(D_sub), float(D_star)
    return D_sub, D_star


def derived_metrics(params: SubDiffusionParams, dbar) -> DerivedMetrics:
    dbar = np.atleast_1d(np.asarray(dbar, dtype=float))
    D_sub, D_star = diffusivity_star(params, dbar)
    return DerivedMetrics(dbar, D_sub, D_star, kurtosis_from_beta(params.beta))
