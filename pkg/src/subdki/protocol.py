"""Exhaustive b-value subset search and deterministic direction subsampling.

Every candidate is scored on the same simulated voxels: truths are shared by
trial index and noise by menu position, so score differences between subsets
come from the design alone and the ranking does not depend on the order in
which candidates are enumerated or scored.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fitting import FitOptions, fit_subdiffusion_batch
from .model import CONNECTOME_B, CONNECTOME_DELTAS, CONNECTOME_SMALL_DELTA
from .simulate import (
    BETA_RANGE,
    D_BETA_RANGE,
    NoiseSpec,
    noiseless_signals,
    sample_truths,
    standard_normals,
)
from .model import kurtosis_from_beta
from .stats import DegenerateStatsError, r_squared

SUPPORTED_K = (2, 3, 4)


class ProtocolSearchError(ValueError):
    pass


@dataclass(frozen=True)
class MenuItem:
    """One selectable b-value and the diffusion time that generated it (s)."""

    b: float
    Delta: float
    delta: float = CONNECTOME_SMALL_DELTA

    @property
    def dbar(self) -> float:
        return self.Delta - self.delta / 3.0


def connectome_menu() -> tuple:
    """The 16 nominal b-values, Delta1 shells first, each in ascending b."""
    return tuple(
        MenuItem(float(b), Delta) for Delta, bs in zip(CONNECTOME_DELTAS, CONNECTOME_B) for b in bs
    )


MENU = connectome_menu()

# the low-b-value suggestions singled out in the published search
SUGGESTED = {
    2: ((800.0, 19e-3), (2300.0, 49e-3)),
    3: ((350.0, 19e-3), (1500.0, 19e-3), (2300.0, 49e-3)),
    4: ((350.0, 19e-3), (1500.0, 19e-3), (950.0, 49e-3), (4250.0, 49e-3)),
}


@dataclass
class ProtocolCandidate:
    indices: tuple  # positions in the menu, ascending
    items: tuple
    r2: float = float("nan")
    n_failed: int = 0

    @property
    def k(self) -> int:
        return len(self.indices)

    @property
    def b_subset(self) -> list:
        return [(it.b, it.Delta) for it in self.items]

    def ratio(self, menu_deltas: Sequence[float] = CONNECTOME_DELTAS) -> str:
        """Count of b-values per diffusion time, e.g. ``"2:1"``."""
        counts = [sum(1 for it in self.items if math.isclose(it.Delta, d)) for d in menu_deltas]
        return ":".join(str(c) for c in counts)

    def label(self) -> str:
        """``"350,1500|950,4250"``: b-values grouped by diffusion time."""
        groups = {}
        for it in self.items:
            groups.setdefault(it.Delta, []).append(f"{it.b:g}")
        return "|".join(",".join(v) for _, v in sorted(groups.items()))

    def matches(self, pairs) -> bool:
        return sorted(self.b_subset) == sorted((float(b), float(d)) for b, d in pairs)


def enumerate_candidates(k: int, menu: Sequence[MenuItem] = MENU) -> list:
    """All size-``k`` subsets of the menu in lexicographic index order."""
    if k not in SUPPORTED_K:
        raise ProtocolSearchError(f"subset size must be one of {SUPPORTED_K}, got {k}")
    return [
        ProtocolCandidate(idx, tuple(menu[i] for i in idx))
        for idx in itertools.combinations(range(len(menu)), k)
    ]


@dataclass
class ScoringContext:
    """Shared truths and noise for one (seed, n_trials, SNR) scoring run."""

    menu: tuple
    K_true: np.ndarray
    clean: np.ndarray  # (n_trials, 1 + len(menu)); column 0 is b = 0
    noise: np.ndarray  # same shape, already scaled by sigma
    opts: FitOptions
    threads: int = 1

    @classmethod
    def build(cls, snr: float, n_trials: int = 1000, seed: int = 0, menu: Sequence[MenuItem] = MENU,
              n_dir: int = 64, opts: FitOptions = None, threads: int = 1,
              D_range=D_BETA_RANGE, beta_range=BETA_RANGE) -> "ScoringContext":
        menu = tuple(menu)
        trials = np.arange(n_trials)
        D, beta = sample_truths(seed, trials, D_range, beta_range)
        b = np.array([0.0] + [it.b for it in menu])
        dbar = np.array([menu[0].dbar] + [it.dbar for it in menu])
        clean = noiseless_signals(D, beta, b, dbar)
        sigma = NoiseSpec(snr, n_dir).sigma
        noise = sigma * standard_normals(seed, trials, b.size)
        return cls(menu, kurtosis_from_beta(beta), clean, noise, opts or FitOptions(), threads)

    def score(self, cand: ProtocolCandidate) -> ProtocolCandidate:
        cols = [0] + [i + 1 for i in cand.indices]
        b = np.array([0.0] + [it.b for it in cand.items])
        dbar = np.array([cand.items[0].dbar] + [it.dbar for it in cand.items])
        y = self.clean[:, cols] + self.noise[:, cols]
        fit = fit_subdiffusion_batch(b, dbar, y, self.opts, self.threads)
        K = fit.K_star
        ok = fit.converged & np.isfinite(K)
        cand.n_failed = int(np.count_nonzero(~ok))
        try:
            cand.r2 = r_squared(self.K_true[ok], K[ok])
        except (DegenerateStatsError, ValueError):
            cand.r2 = float("nan")
        return cand


def score_candidate(cand: ProtocolCandidate, snr: float, n_trials: int = 1000, seed: int = 0,
                    **kwargs) -> float:
    """K* R^2 of one candidate over ``n_trials`` simulated voxels."""
    ctx = ScoringContext.build(snr, n_trials, seed, **kwargs)
    return ctx.score(cand).r2


@dataclass
class ProtocolTable:
    k: int
    snr: float
    seed: int
    n_trials: int
    ranked: list = field(default_factory=list)  # ascending R^2

    def top(self, n: int = 5) -> list:
        return sorted(self.ranked, key=_best_first)[:n]

    def rows(self) -> list:
        """Best-first rows with rank 1 at the top."""
        out = []
        for rank, c in enumerate(sorted(self.ranked, key=_best_first), start=1):
            out.append({
                "rank": rank, "b_list": c.label(), "delta_ratio": c.ratio(), "r2": c.r2,
                "n_failed": c.n_failed, "suggested": int(c.k in SUGGESTED and c.matches(SUGGESTED[c.k])),
            })
        return out


def _ascending(c: ProtocolCandidate):
    r = c.r2 if np.isfinite(c.r2) else -np.inf
    return (r, c.indices)


def _best_first(c: ProtocolCandidate):
    r = c.r2 if np.isfinite(c.r2) else -np.inf
    return (-r, c.indices)


def rank_protocols(k: int, snr: float, seed: int = 0, n_trials: int = 1000,
                   menu: Sequence[MenuItem] = MENU, candidates=None, **kwargs) -> ProtocolTable:
    """Score every size-``k`` subset and sort by ascending R^2 (ties by subset order)."""
    ctx = ScoringContext.build(snr, n_trials, seed, menu, **kwargs)
    cands = enumerate_candidates(k, menu) if candidates is None else list(candidates)
    for c in cands:
        ctx.score(c)
    return ProtocolTable(k, snr, seed, n_trials, sorted(cands, key=_ascending))


def _angles(v: np.ndarray, u: np.ndarray, axial: bool) -> np.ndarray:
    c = v @ u
    if axial:
        c = np.abs(c)
    return np.arccos(np.clip(c, -1.0, 1.0))


def subsample_directions(directions, target_count: int, pair_polarity: bool = False) -> np.ndarray:
    """Greedy farthest-point subset of unit vectors, starting from the first one.

    With ``pair_polarity`` the distance is axial (v and -v coincide), as when
    each kept direction is later paired with its opposite. Returns the chosen
    indices in ascending order; ties go to the lowest index.
    """
    d = np.asarray(directions, dtype=float)
    if d.ndim != 2 or d.shape[1] != 3:
        raise ProtocolSearchError("directions must be an (N, 3) array")
    if not np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6):
        raise ProtocolSearchError("directions must be unit vectors")
    n = d.shape[0]
    if not 1 <= target_count <= n:
        raise ProtocolSearchError(f"cannot pick {target_count} of {n} directions")
    if target_count == n:
        return np.arange(n)
    chosen = [0]
    nearest = _angles(d, d[0], pair_polarity)
    for _ in range(target_count - 1):
        nearest[chosen] = -1.0
        i = int(np.argmax(nearest))
        chosen.append(i)
        nearest = np.minimum(nearest, _angles(d, d[i], pair_polarity))
    return np.array(sorted(chosen))


def antipodal_partners(directions, indices) -> np.ndarray:
    """For each selected index, the other direction closest to its opposite."""
    d = np.asarray(directions, dtype=float)
    out = []
    for i in np.atleast_1d(indices):
        ang = _angles(d, -d[i], False)
        ang[i] = np.inf
        out.append(int(np.argmin(ang)))
    return np.array(out)


def min_pairwise_angle(directions, axial: bool = False) -> float:
    d = np.asarray(directions, dtype=float)
    ang = _angles(d, d.T, axial)
    np.fill_diagonal(ang, np.inf)
    return float(ang.min())
