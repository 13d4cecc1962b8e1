"""Synthetic signals with Gaussian noise and the Monte-Carlo studies built on them.

Randomness is counter based: every trial owns a Philox stream keyed by
``(seed, stream id, ..., trial)``, so any subset of trials can be regenerated
in any order, on any number of threads, with identical values. Noise is drawn
as standard normals indexed by sample position and scaled by sigma afterwards,
which gives common random numbers across SNR levels and designs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma

from .fitting import FitOptions, VoxelSeries, fit_dki_batch, fit_subdiffusion_batch
from .model import (
    CONNECTOME_G,
    GAMMA_PROTON,
    AcquisitionScheme,
    SubDiffusionParams,
    forward_subdiffusion_b,
    kurtosis_from_beta,
)
from .mlf import mittag_leffler
from .stats import DegenerateStatsError, r_squared

logger = logging.getLogger(__name__)

TRUTH_STREAM = 0
NOISE_STREAM = 1
DELTA_STREAM = 2

WM_TRUTH = (3e-4, 0.75)
GM_TRUTH = (5e-4, 0.85)
D_BETA_RANGE = (1e-4, 1e-3)
BETA_RANGE = (0.5, 1.0)


class ConfigError(ValueError):
    """A study configuration is invalid or infeasible."""


@dataclass(frozen=True)
class NoiseSpec:
    """Baseline SNR and direction count; sigma = 1 / (snr sqrt(n_dir)).

    ``snr = inf`` means noiseless.
    """

    snr: float
    n_dir: int = 64

    def __post_init__(self):
        if not self.snr > 0:
            raise ConfigError(f"snr must be positive, got {self.snr}")
        if self.n_dir < 1:
            raise ConfigError("n_dir must be >= 1")

    @property
    def sigma(self) -> float:
        if math.isinf(self.snr):
            return 0.0
        return 1.0 / (self.snr * math.sqrt(self.n_dir))


@dataclass(frozen=True)
class TrialSpec:
    truth: SubDiffusionParams
    scheme: AcquisitionScheme
    noise: NoiseSpec
    seed: int = 0
    n_trials: int = 1

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")


def trial_generator(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(key))))


def standard_normals(seed: int, trials, n_samples: int, stream: int = NOISE_STREAM) -> np.ndarray:
    """``(len(trials), n_samples)`` standard normals, one stream per trial.

    The first ``k`` columns do not depend on ``n_samples``.
    """
    trials = np.atleast_1d(np.asarray(trials, dtype=np.int64))
    out = np.empty((trials.size, n_samples))
    for i, t in enumerate(trials):
        out[i] = trial_generator(seed, stream, int(t)).standard_normal(n_samples)
    return out


def sample_truths(seed: int, trials, D_range=D_BETA_RANGE, beta_range=BETA_RANGE):
    """Uniform (D_beta, beta) draws over a rectangle, one stream per trial."""
    trials = np.atleast_1d(np.asarray(trials, dtype=np.int64))
    u = np.empty((trials.size, 2))
    for i, t in enumerate(trials):
        u[i] = trial_generator(seed, TRUTH_STREAM, int(t)).random(2)
    D = D_range[0] + (D_range[1] - D_range[0]) * u[:, 0]
    beta = beta_range[0] + (beta_range[1] - beta_range[0]) * u[:, 1]
    return D, beta


def design_with_b0(scheme: AcquisitionScheme):
    """(b, dbar) arrays with a leading b = 0 sample."""
    dbar = scheme.dbar
    return np.concatenate([[0.0], scheme.b]), np.concatenate([[dbar.min()], dbar])


def noiseless_signals(D_beta, beta, b, dbar) -> np.ndarray:
    """Forward model for ``(M,)`` truths on a ``(J,)`` or ``(M, J)`` design."""
    D_beta = np.asarray(D_beta, dtype=float)[:, None]
    beta = np.asarray(beta, dtype=float)[:, None]
    b = np.asarray(b, dtype=float)
    dbar = np.asarray(dbar, dtype=float)
    z = -D_beta * b * dbar ** (beta - 1.0)
    return mittag_leffler(np.broadcast_to(beta, z.shape), z)


def simulate_signal(spec: TrialSpec, trial_index: int) -> VoxelSeries:
    """One noisy realisation: b = 0 sample first, then the scheme's shells."""
    b, dbar = design_with_b0(spec.scheme)
    clean = forward_subdiffusion_b(spec.truth, b, dbar)
    eps = spec.noise.sigma * standard_normals(spec.seed, [trial_index], b.size)[0]
    return VoxelSeries(dbar, b, clean + eps)


def simulate_batch(D_beta, beta, b, dbar, sigma: float, seed: int, trials) -> np.ndarray:
    """Noisy signals for per-trial truths; noise columns follow sample order."""
    clean = noiseless_signals(D_beta, beta, b, dbar)
    if sigma == 0:
        return clean
    return clean + sigma * standard_normals(seed, trials, clean.shape[1])


def pulse_b(Delta, delta: float, G=CONNECTOME_G, gamma_: float = GAMMA_PROTON) -> np.ndarray:
    """b-values (s/mm^2) for every gradient amplitude at each Delta; shape ``(*Delta.shape, len(G))``."""
    Delta = np.asarray(Delta, dtype=float)
    q2 = (gamma_ * delta * np.asarray(G, dtype=float) * 1e-3) ** 2
    return q2 * (Delta[..., None] - delta / 3.0)


def _safe_r2(true, fitted) -> float:
    ok = np.isfinite(fitted)
    try:
        return r_squared(true[ok], fitted[ok])
    except DegenerateStatsError:
        return float("nan")


def _snr_list(cfg) -> list:
    return [float(s) for s in cfg.get("snr", [5, 10, 20])]


def _fit_opts(cfg) -> FitOptions:
    return FitOptions.from_dict(cfg.get("fit", {}))


@dataclass
class StudyResult:
    """Tables keyed by name (lists of row dicts) plus a JSON-ready summary."""

    name: str
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def draw_deltas(seed: int, n: int, trials, lo: float, hi: float, min_sep: float) -> np.ndarray:
    """Sorted Delta sets, uniform over ``[lo, hi]^n`` subject to a minimum gap.

    Uses the spacing transform: draw on ``[lo, hi - (n-1) min_sep]``, sort and
    add ``i * min_sep``, which is exactly uniform over the feasible set.
    """
    span = hi - lo - (n - 1) * min_sep
    if span < 0:
        raise ConfigError(f"{n} diffusion times with separation {min_sep} do not fit in [{lo}, {hi}]")
    trials = np.atleast_1d(np.asarray(trials, dtype=np.int64))
    out = np.empty((trials.size, n))
    for i, t in enumerate(trials):
        u = np.sort(trial_generator(seed, DELTA_STREAM, n, int(t)).random(n))
        out[i] = lo + u * span + np.arange(n) * min_sep
    return out


def study_num_diffusion_times(cfg: dict, threads: int = 1) -> StudyResult:
    """Parameter spread against the number of distinct diffusion times.

    ``n`` diffusion times are drawn from ``[delta, delta + window]`` with a
    minimum gap ``separation / (n - 1)``; the control ``2'`` repeats one
    diffusion time twice. b-values come from the gradient-amplitude list.
    """
    seed = int(cfg.get("seed", 0))
    n_trials = int(cfg.get("n_trials", 1000))
    delta = cfg.get("delta_ms", 8.0) * 1e-3
    window = cfg.get("window_ms", 50.0) * 1e-3
    sep = cfg.get("separation_ms", 30.0) * 1e-3
    G = np.asarray(cfg.get("G_mT_per_m", [g * 1e3 for g in CONNECTOME_G])) * 1e-3
    n_dir = int(cfg.get("n_dir", 64))
    tissues = cfg.get("tissues", {"WM": list(WM_TRUTH), "GM": list(GM_TRUTH)})
    n_values = [int(n) for n in cfg.get("n_values", [1, 2, 3, 4, 5])]
    control = bool(cfg.get("control", True))
    opts = _fit_opts(cfg)
    trials = np.arange(n_trials)

    designs = []
    for n in n_values:
        if n < 1:
            raise ConfigError("n must be >= 1")
        min_sep = sep / (n - 1) if n > 1 else 0.0
        designs.append((str(n), draw_deltas(seed, n, trials, delta, delta + window, min_sep)))
    if control:
        one = draw_deltas(seed, 1, trials, delta, delta + window, 0.0)
        designs.append(("2'", np.repeat(one, 2, axis=1)))

    samples, cv_rows = [], []
    for label, Deltas in designs:
        b = pulse_b(Deltas, delta, G).reshape(n_trials, -1)
        dbar = np.repeat(Deltas - delta / 3.0, G.size, axis=1)
        b = np.column_stack([np.zeros(n_trials), b])
        dbar = np.column_stack([dbar[:, :1], dbar])
        for tissue, (D0, beta0) in tissues.items():
            D_t = np.full(n_trials, D0)
            beta_t = np.full(n_trials, beta0)
            clean = noiseless_signals(D_t, beta_t, b, dbar)
            z = standard_normals(seed, trials, clean.shape[1])
            for snr in _snr_list(cfg):
                sigma = NoiseSpec(snr, n_dir).sigma
                fit = fit_subdiffusion_batch(b, dbar, clean + sigma * z, opts, threads)
                K = fit.K_star
                for t in range(n_trials):
                    samples.append({
                        "tissue": tissue, "n": label, "snr": snr, "trial": t,
                        "D_beta": fit.D_beta[t], "beta": fit.beta[t], "K_star": K[t],
                    })
                for name, v in (("D_beta", fit.D_beta), ("beta", fit.beta), ("K_star", K)):
                    mean = float(np.mean(v))
                    sd = float(np.std(v, ddof=1)) if n_trials > 1 else 0.0
                    cv_rows.append({
                        "tissue": tissue, "n": label, "snr": snr, "param": name,
                        "mean": mean, "sd": sd, "cv": sd / abs(mean) if mean else float("nan"),
                    })
    summary = {"n_trials": n_trials, "seed": seed, "cv": cv_rows}
    return StudyResult("ntimes", {"samples": samples, "cv": cv_rows}, summary)


def two_delta_design(Delta1: float, Delta2: float, delta: float, G) -> tuple:
    """(b, dbar) with a leading b = 0 for two diffusion times sharing the G list."""
    b = pulse_b(np.array([Delta1, Delta2]), delta, G).ravel()
    dbar = np.repeat(np.array([Delta1, Delta2]) - delta / 3.0, len(G))
    return np.concatenate([[0.0], b]), np.concatenate([[dbar[0]], dbar])


def study_delta_separation(cfg: dict, threads: int = 1) -> StudyResult:
    """K* R^2 over a grid of (Delta1, Delta2 - Delta1) for two diffusion times.

    Truths are uniform over the experiment rectangle and shared by every cell;
    noise is shared by sample position, so cells differ only by design.
    ``pairs_ms`` restricts the grid to listed (Delta1, Delta2) pairs.
    """
    seed = int(cfg.get("seed", 0))
    n_trials = int(cfg.get("n_trials", 1000))
    delta = cfg.get("delta_ms", 8.0) * 1e-3
    G = np.asarray(cfg.get("G_mT_per_m", [g * 1e3 for g in CONNECTOME_G])) * 1e-3
    n_dir = int(cfg.get("n_dir", 64))
    opts = _fit_opts(cfg)
    trials = np.arange(n_trials)
    D_t, beta_t = sample_truths(seed, trials, tuple(cfg.get("D_beta_range", D_BETA_RANGE)),
                                tuple(cfg.get("beta_range", BETA_RANGE)))
    K_t = kurtosis_from_beta(beta_t)

    if "pairs_ms" in cfg:
        pairs = [(float(a), float(b)) for a, b in cfg["pairs_ms"]]
    else:
        lo = cfg.get("Delta_min_ms", delta * 1e3)
        hi = cfg.get("Delta_max_ms", delta * 1e3 + 50.0)
        step = cfg.get("step_ms", 1.0)
        grid = np.round(np.arange(lo, hi + 0.5 * step, step), 9)
        pairs = [(float(a), float(b)) for i, a in enumerate(grid) for b in grid[i + 1:]]
    for a, b in pairs:
        if not (delta * 1e3 <= a < b):
            raise ConfigError(f"need delta <= Delta1 < Delta2, got ({a}, {b})")

    z = standard_normals(seed, trials, 1 + 2 * G.size)
    rows = []
    for a, b2 in pairs:
        b, dbar = two_delta_design(a * 1e-3, b2 * 1e-3, delta, G)
        clean = noiseless_signals(D_t, beta_t, b, dbar)
        for snr in _snr_list(cfg):
            sigma = NoiseSpec(snr, n_dir).sigma
            fit = fit_subdiffusion_batch(b, dbar, clean + sigma * z, opts, threads)
            rows.append({
                "Delta1_ms": a, "Delta2_ms": b2, "separation_ms": b2 - a, "snr": snr,
                "r2": _safe_r2(K_t, fit.K_star), "n_failed": int(np.count_nonzero(~fit.converged)),
            })
    return StudyResult("dsurface", {"surface": rows}, {"n_trials": n_trials, "seed": seed, "cells": rows})


def study_kurtosis_scatter(cfg: dict, threads: int = 1) -> StudyResult:
    """True against fitted K for several diffusion-time sets.

    The sub-diffusion K* uses every shell of every diffusion time in the set;
    for single-time sets the DKI kurtosis is also fitted on shells up to the
    configured b-cap.
    """
    seed = int(cfg.get("seed", 0))
    n_trials = int(cfg.get("n_trials", 1000))
    delta = cfg.get("delta_ms", 8.0) * 1e-3
    G = np.asarray(cfg.get("G_mT_per_m", [g * 1e3 for g in CONNECTOME_G])) * 1e-3
    n_dir = int(cfg.get("n_dir", 64))
    sets = [[float(d) for d in s] for s in cfg.get("delta_sets_ms", [[19], [49], [19, 49], [19, 34, 49]])]
    opts = _fit_opts(cfg)
    trials = np.arange(n_trials)
    D_t, beta_t = sample_truths(seed, trials, tuple(cfg.get("D_beta_range", D_BETA_RANGE)),
                                tuple(cfg.get("beta_range", BETA_RANGE)))
    K_t = kurtosis_from_beta(beta_t)
    n_max = 1 + max(len(s) for s in sets) * G.size
    z_all = standard_normals(seed, trials, n_max)

    rows, points = [], []
    for s in sets:
        Deltas = np.array(s) * 1e-3
        b = np.concatenate([[0.0], pulse_b(Deltas, delta, G).ravel()])
        dbar = np.concatenate([[Deltas[0] - delta / 3.0], np.repeat(Deltas - delta / 3.0, G.size)])
        clean = noiseless_signals(D_t, beta_t, b, dbar)
        z = z_all[:, : b.size]
        label = "+".join(f"{d:g}" for d in s)
        for snr in _snr_list(cfg):
            y = clean + NoiseSpec(snr, n_dir).sigma * z
            fit = fit_subdiffusion_batch(b, dbar, y, opts, threads)
            row = {"deltas_ms": label, "snr": snr, "r2_sub": _safe_r2(K_t, fit.K_star),
                   "n_failed_sub": int(np.count_nonzero(~fit.converged))}
            K_dki = np.full(n_trials, np.nan)
            if len(s) == 1:
                keep = b <= (opts.dki_b_cap if opts.dki_b_cap is not None else np.inf)
                dki = fit_dki_batch(b[keep], y[:, keep], opts, threads)
                K_dki = dki.K_dki
                row["r2_dki"] = _safe_r2(K_t, K_dki)
                row["n_failed_dki"] = int(np.count_nonzero(~dki.converged))
            rows.append(row)
            for t in range(n_trials):
                points.append({"deltas_ms": label, "snr": snr, "trial": t, "K_true": K_t[t],
                               "K_sub": fit.K_star[t], "K_dki": K_dki[t]})
    return StudyResult("kscatter", {"r2": rows, "points": points},
                       {"n_trials": n_trials, "seed": seed, "r2": rows})


def study_dki_time_dependence(cfg: dict, threads: int = 1) -> StudyResult:
    """DKI estimates against effective diffusion time for sub-diffusion data.

    A noisy sweep reports the mean and the 2.5/97.5 percentiles over trials; a
    noiseless sweep over a wider log-spaced range shows the limiting trend.
    Reference lines are D*(dbar) and K* of each truth.
    """
    seed = int(cfg.get("seed", 0))
    n_trials = int(cfg.get("n_trials", 1000))
    b = np.asarray(cfg.get("b_values", [0.0, 1000.0, 1400.0, 2500.0]), dtype=float)
    n_dir = int(cfg.get("n_dir", 64))
    snr = float(cfg.get("snr_noisy", 20.0))
    tissues = cfg.get("tissues", {"WM": list(WM_TRUTH), "GM": list(GM_TRUTH)})
    fit_cfg = {"dki_b_cap": None}
    fit_cfg.update(cfg.get("fit", {}))
    opts = FitOptions.from_dict(fit_cfg)
    noisy_dbar = np.asarray(cfg.get("noisy_dbar_ms", list(np.arange(10.0, 110.0 + 1e-9, 5.0))), dtype=float) * 1e-3
    lo, hi, num = cfg.get("noiseless_dbar_s", [0.1, 100.0, 31])
    clean_dbar = np.geomspace(lo, hi, int(num))
    trials = np.arange(n_trials)
    z = standard_normals(seed, trials, b.size)
    sigma = NoiseSpec(snr, n_dir).sigma

    noisy, clean_rows = [], []
    for tissue, (D0, beta0) in tissues.items():
        p = SubDiffusionParams(D0, beta0)
        K_star = kurtosis_from_beta(beta0)
        for d in noisy_dbar:
            s = forward_subdiffusion_b(p, b, d)
            fit = fit_dki_batch(b, s[None, :] + sigma * z, opts, threads)
            D_star = D0 * d ** (beta0 - 1.0) / gamma(1.0 + beta0)
            D_lo, D_hi = np.percentile(fit.D_dki, [2.5, 97.5])
            K_lo, K_hi = np.percentile(fit.K_dki, [2.5, 97.5])
            noisy.append({
                "tissue": tissue, "dbar_ms": d * 1e3,
                "D_dki_mean": float(fit.D_dki.mean()), "D_dki_lo": D_lo, "D_dki_hi": D_hi,
                "K_dki_mean": float(fit.K_dki.mean()), "K_dki_lo": K_lo, "K_dki_hi": K_hi,
                "D_star": D_star, "K_star": K_star,
            })
        signals = np.array([forward_subdiffusion_b(p, b, d) for d in clean_dbar])
        fit = fit_dki_batch(b, signals, opts, threads)
        for i, d in enumerate(clean_dbar):
            clean_rows.append({
                "tissue": tissue, "dbar_s": d, "D_dki": fit.D_dki[i], "K_dki": fit.K_dki[i],
                "D_star": D0 * d ** (beta0 - 1.0) / gamma(1.0 + beta0), "K_star": K_star,
            })
    summary = {"n_trials": n_trials, "seed": seed, "snr": snr, "noiseless": clean_rows}
    return StudyResult("dkitime", {"noisy": noisy, "noiseless": clean_rows}, summary)


STUDIES = {
    "ntimes": study_num_diffusion_times,
    "dsurface": study_delta_separation,
    "kscatter": study_kurtosis_scatter,
    "dkitime": study_dki_time_dependence,
}
