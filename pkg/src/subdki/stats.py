"""Goodness of fit, tissue contrast, region statistics and scan-rescan ICC."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

logger = logging.getLogger(__name__)

ICC_BINS = 50


class StatsError(ValueError):
    pass


class DegenerateStatsError(StatsError):
    """A statistic is undefined for the given input (e.g. zero variance)."""


def _labels(*ids_or_ranges):
    out = set()
    for item in ids_or_ranges:
        if isinstance(item, range):
            out.update(item)
        else:
            out.add(int(item))
    return frozenset(out)


# FreeSurfer aseg/aparc label ids
REGIONS = {
    "thalamus": _labels(10, 49),
    "caudate": _labels(11, 50),
    "putamen": _labels(12, 51),
    "pallidum": _labels(13, 52),
    "fusiform": _labels(1007, 2007),
    "lingual": _labels(1013, 2013),
    "cerebral_wm": _labels(2, 41),
    "cerebellum_wm": _labels(7, 46),
    "cc": _labels(range(251, 256)),
}
REGIONS["scGM"] = REGIONS["thalamus"] | REGIONS["caudate"] | REGIONS["putamen"] | REGIONS["pallidum"]
REGIONS["cGM"] = _labels(range(1000, 3000))
REGIONS["WM"] = REGIONS["cerebral_wm"] | REGIONS["cerebellum_wm"] | REGIONS["cc"]


def r_squared(true_values, fitted_values) -> float:
    """Coefficient of determination ``1 - SSE/SST`` of fitted against true values."""
    t = np.asarray(true_values, dtype=float).ravel()
    f = np.asarray(fitted_values, dtype=float).ravel()
    if t.shape != f.shape or t.size == 0:
        raise StatsError("true and fitted values must be non-empty and of equal length")
    sst = np.sum((t - t.mean()) ** 2)
    if not sst > 0:
        raise DegenerateStatsError("true values are constant, R^2 is undefined")
    return float(1.0 - np.sum((t - f) ** 2) / sst)


def tissue_contrast(mu_wm: float, sigma_wm: float, mu_gm: float, sigma_gm: float) -> float:
    """|mu_wm - mu_gm| / sqrt(sigma_wm^2 + sigma_gm^2)."""
    if sigma_wm < 0 or sigma_gm < 0:
        raise StatsError("standard deviations must be non-negative")
    den = np.hypot(sigma_wm, sigma_gm)
    if den == 0:
        raise DegenerateStatsError("both standard deviations are zero")
    return float(abs(mu_wm - mu_gm) / den)


def _icc_parts(scan, rescan):
    scan = np.asarray(scan, dtype=float)
    rescan = np.asarray(rescan, dtype=float)
    if scan.shape != rescan.shape:
        raise StatsError("scan and rescan values must have the same shape")
    if scan.ndim == 0 or scan.shape[0] < 2:
        raise StatsError("ICC needs at least two subjects")
    m = 0.5 * (scan + rescan)
    s_intra = np.mean(0.5 * ((scan - m) ** 2 + (rescan - m) ** 2), axis=0)
    s_inter = np.var(m, axis=0, ddof=1)
    return s_intra, s_inter


def icc_voxel(scan_values, rescan_values) -> float:
    """ICC = s_inter^2 / (s_intra^2 + s_inter^2) for one voxel across subjects.

    Returns NaN when both variance components are zero.
    """
    s_intra, s_inter = _icc_parts(scan_values, rescan_values)
    if np.ndim(s_intra):
        raise StatsError("icc_voxel takes one value per subject; use icc_map for arrays")
    den = s_intra + s_inter
    return float(s_inter / den) if den > 0 else float("nan")


def icc_map(scan, rescan) -> np.ndarray:
    """Voxelwise ICC for arrays shaped ``(n_subjects, *spatial)``; NaN where undefined."""
    s_intra, s_inter = _icc_parts(scan, rescan)
    den = s_intra + s_inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, s_inter / den, np.nan)


@dataclass
class IccSummary:
    region: str
    n_voxels: int
    mean: float
    sd: float
    counts: np.ndarray
    edges: np.ndarray


def icc_region_summary(icc, labels, regions: Mapping[str, frozenset] = None) -> list:
    """Histogram (50 bins over [0, 1]), mean and SD of ICC per region; NaNs excluded."""
    regions = REGIONS if regions is None else regions
    icc = np.asarray(icc, dtype=float)
    labels = np.asarray(labels)
    if icc.shape != labels.shape:
        raise StatsError("ICC map and label map shapes differ")
    edges = np.linspace(0.0, 1.0, ICC_BINS + 1)
    out = []
    for name, ids in regions.items():
        sel = np.isin(labels, list(ids)) & np.isfinite(icc)
        v = icc[sel]
        if v.size == 0:
            logger.warning("region %s has no voxels with a defined ICC, skipped", name)
            continue
        counts, _ = np.histogram(v, bins=edges)
        sd = float(np.std(v, ddof=1)) if v.size > 1 else float("nan")
        out.append(IccSummary(name, int(v.size), float(v.mean()), sd, counts, edges))
    return out


@dataclass
class RegionStats:
    region: str
    mean: float
    sd: float
    cv: float
    n_voxels: int
    n_subjects: int


def pooled_stats(means, sds, counts) -> tuple:
    """Voxel-count-weighted mean and pooled SD from per-subject summaries."""
    means = np.asarray(means, dtype=float)
    sds = np.asarray(sds, dtype=float)
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if not n > 0:
        raise StatsError("no voxels")
    mean = float(np.sum(counts * means) / n)
    dof = np.sum(np.maximum(counts - 1.0, 0.0))
    if dof > 0:
        sd = float(np.sqrt(np.sum(np.where(counts > 1, (counts - 1.0) * sds**2, 0.0)) / dof))
    else:
        sd = float("nan")
    return mean, sd


def region_aggregate(maps, labels, regions: Mapping[str, frozenset] = None) -> list:
    """Per-region weighted mean, pooled SD and CV across subjects.

    ``maps`` and ``labels`` are single arrays or equal-length sequences of
    per-subject arrays. Non-finite map values are ignored. Regions with no
    voxels in any subject are logged and skipped.
    """
    regions = REGIONS if regions is None else regions
    if isinstance(maps, np.ndarray):
        maps, labels = [maps], [labels]
    maps = [np.asarray(m, dtype=float) for m in maps]
    labels = [np.asarray(lab) for lab in labels]
    if len(maps) != len(labels):
        raise StatsError("need one label map per subject map")
    for m, lab in zip(maps, labels):
        if m.shape != lab.shape:
            raise StatsError(f"map shape {m.shape} does not match label shape {lab.shape}")

    out = []
    for name, ids in regions.items():
        ids = list(ids)
        means, sds, counts = [], [], []
        for m, lab in zip(maps, labels):
            v = m[np.isin(lab, ids) & np.isfinite(m)]
            if v.size == 0:
                continue
            # centred on the first value so a uniform region gives exactly v and 0
            d = v - v[0]
            means.append(v[0] + d.mean())
            sds.append(d.std(ddof=1) if v.size > 1 else 0.0)
            counts.append(v.size)
        if not counts:
            logger.warning("region %s has no labelled voxels, skipped", name)
            continue
        mean, sd = pooled_stats(means, sds, counts)
        cv = sd / abs(mean) if mean != 0 else float("nan")
        out.append(RegionStats(name, mean, sd, cv, int(sum(counts)), len(counts)))
    return out


def mean_difference_test(sample_a, sample_b) -> float:
    """Two-sided Welch t-test p-value."""
    a = np.asarray(sample_a, dtype=float).ravel()
    b = np.asarray(sample_b, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        raise StatsError("each sample needs at least two values")
    if np.array_equal(a, b):
        return 1.0
    if np.var(a) == 0 and np.var(b) == 0:
        raise DegenerateStatsError("both samples have zero variance")
    return float(sps.ttest_ind(a, b, equal_var=False).pvalue)
