import logging

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from subdki.stats import (
    REGIONS,
    DegenerateStatsError,
    StatsError,
    icc_map,
    icc_region_summary,
    icc_voxel,
    mean_difference_test,
    pooled_stats,
    r_squared,
    region_aggregate,
    tissue_contrast,
)

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)
positive = st.floats(min_value=1e-3, max_value=1e3)
N_CASES = 10_000


# ---- examples

def test_r_squared_examples():
    t = np.array([0.3, 1.2, 2.5, 0.7])
    assert r_squared(t, t) == 1.0
    assert r_squared(t, np.full(4, t.mean())) == 0.0
    assert r_squared([0, 1, 2], [0, 1, 1]) == 0.5
    with pytest.raises(DegenerateStatsError):
        r_squared([1, 1, 1], [0, 1, 2])
    with pytest.raises(StatsError):
        r_squared([1, 2], [1, 2, 3])
    with pytest.raises(StatsError):
        r_squared([], [])


def test_tissue_contrast_examples():
    assert tissue_contrast(1.0, np.sqrt(0.5), 0.0, np.sqrt(0.5)) == pytest.approx(1.0, rel=1e-15)
    assert tissue_contrast(0.4, 0.1, 0.4, 0.2) == 0.0
    assert round(tissue_contrast(0.87, 0.22, 0.40, 0.16), 2) == 1.73
    with pytest.raises(DegenerateStatsError):
        tissue_contrast(1.0, 0.0, 0.0, 0.0)
    with pytest.raises(StatsError):
        tissue_contrast(1.0, -0.1, 0.0, 0.1)


def test_icc_examples():
    assert icc_voxel([1.0, 2.0, 4.0], [1.0, 2.0, 4.0]) == 1.0
    assert icc_voxel([1.0, 3.0], [3.0, 1.0]) == 0.0
    assert icc_voxel([1.0, 2.0], [1.0, 2.0]) == 1.0
    assert np.isnan(icc_voxel([2.0, 2.0], [2.0, 2.0]))
    with pytest.raises(StatsError):
        icc_voxel([1.0], [1.0])
    with pytest.raises(StatsError):
        icc_voxel([1.0, 2.0], [1.0, 2.0, 3.0])


def test_icc_hand_computed():
    # means {1.5, 3.5}: s_intra = mean(0.25, 0.25) = 0.25, s_inter = var{1.5, 3.5} = 2
    assert icc_voxel([1.0, 3.0], [2.0, 4.0]) == pytest.approx(2.0 / 2.25, rel=1e-15)


def test_icc_map_matches_voxel():
    rng = np.random.default_rng(0)
    scan = rng.normal(size=(5, 3, 4))
    rescan = scan + 0.3 * rng.normal(size=(5, 3, 4))
    m = icc_map(scan, rescan)
    assert m.shape == (3, 4)
    assert m[2, 1] == pytest.approx(icc_voxel(scan[:, 2, 1], rescan[:, 2, 1]), rel=1e-14)
    flat = icc_map(np.ones((3, 2)), np.ones((3, 2)))
    assert np.all(np.isnan(flat))


def test_icc_region_summary():
    icc = np.array([[0.1, 0.5], [0.9, np.nan]])
    labels = np.array([[10, 49], [2, 10]])
    out = {s.region: s for s in icc_region_summary(icc, labels)}
    assert out["thalamus"].n_voxels == 2
    assert out["thalamus"].mean == pytest.approx(0.3)
    assert out["thalamus"].counts.sum() == 2 and out["thalamus"].edges.size == 51
    assert out["WM"].n_voxels == 1
    assert "caudate" not in out


def test_region_aggregate_examples(caplog):
    labels = np.array([10, 10, 49, 2, 2])
    uniform = region_aggregate(np.full(5, 0.7), labels, {"thalamus": REGIONS["thalamus"]})[0]
    assert (uniform.mean, uniform.sd, uniform.cv) == (pytest.approx(0.7), 0.0, 0.0)
    two = region_aggregate([np.full(3, 1.0), np.full(3, 3.0)], [np.array([2, 2, 2])] * 2,
                           {"wm": REGIONS["WM"]})[0]
    assert two.mean == 2.0 and two.n_subjects == 2 and two.n_voxels == 6
    with caplog.at_level(logging.WARNING):
        out = region_aggregate(np.ones(5), labels, {"cc": REGIONS["cc"], "wm": REGIONS["WM"]})
    assert [r.region for r in out] == ["wm"]
    assert "cc" in caplog.text
    with pytest.raises(StatsError):
        region_aggregate(np.ones(4), labels)


def test_composite_regions():
    assert REGIONS["scGM"] == frozenset({10, 49, 11, 50, 12, 51, 13, 52})
    assert 1007 in REGIONS["cGM"] and 2999 in REGIONS["cGM"] and 3000 not in REGIONS["cGM"]
    assert {2, 41, 7, 46, 251, 255} <= REGIONS["WM"]


def test_pooled_stats_against_direct_formula():
    a = np.array([1.0, 2.0, 4.0])
    b = np.array([3.0, 5.0])
    mean, sd = pooled_stats([a.mean(), b.mean()], [a.std(ddof=1), b.std(ddof=1)], [3, 2])
    assert mean == pytest.approx(np.concatenate([a, b]).mean())
    within = ((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()
    assert sd == pytest.approx(np.sqrt(within / 3))


def test_mean_difference_examples():
    rng = np.random.default_rng(12345)
    a = rng.normal(0, 1, 100)
    b = rng.normal(5, 1, 100)
    assert mean_difference_test(a, a) == 1.0
    p = mean_difference_test(a, b)
    assert p < 1e-10
    assert mean_difference_test(b, a) == p
    # permutation oracle: no relabelling of the pooled data reaches the observed gap
    pooled = np.concatenate([a, b])
    gap = abs(a.mean() - b.mean())
    perm = [abs(np.diff([x[:100].mean(), x[100:].mean()])[0]) for x in
            (rng.permutation(pooled) for _ in range(2000))]
    assert max(perm) < gap
    with pytest.raises(StatsError):
        mean_difference_test([1.0], [1.0, 2.0])
    with pytest.raises(DegenerateStatsError):
        mean_difference_test([1.0, 1.0], [2.0, 2.0])


# ---- properties

@settings(max_examples=N_CASES, deadline=None)
@given(
    t=arrays(float, st.integers(3, 12), elements=finite),
    noise=st.integers(0, 2**32 - 1),
    shift=finite,
    scale=st.floats(min_value=1e-2, max_value=1e2),
)
def test_r_squared_invariance(t, noise, shift, scale):
    assume(np.ptp(t) > 1e-3)
    f = t + np.random.default_rng(noise).normal(size=t.size)
    r = r_squared(t, f)
    assert r <= 1.0
    assert r_squared(scale * t + shift, scale * f + shift) == pytest.approx(r, rel=1e-6, abs=1e-6)


@settings(max_examples=N_CASES, deadline=None)
@given(mw=finite, sw=positive, mg=finite, sg=positive, c=finite)
def test_tissue_contrast_invariance(mw, sw, mg, sg, c):
    tc = tissue_contrast(mw, sw, mg, sg)
    assert tc >= 0
    assert tissue_contrast(mg, sg, mw, sw) == tc
    assert tissue_contrast(mw + c, sw, mg + c, sg) == pytest.approx(tc, rel=1e-9, abs=1e-9)


@settings(max_examples=N_CASES, deadline=None)
@given(
    data=arrays(float, st.tuples(st.integers(2, 8), st.just(2)), elements=st.floats(-100, 100)),
    swap=st.integers(0, 255),
    c=st.floats(-100, 100),
)
def test_icc_invariance(data, swap, c):
    scan, rescan = data[:, 0].copy(), data[:, 1].copy()
    ref = icc_voxel(scan, rescan)
    if np.isnan(ref):
        return
    # a denominator close to rounding noise makes the ratio meaningless
    assume(np.var(data) > 1e-6)
    assert 0.0 <= ref <= 1.0
    mask = (swap >> np.arange(scan.size) % 8) & 1 == 1
    s2, r2 = np.where(mask, rescan, scan), np.where(mask, scan, rescan)
    assert icc_voxel(s2, r2) == pytest.approx(ref, rel=1e-9, abs=1e-9)
    assert icc_voxel(scan + c, rescan + c) == pytest.approx(ref, rel=1e-6, abs=1e-6)


@settings(max_examples=500, deadline=None)
@given(
    values=arrays(float, st.integers(2, 40), elements=st.floats(0, 3)),
    split=st.integers(0, 2**40),
)
def test_region_partition_weighted_mean(values, split):
    labels = np.where((split >> (np.arange(values.size) % 40)) & 1, 10, 49)
    whole = region_aggregate(values, labels, {"thal": REGIONS["thalamus"]})[0]
    parts = region_aggregate(values, labels, {"l": frozenset({10}), "r": frozenset({49})})
    weighted = sum(p.mean * p.n_voxels for p in parts) / sum(p.n_voxels for p in parts)
    assert whole.mean == pytest.approx(weighted, rel=1e-12, abs=1e-12)
    assert whole.sd >= 0 and (np.isnan(whole.cv) or whole.cv >= 0)
