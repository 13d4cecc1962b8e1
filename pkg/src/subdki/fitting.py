"""Powder averaging, normalization and bounded least-squares estimation of the
sub-diffusion and DKI models, voxel by voxel or in bulk.

The batch entry points (:func:`fit_subdiffusion_batch`, :func:`fit_dki_batch`)
are what the simulation and protocol studies use; :func:`fit_subdiffusion` and
:func:`fit_dki` wrap them for a single :class:`VoxelSeries`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import gamma

from .mlf import ml_value_and_grad
from .model import (
    DerivedMetrics,
    DkiParams,
    SubDiffusionParams,
    derived_metrics,
    kurtosis_from_beta,
)
from .solver import least_squares_box

logger = logging.getLogger(__name__)

# rows per solver call; fixed so results never depend on the thread count
CHUNK_ROWS = 512

_SUB_SCALE = np.array([1e-3, 1.0])
_DKI_SCALE = np.array([1.0, 1e-3, 1.0])


class FitError(ValueError):
    """Base class for fitting input errors."""


class InsufficientDataError(FitError):
    pass


class DegenerateInputError(FitError):
    pass


class ProtocolError(FitError):
    """Samples are incompatible with the requested model (e.g. mixed diffusion times for DKI)."""


@dataclass(frozen=True)
class FitOptions:
    ftol: float = 1e-4
    xtol: float = 1e-6
    max_iter: int = 400
    D_beta_bounds: tuple = (1e-8, 0.1)
    beta_bounds: tuple = (1e-3, 1.0)
    init: tuple = (5e-4, 0.8)
    D_dki_bounds: tuple = (1e-8, 0.1)
    K_dki_bounds: tuple = (0.0, 3.0)
    S0_bounds: tuple = (1e-6, 1e6)
    dki_b_cap: Optional[float] = 2400.0
    dki_fit_s0: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "FitOptions":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("D_beta_bounds", "beta_bounds", "init", "D_dki_bounds", "K_dki_bounds", "S0_bounds"):
            if k in known:
                known[k] = tuple(known[k])
        unknown = set(d) - set(known)
        if unknown:
            raise FitError(f"unknown fit options: {sorted(unknown)}")
        return cls(**known)


def powder_average(signals) -> tuple:
    """Geometric mean over directions.

    Returns ``(value, fallback)``; when any input is <= 0 the arithmetic mean is
    returned instead and ``fallback`` is True.
    """
    x = np.asarray(signals, dtype=float).ravel()
    if x.size == 0:
        raise FitError("cannot powder-average an empty set of signals")
    if np.all(x > 0):
        return float(np.exp(np.mean(np.log(x)))), False
    return float(np.mean(x)), True


def _pow2_scale(ref):
    """Power of two near ``max |ref|`` (1 when that is 0); dividing by it is exact."""
    m = np.max(np.abs(np.atleast_2d(ref)), axis=-1)
    m = np.where(np.isfinite(m) & (m > 0), m, 1.0)
    return np.ldexp(1.0, np.frexp(m)[1])


def powder_average_rows(x: np.ndarray) -> tuple:
    """Row-wise :func:`powder_average` for a ``(N, n_dir)`` array."""
    x = np.asarray(x, dtype=float)
    pos = np.all(x > 0, axis=1)
    out = np.mean(x, axis=1)
    if np.any(pos):
        out[pos] = np.exp(np.mean(np.log(x[pos]), axis=1))
    return out, ~pos


@dataclass
class VoxelSeries:
    """Normalized powder-averaged samples of one voxel, with b = 0 entries included."""

    dbar: np.ndarray
    b: np.ndarray
    s_norm: np.ndarray
    s0: float = 1.0
    fallback: bool = False

    def __post_init__(self):
        self.dbar = np.asarray(self.dbar, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.s_norm = np.asarray(self.s_norm, dtype=float)
        if not (self.dbar.shape == self.b.shape == self.s_norm.shape):
            raise FitError("dbar, b and s_norm must have the same shape")
        if not self.s0 > 0:
            raise DegenerateInputError(f"baseline signal must be positive, got {self.s0}")

    @property
    def q(self) -> np.ndarray:
        return np.sqrt(self.b / self.dbar)

    @property
    def has_negative(self) -> bool:
        return bool(np.any(self.s_norm < 0))

    @classmethod
    def from_raw(cls, dbar, b, shell_signals, b0_signals) -> "VoxelSeries":
        """Powder-average raw direction-resolved signals and normalize by b = 0.

        ``shell_signals`` is a sequence of per-direction arrays aligned with
        ``dbar`` and ``b``. Raw values are first divided by a power of two
        taken from the baseline, so rescaling the data by a power of two
        leaves the normalized series bit-identical.
        """
        b0_signals = np.asarray(b0_signals, dtype=float)
        scale = float(_pow2_scale(b0_signals.ravel())[0])
        s0, fb0 = powder_average(b0_signals / scale)
        if not s0 > 0:
            raise DegenerateInputError("powder-averaged b = 0 signal is not positive")
        vals, fbs = zip(*(powder_average(np.asarray(s, dtype=float) / scale) for s in shell_signals)) \
            if len(shell_signals) else ((), ())
        dbar = np.asarray(dbar, dtype=float)
        s = np.asarray(vals, dtype=float) / s0
        # the normalized b = 0 sample is 1 by construction
        return cls(
            np.concatenate([[dbar.min() if dbar.size else 1.0], dbar]),
            np.concatenate([[0.0], np.asarray(b, dtype=float)]),
            np.concatenate([[1.0], s]),
            s0 * scale,
            bool(fb0 or any(fbs)),
        )

    def select(self, mask) -> "VoxelSeries":
        return VoxelSeries(self.dbar[mask], self.b[mask], self.s_norm[mask], self.s0, self.fallback)


@dataclass
class FitResult:
    params: object
    residual_sse: float
    initial_sse: float
    n_iter: int
    converged: bool
    r2_signal: float
    derived: Optional[DerivedMetrics] = None
    flags: list = field(default_factory=list)


@dataclass
class SubBatchFit:
    D_beta: np.ndarray
    beta: np.ndarray
    sse: np.ndarray
    initial_sse: np.ndarray
    n_iter: np.ndarray
    converged: np.ndarray
    r2_signal: np.ndarray

    @property
    def K_star(self) -> np.ndarray:
        return kurtosis_from_beta(self.beta)


@dataclass
class DkiBatchFit:
    S0: np.ndarray
    D_dki: np.ndarray
    K_dki: np.ndarray
    sse: np.ndarray
    initial_sse: np.ndarray
    n_iter: np.ndarray
    converged: np.ndarray
    r2_signal: np.ndarray


def _r2_signal(y, sse):
    sst = np.sum((y - y.mean(axis=1, keepdims=True)) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(sst > 0, 1.0 - sse / sst, np.nan)


def _run_chunks(solve, n_rows: int, threads: int):
    """Apply ``solve(start, stop)`` over fixed row chunks, returning results in order."""
    starts = list(range(0, n_rows, CHUNK_ROWS)) or [0]
    spans = [(s, min(s + CHUNK_ROWS, n_rows)) for s in starts]
    if threads and threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda sp: solve(*sp), spans))
    return [solve(*sp) for sp in spans]


def _broadcast_design(b, dbar, signals):
    signals = np.atleast_2d(np.asarray(signals, dtype=float))
    b = np.broadcast_to(np.asarray(b, dtype=float), signals.shape)
    dbar = np.broadcast_to(np.asarray(dbar, dtype=float), signals.shape)
    return b, dbar, signals


def fit_subdiffusion_batch(b, dbar, signals, opts: FitOptions = None, threads: int = 1) -> SubBatchFit:
    """Fit (D_beta, beta) independently for every row of ``signals``.

    ``b`` and ``dbar`` are ``(J,)`` or ``(M, J)``; the model is
    ``E_beta(-D_beta b dbar**(beta - 1))`` with the baseline fixed at 1.
    """
    opts = opts or FitOptions()
    b, dbar, y = _broadcast_design(b, dbar, signals)
    log_dbar = np.log(dbar)
    lower = np.array([opts.D_beta_bounds[0], opts.beta_bounds[0]]) / _SUB_SCALE
    upper = np.array([opts.D_beta_bounds[1], opts.beta_bounds[1]]) / _SUB_SCALE
    x0 = np.array(opts.init, dtype=float) / _SUB_SCALE

    def solve(start, stop):
        bb, ld, yy = b[start:stop], log_dbar[start:stop], y[start:stop]

        def fun(x, rows):
            D = x[:, 0:1] * _SUB_SCALE[0]
            beta = x[:, 1:2]
            bw = bb[rows] * np.exp((beta - 1.0) * ld[rows])
            z = -D * bw
            E, dEdb, dEdz = ml_value_and_grad(np.broadcast_to(beta, z.shape), z)
            J = np.empty(z.shape + (2,))
            J[..., 0] = -dEdz * bw * _SUB_SCALE[0]
            J[..., 1] = dEdb + dEdz * z * ld[rows]
            return E - yy[rows], J

        start_x = np.broadcast_to(x0, (stop - start, 2))
        return least_squares_box(fun, start_x, lower, upper, opts.ftol, opts.xtol, max_iter=opts.max_iter)

    parts = _run_chunks(solve, y.shape[0], threads)
    x = np.concatenate([p.x for p in parts]) * _SUB_SCALE
    sse = 2.0 * np.concatenate([p.cost for p in parts])
    return SubBatchFit(
        D_beta=x[:, 0],
        beta=x[:, 1],
        sse=sse,
        initial_sse=2.0 * np.concatenate([p.initial_cost for p in parts]),
        n_iter=np.concatenate([p.n_iter for p in parts]),
        converged=np.concatenate([p.converged for p in parts]),
        r2_signal=_r2_signal(y, sse),
    )


def _dki_start(b, y, fit_s0):
    order = np.argsort(b, axis=1)
    lo_i, hi_i = order[:, 0], order[:, -1]
    rows = np.arange(b.shape[0])
    b_lo, b_hi = b[rows, lo_i], b[rows, hi_i]
    s_lo, s_hi = y[rows, lo_i], y[rows, hi_i]
    ok = (s_lo > 0) & (s_hi > 0) & (b_hi > b_lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        D0 = np.where(ok, np.log(np.where(ok, s_lo / s_hi, 1.0)) / np.where(ok, b_hi - b_lo, 1.0), 1e-3)
    D0 = np.where(D0 > 0, D0, 1e-3)
    if fit_s0:
        S0 = np.where(s_lo > 0, s_lo * np.exp(b_lo * D0), 1.0)
        return np.column_stack([S0, D0, np.full_like(D0, 0.5)])
    return np.column_stack([D0, np.full_like(D0, 0.5)])


def fit_dki_batch(b, signals, opts: FitOptions = None, threads: int = 1, s0_fixed: float = 1.0) -> DkiBatchFit:
    """Fit the DKI signal model row-wise; the b-cap is *not* applied here."""
    opts = opts or FitOptions()
    b, _, y = _broadcast_design(b, 1.0, signals)
    fit_s0 = opts.dki_fit_s0
    lo_all = np.array([opts.S0_bounds[0], opts.D_dki_bounds[0], opts.K_dki_bounds[0]]) / _DKI_SCALE
    hi_all = np.array([opts.S0_bounds[1], opts.D_dki_bounds[1], opts.K_dki_bounds[1]]) / _DKI_SCALE
    sl = slice(0, 3) if fit_s0 else slice(1, 3)
    scale = _DKI_SCALE[sl]
    lower, upper = lo_all[sl], hi_all[sl]

    def solve(start, stop):
        bb, yy = b[start:stop], y[start:stop]
        x0 = _dki_start(bb, yy, fit_s0) / scale

        def fun(x, rows):
            p = x * scale
            if fit_s0:
                S0, D, K = p[:, 0:1], p[:, 1:2], p[:, 2:3]
            else:
                S0, D, K = s0_fixed, p[:, 0:1], p[:, 1:2]
            bw = bb[rows]
            e = np.exp(-bw * D + bw**2 * D**2 * K / 6.0)
            S = S0 * e
            cols = []
            if fit_s0:
                cols.append(e * scale[0])
            cols.append(S * (-bw + bw**2 * D * K / 3.0) * _DKI_SCALE[1])
            cols.append(S * bw**2 * D**2 / 6.0 * _DKI_SCALE[2])
            return S - yy[rows], np.stack(cols, axis=-1)

        return least_squares_box(fun, x0, lower, upper, opts.ftol, opts.xtol, max_iter=opts.max_iter)

    parts = _run_chunks(solve, y.shape[0], threads)
    x = np.concatenate([p.x for p in parts]) * scale
    if not fit_s0:
        x = np.column_stack([np.full(x.shape[0], s0_fixed), x])
    sse = 2.0 * np.concatenate([p.cost for p in parts])
    return DkiBatchFit(
        S0=x[:, 0],
        D_dki=x[:, 1],
        K_dki=x[:, 2],
        sse=sse,
        initial_sse=2.0 * np.concatenate([p.initial_cost for p in parts]),
        n_iter=np.concatenate([p.n_iter for p in parts]),
        converged=np.concatenate([p.converged for p in parts]),
        r2_signal=_r2_signal(y, sse),
    )


def _usable(series: VoxelSeries) -> VoxelSeries:
    return series.select(np.isfinite(series.s_norm))


def fit_subdiffusion(series: VoxelSeries, opts: FitOptions = None) -> FitResult:
    """Least-squares fit of the sub-diffusion model to one voxel.

    Samples may span any number of diffusion times; the baseline is fixed at 1.
    """
    opts = opts or FitOptions()
    s = _usable(series)
    if s.s_norm.size < 3 or np.count_nonzero(s.b > 0) < 2:
        raise InsufficientDataError(
            f"need >= 3 samples with >= 2 non-zero b-values, got {s.s_norm.size}"
        )
    if np.all(s.s_norm[s.b > 0] == 0):
        raise DegenerateInputError("all diffusion-weighted signals are zero")
    out = fit_subdiffusion_batch(s.b, s.dbar, s.s_norm[None, :], opts)
    params = SubDiffusionParams(float(out.D_beta[0]), float(out.beta[0]))
    flags = []
    if series.fallback:
        flags.append("arithmetic_fallback")
    if series.has_negative:
        flags.append("negative_signal")
    return FitResult(
        params=params,
        residual_sse=float(out.sse[0]),
        initial_sse=float(out.initial_sse[0]),
        n_iter=int(out.n_iter[0]),
        converged=bool(out.converged[0]),
        r2_signal=float(out.r2_signal[0]),
        derived=derived_metrics(params, np.unique(s.dbar[s.b > 0])),
        flags=flags,
    )


def fit_dki(series: VoxelSeries, opts: FitOptions = None) -> FitResult:
    """Least-squares DKI fit for a single diffusion time, after the b-cap."""
    opts = opts or FitOptions()
    s = _usable(series)
    dw = s.dbar[s.b > 0]
    if dw.size and not np.allclose(dw, dw[0], rtol=1e-9, atol=0):
        raise ProtocolError("DKI fitting needs samples from a single diffusion time")
    if opts.dki_b_cap is not None:
        s = s.select(s.b <= opts.dki_b_cap)
    if s.s_norm.size < 3:
        raise InsufficientDataError(f"need >= 3 samples after the b-cap, got {s.s_norm.size}")
    if np.all(s.s_norm == 0):
        raise DegenerateInputError("all signals are zero")
    out = fit_dki_batch(s.b, s.s_norm[None, :], opts)
    params = DkiParams(float(out.S0[0]), float(out.D_dki[0]), float(out.K_dki[0]))
    return FitResult(
        params=params,
        residual_sse=float(out.sse[0]),
        initial_sse=float(out.initial_sse[0]),
        n_iter=int(out.n_iter[0]),
        converged=bool(out.converged[0]),
        r2_signal=float(out.r2_signal[0]),
        flags=["negative_signal"] if series.has_negative else [],
    )


# voxel flag bits
FLAG_FALLBACK = 1
FLAG_NEGATIVE = 2
FLAG_DEGENERATE = 4
FLAG_NOT_CONVERGED = 8


@dataclass
class VolumeFit:
    model: str
    maps: dict
    dbar: np.ndarray

    @property
    def shape(self):
        return self.maps["flags"].shape


def _dbar_tag(d: float) -> str:
    return f"{d * 1e3:.3f}ms"


def normalized_volume(dataset, mask=None):
    """Powder-averaged, b = 0-normalized samples for every voxel in ``mask``.

    Returns ``(index, dbar, b, s_norm, flags)`` where ``index`` holds flat voxel
    indices and ``s_norm`` has the b = 0 sample in column 0.
    """
    vol = dataset.volume
    spatial = vol.shape[:3]
    flat = vol.reshape(-1, vol.shape[3])
    if mask is None:
        index = np.arange(flat.shape[0])
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != spatial:
            raise FitError(f"mask shape {mask.shape} does not match volume {spatial}")
        index = np.flatnonzero(mask.ravel())
    data = flat[index].astype(float)
    # exact per-voxel power-of-two rescale, see VoxelSeries.from_raw
    data /= _pow2_scale(data[:, dataset.b0_rows])[:, None]
    flags = np.zeros(index.size, dtype=np.uint8)

    s0, fb = powder_average_rows(data[:, dataset.b0_rows])
    flags[fb] |= FLAG_FALLBACK
    degenerate = ~(s0 > 0)
    s0 = np.where(degenerate, 1.0, s0)
    flags[degenerate] |= FLAG_DEGENERATE

    scheme = dataset.scheme
    cols = [np.ones(index.size)]
    for rows in dataset.shell_rows:
        v, fb = powder_average_rows(data[:, rows])
        flags[fb] |= FLAG_FALLBACK
        cols.append(v / s0)
    s_norm = np.column_stack(cols)
    flags[np.any(s_norm < 0, axis=1)] |= FLAG_NEGATIVE
    dw = s_norm[:, 1:]
    flags[np.all(dw == 0, axis=1)] |= FLAG_DEGENERATE
    dbar = np.concatenate([[scheme.dbar.min()], scheme.dbar])
    b = np.concatenate([[0.0], scheme.b])
    return index, dbar, b, s_norm, flags


def fit_volume(dataset, model: str = "sub", opts: FitOptions = None, mask=None,
               threads: int = 1, dbar: Optional[float] = None) -> VolumeFit:
    """Voxelwise fit of a loaded dataset.

    ``model`` is ``"sub"`` (all diffusion times jointly) or ``"dki"`` (one
    diffusion time, chosen with ``dbar`` in seconds when several are present).
    Voxels outside the mask or with degenerate input are NaN in every map.
    """
    opts = opts or FitOptions()
    if model not in ("sub", "dki"):
        raise FitError(f"unknown model {model!r}")
    spatial = dataset.volume.shape[:3]
    n_vox = int(np.prod(spatial))
    index, dbar_s, b_s, s_norm, flags = normalized_volume(dataset, mask)
    distinct = np.unique(dataset.scheme.dbar)

    if model == "dki":
        if dbar is None:
            if distinct.size != 1:
                raise ProtocolError(
                    "DKI needs one diffusion time; choose one of "
                    + ", ".join(_dbar_tag(d) for d in distinct)
                )
            dbar = float(distinct[0])
        # requested times are matched to within 0.1% so rounded ms values work
        near = distinct[np.isclose(distinct, dbar, rtol=1e-3, atol=0)]
        if near.size == 0:
            raise ProtocolError(
                f"no shells at dbar={dbar}; available " + ", ".join(_dbar_tag(d) for d in distinct)
            )
        dbar = float(near[0])
        keep = (dbar_s == dbar) | (b_s == 0)
        if opts.dki_b_cap is not None:
            keep &= b_s <= opts.dki_b_cap
        if np.count_nonzero(keep) < 3:
            raise InsufficientDataError("fewer than 3 samples after the b-cap")
        b_s, s_norm = b_s[keep], s_norm[:, keep]
        used_dbar = np.array([dbar])
    else:
        if np.count_nonzero(b_s > 0) < 2:
            raise InsufficientDataError("need at least 2 non-zero b-values")
        used_dbar = distinct

    ok = (flags & FLAG_DEGENERATE) == 0
    rows = np.flatnonzero(ok)

    def empty(dtype=float, fill=np.nan):
        return np.full(n_vox, fill, dtype=dtype)

    maps = {}
    if model == "sub":
        res = fit_subdiffusion_batch(b_s, dbar_s, s_norm[rows], opts, threads)
        names = {"D_beta": res.D_beta, "beta": res.beta, "K_star": res.K_star}
        for d in used_dbar:
            D_sub = res.D_beta * d ** (res.beta - 1.0)
            names[f"D_sub_{_dbar_tag(d)}"] = D_sub
            names[f"D_star_{_dbar_tag(d)}"] = D_sub / gamma(1.0 + res.beta)
    else:
        res = fit_dki_batch(b_s, s_norm[rows], opts, threads)
        names = {"S0": res.S0, "D_dki": res.D_dki, "K_dki": res.K_dki}
    names.update(sse=res.sse, n_iter=res.n_iter.astype(float), r2_signal=res.r2_signal)
    flags[rows[~res.converged]] |= FLAG_NOT_CONVERGED

    for name, vals in names.items():
        m = empty()
        m[index[rows]] = vals
        maps[name] = m.reshape(spatial)
    conv = empty()
    conv[index[rows]] = res.converged.astype(float)
    maps["converged"] = conv.reshape(spatial)
    fl = np.zeros(n_vox, dtype=np.uint8)
    fl[index] = flags
    maps["flags"] = fl.reshape(spatial)
    return VolumeFit(model, maps, used_dbar)
