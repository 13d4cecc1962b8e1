"""Command-line interface.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 invalid
configuration or input values, 4 file or dataset error, 5 numerical failure.
Failures print one line to stderr::

    error: code=<n> kind=<ExceptionName> message=<text>
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .fitting import FitError, FitOptions, VoxelSeries, fit_dki, fit_subdiffusion, fit_volume
from .io import (
    DatasetError,
    load_dataset,
    load_maps,
    read_csv,
    save_maps,
    save_phantom,
    to_jsonable,
    two_region_phantom,
    write_csv,
    write_json,
    write_run_record,
)
from .mlf import MittagLefflerConvergenceError, mittag_leffler
from .model import ModelDomainError
from .protocol import ProtocolSearchError, rank_protocols
from .simulate import STUDIES, ConfigError, NoiseSpec
from .stats import REGIONS, StatsError, icc_map, icc_region_summary, region_aggregate, tissue_contrast

logger = logging.getLogger("subdki")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERIC = 5

THREADS_ENV = "SUBDKI_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _fmt17(x: float) -> str:
    return format(float(x), ".17g")


def cmd_mlf_eval(args) -> int:
    print(_fmt17(mittag_leffler(args.beta, args.z)))
    return EXIT_OK


def _series_from_csv(path) -> VoxelSeries:
    rows = read_csv(path)
    try:
        dbar = [float(r["dbar_ms"]) * 1e-3 for r in rows]
        b = [float(r["b"]) for r in rows]
        s = [float(r["signal"]) for r in rows]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: need numeric columns dbar_ms, b, signal ({exc})") from exc
    return VoxelSeries(dbar, b, s)


def _series_from_dataset(ds, voxel) -> VoxelSeries:
    x, y, z = voxel
    data = ds.volume[x, y, z].astype(float)
    return VoxelSeries.from_raw(
        ds.scheme.dbar, ds.scheme.b, [data[r] for r in ds.shell_rows], data[ds.b0_rows]
    )


def _result_dict(res) -> dict:
    out = {k: getattr(res.params, k) for k in res.params.__dataclass_fields__}
    out.update(residual_sse=res.residual_sse, initial_sse=res.initial_sse, n_iter=res.n_iter,
               converged=res.converged, r2_signal=res.r2_signal, flags=res.flags)
    if res.derived is not None:
        out.update(dbar_s=res.derived.dbar, D_sub=res.derived.D_sub, D_star=res.derived.D_star,
                   K_star=res.derived.K_star)
    return out


def cmd_fit_voxel(args) -> int:
    cfg = _load_config(args.config)
    opts = FitOptions.from_dict(cfg.get("fit", {}))
    if args.series:
        series = _series_from_csv(args.series)
    elif args.manifest and args.voxel:
        series = _series_from_dataset(load_dataset(args.manifest), args.voxel)
    else:
        raise UsageError("fit voxel needs --series or --manifest with --voxel")
    if args.model == "dki":
        if args.dbar_ms is not None:
            keep = np.isclose(series.dbar, args.dbar_ms * 1e-3, rtol=1e-6) | (series.b == 0)
            series = series.select(keep)
        res = fit_dki(series, opts)
    else:
        res = fit_subdiffusion(series, opts)
    out = _result_dict(res)
    text = json.dumps(to_jsonable(out), indent=1, sort_keys=True)
    if args.out:
        write_json(args.out, out)
    print(text)
    return EXIT_OK


def cmd_fit_volume(args) -> int:
    cfg = _load_config(args.config)
    opts = FitOptions.from_dict(cfg.get("fit", {}))
    ds = load_dataset(args.manifest)
    mask = ds.mask
    if args.mask:
        mask = np.fromfile(args.mask, dtype="|u1").reshape(ds.spatial_shape).astype(bool)
    dbar = args.dbar_ms * 1e-3 if args.dbar_ms is not None else None
    vf = fit_volume(ds, args.model, opts, mask, args.threads, dbar)
    out = Path(args.out)
    save_maps(out, vf.maps)
    present = np.isfinite(vf.maps["sse"])
    summary = {"model": vf.model, "dbar_s": vf.dbar, "n_fitted": int(present.sum()),
               "n_not_converged": int(np.count_nonzero(vf.maps["converged"][present] == 0))}
    write_json(out / "summary.json", summary)
    write_run_record(out, f"fit volume --model {args.model}",
                     {"manifest": str(args.manifest), "fit": cfg.get("fit", {}), "dbar_ms": args.dbar_ms,
                      "mask": args.mask})
    print(json.dumps(to_jsonable({"out": str(out), **summary}), sort_keys=True))
    return EXIT_OK


def cmd_simulate_run(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.n_trials is not None:
        cfg["n_trials"] = args.n_trials
    if args.snr:
        cfg["snr"] = args.snr
    result = STUDIES[args.study](cfg, threads=args.threads)
    out = Path(args.out)
    for name, rows in sorted(result.tables.items()):
        write_csv(out / f"{args.study}_{name}.csv", rows)
    write_json(out / f"{args.study}_summary.json", result.summary)
    write_run_record(out, f"simulate run {args.study}", cfg, cfg.get("seed", 0))
    print(str(out))
    return EXIT_OK


def cmd_protocol_search(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    n_trials = args.n_trials if args.n_trials is not None else int(cfg.get("n_trials", 1000))
    opts = FitOptions.from_dict(cfg.get("fit", {}))
    n_dir = int(cfg.get("n_dir", 64))
    if args.k is not None and args.snr is not None:
        runs = [{"k": args.k, "snr": args.snr}]
    elif args.k is None and args.snr is None:
        runs = cfg.get("runs")
        if not runs:
            raise ConfigError("give --k and --snr or a config with a 'runs' list")
    else:
        raise UsageError("--k and --snr go together")
    out = Path(args.out)
    single = out.suffix == ".csv"
    if single and len(runs) != 1:
        raise UsageError("--out must be a directory when several runs are configured")
    top = {}
    for run in runs:
        k, snr = int(run["k"]), float(run["snr"])
        table = rank_protocols(k, snr, seed=seed, n_trials=n_trials, opts=opts, threads=args.threads, n_dir=n_dir)
        path = out if single else out / f"protocol_k{k}_snr{snr:g}.csv"
        write_csv(path, table.rows())
        top[f"k{k}_snr{snr:g}"] = table.rows()[:5]
        logger.info("k=%d snr=%g written to %s", k, snr, path)
    rec_dir = out.parent if single else out
    stem = out.stem if single else "protocol"
    write_json(rec_dir / f"{stem}_top5.json", top)
    write_run_record(rec_dir, "protocol search",
                     {"runs": runs, "n_trials": n_trials, "n_dir": n_dir, "fit": cfg.get("fit", {})}, seed)
    print(str(out))
    return EXIT_OK


def _labels_for(args):
    if args.manifest:
        ds = load_dataset(args.manifest)
        if ds.labels is None:
            raise DatasetError(f"{args.manifest} has no label volume")
        return ds.labels
    raise UsageError("a --manifest with labels is required")


def _regions(names):
    if not names:
        return REGIONS
    unknown = [n for n in names if n not in REGIONS]
    if unknown:
        raise ConfigError(f"unknown regions {unknown}; known: {sorted(REGIONS)}")
    return {n: REGIONS[n] for n in names}


def cmd_stats_regions(args) -> int:
    labels = _labels_for(args)
    maps = [load_maps(p)[args.map] for p in args.maps]
    stats = region_aggregate(maps, [labels] * len(maps), _regions(args.regions))
    rows = [{"region": s.region, "mean": s.mean, "sd": s.sd, "cv_percent": 100.0 * s.cv,
             "n_voxels": s.n_voxels, "n_subjects": s.n_subjects} for s in stats]
    if args.out:
        write_csv(args.out, rows)
    for r in rows:
        print(f"{r['region']},{_fmt17(r['mean'])},{_fmt17(r['sd'])},{_fmt17(r['cv_percent'])},{r['n_voxels']}")
    return EXIT_OK


def cmd_stats_icc(args) -> int:
    if len(args.scan) != len(args.rescan):
        raise UsageError("need the same number of --scan and --rescan map files")
    labels = _labels_for(args)
    scan = np.stack([load_maps(p)[args.map] for p in args.scan])
    rescan = np.stack([load_maps(p)[args.map] for p in args.rescan])
    icc = icc_map(scan, rescan)
    summ = icc_region_summary(icc, labels, _regions(args.regions))
    rows = [{"region": s.region, "n_voxels": s.n_voxels, "mean": s.mean, "sd": s.sd} for s in summ]
    if args.out:
        out = Path(args.out)
        write_csv(out / "icc_regions.csv", rows)
        hist = [{"region": s.region, "bin_lo": s.edges[i], "bin_hi": s.edges[i + 1], "count": int(c)}
                for s in summ for i, c in enumerate(s.counts)]
        write_csv(out / "icc_histograms.csv", hist)
        save_maps(out, {"icc": icc}, name="icc")
    for r in rows:
        print(f"{r['region']},{_fmt17(r['mean'])},{_fmt17(r['sd'])},{r['n_voxels']}")
    return EXIT_OK


def cmd_stats_tc(args) -> int:
    print(_fmt17(tissue_contrast(args.mu_wm, args.sd_wm, args.mu_gm, args.sd_gm)))
    return EXIT_OK


def cmd_phantom_make(args) -> int:
    cfg = _load_config(args.config)
    shape = tuple(args.shape or cfg.get("shape", [64, 64, 8]))
    snr = args.snr if args.snr is not None else float(cfg.get("snr", 20.0))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    n_dir = int(cfg.get("n_dir", 64))
    s0 = float(cfg.get("s0", 1000.0))
    wm = tuple(cfg.get("wm", [3e-4, 0.75]))
    gm = tuple(cfg.get("gm", [5e-4, 0.85]))
    if len(shape) != 3:
        raise ConfigError("phantom shape needs three dimensions")
    D, beta, labels = two_region_phantom(shape, wm, gm)
    mask = np.zeros(shape, dtype=bool) if args.empty_mask else None
    noise = NoiseSpec(float("inf") if snr == 0 else snr, n_dir)
    path = save_phantom(args.out, D, beta, noise=noise, seed=seed, labels=labels, mask=mask, s0=s0)
    write_run_record(args.out, "phantom make",
                     {"shape": list(shape), "snr": snr, "n_dir": n_dir, "s0": s0, "wm": list(wm),
                      "gm": list(gm), "empty_mask": args.empty_mask}, seed)
    print(str(path))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="subdki", description="Sub-diffusion mean-kurtosis toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help=f"worker threads (default ${THREADS_ENV} or 1); results do not depend on it")
    sub = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    mlf = sub.add_parser("mlf", help="Mittag-Leffler function").add_subparsers(dest="action", required=True)
    ev = mlf.add_parser("eval", help="print E_beta(z) to 17 significant digits")
    ev.add_argument("--beta", type=float, required=True)
    ev.add_argument("--z", type=float, required=True)
    ev.set_defaults(func=cmd_mlf_eval)

    fit = sub.add_parser("fit", help="model fitting").add_subparsers(dest="action", required=True)
    fv = fit.add_parser("voxel", help="fit one voxel")
    fv.add_argument("--model", choices=["sub", "dki"], default="sub")
    fv.add_argument("--series", help="CSV with columns dbar_ms, b, signal (normalized)")
    fv.add_argument("--manifest")
    fv.add_argument("--voxel", type=int, nargs=3, metavar=("X", "Y", "Z"))
    fv.add_argument("--dbar-ms", type=float, help="diffusion time to keep for DKI")
    fv.add_argument("--config")
    fv.add_argument("--out")
    fv.set_defaults(func=cmd_fit_voxel)
    fo = fit.add_parser("volume", help="voxelwise fit of a dataset")
    fo.add_argument("--model", choices=["sub", "dki"], default="sub")
    fo.add_argument("--manifest", required=True)
    fo.add_argument("--mask", help="raw uint8 mask volume (overrides the manifest mask)")
    fo.add_argument("--dbar-ms", type=float, help="effective diffusion time for DKI")
    fo.add_argument("--config")
    fo.add_argument("--out", required=True)
    fo.set_defaults(func=cmd_fit_volume)

    sim = sub.add_parser("simulate", help="simulation studies").add_subparsers(dest="action", required=True)
    sr = sim.add_parser("run", help="run one study")
    sr.add_argument("study", choices=sorted(STUDIES))
    sr.add_argument("--config")
    sr.add_argument("--seed", type=int)
    sr.add_argument("--n-trials", type=int)
    sr.add_argument("--snr", type=float, nargs="+")
    sr.add_argument("--out", required=True)
    sr.set_defaults(func=cmd_simulate_run)

    pro = sub.add_parser("protocol", help="b-value subset search").add_subparsers(dest="action", required=True)
    ps = pro.add_parser("search", help="score and rank every b-value subset")
    ps.add_argument("--k", type=int)
    ps.add_argument("--snr", type=float)
    ps.add_argument("--seed", type=int)
    ps.add_argument("--n-trials", type=int)
    ps.add_argument("--config")
    ps.add_argument("--out", required=True, help="CSV file for one run, directory for several")
    ps.set_defaults(func=cmd_protocol_search)

    st = sub.add_parser("stats", help="region statistics").add_subparsers(dest="action", required=True)
    sg = st.add_parser("regions", help="weighted mean, pooled SD and CV per region")
    sg.add_argument("--maps", nargs="+", required=True, help="map index JSON per subject")
    sg.add_argument("--map", default="K_star")
    sg.add_argument("--manifest", required=True, help="dataset manifest carrying the label volume")
    sg.add_argument("--regions", nargs="*")
    sg.add_argument("--out")
    sg.set_defaults(func=cmd_stats_regions)
    si = st.add_parser("icc", help="voxelwise scan-rescan ICC")
    si.add_argument("--scan", nargs="+", required=True)
    si.add_argument("--rescan", nargs="+", required=True)
    si.add_argument("--map", default="K_star")
    si.add_argument("--manifest", required=True)
    si.add_argument("--regions", nargs="*")
    si.add_argument("--out")
    si.set_defaults(func=cmd_stats_icc)
    sc = st.add_parser("tc", help="tissue contrast")
    sc.add_argument("--mu-wm", type=float, required=True)
    sc.add_argument("--sd-wm", type=float, required=True)
    sc.add_argument("--mu-gm", type=float, required=True)
    sc.add_argument("--sd-gm", type=float, required=True)
    sc.set_defaults(func=cmd_stats_tc)

    ph = sub.add_parser("phantom", help="synthetic datasets").add_subparsers(dest="action", required=True)
    pm = ph.add_parser("make", help="two-region phantom")
    pm.add_argument("--out", required=True)
    pm.add_argument("--shape", type=int, nargs=3)
    pm.add_argument("--snr", type=float, help="0 for noiseless")
    pm.add_argument("--seed", type=int)
    pm.add_argument("--empty-mask", action="store_true")
    pm.add_argument("--config")
    pm.set_defaults(func=cmd_phantom_make)
    return p


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: code={code} kind={type(exc).__name__} message={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        return _fail(EXIT_USAGE, UsageError("--threads must be >= 1"))
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (DatasetError, OSError) as exc:
        return _fail(EXIT_IO, exc)
    except (MittagLefflerConvergenceError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (ConfigError, FitError, ModelDomainError, ProtocolSearchError, StatsError, ValueError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except Exception as exc:  # pragma: no cover - last resort
        logger.debug("unexpected failure", exc_info=True)
        return _fail(EXIT_FAILURE, exc)


if __name__ == "__main__":
    sys.exit(main())
