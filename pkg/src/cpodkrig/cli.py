"""Command-line driver: synth -> extract -> fit -> predict / uq / tke / couplings.

Every stage writes a bundle directory with a ``provenance.json`` holding the
sha256 of each file it wrote plus the digest of the upstream bundle it read.
A stage refuses (exit code 4) to read a bundle whose files no longer match
their recorded checksums or whose upstream has changed since it was built.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 stale or
out-of-order upstream bundle.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import fields as dc_fields
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .archive import dump_json, load_json, read_archive, read_matrix, sha256_file, write_matrix
from .cokrige import DesignScaler, GpModelSlice, chi2_quantile, hdcr_statistic, predict_many
from .coupling import extract_couplings, pooled_couplings, slice_edges, write_dot, write_edges_csv
from .cpod import CpodBasis, extract_basis
from .errors import (ConditioningError, ConvergenceError, DegenerateMapError, DomainError,
                     ParameterError, StageOrderError, UndefinedMetricError, ValidationError)
from .estimate import FitConfig, bcd_fit, edge_count, select_top_k, tune_lambda
from .grid import TABLE_RANGES, GeometryParams, Grid, partition_grid
from .predictor import mre, predict_flow, psd_peaks, psd_probe, time_means
from .synthgen import SyntheticSpec, generate, reference_spec, space_filling_design
from .tke import distribution_from_moments, tke_confidence_band, tke_from_moments, velocity_moments

logger = logging.getLogger("cpodkrig")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_STALE = 0, 2, 3, 4
PROVENANCE = "provenance.json"


# ---------------------------------------------------------------- provenance

def write_provenance(bundle: Path, stage: str, upstream: str | None, **extra) -> str:
    files = sorted(p for p in bundle.rglob("*") if p.is_file() and p.name != PROVENANCE)
    record = {
        "stage": stage,
        "version": __version__,
        "upstream": upstream,
        "files": {p.relative_to(bundle).as_posix(): sha256_file(p) for p in files},
    }
    record.update(extra)
    dump_json(bundle / PROVENANCE, record)
    return sha256_file(bundle / PROVENANCE)


def verify_bundle(bundle: Path, stage: str) -> tuple[dict, str]:
    """Check every recorded checksum; returns ``(provenance, digest)``."""
    prov_path = bundle / PROVENANCE
    if not prov_path.is_file():
        raise StageOrderError(f"{bundle} has no {PROVENANCE}; run the '{stage}' stage first")
    prov = load_json(prov_path)
    if prov.get("stage") != stage:
        raise StageOrderError(f"{bundle} is a '{prov.get('stage')}' bundle, expected '{stage}'")
    for name, digest in prov["files"].items():
        p = bundle / name
        if not p.is_file() or sha256_file(p) != digest:
            raise StageOrderError(f"{p} does not match its recorded checksum; rerun '{stage}'")
    return prov, sha256_file(prov_path)


def digest_of(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(sha256_file(p).encode())
    return h.hexdigest()


def relpath(target: Path, start: Path) -> str:
    return Path(os.path.relpath(target.resolve(), start.resolve())).as_posix()


# ----------------------------------------------------------------- manifests

def load_manifest(path: Path) -> dict:
    """Validate a run manifest and return it with archive paths resolved."""
    m = load_json(path)
    runs = m.get("runs")
    if not runs:
        raise ValidationError(f"{path}: field 'runs' is missing or empty")
    names = m.get("design_variables")
    if not names:
        raise ValidationError(f"{path}: field 'design_variables' is missing or empty")
    ranges = m.get("design_ranges", {n: TABLE_RANGES.get(n) for n in names})
    for n in names:
        r = ranges.get(n)
        if r is None or len(r) != 2 or not r[0] < r[1]:
            raise ValidationError(f"{path}: 'design_ranges' for {n!r} must be [min, max] with min < max")
    base = path.parent
    archives = []
    for r in runs:
        d = (base / r) if not Path(r).is_absolute() else Path(r)
        if not d.is_dir():
            raise ValidationError(f"{path}: run archive {r} does not exist")
        archives.append(d)
    scaler = DesignScaler(tuple(names), np.array([ranges[n][0] for n in names]),
                          np.array([ranges[n][1] for n in names]))
    return {"archives": archives, "scaler": scaler, "runs": runs}


# ------------------------------------------------------------------- bundles

def load_basis(bundle: Path):
    prov, digest = verify_bundle(bundle, "extract")
    meta = load_json(bundle / "basis.json")
    grid = Grid(read_matrix(bundle / "grid.bin"))
    modes = {v: read_matrix(bundle / f"modes_{v}.bin")[:, :meta["K_r"][v]] for v in meta["variables"]}
    mean = ({v: read_matrix(bundle / f"mean_{v}.bin")[:, 0] for v in meta["variables"]}
            if meta["centered"] else None)
    basis = CpodBasis(
        variables=meta["variables"], common_grid=grid,
        reference_geometry=GeometryParams.from_dict(meta["reference_geometry"]),
        reference_index=meta["reference_index"], modes=modes,
        eigenvalues={v: np.asarray(e) for v, e in meta["eigenvalues"].items()},
        total_energy=meta["total_energy"], mean_field=mean,
        energy_target=meta["energy_target"], idw_k=meta["idw_k"],
    )
    K, n, T = basis.K, meta["n_runs"], meta["n_steps"]
    flat = read_matrix(bundle / "coeffs.bin")  # (T * n) x K, row t * n + i
    coeffs = flat.reshape(T, n, K) if K else np.zeros((T, n, 0))
    designs = read_matrix(bundle / "designs.bin")
    scaler = DesignScaler.from_dict(meta["scaler"])
    return basis, coeffs, designs, scaler, meta, digest


def save_models(bundle: Path, models, reports, config: FitConfig, labels) -> None:
    for t, (m, rep) in enumerate(zip(models, reports)):
        d = bundle / f"t{t:04d}"
        d.mkdir(parents=True, exist_ok=True)
        dump_json(d / "model.json", {
            "mu": m.mu.tolist(), "tau": m.tau.tolist(), "lambda": float(m.lam), "nll": float(m.nll),
            "converged": bool(rep.converged), "start_index": int(rep.start_index),
            "trace": [float(x) for x in rep.trace], "edges": edge_count(m.precision),
        })
        write_matrix(d / "T.bin", m.T_cov)
        write_matrix(d / "precision.bin", m.precision)
        with open(d / "edges.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_a", "node_b", "abs_pcorr"])
            for i, j, pc in slice_edges(m.precision):
                w.writerow([f"{labels[i][0]}:{labels[i][1]}", f"{labels[j][0]}:{labels[j][1]}", f"{pc:.6f}"])


def load_models(bundle: Path):
    prov, digest = verify_bundle(bundle, "fit")
    meta = load_json(bundle / "fit.json")
    basis_dir = (bundle / meta["basis"]).resolve()
    basis, coeffs, designs, scaler, bmeta, bdigest = load_basis(basis_dir)
    if prov["upstream"] != bdigest:
        raise StageOrderError(f"basis bundle {basis_dir} changed after this fit; rerun 'fit'")
    models = []
    for t in range(meta["n_steps"]):
        d = bundle / f"t{t:04d}"
        mj = load_json(d / "model.json")
        models.append(GpModelSlice(mu=np.array(mj["mu"]), T_cov=read_matrix(d / "T.bin"),
                                   tau=np.array(mj["tau"]), designs=designs, B=coeffs[t],
                                   precision=read_matrix(d / "precision.bin"),
                                   lam=mj["lambda"], nll=mj["nll"]))
    return basis, models, scaler, meta, digest


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.spec:
        spec = SyntheticSpec.load(args.spec)
        if args.seed_given:
            spec.seed = args.seed
    else:
        spec = reference_spec(seed=args.seed)
    extra = space_filling_design(spec.p, args.holdout, spec.seed + 1) if args.holdout else None
    runs, _ = generate(spec, extra_designs=extra)
    out.mkdir(parents=True, exist_ok=True)
    from .archive import write_archive
    names = []
    for i, run in enumerate(runs):
        name = f"run{i:03d}" if i < spec.n_runs else f"holdout{i - spec.n_runs:03d}"
        write_archive(out / name, run)
        names.append(name)
    scaler = spec.scaler
    dump_json(out / "manifest.json", {
        "runs": names[:spec.n_runs],
        "holdout": names[spec.n_runs:],
        "design_variables": list(scaler.names),
        "design_ranges": {n: [lo, hi] for n, lo, hi in zip(scaler.names, scaler.lower.tolist(),
                                                            scaler.upper.tolist())},
    })
    spec.save(out / "spec.json")
    write_provenance(out, "synth", None, seed=int(spec.seed))
    print(f"wrote {spec.n_runs} training and {len(names) - spec.n_runs} held-out runs to {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    mpath = Path(args.manifest)
    man = load_manifest(mpath)
    runs = [read_archive(d) for d in man["archives"]]
    basis, coeffs = extract_basis(runs, energy_target=args.energy_target,
                                  center_snapshots=args.center, idw_k=args.idw_k,
                                  method=args.eigensolver, threads=args.threads)
    scaler = man["scaler"]
    designs = np.array([scaler.geometry_vector(r.geometry) for r in runs])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "grid.bin", basis.common_grid.points)
    for v in basis.variables:
        write_matrix(out / f"modes_{v}.bin", basis.modes[v] if basis.K_r[v] else np.zeros((basis.common_grid.J, 1)))
        if args.center:
            write_matrix(out / f"mean_{v}.bin", basis.mean_field[v])
    T, n, K = coeffs.shape
    write_matrix(out / "coeffs.bin", coeffs.reshape(T * n, K) if K else np.zeros((T * n, 1)))
    write_matrix(out / "designs.bin", designs)
    dump_json(out / "basis.json", {
        "variables": basis.variables,
        "K_r": basis.K_r,
        "eigenvalues": {v: basis.eigenvalues[v][:max(basis.K_r[v], 1)].tolist() for v in basis.variables},
        "total_energy": {v: float(e) for v, e in basis.total_energy.items()},
        "reference_geometry": basis.reference_geometry.to_dict(),
        "reference_index": basis.reference_index,
        "energy_target": args.energy_target,
        "centered": bool(args.center),
        "idw_k": args.idw_k,
        "n_runs": n,
        "n_steps": T,
        "runs": man["runs"],
        "scaler": scaler.to_dict(),
    })
    archive_files = [mpath] + [p for d in man["archives"] for p in sorted(d.glob("*")) if p.is_file()]
    write_provenance(out, "extract", digest_of(archive_files), seed=args.seed)
    print(f"basis with K_r={basis.K_r} written to {out}")
    return EXIT_OK


def _fit_config(args) -> tuple[FitConfig, dict]:
    cfg = {}
    if args.config:
        cfg = load_json(args.config)
    known = {f.name for f in dc_fields(FitConfig)}
    unknown = set(cfg) - known - {"tuning", "cv_folds", "top_k"}
    if unknown:
        raise ValidationError(f"unknown fit config fields {sorted(unknown)}")
    params = {k: v for k, v in cfg.items() if k in known}
    if args.lam is not None:
        params["lam"] = args.lam
    if args.starts is not None:
        params["n_starts"] = args.starts
    params["seed"] = args.seed
    tuning = {"mode": cfg.get("tuning", "fixed"), "cv_folds": cfg.get("cv_folds"), "top_k": cfg.get("top_k")}
    if args.cv_folds is not None:
        tuning.update(mode="cross_validate", cv_folds=args.cv_folds)
    if args.top_k is not None:
        tuning.update(mode="top_k_edges", top_k=args.top_k)
    return FitConfig(**params), tuning


def cmd_fit(args) -> int:
    basis_dir = Path(args.basis)
    basis, coeffs, designs, scaler, bmeta, bdigest = load_basis(basis_dir)
    config, tuning = _fit_config(args)
    T, n, K = coeffs.shape
    if n < 2:
        raise ValidationError(f"n >= 2 required, the basis holds {n} run(s)")
    if K == 0:
        raise ValidationError("the basis has no modes to fit")
    mask = basis.mask() if config.enforce_mask else None
    if tuning["mode"] == "cross_validate":
        lam = tune_lambda(coeffs, designs, "cross_validate", folds=tuning["cv_folds"] or 5,
                          config=config, mask=mask)
        config = replace(config, lam=lam)
        logger.info("cross-validated lambda = %g", lam)

    def one(t):
        if tuning["mode"] == "top_k_edges":
            res = select_top_k(coeffs[t], designs, int(tuning["top_k"]), config, mask)
            return res.model, res.report
        return bcd_fit(coeffs[t], designs, config, mask)

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(args.threads) as ex:
            results = list(ex.map(one, range(T)))
    else:
        results = [one(t) for t in range(T)]
    models = [r[0] for r in results]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_models(out, models, [r[1] for r in results], config, basis.labels)
    dump_json(out / "fit.json", {
        "basis": relpath(basis_dir, out),
        "config": config.to_dict(),
        "tuning": tuning,
        "n_steps": T,
        "labels": [[v, k] for v, k in basis.labels],
        "lambda": [float(m.lam) for m in models],
    })
    write_provenance(out, "fit", bdigest, seed=args.seed, lam=[float(m.lam) for m in models])
    print(f"fitted {T} time slices (K={K}, n={n}) into {out}")
    return EXIT_OK


def _target(args, scaler):
    """Geometry, grid and optional reference run for predict/uq/tke."""
    run = None
    if args.run:
        run = read_archive(args.run)
        return run.geometry, run.grid.points, run
    if not args.geometry:
        raise ValidationError("give either --run (an archive) or --geometry (a JSON file)")
    geom = GeometryParams.from_dict(load_json(args.geometry))
    if args.grid:
        pts = read_matrix(args.grid)
    else:
        raise ValidationError("--geometry needs --grid with the target points")
    return geom.with_extent(pts), pts, run


def _regions(args, geom, pts) -> dict:
    if args.regions:
        raw = load_json(args.regions)
        out = {}
        for name, m in raw.items():
            m = np.asarray(m)
            mask = np.zeros(pts.shape[0], dtype=bool)
            if m.dtype == bool and m.size == pts.shape[0]:
                mask = m
            else:
                mask[m.astype(int)] = True
            out[name] = mask
        return out
    lab = partition_grid(pts, geom)
    names = ["head_end_to_inlet", "inlet_to_exit", "downstream_top", "downstream_bottom"]
    return {names[r]: lab == r for r in range(4) if np.any(lab == r)}


def cmd_predict(args) -> int:
    basis, models, scaler, meta, digest = load_models(Path(args.model))
    geom, pts, run = _target(args, scaler)
    pf = predict_flow(basis, models, geom, pts, scaler=scaler)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"variables": basis.variables, "n_steps": pf.T, "geometry": geom.to_dict()}
    for v in basis.variables:
        write_matrix(out / f"mean_{v}.bin", pf.mean[v])
        write_matrix(out / f"var_{v}.bin", pf.variance[v])
    if run is not None:
        regions = _regions(args, geom, pts)
        rows, stats = [], {}
        for v in basis.variables:
            for name, mask in regions.items():
                e = mre(run.fields[v], pf.mean[v], mask)
                stats[f"{v}/{name}"] = {"median": float(np.median(e)), "max": float(e.max()),
                                        "fraction_le_10pct": float(np.mean(e <= 10.0))}
                rows.extend((v, name, t, f"{x:.6f}") for t, x in enumerate(e))
        e_all = {v: mre(run.fields[v], pf.mean[v]) for v in basis.variables}
        summary["mre_full_grid_max"] = {v: float(e.max()) for v, e in e_all.items()}
        summary["mre"] = stats
        with open(out / "mre.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "region", "t", "mre_percent"])
            w.writerows(rows)
    if args.probes:
        probes = np.atleast_2d(np.asarray(load_json(args.probes), dtype=float))
        from .grid import idw_interpolate
        peaks = {}
        for v in basis.variables:
            series = idw_interpolate(pts, pf.mean[v], probes, k=min(10, pts.shape[0]))
            for i, s in enumerate(series):
                if s.size >= 8:
                    f, p = psd_probe(s, args.dt)
                    peaks[f"{v}/probe{i}"] = psd_peaks(f, p)
        summary["psd_peaks"] = peaks
    dump_json(out / "summary.json", summary)
    write_provenance(out, "predict", digest, seed=args.seed)
    print(f"prediction written to {out}")
    return EXIT_OK


def cmd_uq(args) -> int:
    basis, models, scaler, meta, digest = load_models(Path(args.model))
    geom, pts, run = _target(args, scaler)
    c = scaler.geometry_vector(geom)
    truth = None
    if run is not None:
        truth = np.hstack([_project(basis, run, v) for v in basis.variables])
    q = chi2_quantile(1.0 - args.alpha, basis.K)
    rows = []
    cover = {"full": 0, "independent": 0}
    for t, m in enumerate(models):
        mean, s = predict_many(m, c[None])
        mean, s = mean[0], float(s[0])
        row = [t, f"{s:.6e}"] + [f"{x:.6e}" for x in mean] + [f"{x:.6e}" for x in np.sqrt(s * np.diag(m.T_cov))]
        if truth is not None:
            d = truth[t] - mean
            for key, indep in (("full", False), ("independent", True)):
                inside = bool(s > 0 and hdcr_statistic(m.T_cov, d, s, indep)[0] <= q)
                cover[key] += inside
                row.append(int(inside))
        rows.append(row)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = [f"{v}:{k}" for v, k in basis.labels]
    header = ["t", "variance_factor"] + [f"mean_{l}" for l in labels] + [f"sd_{l}" for l in labels]
    if truth is not None:
        header += ["in_hdcr_full", "in_hdcr_independent"]
    with open(out / "uq.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    summary = {"alpha": args.alpha, "chi2_quantile": q}
    if truth is not None:
        summary["coverage"] = {k: v / len(models) for k, v in cover.items()}
    dump_json(out / "summary.json", summary)
    write_provenance(out, "uq", digest, seed=args.seed)
    print(f"coefficient uncertainty written to {out}")
    return EXIT_OK


def _project(basis: CpodBasis, run, var: str) -> np.ndarray:
    """A run's coefficients on the basis, ``(T, K_r)``."""
    from .cpod import common_grid_snapshots
    Y = common_grid_snapshots(basis, run, var)
    if basis.mean_field is not None:
        Y = Y - basis.mean_field[var][:, None]
    return (basis.modes[var].T @ Y).T


def cmd_tke(args) -> int:
    basis, models, scaler, meta, digest = load_models(Path(args.model))
    geom, pts, run = _target(args, scaler)
    velocity = tuple(args.velocity.split(","))
    probes = np.atleast_2d(np.asarray(load_json(args.probes), dtype=float))
    mom = velocity_moments(basis, models, geom, probes, velocity, scaler)
    window = slice(args.window[0], args.window[1]) if args.window else None
    if args.means_from == "reference":
        if run is None:
            raise ValidationError("--means-from reference needs --run")
        from .grid import idw_interpolate
        sim = np.stack([idw_interpolate(pts, run.fields[v], probes, k=min(10, pts.shape[0]))
                        for v in velocity], axis=-1)
        y_bar = sim[:, window if window else slice(None)].mean(axis=1)
    else:
        y_bar = np.stack([time_means(mom.y_hat[:, :, r], window) for r in range(len(velocity))], axis=-1)
    kappa_hat = tke_from_moments(mom.y_hat, y_bar[:, None, :], mom.Phi)
    sim_kappa = None
    if run is not None:
        from .grid import idw_interpolate
        sim = np.stack([idw_interpolate(pts, run.fields[v], probes, k=min(10, pts.shape[0]))
                        for v in velocity], axis=-1)
        sim_kappa = 0.5 * np.sum((sim - y_bar[:, None, :]) ** 2, axis=-1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    covered, total = 0, 0
    for i in range(probes.shape[0]):
        with open(out / f"probe{i:03d}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            head = ["t", "kappa_hat"] + (["band_low", "band_high"] if args.side == "two_sided" else ["band"])
            w.writerow(head + (["kappa_sim", "covered"] if sim_kappa is not None else []))
            for t in range(len(models)):
                dist = distribution_from_moments(mom.y_hat[i, t], y_bar[i], mom.Phi[i, t])
                band = tke_confidence_band(dist, args.level, args.side, method=args.cdf)
                band = band if isinstance(band, tuple) else (band,)
                row = [t, f"{kappa_hat[i, t]:.6e}"] + [f"{b:.6e}" for b in band]
                if sim_kappa is not None:
                    k = sim_kappa[i, t]
                    if args.side == "lower":
                        ok = k >= band[0]
                    elif args.side == "upper":
                        ok = k <= band[0]
                    else:
                        ok = band[0] <= k <= band[1]
                    covered += ok
                    total += 1
                    row += [f"{k:.6e}", int(ok)]
                w.writerow(row)
    summary = {"level": args.level, "side": args.side, "probes": probes.tolist()}
    if total:
        summary["coverage"] = covered / total
    dump_json(out / "summary.json", summary)
    write_provenance(out, "tke", digest, seed=args.seed)
    print(f"TKE bands for {probes.shape[0]} probes written to {out}")
    return EXIT_OK


def cmd_couplings(args) -> int:
    basis, models, scaler, meta, digest = load_models(Path(args.model))
    k = args.top_k if args.top_k is not None else meta["tuning"].get("top_k")
    if args.pool:
        start, stop = args.pool
        if not 0 <= start < stop <= len(models):
            raise ValidationError(f"--pool window [{start}, {stop}) is outside the {len(models)} time steps")
        coeffs = np.stack([m.B for m in models])
        graph = pooled_couplings(coeffs, models[0].designs, basis.labels, (start, stop),
                                 FitConfig(**meta["config"]), basis.mask(), k)
    else:
        graph = extract_couplings(models, basis.labels, k=k, mask=basis.mask())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_edges_csv(graph, out / "edges.csv")
    write_dot(graph, out / "graph.dot")
    write_provenance(out, "couplings", digest, seed=args.seed, top_k=k,
                     pool=list(args.pool) if args.pool else None)
    print(f"{len(graph.edges)} coupling edges written to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads (default: available cores)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = argparse.ArgumentParser(prog="cpodkrig", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic ensemble")
    s.add_argument("--spec", help="synthetic spec JSON (default: the reference spec)")
    s.add_argument("--holdout", type=int, default=0, help="extra held-out runs to draw")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", parents=[common], help="compute the common POD basis")
    s.add_argument("--manifest", required=True, help="manifest.json listing run archives and design ranges")
    s.add_argument("--energy-target", type=float, default=0.99,
                   help="energy fraction each variable must retain (default 0.99)")
    s.add_argument("--center", action="store_true", help="subtract the ensemble mean field first")
    s.add_argument("--idw-k", type=int, default=10, help="neighbours for interpolation to the common grid")
    s.add_argument("--eigensolver", choices=["auto", "dense", "lanczos"], default="auto",
                   help="auto uses the dense solver up to 512 snapshots")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("fit", parents=[common], help="fit one co-kriging model per time step")
    s.add_argument("--basis", required=True, help="bundle written by extract")
    s.add_argument("--config", help="JSON with FitConfig fields and tuning options")
    s.add_argument("--lambda", dest="lam", type=float, help="fixed sparsity penalty (default 0)")
    s.add_argument("--cv-folds", type=int, help="choose the penalty by k-fold cross-validation over runs")
    s.add_argument("--top-k", type=int, help="choose the penalty that keeps this many edges per slice")
    s.add_argument("--starts", type=int, help="multi-start count (default 8)")
    s.set_defaults(func=cmd_fit)

    def target(s):
        s.add_argument("--model", required=True, help="bundle written by fit")
        s.add_argument("--run", help="snapshot archive of the target geometry (enables error metrics)")
        s.add_argument("--geometry", help="geometry JSON, used with --grid")
        s.add_argument("--grid", help="CPD1 file with target grid points")

    s = sub.add_parser("predict", parents=[common], help="predict fields at a new geometry")
    target(s)
    s.add_argument("--regions", help="JSON of named point masks or index lists")
    s.add_argument("--probes", help="JSON list of [x, y] probe points for PSD")
    s.add_argument("--dt", type=float, default=1.0, help="time step of the probe series")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("uq", parents=[common], help="coefficient uncertainty and HDCR checks")
    target(s)
    s.add_argument("--alpha", type=float, default=0.1, help="HDCR miscoverage level (default 0.1)")
    s.set_defaults(func=cmd_uq)

    s = sub.add_parser("tke", parents=[common], help="TKE prediction with confidence bands")
    target(s)
    s.add_argument("--probes", required=True, help="JSON list of [x, y] points")
    s.add_argument("--window", type=int, nargs=2, metavar=("START", "STOP"),
                   help="time steps averaged for the velocity means (default all)")
    s.add_argument("--level", type=float, default=0.9, help="band confidence level")
    s.add_argument("--side", choices=["lower", "upper", "two_sided"], default="lower")
    s.add_argument("--velocity", default="u,v,w", help="comma-separated velocity variables")
    s.add_argument("--means-from", choices=["prediction", "reference"], default="prediction",
                   help="take time means from the predicted or the --run field")
    s.add_argument("--cdf", choices=["imhof", "liu"], default="imhof",
                   help="exact inversion or four-moment approximation")
    s.set_defaults(func=cmd_tke)

    s = sub.add_parser("couplings", parents=[common], help="coupling graph from fitted precisions")
    s.add_argument("--model", required=True, help="bundle written by fit")
    s.add_argument("--top-k", type=int, help="keep at most this many edges per slice")
    s.add_argument("--pool", type=int, nargs=2, metavar=("START", "STOP"),
                   help="fit one covariance over these time steps instead of aggregating slices")
    s.set_defaults(func=cmd_couplings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = hasattr(args, "seed")
    args.seed = getattr(args, "seed", 0)
    args.threads = getattr(args, "threads", None) or os.cpu_count() or 1
    if not hasattr(args, "out"):
        parser.error("--out is required")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, DomainError, ParameterError, DegenerateMapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageOrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STALE
    except (ConditioningError, ConvergenceError, UndefinedMetricError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
