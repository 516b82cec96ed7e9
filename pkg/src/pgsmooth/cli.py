"""Batch command-line front end.

Exit codes: 0 success, 1 computational failure, 2 usage or parse error.
Every command writes ``manifest.json`` into its output directory, also on
failure. Wall-clock timings go to a separate ``timings.json`` so manifests
of identical runs are byte-identical.

The default output root is ``$PGSMOOTH_OUTPUT_ROOT`` (or ``./pgsmooth-out``),
with one sub-directory per command.
"""

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data_io
from .errors import InvalidParameterError, PGSError
from .field_recon import finite_difference_strain, strain_field
from .peridynamic import (Horizon, Lattice, MODELS, apply_operator, average_pk1,
                          l2_norm, residual_loss, solve_displacement)
from .pgs_opt import PGSConfig, parse_mask, run_batch
from .rk_basis import assemble_basis

logger = logging.getLogger("pgsmooth")

OUTPUT_ENV = "PGSMOOTH_OUTPUT_ROOT"
NEG_THRESHOLD = -1e-6


class UsageError(Exception):
    pass


_written = set()


def _write_json(path, obj):
    path = Path(path)
    if path.name.endswith("manifest.json"):
        _written.add(str(path))
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")


def config_hash(config):
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _out_dir(args, command):
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ENV, "pgsmooth-out")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_config(path):
    if path is None:
        return {}
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise UsageError(f"cannot read config file {path}")
    return {s: dict(parser[s]) for s in parser.sections()}


def _snapshot_files(in_dir):
    d = Path(in_dir)
    if not d.is_dir():
        raise UsageError(f"input directory {in_dir} does not exist")
    files = sorted(p for p in d.glob("*.csv") if not p.name.endswith(".truth.csv"))
    if not files:
        raise UsageError(f"no snapshot files in {in_dir}")
    return files


def _negative_fraction(strain, mask):
    neg = np.zeros(len(strain.E11), bool)
    if mask[0]:
        neg |= strain.E11 < NEG_THRESHOLD
    if mask[1]:
        neg |= strain.E22 < NEG_THRESHOLD
    return float(neg.mean())


# -- synth ------------------------------------------------------------------------

def cmd_synth(args):
    out = _out_dir(args, "synth")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if min(args.dims) < 2:
        raise UsageError(f"invalid dims {args.dims}")
    mask = parse_mask(args.mask)
    entries = []
    manifest = {"command": "synth", "samples": entries, "status": "ok"}
    try:
        for k in range(args.n):
            seed = args.seed * 1000 + k
            spec = data_io.artifact_spec(
                seed, dims=tuple(args.dims), spacing=args.spacing, kind=args.kind,
                stretch=tuple(args.stretch), sigma=args.sigma,
                artifact_amplitude=args.artifact_amp, artifact_radius=args.artifact_radius,
                protocol_id=f"synthetic-{k:03d}", constraint_mask=mask)
            _, _, data = data_io.generate_synthetic(spec)
            name = f"synth_{k:03d}"
            snap = data.snapshot
            snap.extra = {"seed": seed, "artifact_center": list(spec.center())}
            data_io.save_snapshot(snap, out / f"{name}.csv")
            truth = data_io.snapshot_from_arrays(data.u_true, spec.dims, spec.spacing,
                                                 protocol_id=f"truth-{k:03d}",
                                                 constraint_mask=mask)
            data_io.save_snapshot(truth, out / f"{name}.truth.csv")
            entries.append({"file": f"{name}.csv", "seed": seed,
                            "min_clean_E11": float(data.strain_clean.E11.min())})
    except PGSError as exc:
        manifest["status"] = f"error: {exc}"
        _write_json(out / "manifest.json", manifest)
        raise
    _write_json(out / "manifest.json", manifest)
    return 0


# -- smooth -------------------------------------------------------------------------

def _pgs_config(args, cfg):
    try:
        return _build_pgs_config(args, cfg)
    except InvalidParameterError as exc:
        raise UsageError(f"invalid PGS configuration: {exc}") from exc


def _build_pgs_config(args, cfg):
    section = dict(cfg.get("pgs", {}))
    config = PGSConfig.from_mapping(section) if section else PGSConfig()
    overrides = {}
    if args.beta is not None:
        overrides["beta_tilde"] = args.beta
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if overrides:
        config = replace(config, **overrides)
    return config


def cmd_smooth(args):
    started = time.perf_counter()
    out = _out_dir(args, "smooth")
    cfg = _read_config(args.config)
    rk = cfg.get("rk", {})
    try:
        support_mult = args.support_mult if args.support_mult is not None else float(rk.get("support_mult", 3.1))
        order = int(rk.get("order", 1))
        centers = tuple(int(c) for c in rk.get("centers", "10 10").split())
    except ValueError as exc:
        raise UsageError(f"invalid [rk] section: {exc}") from exc
    if not support_mult > 0:
        raise UsageError("--support-mult must be positive")
    config = _pgs_config(args, cfg)
    files = _snapshot_files(args.input)

    effective = {"rk": {"support_mult": support_mult, "order": order, "centers": list(centers)},
                 "pgs": config.to_dict(), "mask": args.mask}
    manifest = {"command": "smooth", "config": effective, "config_hash": config_hash(effective),
                "inputs": [p.name for p in files], "samples": [], "status": "ok"}
    timings = {}
    failed = 0

    # group by grid geometry so each basis is assembled once
    snaps = {}
    for p in files:
        try:
            snaps[p] = data_io.read_snapshot(p)
        except PGSError as exc:
            manifest["samples"].append({"file": p.name, "error": str(exc)})
            failed += 1
    groups = {}
    for p, snap in snaps.items():
        if args.mask != "header":
            snap.constraint_mask = parse_mask(args.mask)
        groups.setdefault((snap.dims, snap.spacing, snap.origin), []).append(p)

    results = {}
    for key, paths in groups.items():
        snap0 = snaps[paths[0]]
        grid = snap0.grid(centers)
        t0 = time.perf_counter()
        try:
            basis = assemble_basis(grid, support_mult * grid.center_spacing, order)
        except PGSError as exc:
            for p in paths:
                results[p] = exc
            continue
        timings[f"basis {key[0]}"] = time.perf_counter() - t0
        samples = [snaps[p].sample() for p in paths]
        t0 = time.perf_counter()
        try:
            outs = run_batch(samples, basis, config, jobs=args.jobs)
        except PGSError as exc:
            outs = [exc] * len(paths)
        timings[f"pgs {key[0]}"] = time.perf_counter() - t0
        for p, s, o in zip(paths, samples, outs):
            results[p] = (basis, s, o)

    neg_before, neg_after, neg_raw, ratios = [], [], [], []
    for p in files:
        if p not in results:
            continue
        res = results[p]
        if isinstance(res, Exception):
            manifest["samples"].append({"file": p.name, "error": str(res)})
            failed += 1
            continue
        basis, sample, (coeffs, report) = res
        snap = snaps[p]
        mask = sample.constraint_mask
        smooth_coeffs = np.linalg.lstsq(basis.shape_matrix, sample.u_exp, rcond=None)[0]
        raw = finite_difference_strain(sample.u_exp, snap.dims, snap.spacing)
        before = strain_field(smooth_coeffs, basis)
        after = strain_field(coeffs, basis)
        entry = {"file": p.name, "protocol_id": sample.protocol_id,
                 "constraint_mask": list(mask), "report": report.to_dict(),
                 "negative_fraction_raw": _negative_fraction(raw, mask),
                 "negative_fraction_smooth": _negative_fraction(before, mask),
                 "negative_fraction_pgs": _negative_fraction(after, mask),
                 "loss_u_ratio": (report.loss_u_final / report.loss_u_initial
                                  if report.loss_u_initial > 0 else 1.0)}
        manifest["samples"].append(entry)
        neg_raw.append(entry["negative_fraction_raw"])
        neg_before.append(entry["negative_fraction_smooth"])
        neg_after.append(entry["negative_fraction_pgs"])
        ratios.append(entry["loss_u_ratio"])

        u_pgs = basis.shape_matrix @ coeffs
        out_snap = data_io.Snapshot(snap.dims, snap.spacing, snap.origin, u_pgs,
                                    snap.protocol_id, mask, snap.units)
        data_io.save_snapshot(out_snap, out / p.name)
        if args.export_strain:
            data_io.export_fields(data_io.strain_columns(after), out / f"{p.stem}.strain",
                                  points=basis.points)

    if neg_after:
        manifest["aggregate"] = {
            "n_samples": len(neg_after),
            "negative_fraction_raw": float(np.mean(neg_raw)),
            "negative_fraction_smooth": float(np.mean(neg_before)),
            "negative_fraction_pgs": float(np.mean(neg_after)),
            "negative_fraction_pgs_max": float(np.max(neg_after)),
            "loss_u_ratio_mean": float(np.mean(ratios)),
            "loss_u_ratio_max": float(np.max(ratios)),
        }
    if failed:
        manifest["status"] = f"{failed} sample(s) failed"
    _write_json(out / "manifest.json", manifest)
    timings["total"] = time.perf_counter() - started
    _write_json(out / "timings.json", timings)
    return 1 if failed else 0


# -- peri -----------------------------------------------------------------------------

def _model_from_args(args, delta, cfg):
    section = cfg.get("peridynamic", {})
    name = args.model or section.get("model", "linear_bond")
    if name not in MODELS:
        raise UsageError(f"unknown model {name!r}; choose from {sorted(MODELS)}")
    kernel = args.kernel or section.get("kernel", "constant")
    try:
        stiffness = args.stiffness if args.stiffness is not None else float(section.get("stiffness", 1000.0))
        modulus = (args.dilatation_modulus if args.dilatation_modulus is not None
                   else float(section.get("dilatation_modulus", 0.5 * stiffness)))
        if name == "linear_bond":
            return MODELS[name](stiffness, delta, kernel)
        return MODELS[name](stiffness, modulus, delta, kernel)
    except (ValueError, InvalidParameterError) as exc:
        raise UsageError(f"invalid peridynamic model settings: {exc}") from exc


def _loading(kind, points):
    if kind == "cos":
        return np.column_stack([np.cos(points[:, 0]) * np.cos(points[:, 1]),
                                np.zeros(len(points))])
    if kind == "zero":
        return np.zeros_like(points)
    raise UsageError(f"unknown loading {kind!r}")


def cmd_peri(args):
    out = _out_dir(args, "peri")
    cfg = _read_config(args.config)
    manifest = {"command": "peri", "mode": args.mode, "samples": [], "status": "ok"}
    if args.mode == "solve":
        spacing = args.spacing
        delta = args.horizon * spacing
        model = _model_from_args(args, delta, cfg)
        manifest["model"] = model.params
        horizon = Horizon.with_collar(tuple(args.dims), spacing, delta)
        pts = horizon.points
        b = _loading(args.load, pts)
        bc = np.zeros_like(pts)
        try:
            sol = solve_displacement(b, bc, horizon, model, tol=args.tol, max_iter=args.max_iter)
        except PGSError as exc:
            manifest["status"] = f"error: {exc}"
            manifest["residual_history"] = getattr(exc, "residual_history", [])
            _write_json(out / "manifest.json", manifest)
            logger.error("%s", exc)
            return 1
        lat = horizon.lattice
        snap = data_io.Snapshot(lat.shape, lat.spacing, lat.origin, sol.u, f"solve-{args.load}")
        data_io.save_snapshot(snap, out / "solution.csv")
        manifest["samples"].append({"file": "solution.csv", "iterations": sol.iterations,
                                    "method": sol.method, "residual_history": sol.residual_history,
                                    "lattice_shape": list(lat.shape),
                                    "n_interior": int(len(horizon.interior))})
        _write_json(out / "manifest.json", manifest)
        return 0

    if args.input is None:
        raise UsageError("eval mode needs an input directory")
    files = _snapshot_files(args.input)
    failed = 0
    for p in files:
        entry = {"file": p.name}
        try:
            snap = data_io.read_snapshot(p)
            lat = Lattice(snap.dims, snap.spacing, snap.origin)
            delta = args.horizon * snap.spacing
            model = _model_from_args(args, delta, cfg)
            manifest["model"] = model.params
            horizon = Horizon.build(lat, delta)
            G = apply_operator(snap.u, horizon, model)
            P = average_pk1(snap.u, horizon, model)
            entry.update({"G_l2": l2_norm(G, horizon), "G_max": float(np.abs(G).max()),
                          "P": P.tolist(), "P11": float(P[0, 0]), "P22": float(P[1, 1]),
                          "n_interior": int(len(horizon.interior))})
            if args.load is not None and args.load != "zero":
                b = _loading(args.load, lat.points)
                entry["residual_loss"] = residual_loss([(snap.u, b)], horizon, model)
            data_io.export_fields({"G": G}, out / f"{p.stem}.force",
                                  points=lat.points[horizon.interior])
        except UsageError:
            raise
        except PGSError as exc:
            entry["error"] = str(exc)
            failed += 1
        manifest["samples"].append(entry)
    if failed:
        manifest["status"] = f"{failed} sample(s) failed"
    _write_json(out / "manifest.json", manifest)
    return 1 if failed else 0


# -- report ---------------------------------------------------------------------------

REPORT_COLUMNS = ["manifest", "config_hash", "support_mult", "beta_tilde", "n_samples",
                  "negative_fraction_raw", "negative_fraction_smooth",
                  "negative_fraction_pgs", "loss_u_ratio_mean", "converged_fraction"]


def cmd_report(args):
    if not args.manifests:
        raise UsageError("no manifests given")
    rows = []
    hashes = set()
    for path in args.manifests:
        try:
            with open(path) as f:
                m = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read manifest {path}: {exc}")
        if m.get("command") != "smooth":
            raise UsageError(f"{path} is not a smooth manifest")
        agg = m.get("aggregate", {})
        reports = [s["report"] for s in m.get("samples", []) if "report" in s]
        hashes.add(m.get("config_hash"))
        rows.append({
            "manifest": str(path), "config_hash": m.get("config_hash"),
            "support_mult": m["config"]["rk"]["support_mult"],
            "beta_tilde": m["config"]["pgs"]["beta_tilde"],
            "n_samples": agg.get("n_samples", 0),
            "negative_fraction_raw": agg.get("negative_fraction_raw"),
            "negative_fraction_smooth": agg.get("negative_fraction_smooth"),
            "negative_fraction_pgs": agg.get("negative_fraction_pgs"),
            "loss_u_ratio_mean": agg.get("loss_u_ratio_mean"),
            "converged_fraction": (float(np.mean([r["converged"] for r in reports]))
                                   if reports else None),
        })
    if len(hashes) > 1:
        logger.warning("manifests were produced with %d different configurations", len(hashes))
        print(f"warning: {len(hashes)} different config hashes", file=sys.stderr)

    out = Path(args.out) if args.out else _out_dir(argparse.Namespace(out=None), "report") / "report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    def fmt(v):
        return "-" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v))

    widths = [max(len(c), *(len(fmt(r[c])) for r in rows)) for c in REPORT_COLUMNS[1:]]
    print("  ".join(c.ljust(wd) for c, wd in zip(REPORT_COLUMNS[1:], widths)))
    for r in rows:
        print("  ".join(fmt(r[c]).ljust(wd) for c, wd in zip(REPORT_COLUMNS[1:], widths)))
    _write_json(out.with_suffix(".manifest.json"),
                {"command": "report", "inputs": [str(p) for p in args.manifests],
                 "n_rows": len(rows), "distinct_config_hashes": len(hashes), "status": "ok"})
    return 0


# -- entry point ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="pgsmooth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic DIC snapshots with a compressive artifact")
    s.add_argument("--out")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=int, nargs=2, default=[21, 21])
    s.add_argument("--spacing", type=float, default=0.25)
    s.add_argument("--kind", choices=["affine", "trig"], default="affine")
    s.add_argument("--stretch", type=float, nargs=2, default=[0.05, 0.05])
    s.add_argument("--sigma", type=float, default=0.003)
    s.add_argument("--artifact-amp", type=float, default=0.07)
    s.add_argument("--artifact-radius", type=float, default=1.5)
    s.add_argument("--mask", default="both", help="E11, E22, both or none")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("smooth", help="RK + PGS smoothing of every snapshot in a directory")
    s.add_argument("input")
    s.add_argument("--out")
    s.add_argument("--config")
    s.add_argument("--support-mult", type=float, help="support size in kernel-center spacings")
    s.add_argument("--beta", type=float, help="un-normalized penalty; 0 gives plain RK smoothing")
    s.add_argument("--mask", default="header",
                   help="E11, E22, both, none, or header (use each file's mask)")
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    s.add_argument("--export-strain", action="store_true")
    s.set_defaults(func=cmd_smooth)

    s = sub.add_parser("peri", help="evaluate or solve the peridynamic model")
    s.add_argument("input", nargs="?")
    s.add_argument("--mode", choices=["eval", "solve"], default="eval")
    s.add_argument("--out")
    s.add_argument("--config")
    s.add_argument("--model")
    s.add_argument("--kernel", choices=["constant", "conical"])
    s.add_argument("--stiffness", type=float)
    s.add_argument("--dilatation-modulus", type=float)
    s.add_argument("--horizon", type=float, default=3.0, help="horizon in grid spacings")
    s.add_argument("--load", choices=["cos", "zero"])
    s.add_argument("--dims", type=int, nargs=2, default=[21, 21])
    s.add_argument("--spacing", type=float, default=0.3)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=50)
    s.set_defaults(func=cmd_peri)

    s = sub.add_parser("report", help="aggregate smooth manifests into one table")
    s.add_argument("manifests", nargs="*")
    s.add_argument("--out", help="CSV path")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "peri" and args.mode == "solve" and args.load is None:
        args.load = "cos"
    _written.clear()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pgsmooth {args.command}: error: {exc}", file=sys.stderr)
        _failure_manifest(args, f"usage error: {exc}", 2)
        return 2
    except PGSError as exc:
        print(f"pgsmooth {args.command}: {exc}", file=sys.stderr)
        _failure_manifest(args, f"error: {exc}", 1)
        return 1


def _failure_manifest(args, status, code):
    """Leave a manifest behind when a command aborted before writing its own."""
    if _written:
        return
    try:
        if args.command == "report":
            base = Path(args.out) if args.out else _out_dir(argparse.Namespace(out=None), "report") / "report.csv"
            base.parent.mkdir(parents=True, exist_ok=True)
            path = base.with_suffix(".manifest.json")
        else:
            path = _out_dir(args, args.command) / "manifest.json"
        _write_json(path, {"command": args.command, "status": status, "exit_code": code})
    except OSError as exc:
        logger.error("could not write failure manifest: %s", exc)


if __name__ == "__main__":
    sys.exit(main())
