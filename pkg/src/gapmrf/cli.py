"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as ex
from .fingerprint import AcquisitionParams, build_dictionary
from .io import read_table, write_table
from .metrics import evaluate
from .nnls import NNLSConvergenceError
from .operators import (add_noise, forward, load_measurements, make_epi_scheme,
                        save_measurements)
from .phantom import make_pv_phantom, read_ground_truth, render_magnetization, write_ground_truth
from .projection import ProjectionError
from .solvers import TuningError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (ProjectionError, TuningError, NNLSConvergenceError, FloatingPointError,
                    np.linalg.LinAlgError)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, default=ex._json_default) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ex.ConfigError(f"cannot read {path}: {exc}") from exc


def _config(args, **overrides) -> ex.ExperimentConfig:
    if getattr(args, "config", None):
        return ex.ExperimentConfig.from_file(args.config, **overrides)
    return ex.ExperimentConfig.from_dict(overrides)


def cmd_phantom(args):
    gt = make_pv_phantom(tuple(args.dims), seed=args.seed)
    write_ground_truth(gt, args.out)
    _write_json(Path(args.out) / "phantom.json", {"dims": list(gt.dims), "seed": args.seed})
    print(f"{args.out}: {int(gt.pure_mask.sum())} pure, {int(gt.pv_mask.sum())} partial-volume voxels")
    return EXIT_OK


def _acquisition_from_json(meta) -> AcquisitionParams:
    a = meta["acquisition"]
    return AcquisitionParams(a["flip_angles"], a["repetition_times"], a["inversion_time"],
                             a["echo_time"], a["spoiled"])


def cmd_simulate(args):
    gt = read_ground_truth(args.truth)
    if tuple(gt.dims) != tuple(args.dims or gt.dims):
        raise ex.ConfigError("--dims disagrees with the ground truth")
    cfg = ex.ExperimentConfig(dims=gt.dims, L=args.L, sequence_seed=args.sequence_seed,
                              spoiled=args.spoiled, undersampling=args.undersampling,
                              scheme_seed=args.scheme_seed, isnr=args.isnr, seeds=(args.seed,))
    acq = ex.make_acquisition(cfg)
    scheme = make_epi_scheme(gt.dims, cfg.undersampling, cfg.L, cfg.scheme_seed)
    Y, sigma = add_noise(forward(render_magnetization(gt, acq), scheme), cfg.isnr, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_measurements(Y, out / "measurements.bin")
    _write_json(out / "acquisition.json", {
        "dims": list(gt.dims), "undersampling": cfg.undersampling, "scheme_seed": cfg.scheme_seed,
        "isnr": cfg.isnr, "noise_seed": args.seed, "noise_sigma": sigma,
        "sequence_seed": cfg.sequence_seed,
        "acquisition": {"flip_angles": acq.flip_angles, "repetition_times": acq.repetition_times,
                        "inversion_time": acq.inversion_time, "echo_time": acq.echo_time,
                        "spoiled": acq.spoiled}})
    print(f"{out}: Y with shape {Y.shape}, noise sigma {sigma:.6g}")
    return EXIT_OK


def cmd_reconstruct(args):
    meta = _read_json(Path(args.data) / "acquisition.json")
    overrides = {"dims": meta["dims"], "undersampling": meta["undersampling"],
                 "L": len(meta["acquisition"]["flip_angles"])}
    if args.dict_cache:
        overrides["dict_cache"] = args.dict_cache
    cfg = _config(args, **overrides)
    acq = _acquisition_from_json(meta)
    scheme = make_epi_scheme(meta["dims"], meta["undersampling"], acq.sequence_length,
                             meta["scheme_seed"])
    Y = load_measurements(Path(args.data) / "measurements.bin")
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    manifest = {"method": args.method, "config": cfg.to_dict(), "seed": seed,
                "data": str(args.data)}
    try:
        rec = ex.reconstruct(args.method, Y, scheme, acq, cfg, seed, meta.get("noise_sigma"))
    except NUMERICAL_ERRORS as exc:
        manifest.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                        wall_time_s=time.perf_counter() - start)
        _write_json(out / "manifest.json", manifest)
        raise
    ex.write_reconstruction(out, rec, trace=args.trace)
    manifest.update(status="ok", tuned=rec.tuned, energy=rec.energy,
                    certificates=rec.certificates, wall_time_s=time.perf_counter() - start)
    _write_json(out / "manifest.json", manifest)
    print(f"{out}: {rec.theta.shape[0]} atoms after {len(rec.energy) - 1} iterations")
    return EXIT_OK


def _read_reconstruction(run_dir: Path):
    _, atoms = read_table(run_dir / "atoms.csv")
    theta = np.array([[float(r[1]), float(r[2])] for r in atoms]).reshape(-1, 2)
    _, mix = read_table(run_dir / "mixing_est.csv")
    U = np.array([[float(v) for v in r[1:]] for r in mix]).reshape(len(mix), theta.shape[0])
    phases = None
    if (run_dir / "phases.csv").exists():
        _, ph = read_table(run_dir / "phases.csv")
        phases = np.array([float(r[1]) + 1j * float(r[2]) for r in ph])
    return U, theta, phases


def cmd_evaluate(args):
    gt = read_ground_truth(args.truth)
    run_dir = Path(args.run)
    U, theta, phases = _read_reconstruction(run_dir)
    manifest = _read_json(run_dir / "manifest.json")
    meta = _read_json(Path(manifest["data"]) / "acquisition.json")
    acq = _acquisition_from_json(meta)
    M_true = render_magnetization(gt, acq)
    M_est = U @ build_dictionary(theta, acq).atoms if theta.shape[0] else np.zeros_like(M_true)
    if phases is not None:
        M_est = phases[:, None] * M_est
    rep = evaluate(gt, M_true, M_est, U, theta)
    out = Path(args.out or run_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["sr_pure", "sr_pv", "magnetization_snr_db"] + \
        [f"snr_{n.lower().replace(' ', '_')}_db" for n in gt.names]
    write_table(out / "evaluation.csv", header,
                [[rep.sr_pure, rep.sr_pv, rep.magnetization_snr_db, *rep.per_tissue_snr_db]])
    ex.write_maps(out, rep, gt, args.png)
    print(f"SR pure {rep.sr_pure:.4f}  SR PV {rep.sr_pv:.4f}  "
          f"magnetization SNR {rep.magnetization_snr_db:.2f} dB")
    return EXIT_OK


def _exit_from_results(results):
    if any(r.get("numerical") for r in results):
        return EXIT_NUMERICAL
    if any("error" in r for r in results):
        return EXIT_CONFIG
    return EXIT_OK


def cmd_sweep(args):
    overrides = {}
    if args.out:
        overrides["outdir"] = args.out
    if args.seeds:
        overrides["seeds"] = args.seeds
    cfg = _config(args, **overrides)
    if args.param is None:
        results = ex.run_experiment(cfg)
    else:
        if not args.values:
            raise ex.ConfigError("--values is required with --param")
        results = ex.run_sweep(cfg, args.param, args.values)
    for r in results:
        if "error" in r:
            print(f"{r['method']} seed {r['seed']}: {r['error']}", file=sys.stderr)
    print(f"{cfg.outdir}: {sum('row' in r for r in results)}/{len(results)} runs succeeded")
    return _exit_from_results(results)


def cmd_report(args):
    """Render figures and print a summary from an experiment or sweep directory."""
    from .plotting import plot_energy

    root = Path(args.dir)
    table = root / "sweep.csv" if (root / "sweep.csv").exists() else root / "results.csv"
    if not table.exists():
        raise ex.ConfigError(f"{root}: no results.csv or sweep.csv")
    header, rows = read_table(table)
    col = {h: i for i, h in enumerate(header)}
    if table.name == "sweep.csv":
        param = header[0]
        ex._plot_sweep(root, param, header, [[float(r[0])] + r[1:] for r in rows])
    else:
        histories = {}
        for r in rows:
            run_dir = root / f"{r[col['method']]}_seed{r[col['seed']]}"
            if (run_dir / "energy.csv").exists():
                _, e = read_table(run_dir / "energy.csv")
                histories[f"{r[col['method']]} seed {r[col['seed']]}"] = [float(v[1]) for v in e]
        if histories:
            plot_energy(root / "energy.png", histories)
    keys = [k for k in ("method", "isnr", "L", "seed", "sr_pure", "sr_pv",
                        "magnetization_snr_db") if k in col]
    if table.name == "sweep.csv":
        keys = [header[0]] + keys
    print(",".join(keys))
    for r in rows:
        print(",".join(r[col[k]] for k in keys))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gapmrf", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write a partial-volume phantom")
    s.add_argument("--dims", type=int, nargs=2, default=(64, 64))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("simulate", help="simulate undersampled noisy measurements")
    s.add_argument("--truth", required=True)
    s.add_argument("--dims", type=int, nargs=2)
    s.add_argument("--L", type=int, default=300)
    s.add_argument("--sequence-seed", type=int, default=0)
    s.add_argument("--spoiled", action="store_true")
    s.add_argument("--scheme", choices=["epi"], default="epi")
    s.add_argument("--undersampling", type=int, default=16)
    s.add_argument("--scheme-seed", type=int, default=0)
    s.add_argument("--isnr", type=float, default=50.0)
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reconstruct", help="reconstruct from measurements")
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=ex.METHODS, default="gapmrf")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--trace", action="store_true", help="write per-iteration atoms")
    s.add_argument("--dict-cache", help="file caching the dense dictionary")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", help="score a reconstruction against ground truth")
    s.add_argument("--truth", required=True)
    s.add_argument("--run", required=True)
    s.add_argument("--out")
    s.add_argument("--png", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="run an experiment, optionally over a parameter")
    s.add_argument("--config")
    s.add_argument("--param", choices=sorted(ex.SWEEPABLE))
    s.add_argument("--values", nargs="+")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="render figures for an experiment directory")
    s.add_argument("dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
