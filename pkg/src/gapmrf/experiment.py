"""Seeded experiment pipeline: phantom, measurements, reconstruction, evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .fingerprint import AcquisitionParams, random_flip_angle_schedule
from .io import format_keyvalue, parse_keyvalue, write_pgm, write_table
from .metrics import EvalReport, evaluate, window_membership
from .operators import add_noise, forward, make_epi_scheme
from .phantom import GroundTruth, make_pv_phantom, render_magnetization
from .projection import GapConfig
from .solvers import (auto_tune, blip, blip_dictionary, default_grid_dictionary, gap_mrf)

log = logging.getLogger(__name__)

METHODS = ("gapmrf", "blip")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment's outputs.

    ``seeds`` drive the noise realisation and the algorithm's random
    streams; the phantom, flip-angle schedule and sampling pattern use their
    own fixed seeds so that repetitions differ only in noise.
    """

    dims: tuple = (64, 64)
    phantom_seed: int = 0
    L: int = 300
    sequence_seed: int = 0
    spoiled: bool = False
    undersampling: int = 16
    scheme_seed: int = 0
    isnr: float = 50.0
    methods: tuple = ("gapmrf", "blip")
    seeds: tuple = (0,)
    tune: bool = True
    K: int = 20
    upsilon: float = 0.1
    kappa: float = 20.0
    gamma: float = 0.85
    xi: float = 8.0
    beta: float = 0.9
    n_s: int = 10
    sigma: tuple = (40.0, 10.0)
    zeta: float = 0.99
    max_iter: int = 120
    rel_tol: float = 1e-4
    patience: Optional[int] = 10
    phase: bool = False
    tau: Optional[float] = None
    tau_energy: Optional[float] = 1e-6
    tau_K: int = 10
    tau_upsilon: float = 0.02
    tau_kappa: float = 10.0
    scan_max_iter: Optional[int] = None
    blip_grid: int = 127
    dict_cache: Optional[str] = None
    png: bool = True
    outdir: str = "out"

    def __post_init__(self):
        def fix(name, conv):
            object.__setattr__(self, name, conv(getattr(self, name)))

        try:
            fix("dims", lambda v: tuple(int(x) for x in v))
            fix("methods", lambda v: (v,) if isinstance(v, str) else tuple(v))
            fix("seeds", lambda v: (int(v),) if isinstance(v, (int, float)) else
                tuple(int(x) for x in v))
            fix("sigma", lambda v: tuple(float(x) for x in v))
            fix("patience", lambda v: None if v is None else int(v))
            fix("tau", lambda v: None if v is None else float(v))
            fix("tau_energy", lambda v: None if v is None else float(v))
            for name in ("phantom_seed", "L", "sequence_seed", "undersampling", "scheme_seed",
                         "K", "n_s", "max_iter", "tau_K", "blip_grid"):
                fix(name, int)
            for name in ("isnr", "upsilon", "kappa", "gamma", "xi", "beta", "zeta", "rel_tol",
                         "tau_upsilon", "tau_kappa"):
                fix(name, float)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed config value: {exc}") from exc
        if len(self.dims) != 2 or min(self.dims) < 2:
            raise ConfigError("dims needs two sizes >= 2")
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ConfigError(f"methods must be drawn from {METHODS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.L < 1 or self.undersampling < 1:
            raise ConfigError("L and undersampling must be positive")
        try:
            self.gap_config(0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        try:
            values = parse_keyvalue(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        values.update(overrides)
        return cls.from_dict(values)

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_text(self) -> str:
        return format_keyvalue(self.to_dict())

    def gap_config(self, seed: int) -> GapConfig:
        return GapConfig(K=self.K, upsilon=self.upsilon, kappa=self.kappa, gamma=self.gamma,
                         xi=self.xi, tau=self.tau, beta=self.beta, n_s=self.n_s,
                         sigma=self.sigma, zeta=self.zeta, max_iter=self.max_iter,
                         rel_tol=self.rel_tol, patience=self.patience, phase=self.phase,
                         seed=seed)


@dataclass
class Setup:
    """Ground truth, acquisition and noisy measurements of one repetition."""

    gt: GroundTruth
    acq: AcquisitionParams
    scheme: object
    M: np.ndarray
    Y: np.ndarray
    sigma: float


def make_acquisition(config: ExperimentConfig) -> AcquisitionParams:
    base = random_flip_angle_schedule(config.L, config.sequence_seed)
    return replace(base, spoiled=config.spoiled)


def prepare(config: ExperimentConfig, seed: int) -> Setup:
    gt = make_pv_phantom(config.dims, seed=config.phantom_seed)
    acq = make_acquisition(config)
    scheme = make_epi_scheme(config.dims, config.undersampling, config.L, config.scheme_seed)
    M = render_magnetization(gt, acq)
    Y, sigma = add_noise(forward(M, scheme), config.isnr, seed)
    return Setup(gt, acq, scheme, M, Y, sigma)


@dataclass
class Reconstruction:
    """Output of one reconstruction method."""

    method: str
    M: np.ndarray
    U: np.ndarray
    theta: np.ndarray
    energy: list
    phases: Optional[np.ndarray] = None
    tuned: dict = field(default_factory=dict)
    certificates: list = field(default_factory=list)
    trace: list = field(default_factory=list)


def tuning_tolerance(config: ExperimentConfig, Y, noise_sigma: Optional[float]):
    """Residual tolerance for the parameter scans.

    An explicit ``tau`` wins. Otherwise, with a known noise level, an element
    counts when it explains at least ``tau_energy * ||Y||^2`` of the measured
    energy. The scans compare residual norms, which sit near the noise norm
    ``sigma * sqrt(Y.size)``, so that energy share becomes

        tau = tau_energy * ||Y||^2 / (2 * sigma * sqrt(Y.size)).

    Noisier data thus get a smaller ``tau``: merging two tissues raises the
    residual energy by a fixed amount but the residual norm by less. Without
    either setting, ``None`` selects the solver default.
    """
    if config.tau is not None:
        return config.tau
    if config.tau_energy is not None and noise_sigma:
        Y = np.asarray(Y)
        noise_norm = noise_sigma * math.sqrt(Y.size)
        return config.tau_energy * float(np.vdot(Y, Y).real) / (2.0 * noise_norm)
    return None


def reconstruct(method: str, Y, scheme, acq: AcquisitionParams, config: ExperimentConfig,
                seed: int, noise_sigma: Optional[float] = None) -> Reconstruction:
    """Run ``method`` on measurements ``Y``.

    ``noise_sigma`` (the per-entry noise standard deviation, if known) sets
    the tuning tolerance, see :func:`tuning_tolerance`.

    Raises
    ------
    ProjectionError, TuningError, NNLSConvergenceError
        Numerical failures.
    """
    if method == "blip":
        dictionary = blip_dictionary(acq, config.blip_grid, config.dict_cache)
        run = blip(Y, scheme, dictionary, zeta=config.zeta, max_iter=config.max_iter,
                   rel_tol=config.rel_tol)
        U, theta = run.mixing()
        return Reconstruction("blip", run.M, U, theta, run.energy_history)
    if method != "gapmrf":
        raise ConfigError(f"unknown method {method!r}")
    gcfg = config.gap_config(seed)
    base = default_grid_dictionary(acq)
    if config.tune:
        tau = tuning_tolerance(config, Y, noise_sigma)
        res = auto_tune(Y, scheme, acq, base, gcfg, tau=tau, tau_K=config.tau_K,
                        tau_upsilon=config.tau_upsilon, tau_kappa=config.tau_kappa,
                        gamma=config.gamma, scan_max_iter=config.scan_max_iter)
        final = res.final
        tuned = {"K": res.k_star, "upsilon": res.upsilon_star, "kappa": res.kappa_star,
                 "tau": res.tau,
                 "scans": {k: [list(map(float, r)) for r in v] for k, v in res.scans.items()}}
        U, theta, M = res.U, res.theta, res.M
        if final.phases is not None:
            M = final.phases[:, None] * (U @ res.reduced.atoms)
        certs = final.certificates
    else:
        final = gap_mrf(Y, scheme, acq, base, gcfg)
        U, theta, M = final.U, final.theta, final.M
        tuned = {"K": gcfg.K, "upsilon": gcfg.upsilon, "kappa": gcfg.kappa}
        certs = final.certificates
    return Reconstruction("gapmrf", M, U, theta, final.energy_history, final.phases, tuned,
                          certs, final.trace)


def recovered_within_windows(theta, truth_params, U=None, floor: float = 30.0) -> bool:
    """Every atom carrying a density of at least ``floor`` somewhere lies in a tissue window."""
    theta = np.asarray(theta, dtype=float).reshape(-1, 2)
    if U is not None:
        theta = theta[np.asarray(U).max(axis=0, initial=0.0) >= floor]
    member = window_membership(theta, truth_params)
    return bool(np.all(member.any(axis=1)))


RESULT_HEADER_BASE = ["method", "isnr", "L", "seed", "sr_pure", "sr_pv", "magnetization_snr_db",
                      "dominant_rho_snr_db", "dominant_t1_snr_db", "dominant_t2_snr_db",
                      "n_atoms", "atoms_in_windows", "all_tissues_recovered", "iterations",
                      "K", "upsilon", "kappa", "certificates_ok"]


def result_header(names):
    return RESULT_HEADER_BASE + [f"snr_{_slug(n)}_db" for n in names]


def _slug(name: str) -> str:
    return name.lower().replace(" ", "_")


def result_row(config, seed, rec: Reconstruction, rep: EvalReport, gt: GroundTruth) -> list:
    certs_ok = all(all(c.values()) for c in rec.certificates) if rec.certificates else True
    return [rec.method, config.isnr, config.L, seed, rep.sr_pure, rep.sr_pv,
            rep.magnetization_snr_db, rep.dominant_snr_db["rho"], rep.dominant_snr_db["t1"],
            rep.dominant_snr_db["t2"], rec.theta.shape[0],
            recovered_within_windows(rec.theta, gt.params, rec.U), all(rep.recovered),
            len(rec.energy) - 1, rec.tuned.get("K", ""), rec.tuned.get("upsilon", ""),
            rec.tuned.get("kappa", ""), certs_ok] + list(rep.per_tissue_snr_db)


def write_maps(outdir: Path, rep: EvalReport, gt: GroundTruth, png: bool) -> None:
    """PGM maps (density 0..400 a.u., T1 0..5100 ms, T2 0..600 ms) plus optional PNGs."""
    dims = gt.dims
    for t, name in enumerate(gt.names):
        write_pgm(outdir / f"density_{_slug(name)}.pgm", rep.consolidated[:, t].reshape(dims),
                  0.0, 400.0)
    write_pgm(outdir / "density_other.pgm", rep.residual_map.reshape(dims), 0.0, 400.0)
    for key, hi in (("rho", 400.0), ("t1", 5100.0), ("t2", 600.0)):
        write_pgm(outdir / f"dominant_{key}.pgm", rep.dominant_maps[key].reshape(dims), 0.0, hi)
    if png:
        from .plotting import plot_dominant_maps, plot_tissue_maps
        plot_tissue_maps(outdir / "density_maps.png", gt.mixing, rep.consolidated, gt.names,
                         rep.residual_map, dims)
        plot_dominant_maps(outdir / "dominant_maps.png", rep.dominant_maps, dims)


def write_reconstruction(outdir: Path, rec: Reconstruction, trace: bool = False) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    write_table(outdir / "atoms.csv", ["atom", "t1", "t2", "total_density"],
                [[j, *rec.theta[j], rec.U[:, j].sum()] for j in range(rec.theta.shape[0])])
    write_table(outdir / "mixing_est.csv", ["voxel"] + [f"atom_{j}" for j in range(rec.U.shape[1])],
                [[n, *rec.U[n]] for n in range(rec.U.shape[0])])
    write_table(outdir / "energy.csv", ["iteration", "energy"], list(enumerate(rec.energy)))
    if rec.phases is not None:
        write_table(outdir / "phases.csv", ["voxel", "real", "imag"],
                    [[n, p.real, p.imag] for n, p in enumerate(rec.phases)])
    if trace and rec.trace:
        write_table(outdir / "trace.csv", ["iteration", "residual", "n_atoms", "t1", "t2"],
                    [[t["iteration"], t["residual"], t["theta"].shape[0],
                      " ".join(repr(float(v)) for v in t["theta"][:, 0]),
                      " ".join(repr(float(v)) for v in t["theta"][:, 1])] for t in rec.trace])


def run_single(config: ExperimentConfig, method: str, seed: int) -> dict:
    """One (method, seed) repetition; writes its directory and returns a summary."""
    from threadpoolctl import threadpool_limits

    outdir = Path(config.outdir) / f"{method}_seed{seed}"
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    # single-threaded BLAS keeps results independent of the worker count
    with threadpool_limits(limits=1):
        setup = prepare(config, seed)
        rec = reconstruct(method, setup.Y, setup.scheme, setup.acq, config, seed, setup.sigma)
        rep = evaluate(setup.gt, setup.M, rec.M, rec.U, rec.theta)
    wall = time.perf_counter() - start
    row = result_row(config, seed, rec, rep, setup.gt)
    write_reconstruction(outdir, rec)
    write_table(outdir / "metrics.csv", result_header(setup.gt.names), [row])
    write_maps(outdir, rep, setup.gt, config.png)
    return {"method": method, "seed": seed, "row": row, "energy": list(map(float, rec.energy)),
            "tuned": rec.tuned, "wall_time_s": wall, "names": list(setup.gt.names)}


def _task(args):
    config, method, seed = args
    try:
        return run_single(config, method, seed)
    except Exception as exc:  # recorded in the manifest, turned into an exit code by the CLI
        log.exception("run %s seed %d failed", method, seed)
        return {"method": method, "seed": seed, "error": f"{type(exc).__name__}: {exc}",
                "numerical": _is_numerical(exc)}


def _is_numerical(exc) -> bool:
    from .nnls import NNLSConvergenceError
    from .projection import ProjectionError
    from .solvers import TuningError
    return isinstance(exc, (ProjectionError, TuningError, NNLSConvergenceError,
                            FloatingPointError, np.linalg.LinAlgError))


def worker_count() -> int:
    raw = os.environ.get("GAPMRF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"GAPMRF_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("GAPMRF_THREADS must be at least 1")
    return n


def map_tasks(tasks, workers: Optional[int] = None):
    workers = worker_count() if workers is None else workers
    if workers == 1 or len(tasks) == 1:
        return [_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(_task, tasks))


def _mean_std(values):
    v = np.asarray([x for x in values if x is not None and not math.isnan(x)], dtype=float)
    v = np.where(np.isinf(v), np.sign(v) * 300.0, v)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())


def summarize(results, header):
    """Mean and standard deviation of every numeric column, per method."""
    numeric = [h for h in header if h not in ("method", "isnr", "L", "seed")]
    out = []
    for method in sorted({r["method"] for r in results if "row" in r}):
        rows = [dict(zip(header, r["row"])) for r in results
                if r.get("method") == method and "row" in r]
        for col in numeric:
            vals = [float(r[col]) for r in rows if r[col] != ""]
            mean, std = _mean_std(vals)
            out.append([method, rows[0]["isnr"], rows[0]["L"], col, mean, std, len(vals)])
    return out


def write_manifest(path: Path, config: ExperimentConfig, results, wall: float, extra=None):
    manifest = {
        "config": config.to_dict(),
        "seeds": list(config.seeds),
        "runs": [{k: v for k, v in r.items() if k not in ("row", "names")} for r in results],
        "wall_time_s": wall,
        "status": "failed" if any("error" in r for r in results) else "ok",
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def run_experiment(config: ExperimentConfig, workers: Optional[int] = None):
    """Run every (method, seed) pair, then write results, summary and manifest.

    Returns
    -------
    results : list of dict
        One entry per run; failed runs carry an ``error`` key.
    """
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.txt").write_text(config.to_text())
    start = time.perf_counter()
    tasks = [(config, m, s) for m in config.methods for s in config.seeds]
    results = map_tasks(tasks, workers)
    write_outputs(outdir, config, results, time.perf_counter() - start)
    return results


def write_outputs(outdir: Path, config, results, wall):
    ok = [r for r in results if "row" in r]
    if ok:
        header = result_header(ok[0]["names"])
        write_table(outdir / "results.csv", header, [r["row"] for r in ok])
        write_table(outdir / "summary.csv",
                    ["method", "isnr", "L", "metric", "mean", "std", "n"], summarize(ok, header))
        if config.png:
            from .plotting import plot_energy
            plot_energy(outdir / "energy.png",
                        {f"{r['method']} seed {r['seed']}": r["energy"] for r in ok})
    write_manifest(outdir / "manifest.json", config, results, wall)


SWEEPABLE = {"isnr": float, "L": int, "undersampling": int}


def run_sweep(config: ExperimentConfig, param: str, values, workers: Optional[int] = None):
    """Repeat the experiment over values of one parameter.

    Each point writes into ``outdir/<param>_<value>``; a combined
    ``sweep.csv`` holds one row per (value, method, seed).
    """
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    values = [SWEEPABLE[param](v) for v in values]
    root = Path(config.outdir)
    root.mkdir(parents=True, exist_ok=True)
    points = [config.with_(**{param: v}, outdir=str(root / f"{param}_{_fmt_value(v)}"))
              for v in values]
    tasks = [(p, m, s) for p in points for m in p.methods for s in p.seeds]
    start = time.perf_counter()
    flat = map_tasks(tasks, workers)
    wall = time.perf_counter() - start
    grouped = {}
    for (p, _, _), r in zip(tasks, flat):
        grouped.setdefault(p.outdir, (p, []))[1].append(r)
    for p, res in grouped.values():
        write_outputs(Path(p.outdir), p, res, math.nan)
    ok = [r for r in flat if "row" in r]
    if ok:
        header = [param] + result_header(ok[0]["names"])
        rows = [[v] + r["row"] for (p, _, _), r, v in
                zip(tasks, flat, [getattr(t[0], param) for t in tasks]) if "row" in r]
        write_table(root / "sweep.csv", header, rows)
        if config.png:
            _plot_sweep(root, param, header, rows)
    write_manifest(root / "manifest.json", config, flat, wall,
                   {"sweep": {"param": param, "values": values}})
    return flat


def _fmt_value(v):
    return repr(v) if isinstance(v, float) else str(v)


def _plot_sweep(root: Path, param, header, rows):
    from .plotting import plot_sweep
    col = {h: i for i, h in enumerate(header)}
    xs = sorted({r[0] for r in rows})
    for metric in ("sr_pure", "sr_pv", "magnetization_snr_db"):
        series = {}
        for method in sorted({r[col["method"]] for r in rows}):
            stats = [_mean_std([float(r[col[metric]]) for r in rows
                                if r[0] == x and r[col["method"]] == method]) for x in xs]
            series[method] = (np.array([s[0] for s in stats]), np.array([s[1] for s in stats]))
        plot_sweep(root / f"sweep_{metric}.png", xs, series, param, metric)
