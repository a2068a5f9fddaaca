"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The desk-scale experiment (64x64 five-tissue phantom, L = 300, undersampling
16, three seeds) runs once per module and is shared by the criteria that
inspect it. Expect the whole module to take hours on a single core.
"""

import heapq
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from gapmrf import experiment as ex
from gapmrf.fingerprint import (TissueParams, build_dictionary, random_flip_angle_schedule,
                                simulate_fingerprint)
from gapmrf.nnls import kkt_residual, nnls_rows
from gapmrf.operators import adjoint, forward, gradient, make_epi_scheme
from gapmrf.projection import GapConfig, phase_compensated_projection
from gapmrf.solvers import auto_tune, default_grid_dictionary

from oracles import bloch_fine_step, nnls_enumerate, nnls_objective

SEEDS = (0, 1, 2)
SCAN_CAP = 20
BUDGET_S = 600.0
BUDGET_CORES = 4


def cnormal(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def rows_by(results, method):
    out = {}
    for r in results:
        if r["method"] == method and "row" in r:
            out[r["seed"]] = dict(zip(ex.result_header(r["names"]), r["row"]))
    return out


def makespan(durations, workers):
    """Longest-first list schedule of independent tasks over ``workers``."""
    loads = [0.0] * workers
    for d in sorted(durations, reverse=True):
        heapq.heapreplace(loads, loads[0] + d)
    return max(loads)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def desk_config(workdir):
    return ex.ExperimentConfig(seeds=SEEDS, png=False, dict_cache=str(workdir / "blip_dict.bin"))


def run_with_threads(config, threads):
    old = os.environ.get("GAPMRF_THREADS")
    os.environ["GAPMRF_THREADS"] = str(threads)
    try:
        start = time.perf_counter()
        results = ex.run_experiment(config)
        return results, time.perf_counter() - start
    finally:
        if old is None:
            del os.environ["GAPMRF_THREADS"]
        else:
            os.environ["GAPMRF_THREADS"] = old


@pytest.fixture(scope="module")
def desk_run(desk_config, workdir):
    config = desk_config.with_(outdir=str(workdir / "threads1"))
    results, wall = run_with_threads(config, 1)
    return config, results, wall


def test_criterion_01_adjoint_identity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(10):
        C = (1, 3)[trial % 2]
        coils = None if C == 1 else cnormal(rng, 256, C)
        scheme = make_epi_scheme((16, 16), [1, 2, 4, 8, 16][trial % 5], 8, seed=trial,
                                 coil_maps=coils)
        M = cnormal(rng, 256, 8)
        Y = cnormal(rng, scheme.n_samples, 8, scheme.n_coils)
        gap = abs(np.vdot(Y, forward(M, scheme)) - np.vdot(adjoint(Y, scheme), M))
        worst = max(worst, gap / (np.linalg.norm(M) * np.linalg.norm(Y)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 1.0
    verdict(1, "adjoint identity", ok, f"worst relative gap {worst:.1e}, {elapsed:.2f} s")
    assert ok


def test_criterion_02_gradient_check(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(12)
    worst = 0.0
    for trial in range(5):
        coils = None if trial % 2 == 0 else cnormal(rng, 64, 2)
        scheme = make_epi_scheme((8, 8), 2, 4, seed=trial, coil_maps=coils)
        M = cnormal(rng, 64, 4)
        Y = cnormal(rng, scheme.n_samples, 4, scheme.n_coils)
        g = gradient(M, Y, scheme)

        def E(X):
            return 0.5 * np.linalg.norm(Y - forward(X, scheme)) ** 2

        for _ in range(5):
            D = cnormal(rng, 64, 4)
            h = 1e-4
            fd = (E(M + h * D) - E(M - h * D)) / (2 * h)
            analytic = np.real(np.vdot(g, D))
            worst = max(worst, abs(fd - analytic) / abs(analytic))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 5.0
    verdict(2, "gradient check", ok, f"worst relative error {worst:.1e}, {elapsed:.2f} s")
    assert ok


def test_criterion_03_nnls_oracle(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(13)
    worst_f = worst_kkt = 0.0
    for _ in range(200):
        T = int(rng.integers(1, 5))
        L = int(rng.integers(1, 9))
        D = cnormal(rng, T, L)
        if rng.random() < 0.5:
            m = rng.uniform(0, 2, T) * (rng.random(T) < 0.6) @ D + 0.1 * cnormal(rng, L)
        else:
            m = cnormal(rng, L)
        u = nnls_rows(m[None, :], D)[0]
        _, f_ref = nnls_enumerate(D, m)
        assert np.all(u >= 0)
        worst_f = max(worst_f, abs(nnls_objective(D, m, u) - f_ref) / max(1.0, f_ref))
        worst_kkt = max(worst_kkt, kkt_residual(u, D, m))
    elapsed = time.perf_counter() - start
    ok = worst_f <= 1e-8 and worst_kkt <= 1e-8 and elapsed < 10.0
    verdict(3, "NNLS oracle equivalence", ok,
            f"objective gap {worst_f:.1e}, KKT {worst_kkt:.1e}, {elapsed:.2f} s")
    assert ok


def test_criterion_04_bloch_oracle(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(14)
    acq = random_flip_angle_schedule(50, seed=4)
    worst = 0.0
    for _ in range(10):
        t2 = rng.uniform(20.0, 600.0)
        t1 = rng.uniform(max(t2, 100.0), 5000.0)
        ref = bloch_fine_step(t1, t2, acq)
        got = simulate_fingerprint(TissueParams(t1, t2), acq)
        worst = max(worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 30.0
    verdict(4, "Bloch recursion vs fine-step integrator", ok,
            f"worst relative error {worst:.1e}, {elapsed:.1f} s")
    assert ok


def test_criterion_05_desk_scale_experiment(desk_run, verdict):
    config, results, wall = desk_run
    failed = [f"{r['method']} seed {r['seed']}: {r['error']}" for r in results if "error" in r]
    gap, blip = rows_by(results, "gapmrf"), rows_by(results, "blip")
    checks, notes = [], []
    for s in SEEDS:
        if s not in gap or s not in blip:
            checks.append(False)
            continue
        g, b = gap[s], blip[s]
        margin = g["magnetization_snr_db"] - b["magnetization_snr_db"]
        checks += [g["sr_pure"] >= 0.90, g["sr_pv"] >= 0.70, b["sr_pv"] == 0.0, margin >= 5.0,
                   bool(g["atoms_in_windows"])]
        notes.append(f"seed {s}: sr_pure {g['sr_pure']:.3f} sr_pv {g['sr_pv']:.3f} "
                     f"M-SNR {g['magnetization_snr_db']:.1f} vs {b['magnetization_snr_db']:.1f} dB")
    durations = [r["wall_time_s"] for r in results if "wall_time_s" in r]
    cores = os.cpu_count() or 1
    if cores >= BUDGET_CORES:
        # the thread-count rerun of criterion 10 measures the four-worker wall time
        budget_note = f"serial wall {wall:.0f} s, budget checked on the 4-worker rerun"
        runtime_ok = True
    else:
        span = makespan(durations, BUDGET_CORES)
        budget_note = (f"{cores} core(s): serial wall {wall:.0f} s, "
                       f"projected {BUDGET_CORES}-worker makespan {span:.0f} s")
        runtime_ok = span <= BUDGET_S
    ok = not failed and all(checks) and runtime_ok
    verdict(5, "desk-scale PV experiment", ok, "; ".join(notes + failed + [budget_note]))
    assert not failed, failed
    assert all(checks), notes
    assert runtime_ok, budget_note


def test_criterion_06_noise_trend(desk_run, desk_config, workdir, verdict):
    _, results, _ = desk_run
    means = {50.0: [r["sr_pv"] for r in rows_by(results, "gapmrf").values()]}
    failures = []
    for isnr in (30.0, 10.0):
        config = desk_config.with_(isnr=isnr, methods=("gapmrf",),
                                   outdir=str(workdir / f"isnr{int(isnr)}"))
        res = ex.run_experiment(config, workers=1)
        # a run that stops on a numerical failure recovers no voxel
        failures += [f"{isnr:g} dB seed {r['seed']}: {r['error']}" for r in res if "error" in r]
        means[isnr] = [r["sr_pv"] for r in rows_by(res, "gapmrf").values()]
        means[isnr] += [0.0] * (len(SEEDS) - len(means[isnr]))
    m = [float(np.mean(means[k])) for k in (50.0, 30.0, 10.0)]
    ok = len(means[50.0]) == len(SEEDS) and m[0] >= m[1] >= m[2]
    detail = "mean sr_pv " + " / ".join(f"{v:.3f}" for v in m) + " at 50/30/10 dB"
    verdict(6, "noise trend of PV success", ok, "; ".join([detail] + failures))
    assert ok, detail


def test_criterion_07_single_tissue_tuning(verdict):
    acq = random_flip_angle_schedule(60, seed=0)
    rng = np.random.default_rng(7)
    U = np.zeros((64, 1))
    U[:25, 0] = rng.uniform(150, 300, 25)
    grid = default_grid_dictionary(acq)
    M = U @ build_dictionary(np.array([[1425.0, 41.0]]), acq).atoms
    scheme = make_epi_scheme((8, 8), 1, 60, 0)
    res = auto_tune(forward(M, scheme), scheme, acq, grid, GapConfig(seed=0), tau=1.0)
    lengths = {k: len(v) for k, v in res.scans.items()}
    ok = res.k_star == 10 and all(n <= SCAN_CAP for n in lengths.values())
    verdict(7, "parameter tuning on a single tissue", ok, f"K* = {res.k_star}, scan lengths {lengths}")
    assert ok


def test_criterion_08_constraint_certificates(desk_run, verdict):
    _, results, _ = desk_run
    gap = rows_by(results, "gapmrf")
    ok = len(gap) == len(SEEDS) and all(bool(r["certificates_ok"]) for r in gap.values())
    verdict(8, "constraint certificates", ok,
            ", ".join(f"seed {s}: {bool(r['certificates_ok'])}" for s, r in sorted(gap.items())))
    assert ok


def test_criterion_09_phase_compensation(verdict):
    acq = random_flip_angle_schedule(60, seed=0)
    grid = default_grid_dictionary(acq)
    rng = np.random.default_rng(9)
    delta = grid.atoms[[20, 150, 390]]
    U_true = rng.uniform(0, 300, (40, 3)) * (rng.random((40, 3)) < 0.7)
    U_true[0] = 0.0
    phi = rng.uniform(-np.pi, np.pi, 40)
    Mbar = np.exp(1j * phi)[:, None] * (U_true @ delta)
    lam, U, hist = phase_compensated_projection(Mbar, delta, iters=20, return_history=True)
    live = U_true.sum(axis=1) > 0
    err = float(np.max(np.abs(lam[live] - np.exp(1j * phi[live]))))
    monotone = all(b <= a + 1e-12 * max(a, 1.0) for a, b in zip(hist, hist[1:]))
    ok = err <= 1e-6 and lam[0] == 1 and monotone
    verdict(9, "phase compensation", ok, f"phase error {err:.1e}, monotone {monotone}")
    assert ok


def csv_files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(Path(root).rglob("*.csv"))}


def test_criterion_10_determinism(desk_run, desk_config, workdir, verdict):
    config1, _, _ = desk_run
    config4 = desk_config.with_(outdir=str(workdir / "threads4"))
    results4, wall4 = run_with_threads(config4, 4)
    a, b = csv_files(config1.outdir), csv_files(config4.outdir)
    differing = sorted(str(k) for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = bool(a) and not differing and not any("error" in r for r in results4)
    verdict(10, "determinism across thread counts", ok,
            f"{len(a)} CSV files compared, {len(differing)} differ; "
            f"4-worker wall {wall4:.0f} s on {os.cpu_count()} core(s)")
    assert ok, differing
    if (os.cpu_count() or 1) >= BUDGET_CORES:
        assert wall4 <= BUDGET_S, f"4-worker wall {wall4:.0f} s exceeds {BUDGET_S:.0f} s"
