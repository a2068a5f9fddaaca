"""Projected-gradient outer loops: GAP-MRF, the BLIP baseline and parameter tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .fingerprint import AcquisitionParams, Dictionary, build_dictionary, parameter_grid, unique_rows
from .nnls import nnls_rows
from .operators import SamplingScheme, forward, gradient
from .projection import (GapConfig, GreedyState, ProjectionError, ProjectionResult,
                         constraint_certificate, greedy_approximate_projection,
                         project_onto_bplus)

log = logging.getLogger(__name__)

MAX_HALVINGS = 60


def energy(M, Y, scheme: SamplingScheme) -> float:
    """||h(M) - Y||_2^2."""
    return float(np.sum(np.abs(forward(M, scheme) - Y) ** 2))


def residual_norm(M, Y, scheme: SamplingScheme) -> float:
    return math.sqrt(energy(M, Y, scheme))


def backtracking_step(M, Y, scheme: SamplingScheme, project: Callable, zeta: float):
    """One outer iteration of projected gradient with step-size backtracking.

    Starts from ``mu = 2N/Q`` and halves ``mu`` until it drops to at most
    ``nu = zeta ||M+ - M||^2 / ||h(M+ - M)||^2``. When ``h`` annihilates the
    update (zero denominator) the step is accepted.

    ``project(Mbar, trial)`` returns an object with an ``M`` attribute.

    Returns
    -------
    result
        The projection accepted on exit.
    mu, nu : float
    trials : int
    """
    N, Q = scheme.n_voxels, scheme.n_samples
    g = gradient(M, Y, scheme)
    mu, nu = 2.0 * N / Q, 0.0
    trial = 0
    result = None
    while mu > nu:
        if trial >= MAX_HALVINGS:
            raise ProjectionError("step-size backtracking did not terminate")
        mu /= 2.0
        result = project(M - mu * g, trial)
        dM = result.M - M
        den = float(np.sum(np.abs(forward(dM, scheme)) ** 2))
        nu = math.inf if den == 0.0 else zeta * float(np.sum(np.abs(dM) ** 2)) / den
        trial += 1
    return result, mu, nu, trial


def converged(history, rel_tol: float) -> bool:
    """|E_new - E_old| <= rel_tol * E_new on the last two energies."""
    if len(history) < 2:
        return False
    return abs(history[-1] - history[-2]) <= rel_tol * history[-1]


@dataclass
class GapRun:
    """Outcome of one run of the GAP-MRF outer loop.

    ``M``, ``reduced``, ``U`` and ``state`` belong to the lowest-energy
    iterate, ``best_iteration``; the histories cover every iteration.
    """

    M: np.ndarray
    reduced: Dictionary
    U: np.ndarray
    state: GreedyState
    energy_history: List[float]
    best_iteration: int = 0
    steps: List[tuple] = field(default_factory=list)
    certificates: List[dict] = field(default_factory=list)
    trace: List[dict] = field(default_factory=list)
    phases: Optional[np.ndarray] = None

    @property
    def theta(self) -> np.ndarray:
        return self.reduced.params

    @property
    def iterations(self) -> int:
        return len(self.energy_history) - 1

    @property
    def residual(self) -> float:
        return math.sqrt(self.energy_history[self.best_iteration])


def gap_mrf_iterate(Y, scheme: SamplingScheme, M, state: GreedyState, config: GapConfig,
                    acq: AcquisitionParams, seed: np.random.SeedSequence):
    """One GAP-MRF outer iteration from ``(M, state)``.

    Every backtracking trial projects from the same incoming ``state``; the
    state produced by the accepted trial is carried forward.
    """
    def project(Mbar, trial):
        child = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key + (trial,))
        res = greedy_approximate_projection(Mbar, state, config, acq, child)
        if res.failure:
            raise ProjectionError(res.failure)
        return res

    return backtracking_step(M, Y, scheme, project, config.zeta)


def gap_mrf(Y, scheme: SamplingScheme, acq: AcquisitionParams, dictionary: Dictionary,
            config: GapConfig, M0=None, run_id: int = 0) -> GapRun:
    """Run GAP-MRF outer iterations until the energy stalls.

    The run stops on the relative energy change rule, the iteration cap,
    or after ``config.patience`` iterations without a new lowest energy.
    A greedy projection can drop a tissue for good, so the lowest-energy
    iterate is returned rather than the last one.

    Parameters
    ----------
    Y : ndarray, shape (Q, L, C)
    scheme : SamplingScheme
    acq : AcquisitionParams
    dictionary : Dictionary
        Initial adaptive dictionary (for instance the 20 x 20 grid).
    config : GapConfig
    M0 : ndarray, optional
        Warm start; zero by default.
    run_id : int
        Distinguishes the random streams of successive runs.
    """
    N = scheme.n_voxels
    M = np.zeros((N, scheme.n_frames), dtype=complex) if M0 is None else np.array(M0, dtype=complex)
    state = GreedyState.initial(dictionary, N, config.sigma)
    history = [energy(M, Y, scheme)]
    steps, certs, trace = [], [], []
    best = None
    for it in range(config.max_iter):
        seed = np.random.SeedSequence(config.seed, spawn_key=(run_id, it))
        result, mu, nu, trials = gap_mrf_iterate(Y, scheme, M, state, config, acq, seed)
        M, state = result.M, result.state
        history.append(energy(M, Y, scheme))
        steps.append((mu, nu, trials))
        certs.append(constraint_certificate(result, config))
        trace.append({"iteration": it + 1, "theta": result.theta.copy(),
                      "residual": math.sqrt(history[-1])})
        if best is None or history[-1] < history[best[0]]:
            best = (it + 1, result)
        log.debug("run %d it %d: E=%.6g mu=%g atoms=%d", run_id, it + 1, history[-1], mu,
                  result.theta.shape[0])
        if converged(history, config.rel_tol):
            break
        if config.patience is not None and it + 1 - best[0] >= config.patience:
            break
    best_it, res = best
    return GapRun(M=res.M, reduced=res.reduced, U=res.U, state=res.state,
                  energy_history=history, best_iteration=best_it, steps=steps,
                  certificates=certs, trace=trace, phases=res.phases)


@dataclass
class BlipRun:
    M: np.ndarray
    atom_index: np.ndarray
    density: np.ndarray
    dictionary: Dictionary
    energy_history: List[float]
    steps: List[tuple] = field(default_factory=list)

    @property
    def theta(self) -> np.ndarray:
        return self.dictionary.params[self.atom_index]

    def mixing(self):
        """Per-voxel single-atom mixing as (U, theta) over the used atoms."""
        used, col = np.unique(self.atom_index, return_inverse=True)
        U = np.zeros((self.M.shape[0], used.size))
        U[np.arange(self.M.shape[0]), col.ravel()] = self.density
        return U, self.dictionary.params[used]


@dataclass
class _Match:
    M: np.ndarray
    atom_index: np.ndarray
    density: np.ndarray


def blip(Y, scheme: SamplingScheme, dictionary: Dictionary, zeta: float = 0.99,
         max_iter: int = 120, rel_tol: float = 1e-4, M0=None) -> BlipRun:
    """Projected gradient with a fixed dictionary and one atom per voxel."""
    N = scheme.n_voxels
    M = np.zeros((N, scheme.n_frames), dtype=complex) if M0 is None else np.array(M0, dtype=complex)
    history = [energy(M, Y, scheme)]
    steps = []
    match = None

    def project(Mbar, trial):
        m = project_onto_bplus(Mbar, dictionary)
        return _Match(m.density[:, None] * dictionary.atoms[m.atom_index], m.atom_index, m.density)

    for it in range(max_iter):
        match, mu, nu, trials = backtracking_step(M, Y, scheme, project, zeta)
        M = match.M
        history.append(energy(M, Y, scheme))
        steps.append((mu, nu, trials))
        log.debug("blip it %d: E=%.6g mu=%g", it + 1, history[-1], mu)
        if converged(history, rel_tol):
            break
    return BlipRun(M, match.atom_index, match.density, dictionary, history, steps)


@dataclass
class TuneResult:
    k_star: int
    upsilon_star: float
    kappa_star: float
    M: np.ndarray
    reduced: Dictionary
    U: np.ndarray
    final: GapRun
    scans: dict = field(default_factory=dict)
    tau: float = math.nan

    @property
    def theta(self) -> np.ndarray:
        return self.reduced.params


class TuningError(RuntimeError):
    pass


def auto_tune(Y, scheme: SamplingScheme, acq: AcquisitionParams, base: Dictionary,
              config: GapConfig, tau: Optional[float] = None, tau_K: int = 10,
              tau_upsilon: float = 0.02, tau_kappa: float = 10.0, gamma: float = 0.85,
              max_steps: int = 20, scan_max_iter: Optional[int] = None) -> TuneResult:
    """Choose K, upsilon and kappa by scanning the data residual.

    Three scans run in sequence, each warm-started from the previous run:

    * K grows by ``tau_K`` (with gamma, upsilon, kappa = 0) while the residual
      keeps dropping by more than ``tau``; ``K*`` is the last value whose
      successor brought no such drop.
    * upsilon grows by ``tau_upsilon`` (gamma fixed, kappa = 0) until the
      residual rises by more than ``tau`` or a single atom remains;
      ``upsilon* = upsilon - 2 tau_upsilon``.
    * kappa grows by ``tau_kappa`` from ``tau_kappa`` until the residual rises
      by more than ``tau`` or no atom survives; ``kappa* = kappa - 2 tau_kappa``.

    A final run with the tuned values is followed by one NNLS fit.
    ``tau`` defaults to 1% of ``||Y||``.
    """
    if tau is None:
        tau = config.tau if config.tau is not None else 0.01 * float(np.linalg.norm(Y))
    scan_cfg = config if scan_max_iter is None else config.with_(max_iter=scan_max_iter)
    run_id = [0]
    scans = {"K": [], "upsilon": [], "kappa": []}

    def run(dictionary, cfg, M0):
        run_id[0] += 1
        return gap_mrf(Y, scheme, acq, dictionary, cfg, M0=M0, run_id=run_id[0])

    # K scan: runs[j] holds the outcome of the j-th run; runs[0] is the zero start.
    M0 = np.zeros((scheme.n_voxels, scheme.n_frames), dtype=complex)
    runs = [(M0, np.empty((0, 2)), residual_norm(M0, Y, scheme))]
    K = 0
    for step in range(max_steps):
        theta0 = unique_rows(np.vstack([base.params, runs[-1][1]]))
        dictionary = build_dictionary(theta0, acq) if len(runs) > 1 else base
        K += tau_K
        out = run(dictionary, scan_cfg.with_(K=K, gamma=0.0, upsilon=0.0, kappa=0.0), runs[-1][0])
        runs.append((out.M, out.theta, out.residual))
        scans["K"].append((K, out.residual, out.theta.shape[0]))
        log.info("K scan: K=%d residual=%.6g atoms=%d iterations=%d", K, out.residual,
                 out.theta.shape[0], out.iterations)
        if runs[-2][2] - runs[-1][2] <= tau:
            break
    else:
        raise TuningError(f"K scan did not settle within {max_steps} steps: {scans['K']}")
    if len(runs) > 2:
        K_star = K - tau_K
        current = runs[-2]
    else:
        K_star = K
        current = runs[-1]

    def scan(name, values, make_cfg):
        nonlocal current
        for step, value in enumerate(values):
            if step >= max_steps:
                raise TuningError(f"{name} scan did not settle within {max_steps} steps: "
                                  f"{scans[name]}")
            cfg = make_cfg(value)
            try:
                out = run(build_dictionary(current[1], acq), cfg, current[0])
            except ProjectionError as exc:
                scans[name].append((value, math.inf, 0))
                log.info("%s scan stops at %g: %s", name, value, exc)
                return value
            scans[name].append((value, out.residual, out.theta.shape[0]))
            log.info("%s scan: value=%g residual=%.6g atoms=%d iterations=%d", name, value,
                     out.residual, out.theta.shape[0], out.iterations)
            if out.residual - current[2] > tau:
                return value
            current = (out.M, out.theta, out.residual)
            if name == "upsilon" and out.theta.shape[0] <= 1:
                return value
        raise TuningError(f"{name} scan did not settle within {max_steps} steps")

    ups_values = (tau_upsilon * (k + 2) for k in range(max_steps + 1))
    ups_stop = scan("upsilon", ups_values,
                    lambda u: scan_cfg.with_(K=K_star, gamma=gamma, upsilon=u, kappa=0.0))
    upsilon_star = max(ups_stop - 2 * tau_upsilon, tau_upsilon)

    kappa_values = (tau_kappa * (k + 2) for k in range(max_steps + 1))
    kappa_stop = scan("kappa", kappa_values,
                      lambda k: scan_cfg.with_(K=K_star, gamma=gamma, upsilon=upsilon_star,
                                               kappa=k))
    kappa_star = max(kappa_stop - 2 * tau_kappa, tau_kappa)

    final_cfg = config.with_(K=K_star, gamma=gamma, upsilon=upsilon_star, kappa=kappa_star)
    final = run(build_dictionary(current[1], acq), final_cfg, current[0])
    U = nnls_rows(final.M, final.reduced)
    return TuneResult(K_star, upsilon_star, kappa_star, final.M, final.reduced, U, final, scans,
                      tau)


def tissue_windows(truth_params, tol: float = 0.15) -> np.ndarray:
    """(T, 2, 2) array of [low, high] windows per tissue and parameter."""
    p = np.atleast_2d(np.asarray(truth_params, dtype=float))
    return np.stack([p * (1 - tol), p * (1 + tol)], axis=2)


def window_membership(theta, truth_params, tol: float = 0.15) -> np.ndarray:
    """Boolean (T_est, T_true): estimated atom lies in the tissue's window on every parameter."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    win = tissue_windows(truth_params, tol)
    if theta.shape[0] == 0:
        return np.zeros((0, win.shape[0]), dtype=bool)
    lo, hi = win[..., 0], win[..., 1]
    inside = (theta[:, None, :] >= lo[None] - 1e-9) & (theta[:, None, :] <= hi[None] + 1e-9)
    return np.all(inside, axis=2)


def tissue_consolidate(U, theta, truth_params, tol: float = 0.15):
    """Sum estimated columns into per-tissue maps by the ±tol parameter windows.

    A column whose parameters fall in several windows goes to the tissue
    closest in relative distance. Columns matching no tissue are summed into
    the residual map.

    Returns
    -------
    maps : ndarray, shape (N, T)
    residual : ndarray, shape (N,)
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    truth = np.atleast_2d(np.asarray(truth_params, dtype=float))
    member = window_membership(theta, truth, tol)
    maps = np.zeros((U.shape[0], truth.shape[0]))
    residual = np.zeros(U.shape[0])
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    for j in range(U.shape[1]):
        hits = np.flatnonzero(member[j])
        if hits.size == 0:
            residual += U[:, j]
            continue
        rel = np.abs(theta[j][None, :] - truth[hits]) / truth[hits]
        maps[:, hits[np.argmin(rel.max(axis=1))]] += U[:, j]
    return maps, residual


def default_grid_dictionary(acq: AcquisitionParams) -> Dictionary:
    """The 20 x 20 linear grid over the feasible box."""
    return build_dictionary(parameter_grid(20, 20), acq)


def blip_dictionary(acq: AcquisitionParams, n: int = 127, cache=None) -> Dictionary:
    """Dense n x n grid, log-spaced in T1 and linear in T2."""
    from .fingerprint import cached_dictionary
    return cached_dictionary(parameter_grid(n, n, log_t1=True), acq, cache)
