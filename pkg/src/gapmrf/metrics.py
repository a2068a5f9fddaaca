"""Reconstruction quality: map SNR, success rate and dominant-tissue maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .phantom import GroundTruth
from .solvers import tissue_consolidate, window_membership

DENSITY_FLOOR = 30.0
WINDOW_TOL = 0.15


def snr_db(reference, estimate) -> float:
    """10 log10(sum |x|^2 / sum |x - x_est|^2); +inf on an exact match."""
    ref = np.asarray(reference)
    err = float(np.sum(np.abs(ref - np.asarray(estimate)) ** 2))
    sig = float(np.sum(np.abs(ref) ** 2))
    if err == 0.0:
        return math.inf
    if sig == 0.0:
        return -math.inf
    return 10.0 * math.log10(sig / err)


def tissue_snr(u_true, u_est) -> float:
    """SNR in dB of one consolidated proton-density map."""
    return snr_db(u_true, u_est)


def magnetization_snr(M_true, M_est) -> float:
    return snr_db(M_true, M_est)


def _has_matching(member) -> bool:
    """Does every row of the square boolean matrix get a distinct column?"""
    n = member.shape[0]
    if n == 0:
        return True
    if n == 1:
        return bool(member[0, 0])
    return any(all(member[i, p[i]] for i in range(n)) for p in permutations(range(n)))


def voxel_success(gt: GroundTruth, U_est, theta_est, floor: float = DENSITY_FLOOR,
                  tol: float = WINDOW_TOL) -> np.ndarray:
    """Per-voxel success flags.

    Estimated densities below ``floor`` are ignored. A voxel succeeds when
    the number of surviving atoms equals its true tissue count and those
    atoms can be paired one-to-one with its true tissues whose ±``tol``
    windows contain them.
    """
    U_est = np.atleast_2d(np.asarray(U_est, dtype=float))
    theta_est = np.asarray(theta_est, dtype=float).reshape(-1, 2)
    member = window_membership(theta_est, gt.params, tol)
    est_on = U_est >= floor
    true_on = gt.mixing > 0
    out = np.zeros(U_est.shape[0], dtype=bool)
    cache = {}
    for n in range(U_est.shape[0]):
        e = tuple(np.flatnonzero(est_on[n]))
        t = tuple(np.flatnonzero(true_on[n]))
        if len(e) != len(t):
            continue
        key = (e, t)
        if key not in cache:
            cache[key] = _has_matching(member[np.ix_(e, t)]) if e else True
        out[n] = cache[key]
    return out


def success_rate(gt: GroundTruth, U_est, theta_est, floor: float = DENSITY_FLOOR,
                 tol: float = WINDOW_TOL):
    """Fractions of pure and partial-volume voxels reconstructed correctly.

    Returns
    -------
    sr_pure, sr_pv : float
        ``nan`` for a class with no voxels.
    """
    ok = voxel_success(gt, U_est, theta_est, floor, tol)

    def frac(mask):
        return float(ok[mask].mean()) if np.any(mask) else math.nan

    return frac(gt.pure_mask), frac(gt.pv_mask)


def dominant_tissue_maps(U, theta):
    """Density and parameters of the largest-density atom in each voxel.

    Ties go to the lowest column index; all-zero voxels give zeros.

    Returns
    -------
    rho, t1, t2 : ndarray, shape (N,)
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    theta = np.asarray(theta, dtype=float).reshape(-1, 2)
    N = U.shape[0]
    if U.shape[1] == 0:
        z = np.zeros(N)
        return z, z.copy(), z.copy()
    j = np.argmax(U, axis=1)
    rho = U[np.arange(N), j]
    on = rho > 0
    t1 = np.where(on, theta[j, 0], 0.0)
    t2 = np.where(on, theta[j, 1], 0.0)
    return rho, t1, t2


@dataclass
class EvalReport:
    """Quality figures of one reconstruction against its ground truth."""

    per_tissue_snr_db: list
    magnetization_snr_db: float
    sr_pure: float
    sr_pv: float
    dominant_maps: dict
    dominant_snr_db: dict = field(default_factory=dict)
    consolidated: np.ndarray = None
    residual_map: np.ndarray = None
    recovered: list = field(default_factory=list)

    def __post_init__(self):
        for v in (self.sr_pure, self.sr_pv):
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError("success rates must lie in [0, 1]")


def recovered_tissues(theta, truth_params, tol: float = WINDOW_TOL):
    """For each true tissue, whether some estimated atom lies in its window."""
    member = window_membership(theta, truth_params, tol)
    return [bool(v) for v in member.any(axis=0)]


def evaluate(gt: GroundTruth, M_true, M_est, U_est, theta_est) -> EvalReport:
    """Compare a reconstruction with the ground truth."""
    maps, residual = tissue_consolidate(U_est, theta_est, gt.params, WINDOW_TOL)
    per_tissue = [tissue_snr(gt.mixing[:, t], maps[:, t]) for t in range(gt.mixing.shape[1])]
    sr_pure, sr_pv = success_rate(gt, U_est, theta_est)
    rho, t1, t2 = dominant_tissue_maps(U_est, theta_est)
    rho0, t10, t20 = dominant_tissue_maps(gt.mixing, gt.params)
    dom = {"rho": rho, "t1": t1, "t2": t2}
    dom_snr = {"rho": snr_db(rho0, rho), "t1": snr_db(t10, t1), "t2": snr_db(t20, t2)}
    return EvalReport(per_tissue, magnetization_snr(M_true, M_est), sr_pure, sr_pv, dom,
                      dom_snr, maps, residual, recovered_tissues(theta_est, gt.params))
