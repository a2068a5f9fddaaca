"""Greedy approximate projection onto the partial-volume model set.

One call refines an adaptive dictionary and projects a gradient-step image:
matched filtering of the current pure voxels, k-means on their matched
parameters, non-maximum suppression, row-wise NNLS against the surviving
atoms, pure-voxel set update and Gaussian resampling of the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .clustering import EmptyClusteringError, kmeans, neighbour_matrix, non_maximum_suppression
from .fingerprint import T1_RANGE, T2_RANGE, AcquisitionParams, Dictionary, build_dictionary, unique_rows
from .nnls import nnls_rows

FEASIBLE_BOX = np.array([T1_RANGE, T2_RANGE])


class ProjectionError(RuntimeError):
    """The greedy projection could not produce a reduced dictionary."""


@dataclass(frozen=True)
class GapConfig:
    """Scalar controls of the greedy projection and the outer iterations.

    ``upsilon``, ``kappa`` and ``gamma`` may be zero: the parameter scans
    start from zeros to disable the corresponding constraint. ``patience``
    ends a run after that many iterations without a new lowest energy
    (``None`` disables the rule).
    """

    K: int = 20
    upsilon: float = 0.1
    kappa: float = 20.0
    gamma: float = 0.85
    xi: float = 8.0
    tau: Optional[float] = None
    beta: float = 0.9
    n_s: int = 10
    sigma: tuple = (40.0, 10.0)
    zeta: float = 0.99
    max_iter: int = 120
    rel_tol: float = 1e-4
    patience: Optional[int] = 10
    phase: bool = False
    phase_iters: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.n_s < 0 or self.max_iter < 1:
            raise ValueError("K and max_iter must be >= 1, n_s >= 0")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 or None")
        if self.upsilon < 0 or self.kappa < 0 or self.xi < 0:
            raise ValueError("upsilon, kappa and xi must be non-negative")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not (0 < self.beta < 1 and 0 < self.zeta < 1):
            raise ValueError("beta and zeta must lie in (0, 1)")
        sigma = tuple(float(s) for s in self.sigma)
        if len(sigma) != 2 or min(sigma) <= 0:
            raise ValueError("sigma needs two positive variances")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")
        object.__setattr__(self, "sigma", sigma)

    def with_(self, **changes) -> "GapConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class MatchResult:
    atom_index: np.ndarray
    density: np.ndarray
    params: np.ndarray


@dataclass
class GreedyState:
    """Adaptive dictionary, pure-voxel estimate and resampling covariance."""

    dictionary: Dictionary
    pure: np.ndarray
    sigma: np.ndarray

    @classmethod
    def initial(cls, dictionary: Dictionary, n_voxels: int, sigma=(40.0, 10.0)):
        return cls(dictionary, np.ones(n_voxels, dtype=bool), np.asarray(sigma, dtype=float))


@dataclass
class ProjectionResult:
    M: np.ndarray
    reduced: Optional[Dictionary]
    U: np.ndarray
    state: GreedyState
    centers: np.ndarray = field(default=None)
    center_counts: np.ndarray = field(default=None)
    kept_counts: np.ndarray = field(default=None)
    phases: Optional[np.ndarray] = None
    failure: Optional[str] = None

    @property
    def theta(self) -> np.ndarray:
        if self.reduced is None:
            return np.empty((0, 2))
        return self.reduced.params


def project_onto_bplus(Mbar, dictionary: Dictionary, chunk: int = 1024) -> MatchResult:
    """Best single non-negatively scaled atom per row (matched filter).

    ``d_n = argmax_d real(m_n phi_d^H) / ||phi_d||``, density
    ``max(real(m_n phi_d^H) / ||phi_d||^2, 0)``; ties go to the lowest index.
    """
    Mbar = np.atleast_2d(np.asarray(Mbar))
    n = Mbar.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dens = np.empty(n)
    norms = dictionary.atom_norms
    for start in range(0, n, chunk):
        corr = dictionary.real_correlation(Mbar[start:start + chunk])
        best = np.argmax(corr / norms, axis=1)
        c = corr[np.arange(corr.shape[0]), best]
        idx[start:start + chunk] = best
        dens[start:start + chunk] = np.maximum(c / norms[best] ** 2, 0.0)
    return MatchResult(idx, dens, dictionary.params[idx])


def update_pure_voxel_set(U, xi: float, gamma: float) -> np.ndarray:
    """Boolean mask of voxels with ||u||_1 > xi whose largest entry is >= gamma ||u||_1."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if U.shape[1] == 0:
        return np.zeros(U.shape[0], dtype=bool)
    l1 = np.abs(U).sum(axis=1)
    return (l1 > xi) & (U.max(axis=1) >= gamma * l1)


def resample_parameters(theta, sigma, n_s: int, seed, box=FEASIBLE_BOX, beta: float = 0.9):
    """Draw ``n_s`` Gaussian samples around each kept parameter row.

    ``sigma`` holds per-axis variances. Samples are clipped into ``box``
    ((T1_min, T1_max), (T2_min, T2_max)); the result is the kept rows
    followed by the samples, de-duplicated after rounding to 1e-6 ms.

    Returns
    -------
    theta_new : ndarray, shape (D', 2)
    sigma_new : ndarray, shape (2,)
        ``beta * sigma``.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    sigma = np.asarray(sigma, dtype=float)
    box = np.asarray(box, dtype=float)
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((theta.shape[0], n_s, theta.shape[1])) * np.sqrt(sigma)
    samples = (theta[:, None, :] + draws).reshape(-1, theta.shape[1])
    samples = np.clip(samples, box[:, 0], box[:, 1])
    return unique_rows(np.vstack([theta, samples])), sigma * beta


def phase_compensated_projection(Mbar, delta, iters: int = 20, return_history: bool = False):
    """Alternate row-wise NNLS and unit-modulus phase updates.

    Minimizes ``0.5 || Diag(lam) U delta - Mbar ||^2`` over ``U >= 0`` and
    ``|lam_n| = 1``. Phases start from the best single-atom correlation.

    Returns
    -------
    lam : ndarray, shape (N,), complex
    U : ndarray, shape (N, T)
    history : list of float, only with ``return_history``
        Objective after every half-step.
    """
    atoms = np.atleast_2d(np.asarray(getattr(delta, "atoms", delta)))
    Mbar = np.atleast_2d(np.asarray(Mbar))
    corr = Mbar @ atoms.conj().T
    norms = np.linalg.norm(atoms, axis=1)
    best = np.argmax(np.abs(corr) / norms, axis=1)
    z = corr[np.arange(Mbar.shape[0]), best]
    lam = _unit(z)

    def objective(lam, U):
        return 0.5 * float(np.sum(np.abs(lam[:, None] * (U @ atoms) - Mbar) ** 2))

    history = []
    best_val, best_pair = np.inf, None
    U = np.zeros((Mbar.shape[0], atoms.shape[0]))
    for _ in range(iters):
        U = nnls_rows(lam.conj()[:, None] * Mbar, atoms)
        history.append(objective(lam, U))
        z = np.einsum("nl,nl->n", Mbar, (U @ atoms).conj())
        lam = _unit(z)
        val = objective(lam, U)
        history.append(val)
        if val < best_val:
            best_val, best_pair = val, (lam.copy(), U.copy())
        if len(history) >= 4 and history[-3] - val <= 1e-14 * max(val, 1e-300):
            break
    lam, U = best_pair
    if return_history:
        return lam, U, history
    return lam, U


def _unit(z):
    mag = np.abs(z)
    out = np.ones_like(z, dtype=complex)
    nz = mag > 0
    out[nz] = z[nz] / mag[nz]
    return out


def greedy_approximate_projection(Mbar, state: GreedyState, config: GapConfig,
                                  acq: AcquisitionParams, seed) -> ProjectionResult:
    """One greedy approximate projection of ``Mbar``.

    Parameters
    ----------
    Mbar : ndarray, shape (N, L)
        Gradient-step image.
    state : GreedyState
        Adaptive dictionary, pure voxel mask and covariance at this iteration.
    config : GapConfig
    acq : AcquisitionParams
        Used to simulate the reduced and resampled dictionaries.
    seed : numpy SeedSequence or int
        Spawns the k-means and resampling streams.

    Returns
    -------
    ProjectionResult
        ``failure`` is set (and ``M`` is zero) when non-maximum suppression
        keeps no atom.

    Raises
    ------
    ProjectionError
        If no pure voxel exceeds the density floor ``xi``.
    """
    Mbar = np.asarray(Mbar)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    km_seed, rs_seed = ss.spawn(2)

    pure_idx = np.flatnonzero(state.pure)
    match = project_onto_bplus(Mbar[pure_idx], state.dictionary)
    qualifying = match.density > config.xi
    if not np.any(qualifying):
        raise ProjectionError(
            "no pure voxel has matched density above xi; lower xi or check the data")
    try:
        centers, counts, _ = kmeans(match.params[qualifying], config.K, km_seed)
    except EmptyClusteringError as exc:
        raise ProjectionError(str(exc)) from exc
    kept, merged = non_maximum_suppression(centers, counts, config.upsilon, config.kappa)
    if kept.shape[0] == 0:
        return ProjectionResult(
            M=np.zeros_like(Mbar), reduced=None, U=np.zeros((Mbar.shape[0], 0)),
            state=state, centers=centers, center_counts=counts, kept_counts=merged,
            failure="non-maximum suppression kept no atom (kappa too large?)")

    # distinct clusters can share a mean; fold such duplicates together
    rounded = np.round(kept, 6)
    _, first, inverse = np.unique(rounded, axis=0, return_index=True, return_inverse=True)
    if first.size < kept.shape[0]:
        order = np.sort(first)
        slot = np.searchsorted(order, first[inverse.ravel()])
        merged = np.bincount(slot, weights=merged, minlength=order.size)
        kept = kept[order]

    reduced = build_dictionary(kept, acq)
    phases = None
    if config.phase:
        phases, U = phase_compensated_projection(Mbar, reduced, config.phase_iters)
        M_next = phases[:, None] * (U @ reduced.atoms)
    else:
        U = nnls_rows(Mbar, reduced)
        M_next = U @ reduced.atoms

    pure_next = update_pure_voxel_set(U, config.xi, config.gamma)
    theta_next, sigma_next = resample_parameters(kept, state.sigma, config.n_s, rs_seed,
                                                 beta=config.beta)
    dict_next = build_dictionary(theta_next, acq)
    return ProjectionResult(
        M=M_next, reduced=reduced, U=U,
        state=GreedyState(dict_next, pure_next, sigma_next),
        centers=centers, center_counts=counts, kept_counts=merged, phases=phases)


def constraint_certificate(result: ProjectionResult, config: GapConfig) -> dict:
    """Check the positivity, cardinality, separation and pure-count constraints."""
    theta = result.theta
    nb = neighbour_matrix(theta, config.upsilon) if theta.shape[0] else np.zeros((0, 0), bool)
    kept = result.kept_counts if result.kept_counts is not None else np.empty(0)
    return {
        "positivity": bool(np.all(result.U >= 0)),
        "cardinality": bool(theta.shape[0] <= config.K),
        "separation": bool(not np.any(nb)),
        "pure_count": bool(np.all(kept >= config.kappa)),
    }
