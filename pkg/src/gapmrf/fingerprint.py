"""Fingerprint simulation and dictionary construction.

Fingerprints come from a discrete inversion-recovery Bloch recursion:
instantaneous RF rotations about the y axis interleaved with exact
relaxation over each repetition. By default the transverse magnetization is
carried over between repetitions (balanced, on-resonance), which makes the
fingerprint shape depend on T2. Setting ``spoiled=True`` destroys it after
each echo instead (FISP-style ideal spoiling).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Default feasible parameter box, ms.
T1_RANGE = (100.0, 5100.0)
T2_RANGE = (20.0, 600.0)

DICT_MAGIC = b"GMRFDICT"
_HEADER = struct.Struct("<8sQQQ")


@dataclass(frozen=True)
class AcquisitionParams:
    """Known acquisition schedule: per-excitation flip angles and TRs.

    Parameters
    ----------
    flip_angles : array_like
        Flip angle of each excitation, degrees, in [0, 180].
    repetition_times : array_like
        Time between excitation ``l`` and ``l + 1``, ms.
    inversion_time : float
        Delay between the inversion pulse and the first excitation, ms.
    echo_time : float
        Delay between an excitation and its readout, ms.
    spoiled : bool
        Destroy transverse magnetization after each readout.
    """

    flip_angles: np.ndarray
    repetition_times: np.ndarray
    inversion_time: float = 18.0
    echo_time: float = 2.0
    spoiled: bool = False

    def __post_init__(self):
        fa = np.asarray(self.flip_angles, dtype=float).ravel()
        tr = np.asarray(self.repetition_times, dtype=float).ravel()
        if fa.size < 1:
            raise ValueError("sequence length must be at least 1")
        if tr.size != fa.size:
            raise ValueError(
                f"{fa.size} flip angles but {tr.size} repetition times")
        if not (np.all(np.isfinite(fa)) and np.all(np.isfinite(tr))):
            raise ValueError("acquisition parameters must be finite")
        if np.any(fa < 0) or np.any(fa > 180):
            raise ValueError("flip angles must lie in [0, 180] degrees")
        if np.any(tr <= 0) or not self.inversion_time > 0 or not self.echo_time > 0:
            raise ValueError("all durations must be positive")
        object.__setattr__(self, "flip_angles", fa)
        object.__setattr__(self, "repetition_times", tr)
        object.__setattr__(self, "inversion_time", float(self.inversion_time))
        object.__setattr__(self, "echo_time", float(self.echo_time))

    @property
    def sequence_length(self) -> int:
        return self.flip_angles.size


@dataclass(frozen=True)
class TissueParams:
    """Relaxation times of one tissue, ms."""

    t1: float
    t2: float

    def __post_init__(self):
        t1, t2 = float(self.t1), float(self.t2)
        if not (np.isfinite(t1) and np.isfinite(t2)):
            raise ValueError("relaxation times must be finite")
        if t1 <= 0 or t2 <= 0:
            raise ValueError("relaxation times must be positive")
        if t2 > t1:
            raise ValueError(f"T2 ({t2}) exceeds T1 ({t1})")
        object.__setattr__(self, "t1", t1)
        object.__setattr__(self, "t2", t2)

    def as_array(self) -> np.ndarray:
        return np.array([self.t1, self.t2])


@dataclass(frozen=True)
class Dictionary:
    """Parameter rows ``params`` (D x 2) and their fingerprints ``atoms`` (D x L)."""

    params: np.ndarray
    atoms: np.ndarray
    atom_norms: np.ndarray = field(default=None)

    def __post_init__(self):
        params = np.atleast_2d(np.asarray(self.params, dtype=float))
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=complex))
        if params.shape[0] < 1:
            raise ValueError("a dictionary needs at least one atom")
        if params.shape[0] != atoms.shape[0]:
            raise ValueError("params and atoms disagree on D")
        norms = np.linalg.norm(atoms, axis=1)
        if np.any(norms <= 0):
            bad = params[np.flatnonzero(norms <= 0)[0]]
            raise ValueError(
                f"zero-norm fingerprint at (T1, T2) = {tuple(bad)}; "
                "the acquisition schedule is degenerate")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "atom_norms", norms)

    def __len__(self):
        return self.params.shape[0]

    @property
    def sequence_length(self) -> int:
        return self.atoms.shape[1]

    @cached_property
    def _real_parts(self):
        # Stacked real view used by correlation products; an all-zero
        # imaginary (or real) half is dropped.
        parts = []
        if np.any(self.atoms.real):
            parts.append(("real", np.ascontiguousarray(self.atoms.real.T)))
        if np.any(self.atoms.imag):
            parts.append(("imag", np.ascontiguousarray(self.atoms.imag.T)))
        return parts

    def real_correlation(self, m: np.ndarray) -> np.ndarray:
        """Return ``real(m @ atoms^H)`` for a block of rows ``m`` (n x L)."""
        m = np.atleast_2d(m)
        out = np.zeros((m.shape[0], len(self)))
        for kind, part in self._real_parts:
            # strided real/imag views would bypass BLAS
            out += np.ascontiguousarray(getattr(m, kind)) @ part
        return out

    def subset(self, index) -> "Dictionary":
        return Dictionary(self.params[index], self.atoms[index])

    def save(self, path) -> None:
        """Write the flat little-endian binary format."""
        save_dictionary(self, path)


def simulate_fingerprints(t1, t2, acq: AcquisitionParams) -> np.ndarray:
    """Simulate fingerprints for arrays of relaxation times.

    Parameters
    ----------
    t1, t2 : array_like
        Relaxation times in ms, broadcast to a common 1-D shape ``(D,)``.
    acq : AcquisitionParams

    Returns
    -------
    ndarray, shape (D, L), complex
        Transverse magnetization at each echo.
    """
    t1, t2 = np.broadcast_arrays(np.atleast_1d(np.asarray(t1, dtype=float)),
                                 np.atleast_1d(np.asarray(t2, dtype=float)))
    if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2))):
        raise ValueError("relaxation times must be finite")
    if np.any(t1 <= 0) or np.any(t2 <= 0):
        raise ValueError("relaxation times must be positive")

    alpha = np.deg2rad(acq.flip_angles)
    ca, sa = np.cos(alpha), np.sin(alpha)
    echo_decay = np.exp(-acq.echo_time / t2)
    waits = np.concatenate([[acq.inversion_time], acq.repetition_times[:-1]])

    out = np.empty((t1.size, acq.sequence_length))
    mx = np.zeros(t1.size)
    mz = -np.ones(t1.size)
    for l, wait in enumerate(waits):
        e1 = np.exp(-wait / t1)
        mx = mx * np.exp(-wait / t2)
        mz = mz * e1 + (1.0 - e1)
        mx, mz = mx * ca[l] + mz * sa[l], mz * ca[l] - mx * sa[l]
        out[:, l] = mx * echo_decay
        if acq.spoiled:
            mx = np.zeros_like(mx)
    return out.astype(complex)


def simulate_fingerprint(tissue: TissueParams, acq: AcquisitionParams) -> np.ndarray:
    """Fingerprint of a single tissue, shape (L,)."""
    return simulate_fingerprints(tissue.t1, tissue.t2, acq)[0]


def _as_param_array(params) -> np.ndarray:
    if isinstance(params, np.ndarray):
        arr = np.atleast_2d(params.astype(float))
    else:
        rows = [p.as_array() if isinstance(p, TissueParams) else p for p in params]
        arr = np.atleast_2d(np.asarray(rows, dtype=float))
    if arr.size == 0:
        raise ValueError("no parameters given")
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (D, 2) parameters, got {arr.shape}")
    return arr


def build_dictionary(params, acq: AcquisitionParams) -> Dictionary:
    """Simulate one fingerprint per parameter row.

    ``params`` is a sequence of :class:`TissueParams` or a (D, 2) array of
    (T1, T2) rows. Duplicate rows are rejected.
    """
    arr = _as_param_array(params)
    if np.unique(arr, axis=0).shape[0] != arr.shape[0]:
        raise ValueError("duplicate parameter rows")
    return Dictionary(arr, simulate_fingerprints(arr[:, 0], arr[:, 1], acq))


def parameter_grid(n_t1: int = 20, n_t2: int = 20, t1_range=T1_RANGE,
                   t2_range=T2_RANGE, log_t1: bool = False) -> np.ndarray:
    """All (T1, T2) combinations of two 1-D grids, T1-major, shape (n_t1*n_t2, 2)."""
    if log_t1:
        t1 = np.geomspace(*t1_range, n_t1)
    else:
        t1 = np.linspace(*t1_range, n_t1)
    t2 = np.linspace(*t2_range, n_t2)
    g1, g2 = np.meshgrid(t1, t2, indexing="ij")
    return np.column_stack([g1.ravel(), g2.ravel()])


def random_flip_angle_schedule(L: int, seed: int, low: float = 10.0,
                               high: float = 70.0, tr: float = 10.0,
                               inversion_time: float = 18.0,
                               echo_time: float = 2.0) -> AcquisitionParams:
    """I.i.d. uniform flip angles on [low, high] degrees with a fixed TR."""
    if L < 1:
        raise ValueError("sequence length must be at least 1")
    rng = np.random.default_rng(seed)
    return AcquisitionParams(
        flip_angles=rng.uniform(low, high, size=L),
        repetition_times=np.full(L, float(tr)),
        inversion_time=inversion_time,
        echo_time=echo_time,
    )


def save_dictionary(dictionary: Dictionary, path) -> None:
    D, L = dictionary.atoms.shape
    P = dictionary.params.shape[1]
    inter = np.empty((D, L, 2), dtype="<f8")
    inter[..., 0] = dictionary.atoms.real
    inter[..., 1] = dictionary.atoms.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DICT_MAGIC, D, L, P))
        fh.write(np.ascontiguousarray(dictionary.params, dtype="<f8").tobytes())
        fh.write(inter.tobytes())


def load_dictionary(path) -> Dictionary:
    raw = Path(path).read_bytes()
    magic, D, L, P = _HEADER.unpack_from(raw)
    if magic != DICT_MAGIC:
        raise ValueError(f"{path}: not a dictionary file")
    offset = _HEADER.size
    params = np.frombuffer(raw, dtype="<f8", count=D * P, offset=offset)
    offset += 8 * D * P
    inter = np.frombuffer(raw, dtype="<f8", count=2 * D * L, offset=offset)
    inter = inter.reshape(D, L, 2)
    return Dictionary(params.reshape(D, P).copy(), inter[..., 0] + 1j * inter[..., 1])


def cached_dictionary(params, acq: AcquisitionParams, path=None) -> Dictionary:
    """Build a dictionary, reusing ``path`` when it holds the same parameters."""
    arr = _as_param_array(params)
    if path is not None and Path(path).exists():
        d = load_dictionary(path)
        if (d.params.shape == arr.shape and np.array_equal(d.params, arr)
                and d.sequence_length == acq.sequence_length):
            # spot-check against the schedule; the file does not record it
            probe = [0, len(d) - 1]
            fresh = simulate_fingerprints(arr[probe, 0], arr[probe, 1], acq)
            if np.array_equal(fresh, d.atoms[probe]):
                return d
    d = build_dictionary(arr, acq)
    if path is not None:
        save_dictionary(d, path)
    return d


def unique_rows(rows: Iterable[Sequence[float]], decimals: int = 6) -> np.ndarray:
    """Drop rows equal after rounding to ``decimals``; keeps first occurrence order."""
    arr = np.atleast_2d(np.asarray(list(rows) if not isinstance(rows, np.ndarray) else rows,
                                   dtype=float))
    if arr.size == 0:
        return arr.reshape(0, 2)
    _, first = np.unique(np.round(arr, decimals), axis=0, return_index=True)
    return arr[np.sort(first)]
