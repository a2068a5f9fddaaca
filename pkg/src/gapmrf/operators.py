"""Undersampled multi-coil Fourier acquisition operator and its adjoint.

Images are flattened row-major, so a magnetization matrix ``M`` has shape
(N, L) with ``N = rows * cols``. Measurements ``Y`` have shape (Q, L, C).
The 2-D DFT is unitary (``norm="ortho"``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MEAS_MAGIC = b"GMRFMEAS"
_HEADER = struct.Struct("<8sQQQ")


@dataclass(frozen=True)
class SamplingScheme:
    """Per-frame k-space selections plus coil sensitivities.

    Attributes
    ----------
    image_dims : tuple of int
        (rows, cols).
    indices : ndarray, shape (L, Q)
        Sorted flat (row-major) k-space indices sampled in each frame.
    coil_maps : ndarray, shape (N, C)
        Complex per-voxel coil sensitivities.
    """

    image_dims: tuple
    indices: np.ndarray
    coil_maps: np.ndarray

    def __post_init__(self):
        rows, cols = (int(d) for d in self.image_dims)
        n = rows * cols
        idx = np.atleast_2d(np.asarray(self.indices, dtype=np.int64))
        idx = np.sort(idx, axis=1)
        if idx.shape[1] < 1 or np.any(idx < 0) or np.any(idx >= n):
            raise ValueError("k-space indices out of range")
        if np.any(np.diff(idx, axis=1) == 0):
            raise ValueError("a frame selects the same k-space point twice")
        coils = np.asarray(self.coil_maps, dtype=complex)
        if coils.ndim == 1:
            coils = coils[:, None]
        if coils.shape[0] != n or coils.shape[1] < 1:
            raise ValueError(f"coil maps must be ({n}, C), got {coils.shape}")
        object.__setattr__(self, "image_dims", (rows, cols))
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "coil_maps", coils)

    @classmethod
    def from_masks(cls, frame_masks, coil_maps=None):
        """Build from boolean masks of shape (L, rows, cols)."""
        masks = np.asarray(frame_masks, dtype=bool)
        L, rows, cols = masks.shape
        flat = masks.reshape(L, -1)
        counts = flat.sum(axis=1)
        if np.any(counts != counts[0]):
            raise ValueError("every frame must select the same number of points")
        indices = np.stack([np.flatnonzero(f) for f in flat])
        if coil_maps is None:
            coil_maps = np.ones((rows * cols, 1), dtype=complex)
        return cls((rows, cols), indices, coil_maps)

    @property
    def n_voxels(self) -> int:
        return self.image_dims[0] * self.image_dims[1]

    @property
    def n_frames(self) -> int:
        return self.indices.shape[0]

    @property
    def n_samples(self) -> int:
        """Q, the number of k-space samples per frame and coil."""
        return self.indices.shape[1]

    @property
    def n_coils(self) -> int:
        return self.coil_maps.shape[1]

    @property
    def frame_masks(self) -> np.ndarray:
        masks = np.zeros((self.n_frames, self.n_voxels), dtype=bool)
        np.put_along_axis(masks, self.indices, True, axis=1)
        return masks.reshape(self.n_frames, *self.image_dims)

    def covers_all_rows(self) -> bool:
        """True when the union of all frames touches every k-space row."""
        sampled_rows = np.unique(self.indices // self.image_dims[1])
        return sampled_rows.size == self.image_dims[0]


def make_epi_scheme(dims, undersampling: int, L: int, seed: int,
                    coil_maps=None) -> SamplingScheme:
    """Interleaved EPI row sampling.

    Frame ``l`` keeps the k-space rows congruent to ``perm[l % R]`` modulo
    ``R``, where ``perm`` is a seeded permutation of ``range(R)``. Any ``R``
    consecutive frames therefore cover every row exactly once.
    """
    rows, cols = (int(d) for d in dims)
    R = int(undersampling)
    if R < 1:
        raise ValueError("undersampling must be at least 1")
    if R > rows:
        raise ValueError(f"undersampling {R} exceeds the {rows} k-space rows")
    if rows % R:
        raise ValueError(f"{rows} rows are not divisible by undersampling {R}")
    perm = np.random.default_rng(seed).permutation(R)
    offsets = perm[np.arange(L) % R]
    row_idx = offsets[:, None] + R * np.arange(rows // R)[None, :]
    indices = (row_idx[:, :, None] * cols + np.arange(cols)).reshape(L, -1)
    if coil_maps is None:
        coil_maps = np.ones((rows * cols, 1), dtype=complex)
    return SamplingScheme((rows, cols), indices, coil_maps)


def _check_image(M, scheme):
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != scheme.n_voxels or M.shape[1] != scheme.n_frames:
        raise ValueError(
            f"expected magnetization of shape ({scheme.n_voxels}, {scheme.n_frames}), "
            f"got {M.shape}")
    return M


def forward(M, scheme: SamplingScheme) -> np.ndarray:
    """Apply h: coil weighting, unitary 2-D DFT, per-frame selection.

    Returns an array of shape (Q, L, C).
    """
    M = _check_image(M, scheme)
    rows, cols = scheme.image_dims
    L, C = scheme.n_frames, scheme.n_coils
    imgs = M.T[:, None, :] * scheme.coil_maps.T[None, :, :]          # (L, C, N)
    k = np.fft.fft2(imgs.reshape(L, C, rows, cols), norm="ortho").reshape(L, C, -1)
    sel = np.take_along_axis(k, scheme.indices[:, None, :], axis=2)  # (L, C, Q)
    return np.ascontiguousarray(sel.transpose(2, 0, 1))


def adjoint(Y, scheme: SamplingScheme) -> np.ndarray:
    """Apply h^H: zero-fill, inverse unitary DFT, conjugate coil combine."""
    Y = np.asarray(Y)
    Q, L, C = scheme.n_samples, scheme.n_frames, scheme.n_coils
    if Y.shape != (Q, L, C):
        raise ValueError(f"expected measurements of shape {(Q, L, C)}, got {Y.shape}")
    rows, cols = scheme.image_dims
    k = np.zeros((L, C, rows * cols), dtype=complex)
    np.put_along_axis(k, scheme.indices[:, None, :], Y.transpose(1, 2, 0), axis=2)
    imgs = np.fft.ifft2(k.reshape(L, C, rows, cols), norm="ortho").reshape(L, C, -1)
    out = np.einsum("lcn,nc->nl", imgs, scheme.coil_maps.conj())
    return out


def gradient(M, Y, scheme: SamplingScheme) -> np.ndarray:
    """h^H(h(M) - Y), the gradient of 0.5 * ||Y - h(M)||^2 in the Wirtinger sense.

    As a function of the real and imaginary parts, the real gradient of that
    energy is ``(g.real, g.imag)`` with ``g`` the returned array.
    """
    return adjoint(forward(M, scheme) - Y, scheme)


def noise_sigma(Y, isnr_db: float) -> float:
    """Noise standard deviation giving ``isnr_db`` for clean data ``Y``."""
    Y = np.asarray(Y)
    if np.isinf(isnr_db) and isnr_db > 0:
        return 0.0
    return float(np.linalg.norm(Y) / (np.sqrt(Y.size) * 10.0 ** (isnr_db / 20.0)))


def add_noise(Y, isnr_db: float, seed: int):
    """Add circular complex Gaussian noise at a target input SNR.

    Returns
    -------
    noisy : ndarray
    sigma : float
        Standard deviation of the complex noise entries (each real
        component has ``sigma / sqrt(2)``).
    """
    Y = np.asarray(Y, dtype=complex)
    if not np.all(np.isfinite(Y)):
        raise ValueError("measurements must be finite")
    sigma = noise_sigma(Y, isnr_db)
    if sigma == 0.0:
        return Y.copy(), 0.0
    rng = np.random.default_rng(seed)
    eta = rng.standard_normal(Y.shape + (2,)) * (sigma / np.sqrt(2.0))
    return Y + (eta[..., 0] + 1j * eta[..., 1]), sigma


def save_measurements(Y, path) -> None:
    Y = np.asarray(Y, dtype=complex)
    Q, L, C = Y.shape
    inter = np.empty(Y.shape + (2,), dtype="<f8")
    inter[..., 0] = Y.real
    inter[..., 1] = Y.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MEAS_MAGIC, Q, L, C))
        fh.write(inter.tobytes())


def load_measurements(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, Q, L, C = _HEADER.unpack_from(raw)
    if magic != MEAS_MAGIC:
        raise ValueError(f"{path}: not a measurement file")
    inter = np.frombuffer(raw, dtype="<f8", count=2 * Q * L * C, offset=_HEADER.size)
    inter = inter.reshape(Q, L, C, 2)
    return inter[..., 0] + 1j * inter[..., 1]
