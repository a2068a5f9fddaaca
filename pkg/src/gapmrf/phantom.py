"""Synthetic partial-volume phantom with a known mixing matrix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .fingerprint import AcquisitionParams, TissueParams, simulate_fingerprints


@dataclass(frozen=True)
class TissueSpec:
    name: str
    params: TissueParams
    density_range: tuple = (80.0, 400.0)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.density_range)
        if lo > hi:
            raise ValueError(f"{self.name}: density range is reversed")
        if lo < 80.0 or hi > 400.0:
            raise ValueError(f"{self.name}: densities must lie within [80, 400]")
        object.__setattr__(self, "density_range", (lo, hi))


def default_tissues() -> list:
    """Adipose, white matter, muscle, gray matter and CSF (T1, T2 in ms)."""
    return [
        TissueSpec("Adipose", TissueParams(530.0, 77.0), (80.0, 160.0)),
        TissueSpec("White Matter", TissueParams(811.0, 77.0), (160.0, 240.0)),
        TissueSpec("Muscle", TissueParams(1425.0, 41.0), (120.0, 200.0)),
        TissueSpec("Gray Matter", TissueParams(1545.0, 83.0), (200.0, 280.0)),
        TissueSpec("CSF", TissueParams(5012.0, 512.0), (300.0, 400.0)),
    ]


class Region(NamedTuple):
    """Elliptical annulus (optionally an angular wedge of it) filled with one tissue.

    Radii are in units of the phantom's outer ellipse; angles in degrees.
    """

    tissue: int
    r_in: float
    r_out: float
    angles: Optional[tuple] = None


# Painted in order; later regions overwrite earlier ones.
DEFAULT_LAYOUT = (
    Region(0, 0.80, 1.00),             # adipose shell
    Region(3, 0.60, 0.80),             # gray matter
    Region(1, 0.40, 0.60),             # white matter
    Region(3, 0.28, 0.40),             # inner gray matter
    Region(4, 0.00, 0.28),             # CSF core
    Region(2, 0.40, 0.80, (-28.0, 28.0)),  # muscle wedge
)


def nested_layout(n_tissues: int) -> tuple:
    """Equal-width nested annuli, tissue 0 outermost."""
    edges = np.linspace(1.0, 0.0, n_tissues + 1)
    return tuple(Region(t, float(edges[t + 1]), float(edges[t])) for t in range(n_tissues))


@dataclass(frozen=True)
class GroundTruth:
    """Known mixing matrix (N x T) of proton densities plus voxel classes."""

    mixing: np.ndarray
    tissues: tuple
    dims: tuple
    pure_mask: np.ndarray = None
    pv_mask: np.ndarray = None

    def __post_init__(self):
        mixing = np.asarray(self.mixing, dtype=float)
        if mixing.ndim != 2 or mixing.shape[1] != len(self.tissues):
            raise ValueError("mixing must be (N, T) with one column per tissue")
        if mixing.shape[0] != int(np.prod(self.dims)):
            raise ValueError("mixing rows do not match dims")
        if np.any(mixing < 0):
            raise ValueError("proton densities must be non-negative")
        nnz = np.count_nonzero(mixing, axis=1)
        object.__setattr__(self, "mixing", mixing)
        object.__setattr__(self, "tissues", tuple(self.tissues))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "pure_mask", nnz == 1)
        object.__setattr__(self, "pv_mask", nnz >= 2)

    @property
    def params(self) -> np.ndarray:
        return np.array([t.params.as_array() for t in self.tissues])

    @property
    def names(self) -> list:
        return [t.name for t in self.tissues]


def label_image(dims, layout: Sequence[Region]) -> np.ndarray:
    """Integer label image, -1 for background."""
    rows, cols = dims
    y = (np.arange(rows) + 0.5) / rows * 2.0 - 1.0
    x = (np.arange(cols) + 0.5) / cols * 2.0 - 1.0
    yy, xx = np.meshgrid(y, x, indexing="ij")
    r = np.hypot(xx / 0.95, yy / 0.85)
    ang = np.degrees(np.arctan2(yy, xx))
    labels = np.full((rows, cols), -1, dtype=int)
    for reg in layout:
        sel = (r >= reg.r_in) & (r < reg.r_out) if reg.r_in > 0 else (r < reg.r_out)
        if reg.angles is not None:
            sel &= (ang >= reg.angles[0]) & (ang <= reg.angles[1])
        labels[sel] = reg.tissue
    return labels


def block_average(labels: np.ndarray, density: np.ndarray, n_tissues: int) -> np.ndarray:
    """Average per-tissue densities over non-overlapping 2x2 blocks.

    Returns the (rows/2 * cols/2, T) low-resolution mixing matrix.
    """
    rows, cols = labels.shape
    if rows % 2 or cols % 2:
        raise ValueError(f"phantom dims must be even, got {labels.shape}")
    per_tissue = np.zeros((n_tissues, rows, cols))
    for t in range(n_tissues):
        per_tissue[t] = np.where(labels == t, density, 0.0)
    blocks = per_tissue.reshape(n_tissues, rows // 2, 2, cols // 2, 2).mean(axis=(2, 4))
    return blocks.reshape(n_tissues, -1).T


def make_pv_phantom(dims=(256, 256), tissues=None, seed: int = 0,
                    layout=None) -> GroundTruth:
    """Partial-volume phantom at ``dims``.

    A label image is drawn at ``dims``, per-voxel densities are drawn
    uniformly from each tissue's range, 2x2 blocks are averaged and the
    result is replicated back to ``dims``.
    """
    rows, cols = (int(d) for d in dims)
    if rows % 2 or cols % 2:
        raise ValueError(f"phantom dims must be even, got {(rows, cols)}")
    if tissues is None:
        tissues = default_tissues()
        layout = DEFAULT_LAYOUT if layout is None else layout
    layout = nested_layout(len(tissues)) if layout is None else layout
    if any(reg.tissue >= len(tissues) for reg in layout):
        raise ValueError("layout references an unknown tissue")

    rng = np.random.default_rng(seed)
    labels = label_image((rows, cols), layout)
    lo = np.array([t.density_range[0] for t in tissues])
    hi = np.array([t.density_range[1] for t in tissues])
    u = rng.uniform(size=(rows, cols))
    safe = np.clip(labels, 0, None)
    density = np.where(labels >= 0, lo[safe] + u * (hi[safe] - lo[safe]), 0.0)

    low = block_average(labels, density, len(tissues))
    low = low.reshape(rows // 2, cols // 2, -1)
    full = np.repeat(np.repeat(low, 2, axis=0), 2, axis=1).reshape(rows * cols, -1)
    return GroundTruth(full, tuple(tissues), (rows, cols))


def render_magnetization(gt: GroundTruth, acq: AcquisitionParams) -> np.ndarray:
    """M = U @ fingerprints of the ground-truth tissues, shape (N, L)."""
    p = gt.params
    return gt.mixing @ simulate_fingerprints(p[:, 0], p[:, 1], acq)


def write_ground_truth(gt: GroundTruth, outdir) -> None:
    """CSV of per-voxel tissue densities plus PGM masks."""
    from .io import write_pgm, write_table

    from pathlib import Path
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    header = ["voxel", "row", "col"] + [t.name for t in gt.tissues]
    rows, cols = gt.dims
    n = np.arange(rows * cols)
    records = [[int(i), int(i // cols), int(i % cols)] + list(gt.mixing[i]) for i in n]
    write_table(outdir / "mixing.csv", header, records)
    write_table(outdir / "tissues.csv", ["name", "t1", "t2", "density_min", "density_max"],
                [[t.name, t.params.t1, t.params.t2, *t.density_range] for t in gt.tissues])
    write_pgm(outdir / "pure_mask.pgm", gt.pure_mask.reshape(gt.dims) * 255.0, 0.0, 255.0)
    write_pgm(outdir / "pv_mask.pgm", gt.pv_mask.reshape(gt.dims) * 255.0, 0.0, 255.0)


def read_ground_truth(indir) -> GroundTruth:
    from pathlib import Path
    from .io import read_table

    indir = Path(indir)
    header, records = read_table(indir / "mixing.csv")
    _, trecs = read_table(indir / "tissues.csv")
    tissues = [TissueSpec(r[0], TissueParams(float(r[1]), float(r[2])),
                          (float(r[3]), float(r[4]))) for r in trecs]
    arr = np.array([[float(v) for v in r] for r in records])
    rows = int(arr[:, 1].max()) + 1
    cols = int(arr[:, 2].max()) + 1
    return GroundTruth(arr[:, 3:], tuple(tissues), (rows, cols))
