"""Cubical persistent homology of phase masks and persistence images.

Pipeline per (phase, degree) channel: phase mask -> signed distance field
-> T-construction cubical complex -> persistence diagram -> image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import ndtr

from . import _kernels
from .errors import InvalidArgument, OracleTooLarge
from .grid import PHASES, PhaseGrid, phase_mask

DEGREES = (0, 1, 2)
CHANNELS = tuple((phase, k) for phase in PHASES for k in DEGREES)


@dataclass(frozen=True, eq=False)
class FiltrationField:
    values: np.ndarray
    degenerate: bool = False  # mask was empty or full


@dataclass(frozen=True, eq=False)
class CubicalComplex:
    """Cell values on the (2nz+1, 2ny+1, 2nx+1) cell lattice.

    A cell's dimension is the number of odd coordinates; voxels sit at
    all-odd positions.
    """

    values: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.values.size

    def dimensions(self) -> np.ndarray:
        idx = np.indices(self.values.shape, sparse=True)
        return ((idx[0] & 1) + (idx[1] & 1) + (idx[2] & 1)).astype(np.int8)

    def filtration_order(self) -> np.ndarray:
        vals = self.values.ravel()
        dims = np.broadcast_to(self.dimensions(), self.values.shape).ravel()
        return np.lexsort((np.arange(vals.size), dims, vals)).astype(np.int64)


@dataclass(frozen=True, eq=False)
class PersistenceDiagram:
    k: int
    pairs: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.float64).reshape(-1, 2)
        if len(p):
            p = p[np.lexsort((p[:, 1], p[:, 0]))]
        object.__setattr__(self, "pairs", p)

    def __len__(self):
        return len(self.pairs)

    @property
    def births(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def persistence(self) -> np.ndarray:
        return self.pairs[:, 1] - self.pairs[:, 0]

    def scaled(self, factor: float) -> "PersistenceDiagram":
        return PersistenceDiagram(self.k, self.pairs * factor)

    def __eq__(self, other):
        if not isinstance(other, PersistenceDiagram):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.pairs, other.pairs)

    def __add__(self, other: "PersistenceDiagram") -> "PersistenceDiagram":
        if self.k != other.k:
            raise InvalidArgument("cannot merge diagrams of different degree")
        return PersistenceDiagram(self.k, np.vstack([self.pairs, other.pairs]))


def signed_distance_filtration(mask: np.ndarray) -> FiltrationField:
    """-EDT inside the phase, +EDT outside, in voxel units.

    An empty or full mask has no boundary to measure from; a constant
    field of the single available sign is returned and flagged.
    """
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    n_in = int(m.sum())
    if n_in == 0:
        return FiltrationField(np.ones(m.shape), degenerate=True)
    if n_in == m.size:
        return FiltrationField(-np.ones(m.shape), degenerate=True)
    inside = np.sqrt(_kernels.sq_edt(m))
    outside = np.sqrt(_kernels.sq_edt(1 - m))
    return FiltrationField(np.where(m.astype(bool), -inside, outside))


def build_complex(f: FiltrationField | np.ndarray) -> CubicalComplex:
    """Voxels are top cells; every lower cell takes the minimum over its
    incident voxels."""
    vals = f.values if isinstance(f, FiltrationField) else np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise InvalidArgument("filtration values must be finite")
    shape = tuple(2 * s + 1 for s in vals.shape)
    lattice = np.full(shape, np.inf)
    lattice[1::2, 1::2, 1::2] = vals
    cells = ndimage.minimum_filter(lattice, size=3, mode="constant", cval=np.inf)
    return CubicalComplex(cells)


def _diagrams_from_pairs(c: CubicalComplex, pairs) -> tuple:
    vals = c.values.ravel()
    out = []
    for k, p in enumerate(pairs):
        b, d = vals[p[:, 0]], vals[p[:, 1]]
        keep = d > b
        out.append(PersistenceDiagram(k, np.column_stack([b[keep], d[keep]])))
    return tuple(out)


def compute_persistence(c: CubicalComplex) -> tuple:
    """Finite diagrams for degrees 0, 1, 2.

    Degree 0 and degree 2 are paired by union-find (the latter on the dual
    graph, processed in reverse); degree 1 by column reduction of the face
    boundary matrix with every degree-2 creator cleared beforehand.
    """
    pairs = _kernels.cubical_pairs(c.values.shape, c.filtration_order())
    return _diagrams_from_pairs(c, pairs)


def brute_force_persistence(c: CubicalComplex, max_cells: int = 20_000) -> tuple:
    """Plain left-to-right Z/2 reduction of the full boundary matrix.

    Test oracle only: no clearing, no union-find, and a different tie-break
    in the cell order than :func:`compute_persistence`.
    """
    if c.n_cells > max_cells:
        raise OracleTooLarge(f"{c.n_cells} cells exceeds oracle limit {max_cells}")
    shape = c.values.shape
    vals = c.values.ravel().tolist()
    dims = np.broadcast_to(c.dimensions(), shape).ravel().tolist()
    n = len(vals)
    order = sorted(range(n), key=lambda i: (vals[i], dims[i], -i))
    pos = [0] * n
    for r, cell in enumerate(order):
        pos[cell] = r
    strides = (shape[1] * shape[2], shape[2], 1)

    columns = []
    for cell in order:
        coords = np.unravel_index(cell, shape)
        bits = 0
        for ax in range(3):
            if coords[ax] & 1:
                bits |= 1 << pos[cell - strides[ax]]
                bits |= 1 << pos[cell + strides[ax]]
        columns.append(bits)

    low_owner = {}
    pairs = {0: [], 1: [], 2: []}
    for j in range(n):
        col = columns[j]
        while col:
            low = col.bit_length() - 1
            if low not in low_owner:
                break
            col ^= columns[low_owner[low]]
        columns[j] = col
        if col:
            low = col.bit_length() - 1
            low_owner[low] = j
            birth, death = order[low], order[j]
            if dims[birth] <= 2:
                pairs[dims[birth]].append((vals[birth], vals[death]))
    return tuple(
        PersistenceDiagram(k, [(b, d) for b, d in pairs[k] if d > b]) for k in DEGREES
    )


def diagrams_for_mask(mask: np.ndarray) -> tuple:
    return compute_persistence(build_complex(signed_distance_filtration(mask)))


def grid_diagrams(g: PhaseGrid, physical: bool = True) -> dict:
    """All nine diagrams of a grid keyed by (phase, k).

    With ``physical`` the filtration values are converted from voxel units
    to micrometres.
    """
    scale = g.voxel_size if physical else 1.0
    out = {}
    for phase in PHASES:
        for dgm in diagrams_for_mask(phase_mask(g, phase)):
            out[(phase, dgm.k)] = dgm.scaled(scale)
    return out


# --------------------------------------------------------------- images

def weight(b, p, C: float, gamma: float):
    """arctan(C * p**gamma); independent of the birth coordinate."""
    del b
    return np.arctan(C * np.power(p, gamma))


@dataclass
class PiConfig:
    C: float = 10.0
    gamma: int = 1
    sigma: float = 1e-2
    resolution: int = 32
    birth_range: tuple = (-1.0, 1.0)
    pers_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if not self.C > 0:
            raise InvalidArgument("C must be positive")
        if int(self.gamma) != self.gamma or self.gamma < 1:
            raise InvalidArgument("gamma must be a positive integer")
        if not self.sigma > 0:
            raise InvalidArgument("sigma must be positive")
        if int(self.resolution) != self.resolution or self.resolution < 1:
            raise InvalidArgument("resolution must be a positive integer")
        for lo, hi in (self.birth_range, self.pers_range):
            if not hi > lo:
                raise InvalidArgument("image ranges must be non-degenerate")
        self.gamma = int(self.gamma)
        self.resolution = int(self.resolution)
        self.birth_range = tuple(float(v) for v in self.birth_range)
        self.pers_range = tuple(float(v) for v in self.pers_range)

    def with_ranges(self, birth_range, pers_range) -> "PiConfig":
        return PiConfig(self.C, self.gamma, self.sigma, self.resolution, birth_range, pers_range)

    def to_json(self) -> dict:
        return {"C": self.C, "gamma": self.gamma, "sigma": self.sigma,
                "resolution": self.resolution, "birth_range": list(self.birth_range),
                "pers_range": list(self.pers_range)}


def surface_value(d: PersistenceDiagram, x, y, cfg: PiConfig):
    """Weighted Gaussian mixture in the (birth, persistence) plane."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    s2 = cfg.sigma ** 2
    for b, p in zip(d.births, d.persistence):
        w = weight(b, p, cfg.C, cfg.gamma)
        out = out + w * np.exp(-((x - b) ** 2 + (y - p) ** 2) / (2 * s2)) / (2 * math.pi * s2)
    return out


def pixel_edges(cfg: PiConfig) -> tuple[np.ndarray, np.ndarray]:
    return (np.linspace(*cfg.birth_range, cfg.resolution + 1),
            np.linspace(*cfg.pers_range, cfg.resolution + 1))


def persistence_image(d: PersistenceDiagram, cfg: PiConfig) -> np.ndarray:
    """Exact cell integrals of the persistence surface.

    The Gaussian is separable, so each pair contributes an outer product of
    normal-CDF differences. ``image[i, j]`` covers birth bin ``i`` and
    persistence bin ``j``.
    """
    res = cfg.resolution
    if len(d) == 0:
        return np.zeros((res, res))
    bx, py = pixel_edges(cfg)
    b = d.births
    p = d.persistence
    w = weight(b, p, cfg.C, cfg.gamma)
    cdf_b = ndtr((bx[None, :] - b[:, None]) / cfg.sigma)
    cdf_p = ndtr((py[None, :] - p[:, None]) / cfg.sigma)
    mass_b = np.diff(cdf_b, axis=1) * w[:, None]
    mass_p = np.diff(cdf_p, axis=1)
    return mass_b.T @ mass_p


def fit_channel_ranges(diagram_sets, sigma: float) -> np.ndarray:
    """Per-channel [min - 2 sigma, max + 2 sigma] of births and persistences.

    ``diagram_sets`` is an iterable of dicts keyed like :data:`CHANNELS`
    (normally the training split only). Returns a (9, 4) array of
    (birth_lo, birth_hi, pers_lo, pers_hi).
    """
    lo_b = np.full(len(CHANNELS), np.inf)
    hi_b = np.full(len(CHANNELS), -np.inf)
    lo_p = np.full(len(CHANNELS), np.inf)
    hi_p = np.full(len(CHANNELS), -np.inf)
    for diags in diagram_sets:
        for c, key in enumerate(CHANNELS):
            d = diags[key]
            if len(d) == 0:
                continue
            lo_b[c] = min(lo_b[c], d.births.min())
            hi_b[c] = max(hi_b[c], d.births.max())
            lo_p[c] = min(lo_p[c], d.persistence.min())
            hi_p[c] = max(hi_p[c], d.persistence.max())
    out = np.empty((len(CHANNELS), 4))
    for c in range(len(CHANNELS)):
        if not np.isfinite(lo_b[c]):
            # channel never populated in training: any fixed window will do
            out[c] = (-2 * sigma, 2 * sigma, -2 * sigma, 2 * sigma)
        else:
            out[c] = (lo_b[c] - 2 * sigma, hi_b[c] + 2 * sigma,
                      lo_p[c] - 2 * sigma, hi_p[c] + 2 * sigma)
    return out


def images_from_diagrams(diags: dict, cfg: PiConfig, ranges=None) -> np.ndarray:
    res = cfg.resolution
    out = np.empty((len(CHANNELS), res, res))
    for c, key in enumerate(CHANNELS):
        ch_cfg = cfg if ranges is None else cfg.with_ranges(ranges[c, :2], ranges[c, 2:])
        out[c] = persistence_image(diags[key], ch_cfg)
    return out


def featurize(g: PhaseGrid, cfg: PiConfig, ranges=None) -> np.ndarray:
    """Nine persistence images, channel order (Ni, Ysz, Pore) x (k=0, 1, 2)."""
    return images_from_diagrams(grid_diagrams(g), cfg, ranges)
