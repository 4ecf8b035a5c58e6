"""Ground-truth microstructure descriptors.

Grain sizes (EDT + watershed), percolation, triple-phase-boundary length
density (total and active) and tortuosity factors per phase.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage, sparse

from . import _kernels
from .errors import InvalidArgument, UndefinedDescriptor
from .grid import PhaseGrid, PhaseLabel, phase_mask, volume_fractions

AXES = {"z": 0, "y": 1, "x": 2}
CSV_COLUMNS = ("sample_id", "d_ni", "d_ysz", "d_pore", "l_tpb", "l_tpb_active",
               "tau_ni", "tau_ysz", "tau_pore", "vf_ni", "vf_ysz", "vf_pore")
TARGETS = CSV_COLUMNS[1:9]


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis]
        except KeyError:
            raise InvalidArgument(f"unknown axis {axis!r}") from None
    if axis not in (0, 1, 2):
        raise InvalidArgument(f"unknown axis {axis!r}")
    return int(axis)


def distance_transform(mask: np.ndarray, voxel_size: float = 1.0) -> np.ndarray:
    """Exact Euclidean distance from each in-mask voxel centre to the nearest
    out-of-mask voxel centre (0 outside the mask)."""
    sq = _kernels.sq_edt(np.ascontiguousarray(mask, dtype=np.uint8))
    return np.sqrt(sq) * voxel_size


# ------------------------------------------------------------ percolation

@dataclass(frozen=True, eq=False)
class PercolationMap:
    labels: np.ndarray       # 0 outside the mask, 1..n component ids
    percolated: np.ndarray   # bool per component id, index 0 unused

    @property
    def n_components(self) -> int:
        return len(self.percolated) - 1

    def voxel_percolated(self) -> np.ndarray:
        return self.percolated[self.labels]


def _face_labels(labels: np.ndarray) -> np.ndarray:
    return np.concatenate([
        labels[0].ravel(), labels[-1].ravel(),
        labels[:, 0].ravel(), labels[:, -1].ravel(),
        labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
    ])


def percolation(mask: np.ndarray) -> PercolationMap:
    labels, n = _kernels.label6(np.ascontiguousarray(mask, dtype=np.uint8))
    perc = np.zeros(n + 1, dtype=bool)
    perc[_face_labels(labels)] = True
    perc[0] = False
    return PercolationMap(labels, perc)


# -------------------------------------------------------------- watershed

@dataclass(frozen=True, eq=False)
class LabeledGrid:
    labels: np.ndarray
    n_grains: int


_OFFSETS26 = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)
              if (a, b, c) != (0, 0, 0)]


def _shifted(arr: np.ndarray, off, fill) -> np.ndarray:
    """``out[i] = arr[i + off]`` with ``fill`` beyond the border."""
    out = np.full_like(arr, fill)
    src, dst = [], []
    for o, n in zip(off, arr.shape):
        src.append(slice(max(o, 0), n + min(o, 0)))
        dst.append(slice(max(-o, 0), n - max(o, 0)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def plateau_maxima(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 26-connected plateaus of ``values`` (within ``mask``) that have
    no strictly larger 26-neighbour. One marker per plateau."""
    m = mask.astype(bool)
    v = np.where(m, values, -np.inf)
    cand = m & (v == ndimage.maximum_filter(v, size=3, mode="constant", cval=-np.inf))
    lab, n = ndimage.label(cand, structure=np.ones((3, 3, 3)))
    if n == 0:
        return lab.astype(np.int32), 0
    # a candidate touching an equal-valued non-candidate sits on a plateau
    # that has a higher neighbour somewhere
    non_cand = m & ~cand
    spoiled = np.zeros_like(cand)
    for off in _OFFSETS26:
        spoiled |= cand & _shifted(non_cand, off, False) & (_shifted(v, off, np.nan) == v)
    good = np.ones(n + 1, dtype=bool)
    good[np.unique(lab[spoiled])] = False
    good[0] = False
    relabel = np.zeros(n + 1, dtype=np.int32)
    relabel[good] = np.arange(1, good.sum() + 1, dtype=np.int32)
    return relabel[lab], int(good.sum())


def watershed_grains(mask: np.ndarray, voxel_size: float = 1.0) -> LabeledGrid:
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    if not m.any():
        return LabeledGrid(np.zeros(m.shape, dtype=np.int32), 0)
    # squared distances are exact integers: ties compare exactly
    sq = _kernels.sq_edt(m)
    sq[np.isinf(sq)] = np.finfo(float).max
    markers, n = plateau_maxima(sq, m)
    labels = _kernels.flood(sq, np.ascontiguousarray(markers, dtype=np.int32), m)
    return LabeledGrid(labels, n)


def mean_equivalent_diameter(lab: LabeledGrid, voxel_size: float) -> float:
    if lab.n_grains == 0:
        raise UndefinedDescriptor("no grains")
    counts = np.bincount(lab.labels.ravel(), minlength=lab.n_grains + 1)[1:]
    vol = counts * voxel_size ** 3
    return float(np.mean(np.cbrt(6.0 * vol / math.pi)))


# ---------------------------------------------------------- surface & TPB

@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    vertex_ids: np.ndarray   # sorted lattice ids in the (nz+1, ny+1, nx+1) vertex lattice
    positions: np.ndarray    # (nv, 3) x, y, z in micrometres
    fixed: np.ndarray        # vertex lies on the domain boundary
    quads: np.ndarray        # (nq, 4) indices into vertex_ids
    edges: np.ndarray        # (ne, 2) unique mesh edges

    def index_of(self, lattice_ids: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.vertex_ids, lattice_ids)
        if len(lattice_ids) and (idx.max() >= len(self.vertex_ids)
                                 or not np.array_equal(self.vertex_ids[idx], lattice_ids)):
            raise InvalidArgument("lattice vertex not present in the mesh")
        return idx


@dataclass(frozen=True, eq=False)
class TpbNetwork:
    segments: np.ndarray  # (m, 2) lattice vertex ids
    active: np.ndarray    # (m,) bool


def _lattice(shape):
    nz, ny, nx = shape
    return (nz + 1, ny + 1, nx + 1)


def _vertex_positions(ids, shape, voxel_size):
    z, y, x = np.unravel_index(ids, _lattice(shape))
    pos = np.column_stack([x, y, z]).astype(np.float64) * voxel_size
    nz, ny, nx = shape
    fixed = (x == 0) | (x == nx) | (y == 0) | (y == ny) | (z == 0) | (z == nz)
    return pos, fixed


def extract_surface(g: PhaseGrid) -> SurfaceMesh:
    """One quad per face shared by two voxels of different phases."""
    d = g.data
    lat = _lattice(g.shape)
    quads = []
    for ax in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[ax] = slice(0, -1)
        b[ax] = slice(1, None)
        diff = d[tuple(a)] != d[tuple(b)]
        pos = np.argwhere(diff)
        if not len(pos):
            continue
        base = pos.copy()
        base[:, ax] += 1  # the face lies on the upper plane of the first voxel
        u, v = [k for k in range(3) if k != ax]
        corners = []
        for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
            c = base.copy()
            c[:, u] += du
            c[:, v] += dv
            corners.append(np.ravel_multi_index(c.T, lat))
        quads.append(np.column_stack(corners))
    if not quads:
        empty = np.empty((0,), dtype=np.int64)
        return SurfaceMesh(empty, np.empty((0, 3)), np.empty(0, dtype=bool),
                           np.empty((0, 4), dtype=np.int64), np.empty((0, 2), dtype=np.int64))
    q = np.vstack(quads)
    ids, local = np.unique(q, return_inverse=True)
    local = local.reshape(q.shape)
    e = np.vstack([local[:, [i, (i + 1) % 4]] for i in range(4)])
    e.sort(axis=1)
    e = np.unique(e, axis=0)
    pos, fixed = _vertex_positions(ids, g.shape, g.voxel_size)
    return SurfaceMesh(ids, pos, fixed, local, e)


def extract_tpb(g: PhaseGrid, maps: dict) -> TpbNetwork:
    """Grid edges whose (up to four) incident voxels cover all three phases.

    ``maps`` holds a :class:`PercolationMap` per phase; a segment is active
    when every incident voxel sits in a percolated component.
    """
    d = g.data
    nz, ny, nx = d.shape
    perc = np.zeros(d.shape, dtype=bool)
    for phase in PhaseLabel:
        pm = maps[phase]
        sel = d == int(phase)
        perc[sel] = pm.voxel_percolated()[sel]
    padded = np.pad(d, 1, constant_values=255)
    ppad = np.pad(perc, 1, constant_values=True)
    lat = _lattice(d.shape)
    segs, act = [], []
    for ax in range(3):
        u, v = [k for k in range(3) if k != ax]
        n_ax = d.shape[ax]
        views, pviews = [], []
        for du in (0, 1):
            for dv in (0, 1):
                sl = [None] * 3
                sl[ax] = slice(1, n_ax + 1)
                sl[u] = slice(du, du + d.shape[u] + 1)
                sl[v] = slice(dv, dv + d.shape[v] + 1)
                views.append(padded[tuple(sl)])
                pviews.append(ppad[tuple(sl)])
        has = [np.zeros(views[0].shape, dtype=bool) for _ in range(3)]
        for vw in views:
            for p in range(3):
                has[p] |= vw == p
        tpb = has[0] & has[1] & has[2]
        pos = np.argwhere(tpb)
        if not len(pos):
            continue
        active = np.logical_and.reduce([pv[tpb] for pv in pviews])
        end = pos.copy()
        end[:, ax] += 1
        segs.append(np.column_stack([np.ravel_multi_index(pos.T, lat),
                                     np.ravel_multi_index(end.T, lat)]))
        act.append(active)
    if not segs:
        return TpbNetwork(np.empty((0, 2), dtype=np.int64), np.empty(0, dtype=bool))
    return TpbNetwork(np.vstack(segs), np.concatenate(act))


def _neighbour_mean(n: int, edges: np.ndarray, pos: np.ndarray):
    if len(edges) == 0:
        return pos.copy(), np.zeros(n)
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    summed = adj @ pos
    mean = np.where(deg[:, None] > 0, summed / np.maximum(deg, 1)[:, None], pos)
    return mean, deg


def laplacian_smooth(mesh: SurfaceMesh, tpb: TpbNetwork,
                     surface_iterations: int = 2, surface_relaxation: float = 0.4,
                     tpb_iterations: int = 1, tpb_relaxation: float = 0.5) -> np.ndarray:
    """Smoothed vertex positions (same indexing as ``mesh.positions``).

    Surface pass: mesh-edge neighbours, every free vertex except TPB
    vertices. TPB pass: polyline neighbours only. Boundary vertices are
    fixed throughout.
    """
    pos = mesh.positions.copy()
    n = len(pos)
    seg = mesh.index_of(tpb.segments.ravel()).reshape(-1, 2) if len(tpb.segments) else \
        np.empty((0, 2), dtype=np.int64)
    on_tpb = np.zeros(n, dtype=bool)
    on_tpb[seg.ravel()] = True

    free = ~mesh.fixed & ~on_tpb
    for _ in range(surface_iterations):
        mean, deg = _neighbour_mean(n, mesh.edges, pos)
        move = free & (deg > 0)
        pos[move] += surface_relaxation * (mean[move] - pos[move])

    free = ~mesh.fixed & on_tpb
    for _ in range(tpb_iterations):
        mean, deg = _neighbour_mean(n, seg, pos)
        move = free & (deg > 0)
        pos[move] += tpb_relaxation * (mean[move] - pos[move])
    return pos


def segment_lengths(mesh: SurfaceMesh, tpb: TpbNetwork, positions: np.ndarray) -> np.ndarray:
    if not len(tpb.segments):
        return np.empty(0)
    seg = mesh.index_of(tpb.segments.ravel()).reshape(-1, 2)
    return np.linalg.norm(positions[seg[:, 1]] - positions[seg[:, 0]], axis=1)


def tpb_length_density(g: PhaseGrid, maps: dict | None = None) -> tuple[float, float]:
    """(total, active) smoothed TPB length per unit volume, in um^-2."""
    if maps is None:
        maps = {p: percolation(phase_mask(g, p)) for p in PhaseLabel}
    tpb = extract_tpb(g, maps)
    if not len(tpb.segments):
        return 0.0, 0.0
    mesh = extract_surface(g)
    lengths = segment_lengths(mesh, tpb, laplacian_smooth(mesh, tpb))
    volume = g.data.size * g.voxel_size ** 3
    return float(lengths.sum() / volume), float(lengths[tpb.active].sum() / volume)


# ------------------------------------------------------------- tortuosity

@dataclass(frozen=True)
class DiffusionResult:
    tau: float
    d_eff: float
    porosity: float
    flux_in: float
    flux_out: float
    iterations: int

    @property
    def flux_mismatch(self) -> float:
        return abs(self.flux_in - self.flux_out) / abs(self.flux_in)


@dataclass(frozen=True, eq=False)
class DiffusionSystem:
    matrix: sparse.csr_matrix
    rhs: np.ndarray
    index: np.ndarray        # unknown id per voxel, -1 when excluded
    inlet_g: np.ndarray      # Dirichlet conductance to c=1 per unknown
    outlet_g: np.ndarray     # Dirichlet conductance to c=0 per unknown
    voxel_size: float


def assemble_diffusion(mask: np.ndarray, axis, voxel_size: float) -> DiffusionSystem:
    """Finite-volume 6-point system for steady diffusion through ``mask``.

    Unit intrinsic diffusivity; c=1 on the inlet face and c=0 on the outlet
    face, half a voxel from the first/last voxel centres; no flux elsewhere.
    Components touching neither face are dropped (they carry no flux and
    would make the system singular). Raises UndefinedDescriptor when no
    component spans the two faces.
    """
    ax = _axis_index(axis)
    m = np.moveaxis(np.asarray(mask, dtype=bool), ax, 0)
    pm = percolation(m)
    lab = pm.labels
    at_in = np.unique(lab[0][lab[0] > 0])
    at_out = np.unique(lab[-1][lab[-1] > 0])
    if not len(np.intersect1d(at_in, at_out)):
        raise UndefinedDescriptor("phase does not percolate along the transport axis")
    keep = np.zeros(pm.n_components + 1, dtype=bool)
    keep[at_in] = True
    keep[at_out] = True
    active = keep[lab]
    index = np.full(m.shape, -1, dtype=np.int64)
    n = int(active.sum())
    index[active] = np.arange(n)

    a = voxel_size
    rows, cols = [], []
    for k in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[k] = slice(0, -1)
        hi[k] = slice(1, None)
        i0, i1 = index[tuple(lo)], index[tuple(hi)]
        both = (i0 >= 0) & (i1 >= 0)
        rows.append(i0[both])
        cols.append(i1[both])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    gface = a  # D * area / distance = a^2 / a
    inlet_g = np.zeros(n)
    outlet_g = np.zeros(n)
    inlet_g[index[0][index[0] >= 0]] = 2 * a
    outlet_g[index[-1][index[-1] >= 0]] += 2 * a
    diag = np.bincount(r, minlength=n) * gface + np.bincount(c, minlength=n) * gface
    diag = diag + inlet_g + outlet_g
    off = sparse.coo_matrix((np.full(len(r), -gface), (r, c)), shape=(n, n))
    mat = (off + off.T + sparse.diags(diag)).tocsr()
    return DiffusionSystem(mat, inlet_g * 1.0, np.moveaxis(index, 0, ax), inlet_g, outlet_g, a)


def pcg(matrix, rhs: np.ndarray, rtol: float = 1e-7, max_iter: int | None = None, x0=None):
    """Jacobi-preconditioned conjugate gradient. Returns (x, iterations).

    Converged when ||b - Ax|| <= rtol * ||b||.
    """
    n = len(rhs)
    max_iter = max_iter or 10 * n + 100
    inv_diag = 1.0 / matrix.diagonal()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = rhs - matrix @ x
    if np.linalg.norm(r) <= rtol * np.linalg.norm(rhs):
        return x, 0
    target = rtol * np.linalg.norm(rhs)
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        ap = matrix @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= target:
            return x, it
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ArithmeticError(f"PCG did not reach rtol={rtol} in {max_iter} iterations")


def diffusion_from_solution(mask, axis, system: DiffusionSystem, conc, iterations=0):
    ax = _axis_index(axis)
    m = np.asarray(mask, dtype=bool)
    flux_in = float(system.inlet_g @ (1.0 - conc))
    flux_out = float(system.outlet_g @ conc)
    a = system.voxel_size
    length = m.shape[ax] * a
    area = m.size / m.shape[ax] * a * a
    d_eff = flux_in * length / area
    eps = float(m.mean())
    return DiffusionResult(eps / d_eff, d_eff, eps, flux_in, flux_out, iterations)


def solve_diffusion(mask: np.ndarray, axis="z", voxel_size: float = 1.0,
                    rtol: float = 1e-7) -> DiffusionResult:
    system = assemble_diffusion(mask, axis, voxel_size)
    ax = _axis_index(axis)
    n_ax = np.shape(mask)[ax]
    shape = [1, 1, 1]
    shape[ax] = n_ax
    # linear profile between the two Dirichlet faces
    profile = np.broadcast_to(1.0 - (np.arange(n_ax) + 0.5).reshape(shape) / n_ax, np.shape(mask))
    sel = system.index >= 0
    x0 = np.empty(len(system.rhs))
    x0[system.index[sel]] = profile[sel]
    conc, its = pcg(system.matrix, system.rhs, rtol, x0=x0)
    return diffusion_from_solution(mask, axis, system, conc, its)


def tortuosity_factor(mask: np.ndarray, axis="z", voxel_size: float = 1.0,
                      tol: float = 1e-7) -> float:
    """tau = eps * D / D_eff; raises UndefinedDescriptor if the phase does
    not connect the two faces normal to ``axis``."""
    return solve_diffusion(mask, axis, voxel_size, tol).tau


# -------------------------------------------------------- characterize

@dataclass
class DescriptorVector:
    d_ni: float = math.nan
    d_ysz: float = math.nan
    d_pore: float = math.nan
    l_tpb: float = math.nan
    l_tpb_active: float = math.nan
    tau_ni: float = math.nan
    tau_ysz: float = math.nan
    tau_pore: float = math.nan
    vf_ni: float = math.nan
    vf_ysz: float = math.nan
    vf_pore: float = math.nan

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def undefined(self) -> list[str]:
        return [k for k, v in self.as_dict().items() if v is None or math.isnan(v)]


_SUFFIX = {PhaseLabel.NI: "ni", PhaseLabel.YSZ: "ysz", PhaseLabel.PORE: "pore"}


def characterize(g: PhaseGrid, axis="z") -> DescriptorVector:
    """All eight descriptors plus volume fractions. Missing values are NaN."""
    out = DescriptorVector()
    maps = {}
    for phase in PhaseLabel:
        m = phase_mask(g, phase)
        suffix = _SUFFIX[phase]
        maps[phase] = percolation(m)
        try:
            d = mean_equivalent_diameter(watershed_grains(m, g.voxel_size), g.voxel_size)
        except UndefinedDescriptor:
            d = math.nan
        setattr(out, f"d_{suffix}", d)
        try:
            tau = tortuosity_factor(m, axis, g.voxel_size)
        except UndefinedDescriptor:
            tau = math.nan
        setattr(out, f"tau_{suffix}", tau)
    out.l_tpb, out.l_tpb_active = tpb_length_density(g, maps)
    for phase, frac in volume_fractions(g).items():
        setattr(out, f"vf_{_SUFFIX[phase]}", float(frac))
    return out


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_descriptor_csv(path, rows, config_hash: str | None = None) -> None:
    """``rows`` is an iterable of (sample_id, DescriptorVector)."""
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for sid, dv in rows:
            vals = dv.as_dict()
            w.writerow([sid] + [_fmt(vals[c]) for c in CSV_COLUMNS[1:]])


def read_descriptor_csv(path) -> dict:
    """sample_id -> DescriptorVector (empty fields become NaN)."""
    out = {}
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        vals = {c: (float(rec[c]) if rec[c] != "" else math.nan) for c in CSV_COLUMNS[1:]}
        out[rec["sample_id"]] = DescriptorVector(**vals)
    return out
