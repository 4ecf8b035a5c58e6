"""Three-phase voxel grids: representation, synthetic generation, IO.

Arrays are indexed ``data[z, y, x]`` in C order, which makes the flat
byte sequence x-fastest.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import GenerationFailed, GridFormatError, InvalidArgument

MAGIC = b"MSTR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIId")


class PhaseLabel(IntEnum):
    PORE = 0
    NI = 1
    YSZ = 2


PHASES = (PhaseLabel.NI, PhaseLabel.YSZ, PhaseLabel.PORE)


@dataclass(frozen=True, eq=False)
class PhaseGrid:
    data: np.ndarray
    voxel_size: float

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgument(f"grid must be a non-empty 3-D array, got shape {data.shape}")
        if not self.voxel_size > 0:
            raise InvalidArgument(f"voxel_size must be positive, got {self.voxel_size}")
        if data.size and data.max() > max(PhaseLabel):
            raise InvalidArgument("grid contains labels outside {Pore, Ni, Ysz}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def nx(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, PhaseGrid):
            return NotImplemented
        return self.voxel_size == other.voxel_size and np.array_equal(self.data, other.data)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, FORMAT_VERSION, self.nx, self.ny, self.nz, self.voxel_size)
        return head + self.data.tobytes(order="C")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PhaseGrid":
        if len(raw) < _HEADER.size:
            raise GridFormatError("file shorter than header")
        magic, version, nx, ny, nz, pitch = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise GridFormatError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise GridFormatError(f"unsupported version {version}")
        body = raw[_HEADER.size:]
        if len(body) != nx * ny * nz:
            raise GridFormatError(f"expected {nx * ny * nz} label bytes, found {len(body)}")
        data = np.frombuffer(body, dtype=np.uint8).reshape(nz, ny, nx)
        try:
            return cls(data, pitch)
        except InvalidArgument as exc:
            raise GridFormatError(str(exc)) from exc


def write_grid(path, grid: PhaseGrid) -> None:
    Path(path).write_bytes(grid.to_bytes())


def read_grid(path) -> PhaseGrid:
    return PhaseGrid.from_bytes(Path(path).read_bytes())


@dataclass
class GeneratorConfig:
    """Parameters of the sphere-packing + majority-vote stand-in generator.

    ``target_fractions`` maps each phase to its volume fraction;
    ``mean_particle_radius`` is in voxels.
    """

    target_fractions: dict = field(
        default_factory=lambda: {PhaseLabel.NI: 0.3, PhaseLabel.YSZ: 0.3, PhaseLabel.PORE: 0.4}
    )
    mean_particle_radius: float = 4.0
    ca_iterations: int = 2
    seed: int = 0

    def __post_init__(self):
        fr = {PhaseLabel(k): float(v) for k, v in self.target_fractions.items()}
        if set(fr) != set(PhaseLabel):
            raise InvalidArgument("target_fractions must name all three phases")
        if any(not 0.0 < v < 1.0 for v in fr.values()):
            raise InvalidArgument("each target fraction must lie in (0, 1)")
        if abs(sum(fr.values()) - 1.0) > 1e-9:
            raise InvalidArgument("target fractions must sum to 1")
        if self.mean_particle_radius < 1:
            raise InvalidArgument("mean_particle_radius must be >= 1 voxel")
        if self.ca_iterations < 0:
            raise InvalidArgument("ca_iterations must be >= 0")
        self.target_fractions = fr

    def to_json(self) -> dict:
        return {
            "target_fractions": {p.name.lower(): v for p, v in self.target_fractions.items()},
            "mean_particle_radius": self.mean_particle_radius,
            "ca_iterations": self.ca_iterations,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GeneratorConfig":
        fr = {PhaseLabel[k.upper()]: v for k, v in d["target_fractions"].items()}
        return cls(fr, d["mean_particle_radius"], d["ca_iterations"], d["seed"])


def new_grid(nx: int, ny: int, nz: int, voxel_size: float, fill: PhaseLabel) -> PhaseGrid:
    if min(nx, ny, nz) < 1:
        raise InvalidArgument("grid dimensions must be >= 1")
    return PhaseGrid(np.full((nz, ny, nx), int(fill), dtype=np.uint8), voxel_size)


# fraction of the volume claimed by explicit spheres before nearest-seed fill
_PACK_FILL = 0.9
_NEIGHBOURS26 = np.ones((3, 3, 3), dtype=np.int16)
_NEIGHBOURS26[1, 1, 1] = 0


def _pack_spheres(shape, targets, radius, rng):
    labels = np.full(shape, -1, dtype=np.int8)
    total = labels.size
    want = np.array([targets[p] for p in PhaseLabel]) * total
    counts = np.zeros(3)
    centers, owners = [], []
    assigned = 0
    zz = np.arange(shape[0])
    yy = np.arange(shape[1])
    xx = np.arange(shape[2])
    stalled = 0
    while assigned < _PACK_FILL * total:
        deficit = (want - counts) / want
        phase = int(np.argmax(deficit))
        r = radius * rng.uniform(0.7, 1.3)
        c = rng.uniform(0, shape) - 0.5
        lo = np.maximum(np.floor(c - r).astype(int), 0)
        hi = np.minimum(np.ceil(c + r).astype(int) + 1, shape)
        if np.any(hi <= lo):
            continue
        dz = (zz[lo[0]:hi[0]] - c[0])[:, None, None]
        dy = (yy[lo[1]:hi[1]] - c[1])[None, :, None]
        dx = (xx[lo[2]:hi[2]] - c[2])[None, None, :]
        inside = dz * dz + dy * dy + dx * dx <= r * r
        sub = labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        sel = inside & (sub < 0)
        claimed = int(sel.sum())
        sub[sel] = phase
        counts[phase] += claimed
        assigned += claimed
        centers.append(c)
        owners.append(phase)
        stalled = stalled + 1 if claimed == 0 else 0
        if stalled > 10_000:
            break
    return labels, np.array(centers), np.array(owners, dtype=np.int8)


def _majority_step(labels: np.ndarray) -> np.ndarray:
    counts = np.stack(
        [ndimage.convolve((labels == p).astype(np.int16), _NEIGHBOURS26, mode="constant")
         for p in PhaseLabel]
    )
    best = counts.max(axis=0)
    winners = (counts == best).sum(axis=0)
    return np.where(winners == 1, counts.argmax(axis=0), labels).astype(np.uint8)


def generate_microstructure(cfg: GeneratorConfig, dims, voxel_size: float) -> PhaseGrid:
    """Seeded sphere packing per phase, nearest-seed fill of the gaps, then
    ``cfg.ca_iterations`` rounds of 26-neighbourhood majority relaxation
    (a tie keeps the current label)."""
    if isinstance(dims, int):
        dims = (dims, dims, dims)
    nx, ny, nz = (int(d) for d in dims)
    if min(nx, ny, nz) < 1:
        raise InvalidArgument("grid dimensions must be >= 1")
    shape = (nz, ny, nx)
    total = nx * ny * nz
    if any(f * total < 1 for f in cfg.target_fractions.values()):
        raise GenerationFailed("grid too small to hold every phase")

    rng = np.random.default_rng(cfg.seed)
    labels, centers, owners = _pack_spheres(shape, cfg.target_fractions,
                                            cfg.mean_particle_radius, rng)
    gaps = np.argwhere(labels < 0)
    if len(gaps):
        if len(centers) == 0:
            raise GenerationFailed("no particles were placed")
        _, nearest = cKDTree(centers).query(gaps.astype(float))
        labels[tuple(gaps.T)] = owners[nearest]
    out = labels.astype(np.uint8)
    for _ in range(cfg.ca_iterations):
        nxt = _majority_step(out)
        if np.array_equal(nxt, out):
            break
        out = nxt
    present = np.bincount(out.ravel(), minlength=3)
    if np.any(present == 0):
        raise GenerationFailed("a phase vanished during generation")
    return PhaseGrid(out, voxel_size)


def crop_interior(g: PhaseGrid, margin: int) -> PhaseGrid:
    if margin < 0 or 2 * margin >= min(g.shape):
        raise InvalidArgument(f"margin {margin} too large for shape {g.shape}")
    if margin == 0:
        return g
    m = margin
    return PhaseGrid(g.data[m:-m, m:-m, m:-m], g.voxel_size)


def phase_mask(g: PhaseGrid, phase: PhaseLabel) -> np.ndarray:
    return g.data == int(phase)


def volume_fractions(g: PhaseGrid) -> dict:
    counts = np.bincount(g.data.ravel(), minlength=3)
    total = counts.sum()
    return {p: counts[int(p)] / total for p in PhaseLabel}
