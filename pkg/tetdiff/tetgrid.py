"""Uniform BCC tetrahedral grids, per-vertex grid states and the cubic-lattice embedding.

Corner vertex (i, j, k) of an R-cell grid sits at lattice site (2i, 2j, 2k) and the center
of cell (i, j, k) at (2i+1, 2j+1, 2k+1) of a (2R+1)^3 cubic lattice. All other lattice
sites are infill and carry zeros plus mask 0.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from tetdiff.errors import DimensionError, FormatError, InvalidResolutionError, StateError

logger = logging.getLogger(__name__)

CORNER = 0
CENTER = 1

DATA_CHANNELS = 4
TETG_MAGIC = b"TETG"
TETG_VERSION = 1

# Tet edges as local vertex pairs
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=np.int64)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TetGrid:
    """Immutable connectivity and rest geometry of a BCC grid."""

    resolution: int
    extent: float
    delta_max: float
    vertex_positions: np.ndarray  # (V, 3) float64
    tets: np.ndarray  # (T, 4) int64, positively oriented
    vertex_kind: np.ndarray  # (V,) int8, CORNER | CENTER
    edges: np.ndarray  # (E, 2) int64, sorted pairs
    vertex_sites: np.ndarray  # (V, 3) int64 lattice coordinates

    @property
    def num_vertices(self) -> int:
        return len(self.vertex_positions)

    @property
    def cell_size(self) -> float:
        return 2.0 * self.extent / self.resolution

    @property
    def lattice_size(self) -> int:
        return 2 * self.resolution + 1

    def deformed_positions(self, state: GridState) -> np.ndarray:
        _check_state(self, state)
        return self.vertex_positions + state.deformation.astype(np.float64)

    def tet_volumes(self, positions: np.ndarray | None = None) -> np.ndarray:
        """Signed volumes of all tets at `positions` (rest positions by default)."""
        pos = self.vertex_positions if positions is None else positions
        p = pos[self.tets]
        return np.linalg.det(p[:, 1:] - p[:, :1]) / 6.0


@dataclass(frozen=True, eq=False)
class GridState:
    """Per-vertex deformation (length units) and SDF; the diffusion data point."""

    deformation: np.ndarray  # (V, 3) float32
    sdf: np.ndarray  # (V,) float32
    normalized: bool = False

    def __post_init__(self) -> None:
        deformation = np.asarray(self.deformation, dtype=np.float32)
        sdf = np.asarray(self.sdf, dtype=np.float32)
        if deformation.ndim != 2 or deformation.shape[1] != 3:
            raise DimensionError(f"deformation must be (V, 3), got {deformation.shape}")
        if sdf.shape != (deformation.shape[0],):
            raise DimensionError(f"sdf must be ({deformation.shape[0]},), got {sdf.shape}")
        if self.normalized and not np.all(np.abs(sdf) == 1.0):
            raise StateError("normalized state must have every sdf value in {-1, +1}")
        object.__setattr__(self, "deformation", deformation)
        object.__setattr__(self, "sdf", sdf)

    @classmethod
    def zeros(cls, num_vertices: int) -> GridState:
        return cls(
            deformation=np.zeros((num_vertices, 3), np.float32),
            sdf=np.zeros(num_vertices, np.float32),
        )

    @property
    def num_vertices(self) -> int:
        return len(self.sdf)

    def with_signs(self) -> GridState:
        """Round the SDF to +-1 by sign (0 maps to +1)."""
        return GridState(self.deformation, np.where(self.sdf >= 0, 1.0, -1.0), normalized=True)


@dataclass(frozen=True, eq=False)
class CubicEmbedding:
    """Dense (2R+1)^3 lattice: 4 data channels plus the tet-site mask."""

    data: np.ndarray  # (4, L, L, L) float64, deformation scaled by 1/delta_max
    mask: np.ndarray  # (L, L, L) bool
    vertex_sites: np.ndarray  # (V, 3) shared with the grid
    normalized: bool = False

    @property
    def lattice_size(self) -> int:
        return self.mask.shape[0]

    def tensor(self) -> np.ndarray:
        """Network input layout: zeroed data channels followed by the mask channel."""
        m = self.mask.astype(np.float64)
        return np.concatenate([self.data * m, m[None]], axis=0)

    def site_vertex(self) -> np.ndarray:
        """Lattice-shaped vertex index map, -1 at infilled sites."""
        out = np.full(self.mask.shape, -1, dtype=np.int64)
        i, j, k = self.vertex_sites.T
        out[i, j, k] = np.arange(len(self.vertex_sites))
        return out


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _corner_ids(ijk: np.ndarray, r1: int) -> np.ndarray:
    return (ijk[..., 0] * r1 + ijk[..., 1]) * r1 + ijk[..., 2]


def _center_ids(ijk: np.ndarray, r: int) -> np.ndarray:
    return (r + 1) ** 3 + (ijk[..., 0] * r + ijk[..., 1]) * r + ijk[..., 2]


def _face_tets(r: int, axis: int) -> np.ndarray:
    """4 tets per interior face normal to `axis`: both cell centers plus one face edge."""
    b, c = [ax for ax in range(3) if ax != axis]
    ranges = [np.arange(r)] * 3
    ranges[axis] = np.arange(r - 1)
    cells = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)
    step = np.zeros(3, dtype=np.int64)
    step[axis] = 1

    c1 = _center_ids(cells, r)
    c2 = _center_ids(cells + step, r)

    # square corners on the shared face, in cyclic order
    square = []
    for db, dc in ((0, 0), (1, 0), (1, 1), (0, 1)):
        q = cells + step
        q[:, b] += db
        q[:, c] += dc
        square.append(_corner_ids(q, r + 1))

    tets = [np.stack([c1, c2, square[m], square[(m + 1) % 4]], axis=1) for m in range(4)]
    return np.concatenate(tets, axis=0)


def build_bcc_grid(
    resolution: int,
    extent: float = 1.0,
    deform_multiplier: float = 0.75,
) -> TetGrid:
    """Tile [-extent, extent]^3 with R^3 cells; tets only span interior faces.

    Box corners that end up in no tet are kept so the lattice stays regular.
    """
    if resolution < 2:
        raise InvalidResolutionError(f"resolution must be >= 2, got {resolution}")
    if extent <= 0:
        raise InvalidResolutionError(f"extent must be positive, got {extent}")

    r, r1 = resolution, resolution + 1
    h = 2.0 * extent / r
    corners = np.stack(np.meshgrid(*[np.arange(r1)] * 3, indexing="ij"), -1).reshape(-1, 3)
    centers = np.stack(np.meshgrid(*[np.arange(r)] * 3, indexing="ij"), -1).reshape(-1, 3)

    positions = np.concatenate([-extent + h * corners, -extent + h * (centers + 0.5)])
    sites = np.concatenate([2 * corners, 2 * centers + 1]).astype(np.int64)
    kind = np.concatenate(
        [np.full(len(corners), CORNER, np.int8), np.full(len(centers), CENTER, np.int8)]
    )

    tets = np.concatenate([_face_tets(r, axis) for axis in range(3)]).astype(np.int64)
    p = positions[tets]
    flip = np.linalg.det(p[:, 1:] - p[:, :1]) < 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]

    pairs = np.sort(tets[:, TET_EDGES].reshape(-1, 2), axis=1)
    edges = np.unique(pairs, axis=0)

    grid = TetGrid(
        resolution=r,
        extent=float(extent),
        delta_max=deform_multiplier * h,
        vertex_positions=positions,
        tets=tets,
        vertex_kind=kind,
        edges=edges,
        vertex_sites=sites,
    )
    logger.debug(
        "Built BCC grid R=%d: %d vertices, %d tets, %d edges",
        r, grid.num_vertices, len(tets), len(edges),
    )
    return grid


def lattice_mask(resolution: int) -> np.ndarray:
    """True where all three lattice coordinates are even or all are odd."""
    n = 2 * resolution + 1
    i, j, k = np.meshgrid(*[np.arange(n)] * 3, indexing="ij")
    parity = (i % 2) + (j % 2) + (k % 2)
    return (parity == 0) | (parity == 3)


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------


def _check_state(grid: TetGrid, state: GridState) -> None:
    if state.num_vertices != grid.num_vertices:
        raise DimensionError(
            f"state has {state.num_vertices} vertices, grid has {grid.num_vertices}"
        )


def embed_to_cubic(grid: TetGrid, state: GridState) -> CubicEmbedding:
    _check_state(grid, state)
    n = grid.lattice_size
    data = np.zeros((DATA_CHANNELS, n, n, n), dtype=np.float64)
    i, j, k = grid.vertex_sites.T
    data[:3, i, j, k] = state.deformation.astype(np.float64).T / grid.delta_max
    data[3, i, j, k] = state.sdf
    return CubicEmbedding(
        data=data,
        mask=lattice_mask(grid.resolution),
        vertex_sites=grid.vertex_sites,
        normalized=state.normalized,
    )


def extract_from_cubic(emb: CubicEmbedding, grid: TetGrid) -> GridState:
    n = grid.lattice_size
    if emb.data.shape != (DATA_CHANNELS, n, n, n):
        raise DimensionError(f"expected lattice {(DATA_CHANNELS, n, n, n)}, got {emb.data.shape}")
    i, j, k = grid.vertex_sites.T
    values = emb.data[:, i, j, k]
    deformation = (values[:3].T * grid.delta_max).astype(np.float32)
    sdf = values[3].astype(np.float32)
    normalized = emb.normalized and bool(np.all(np.abs(sdf) == 1.0))
    return GridState(deformation, sdf, normalized=normalized)


def clip_deformations(state: GridState, delta_max: float) -> GridState:
    """Clamp every deformation component to [-delta_max, delta_max].

    Only applied between optimizer steps, never inside a gradient evaluation.
    """
    clipped = np.clip(state.deformation, -delta_max, delta_max)
    return GridState(clipped, state.sdf, normalized=state.normalized)


def scale_state(
    state: GridState,
    direction: Literal["to_diffusion", "from_diffusion"],
    delta_max: float,
) -> GridState:
    """Convert deformations between length units and diffusion units ([-1, 1])."""
    d = state.deformation.astype(np.float64)
    if direction == "to_diffusion":
        if not state.normalized:
            raise StateError("diffusion data needs normalized (+-1) SDF values")
        return GridState((d / delta_max).astype(np.float32), state.sdf, normalized=True)
    if direction == "from_diffusion":
        out = GridState((d * delta_max).astype(np.float32), state.sdf, state.normalized)
        return clip_deformations(out, delta_max)
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# .tetg files
# ---------------------------------------------------------------------------

_TETG_HEADER = struct.Struct("<4sIII")


def save_state(path: Path, state: GridState, resolution: int) -> None:
    """Write `state` as little-endian TETG: header, (dx, dy, dz, s) float32 rows, flag byte."""
    rows = np.concatenate([state.deformation, state.sdf[:, None]], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(_TETG_HEADER.pack(TETG_MAGIC, TETG_VERSION, resolution, state.num_vertices))
        f.write(rows.tobytes())
        f.write(b"\x01" if state.normalized else b"\x00")


def load_state(path: Path) -> tuple[int, GridState]:
    """Read a TETG file; returns (resolution, state)."""
    blob = Path(path).read_bytes()
    if len(blob) < _TETG_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, resolution, count = _TETG_HEADER.unpack_from(blob)
    if magic != TETG_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != TETG_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = _TETG_HEADER.size + count * 16
    if len(blob) != body + 1:
        raise FormatError(f"{path}: expected {body + 1} bytes, got {len(blob)}")
    rows = np.frombuffer(blob, dtype="<f4", count=count * 4, offset=_TETG_HEADER.size)
    rows = rows.reshape(count, 4).astype(np.float32)
    normalized = blob[body] == 1
    return resolution, GridState(rows[:, :3], rows[:, 3], normalized=normalized)
