"""Marching tetrahedra on deformable grids.

A mesh vertex on tet edge (a, b) is the zero of the linear SDF interpolant,
v = (v_a s_b - v_b s_a) / (s_b - s_a); with normalized (+-1) SDFs it is the edge midpoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from tetdiff.errors import DomainError, NoCrossingError
from tetdiff.meshops import TriMesh
from tetdiff.tetgrid import TET_EDGES, GridState, TetGrid

logger = logging.getLogger(__name__)

# Exact zeros are pushed to the negative side before extraction
ZERO_SDF_REPLACEMENT = -1e-8

_BIT_WEIGHTS = np.array([1, 2, 4, 8], dtype=np.int64)


def _local_edge(a: int, b: int) -> int:
    pair = sorted((a, b))
    return int(np.flatnonzero((TET_EDGES == pair).all(axis=1))[0])


def _build_case_table() -> tuple[np.ndarray, np.ndarray]:
    """Per sign code: up to two triangles as local edge indices, and the triangle count.

    Bit i of a code is set when vertex i has sdf >= 0. Winding is fixed later from
    geometry, so the table only has to list each triangle's crossing edges.
    """
    table = np.full((16, 2, 3), -1, dtype=np.int64)
    counts = np.zeros(16, dtype=np.int64)
    for code in range(16):
        pos = [i for i in range(4) if code >> i & 1]
        neg = [i for i in range(4) if not code >> i & 1]
        if len(pos) in (0, 4):
            continue
        if len(pos) in (1, 3):
            lone, rest = (pos[0], neg) if len(pos) == 1 else (neg[0], pos)
            table[code, 0] = [_local_edge(lone, o) for o in rest]
            counts[code] = 1
            continue
        (a, b), (c, d) = pos, neg
        # quad (a,c) -> (a,d) -> (b,d) -> (b,c), split along (a,c)-(b,d)
        ac, ad, bd, bc = (_local_edge(*e) for e in ((a, c), (a, d), (b, d), (b, c)))
        table[code, 0] = [ac, ad, bd]
        table[code, 1] = [ac, bd, bc]
        counts[code] = 2
    return table, counts


CASE_TABLE, CASE_TRIANGLES = _build_case_table()


def case_class(code: int) -> str:
    """Name the case of a 4-bit sign code: empty, one-vs-three or two-vs-two."""
    return {0: "empty", 1: "one-vs-three", 2: "two-vs-two"}[int(CASE_TRIANGLES[code])]


@dataclass(frozen=True, eq=False)
class SurfaceTopology:
    """Connectivity of the extracted surface for a fixed sign pattern."""

    edges: np.ndarray  # (E, 2) sorted grid vertex pairs with a sign change
    faces: np.ndarray  # (F, 3) rows index into `edges`
    face_pos: np.ndarray  # (F,) a non-negative vertex of each face's tet
    face_neg: np.ndarray  # (F,) a negative vertex of each face's tet


# ---------------------------------------------------------------------------
# Scalar formulas
# ---------------------------------------------------------------------------


def interpolate_sdf(vertices: np.ndarray, sdf: np.ndarray, weights: np.ndarray) -> float:
    """Barycentric SDF interpolation inside one tet."""
    vertices = np.asarray(vertices, dtype=np.float64)
    sdf = np.asarray(sdf, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if vertices.shape != (4, 3) or sdf.shape != (4,) or weights.shape != (4,):
        raise DomainError("expected 4 tet vertices, 4 SDF values and 4 weights")
    if np.any(weights < 0) or np.any(weights > 1) or abs(weights.sum() - 1.0) > 1e-9:
        raise DomainError(f"weights must lie in [0, 1] and sum to 1, got {weights}")
    return float(weights @ sdf)


def edge_zero_crossing(va: np.ndarray, sa: float, vb: np.ndarray, sb: float) -> np.ndarray:
    if sa == 0 or sb == 0 or (sa > 0) == (sb > 0):
        raise NoCrossingError(f"no sign change on edge (s_a={sa}, s_b={sb})")
    va = np.asarray(va, dtype=np.float64)
    vb = np.asarray(vb, dtype=np.float64)
    return (va * sb - vb * sa) / (sb - sa)


def vertex_noise_delta(
    va: np.ndarray, vb: np.ndarray, sa: float, sb: float, eps: float
) -> np.ndarray:
    """Shift of the crossing vertex when both endpoint SDFs move by the same eps."""
    if sa == sb:
        raise DomainError("s_a == s_b: crossing vertex undefined")
    return eps * (np.asarray(va, np.float64) - np.asarray(vb, np.float64)) / (sb - sa)


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def prepare_sdf(sdf: np.ndarray) -> np.ndarray:
    s = np.asarray(sdf, dtype=np.float64).copy()
    s[s == 0] = ZERO_SDF_REPLACEMENT
    return s


def surface_topology(grid: TetGrid, sdf: np.ndarray) -> SurfaceTopology:
    s = prepare_sdf(sdf)
    occ = s[grid.tets] > 0
    codes = occ.astype(np.int64) @ _BIT_WEIGHTS
    counts = CASE_TRIANGLES[codes]

    one = np.flatnonzero(counts >= 1)
    two = np.flatnonzero(counts == 2)
    tri_tet = np.concatenate([one, two])
    tri_slot = np.concatenate([np.zeros(len(one), np.int64), np.ones(len(two), np.int64)])
    # faces of one tet stay adjacent, in slot order
    order = np.lexsort((tri_slot, tri_tet))
    tri_tet, tri_slot = tri_tet[order], tri_slot[order]

    if len(tri_tet) == 0:
        none = np.zeros((0,), np.int64)
        return SurfaceTopology(np.zeros((0, 2), np.int64), np.zeros((0, 3), np.int64), none, none)

    local = CASE_TABLE[codes[tri_tet], tri_slot]  # (F, 3) local edge ids
    tet_verts = grid.tets[tri_tet]  # (F, 4)
    rows = np.arange(len(tri_tet))[:, None, None]
    ends = tet_verts[rows, TET_EDGES[local]]  # (F, 3, 2) grid vertex ids
    keys = np.sort(ends.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(keys, axis=0, return_inverse=True)
    faces = inverse.reshape(-1, 3)

    tet_occ = occ[tri_tet]
    face_pos = tet_verts[np.arange(len(tri_tet)), np.argmax(tet_occ, axis=1)]
    face_neg = tet_verts[np.arange(len(tri_tet)), np.argmin(tet_occ, axis=1)]
    return SurfaceTopology(edges, faces, face_pos, face_neg)


def crossing_points(positions: np.ndarray, sdf: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Vectorized edge_zero_crossing over `edges` (sdf already free of exact zeros)."""
    sa = sdf[edges[:, 0], None]
    sb = sdf[edges[:, 1], None]
    va = positions[edges[:, 0]]
    vb = positions[edges[:, 1]]
    return (va * sb - vb * sa) / (sb - sa)


def orient_faces(
    points: np.ndarray, topo: SurfaceTopology, positions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Wind faces so normals point from the negative to the positive side.

    Returns (faces, normals) with unnormalized normals.
    """
    faces = topo.faces.copy()
    tri = points[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    outward = positions[topo.face_pos] - positions[topo.face_neg]
    flip = np.einsum("ij,ij->i", normals, outward) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    normals[flip] *= -1
    return faces, normals


def extract_mesh(grid: TetGrid, state: GridState) -> TriMesh:
    positions = grid.deformed_positions(state)
    s = prepare_sdf(state.sdf)
    topo = surface_topology(grid, s)
    points = crossing_points(positions, s, topo.edges)
    faces, normals = orient_faces(points, topo, positions)

    area2 = np.linalg.norm(normals, axis=1)
    degenerate = area2 <= 1e-18
    if np.any(degenerate):
        logger.debug("Dropping %d degenerate triangles", int(degenerate.sum()))
        faces = faces[~degenerate]
    return TriMesh(points, faces)
