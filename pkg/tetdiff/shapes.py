"""Parametric shapes: analytic SDFs and closed meshes for fitting and smoke runs."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from tetdiff.marching import extract_mesh
from tetdiff.meshops import TriMesh
from tetdiff.tetgrid import GridState, build_bcc_grid

SdfFn = Callable[[np.ndarray], np.ndarray]

# ---------------------------------------------------------------------------
# Analytic SDFs (negative inside)
# ---------------------------------------------------------------------------


def sphere_sdf(points: np.ndarray, radius: float = 0.6, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    return np.linalg.norm(np.asarray(points) - np.asarray(center), axis=-1) - radius


def box_sdf(
    points: np.ndarray, half_extents=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0)
) -> np.ndarray:
    q = np.abs(np.asarray(points) - np.asarray(center)) - np.asarray(half_extents)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def capsule_sdf(points: np.ndarray, a, b, radius: float) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ab = b - a
    u = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + u[..., None] * ab), axis=-1) - radius


def torus_sdf(points: np.ndarray, major: float = 0.5, minor: float = 0.2) -> np.ndarray:
    """Torus around the z axis."""
    p = np.asarray(points)
    ring = np.linalg.norm(p[..., :2], axis=-1) - major
    return np.hypot(ring, p[..., 2]) - minor


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------


def _orient_outward(vertices: np.ndarray, faces: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Flip faces of a star-shaped mesh so normals point away from `center`."""
    tri = vertices[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", normals, tri.mean(axis=1) - center) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def box_mesh(half_extents=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Closed box with 8 vertices and 12 outward-facing triangles."""
    center = np.asarray(center, dtype=np.float64)
    signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], np.float64)
    vertices = center + signs * np.asarray(half_extents, dtype=np.float64)
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    faces = np.array([f for a, b, c, d in quads for f in ((a, b, c), (a, c, d))], np.int64)
    return TriMesh(vertices, _orient_outward(vertices, faces, center))


def uv_sphere(
    radius: float = 1.0, n_lat: int = 32, n_lon: int = 64, center=(0.0, 0.0, 0.0)
) -> TriMesh:
    """Latitude/longitude sphere with poles on the z axis."""
    center = np.asarray(center, dtype=np.float64)
    theta = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0.0, 2.0 * np.pi, n_lon, endpoint=False)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1)
    vertices = np.concatenate([[[0.0, 0.0, 1.0]], ring.reshape(-1, 3), [[0.0, 0.0, -1.0]]])

    def vid(i, j):
        return 1 + i * n_lon + (j % n_lon)

    south = len(vertices) - 1
    faces = [(0, vid(0, j), vid(0, j + 1)) for j in range(n_lon)]
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces += [(a, b, c), (a, c, d)]
    faces += [(south, vid(n_lat - 2, j + 1), vid(n_lat - 2, j)) for j in range(n_lon)]
    faces = np.array(faces, np.int64)
    vertices = center + radius * vertices
    return TriMesh(vertices, _orient_outward(vertices, faces, center))


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriMesh:
    center = np.asarray(center, dtype=np.float64)
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        pairs = np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        mids = v[edges[:, 0]] + v[edges[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        m = inverse.reshape(-1, 3) + len(v)
        a, b, c = f.T
        m0, m1, m2 = m.T
        f = np.concatenate(
            [
                np.stack([a, m0, m2], 1),
                np.stack([b, m1, m0], 1),
                np.stack([c, m2, m1], 1),
                np.stack([m0, m1, m2], 1),
            ]
        )
        v = np.concatenate([v, mids])
    vertices = center + radius * v
    return TriMesh(vertices, _orient_outward(vertices, f, center))


def mesh_from_sdf(sdf: SdfFn, resolution: int = 32, extent: float = 1.0) -> TriMesh:
    """Zero level set of `sdf` sampled at the rest vertices of a BCC grid."""
    grid = build_bcc_grid(resolution, extent)
    values = sdf(grid.vertex_positions)
    state = GridState(np.zeros((grid.num_vertices, 3)), values)
    return extract_mesh(grid, state)


def random_primitive(rng: np.random.Generator) -> tuple[str, TriMesh]:
    """A randomized sphere, box or capsule inside [-0.8, 0.8]^3."""
    kind = ("sphere", "box", "capsule")[int(rng.integers(3))]
    center = rng.uniform(-0.15, 0.15, 3)
    if kind == "sphere":
        return kind, icosphere(float(rng.uniform(0.35, 0.6)), 3, center)
    if kind == "box":
        return kind, box_mesh(rng.uniform(0.25, 0.55, 3), center)
    axis = rng.normal(size=3)
    axis *= rng.uniform(0.15, 0.35) / np.linalg.norm(axis)
    radius = float(rng.uniform(0.15, 0.3))
    return kind, mesh_from_sdf(
        lambda p: capsule_sdf(p, center - axis, center + axis, radius), resolution=24
    )
