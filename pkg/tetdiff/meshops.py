"""Triangle meshes: I/O, post-processing, surface sampling and ray queries."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from tetdiff.errors import (
    FormatError,
    GeometryError,
    MeshIndexError,
    ParameterError,
    ParseError,
)
from tetdiff.models import CameraSpec, TopologyReport

logger = logging.getLogger(__name__)

DEPTH_MAGIC = b"DPTH"
DEPTH_VERSION = 1
DEPTH_MISS = -1.0

# Fixed pseudo-random directions for the parity vote
PARITY_RAYS = 5
_RAY_DIRECTIONS = np.random.default_rng(0x7E7D1FF).normal(size=(PARITY_RAYS, 3))
_RAY_DIRECTIONS /= np.linalg.norm(_RAY_DIRECTIONS, axis=1, keepdims=True)

_HIT_EPS = 1e-12

# OBJ records that carry no geometry we keep
_OBJ_SKIPPED = frozenset(
    {"vt", "vn", "vp", "g", "o", "s", "l", "p", "usemtl", "mtllib", "cstype", "deg"}
)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray  # (M, 3) int64
    normals: np.ndarray | None = None  # optional (N, 3)

    def __post_init__(self) -> None:
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise GeometryError("mesh vertices contain NaN or Inf")
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise GeometryError(f"face index out of range for {len(vertices)} vertices")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        """Unnormalized face normals (length = 2 * area)."""
        tri = self.triangles()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs."""
        pairs = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        return np.unique(np.sort(pairs, axis=1), axis=0)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    seed: int | None = None

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if np.any(np.isnan(points)):
            raise GeometryError("point cloud contains NaN")
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class DepthView:
    """Per-pixel ray-hit distance; misses hold +inf."""

    camera: CameraSpec
    depth: np.ndarray  # (H, W) float64
    hit_mask: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.shape != (self.camera.height, self.camera.width):
            raise ParameterError(f"depth image shape {depth.shape} does not match camera")
        hits = np.isfinite(depth)
        if np.any(depth[hits] <= 0):
            raise ParameterError("depth must be positive at hit pixels")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "hit_mask", hits)

    def hit_points(self) -> np.ndarray:
        """World positions of all hit pixels, row-major."""
        origin, dirs = camera_rays(self.camera)
        d = self.depth.reshape(-1)
        hit = self.hit_mask.reshape(-1)
        return origin + dirs[hit] * d[hit, None]


# ---------------------------------------------------------------------------
# OBJ / point cloud text formats
# ---------------------------------------------------------------------------


def _parse_floats(tokens: list[str], count: int, lineno: int) -> list[float]:
    if len(tokens) < count:
        raise ParseError(f"expected {count} coordinates, got {len(tokens)}", lineno)
    try:
        return [float(t) for t in tokens[:count]]
    except ValueError as exc:
        raise ParseError(f"bad number in {tokens!r}", lineno) from exc


def load_obj(path: Path) -> TriMesh:
    """Read `v` and `f` records; polygons are fan-triangulated from their first vertex."""
    vertices: list[list[float]] = []
    polygons: list[tuple[int, list[int]]] = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            if tag == "v":
                vertices.append(_parse_floats(rest, 3, lineno))
            elif tag == "f":
                if len(rest) < 3:
                    raise ParseError(f"face needs 3+ vertices, got {len(rest)}", lineno)
                try:
                    refs = [int(tok.split("/")[0]) for tok in rest]
                except ValueError as exc:
                    raise ParseError(f"bad face record {rest!r}", lineno) from exc
                polygons.append((lineno, refs))
            elif tag not in _OBJ_SKIPPED:
                raise ParseError(f"unknown record {tag!r}", lineno)

    n = len(vertices)
    faces: list[tuple[int, int, int]] = []
    for lineno, refs in polygons:
        idx = []
        for ref in refs:
            if ref == 0:
                raise MeshIndexError("face index 0 (OBJ indices are 1-based)", lineno)
            i = ref - 1 if ref > 0 else n + ref
            if not 0 <= i < n:
                raise MeshIndexError(f"face index {ref} out of range 1..{n}", lineno)
            idx.append(i)
        faces.extend((idx[0], idx[k], idx[k + 1]) for k in range(1, len(idx) - 1))

    logger.debug("Loaded %s: %d vertices, %d faces", path, n, len(faces))
    return TriMesh(
        np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces).reshape(-1, 3)
    )


def save_obj(mesh: TriMesh, path: Path) -> None:
    with open(path, "w") as f:
        f.write(f"# {mesh.num_vertices} vertices, {mesh.num_faces} faces\n")
        for x, y, z in mesh.vertices:
            f.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.faces + 1:
            f.write(f"f {a} {b} {c}\n")


def save_points(cloud: PointCloud, path: Path) -> None:
    np.savetxt(path, cloud.points, fmt="%.9g")


def load_points(path: Path) -> PointCloud:
    rows: list[list[float]] = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            tokens = raw.split("#", 1)[0].split()
            if tokens:
                rows.append(_parse_floats(tokens, 3, lineno))
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# Connectivity and post-processing
# ---------------------------------------------------------------------------


def vertex_adjacency(mesh: TriMesh) -> sparse.csr_matrix:
    """Symmetric 0/1 vertex adjacency from face edges."""
    e = mesh.edges()
    n = mesh.num_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def laplacian_smooth(mesh: TriMesh, lam: float, steps: int) -> TriMesh:
    """Uniform-weight Laplacian smoothing: v <- v + lam * (mean of 1-ring - v)."""
    if not 0 <= lam <= 1:
        raise ParameterError(f"lambda must be in [0, 1], got {lam}")
    if steps < 0:
        raise ParameterError(f"steps must be >= 0, got {steps}")
    if steps == 0 or lam == 0 or mesh.num_faces == 0:
        return mesh

    adj = vertex_adjacency(mesh)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    active = deg > 0
    v = mesh.vertices.copy()
    for _ in range(steps):
        mean = adj @ v
        mean[active] /= deg[active, None]
        v[active] += lam * (mean[active] - v[active])
    return TriMesh(v, mesh.faces)


def compact(mesh: TriMesh) -> TriMesh:
    """Drop vertices no face references."""
    used, inverse = np.unique(mesh.faces, return_inverse=True)
    return TriMesh(mesh.vertices[used], inverse.reshape(-1, 3))


def face_components(mesh: TriMesh) -> np.ndarray:
    """Component label per face, faces joined through shared vertices."""
    _, labels = connected_components(vertex_adjacency(mesh), directed=False)
    return labels[mesh.faces[:, 0]] if mesh.num_faces else np.zeros(0, np.int64)


def remove_small_components(mesh: TriMesh, min_face_fraction: float = 0.05) -> TriMesh:
    if not 0 <= min_face_fraction < 1:
        raise ParameterError(f"fraction must be in [0, 1), got {min_face_fraction}")
    if mesh.num_faces == 0 or min_face_fraction == 0:
        return mesh
    labels = face_components(mesh)
    sizes = np.bincount(labels)
    keep = sizes[labels] >= min_face_fraction * mesh.num_faces
    if np.all(keep):
        return mesh
    logger.debug(
        "Removing %d faces in %d small components",
        int((~keep).sum()), len(np.unique(labels[~keep])),
    )
    return compact(TriMesh(mesh.vertices, mesh.faces[keep]))


def topology_check(mesh: TriMesh) -> TopologyReport:
    if mesh.num_faces == 0:
        return TopologyReport(watertight=False, euler=0, component_count=0)
    pairs = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, edge_counts = np.unique(pairs, axis=0, return_counts=True)
    used = np.unique(mesh.faces)
    euler = len(used) - len(edge_counts) + mesh.num_faces
    return TopologyReport(
        watertight=bool(np.all(edge_counts == 2)),
        euler=int(euler),
        component_count=len(np.unique(face_components(mesh))),
    )


def normalize_mesh(mesh: TriMesh, bound: float = 0.9) -> tuple[TriMesh, float, np.ndarray]:
    """Center the bounding box and scale uniformly into [-bound, bound]^3.

    Returns (mesh, scale, center); original = normalized / scale + center.
    """
    if mesh.num_vertices == 0:
        raise GeometryError("cannot normalize an empty mesh")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    half = float(np.max(hi - lo)) / 2.0
    if half <= 0:
        raise GeometryError("mesh has zero extent")
    scale = bound / half
    return TriMesh((mesh.vertices - center) * scale, mesh.faces), scale, center


def denormalize_mesh(mesh: TriMesh, scale: float, center: np.ndarray) -> TriMesh:
    return TriMesh(mesh.vertices / scale + np.asarray(center), mesh.faces)


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------


def sample_faces(
    areas: np.ndarray, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted face ids and uniform barycentric weights (n, 3)."""
    total = float(areas.sum())
    if not total > 0:
        raise GeometryError("cannot sample a mesh without area")
    face_ids = rng.choice(len(areas), size=n, p=areas / total)
    r1, r2 = rng.random((2, n))
    s = np.sqrt(r1)
    weights = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    return face_ids, weights


def sample_surface(mesh: TriMesh, n: int, seed: int | np.random.Generator | None) -> PointCloud:
    if mesh.num_faces == 0:
        raise GeometryError("cannot sample an empty mesh")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    face_ids, w = sample_faces(mesh.face_areas(), n, rng)
    tri = mesh.triangles()[face_ids]
    points = np.einsum("nk,nkd->nd", w, tri)
    return PointCloud(points, seed=seed if isinstance(seed, int) else None)


# ---------------------------------------------------------------------------
# Ray queries
# ---------------------------------------------------------------------------


def ray_triangle_hits(
    origins: np.ndarray, directions: np.ndarray, tris: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized Moller-Trumbore; rows of the three inputs are paired.

    Returns (hit, t) with hits only for t > 0 along the ray.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        e1 = tris[:, 1] - tris[:, 0]
        e2 = tris[:, 2] - tris[:, 0]
        p = np.cross(directions, e2)
        det = np.einsum("ij,ij->i", e1, p)
        inv = 1.0 / det
        tvec = origins - tris[:, 0]
        u = np.einsum("ij,ij->i", tvec, p) * inv
        q = np.cross(tvec, e1)
        v = np.einsum("ij,ij->i", directions, q) * inv
        t = np.einsum("ij,ij->i", e2, q) * inv
        hit = (np.abs(det) > _HIT_EPS) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > _HIT_EPS)
    return hit, t


class _ParallelRayGrid:
    """Uniform 2D bucket grid over triangles projected along one ray direction."""

    def __init__(self, tris: np.ndarray, direction: np.ndarray) -> None:
        d = direction / np.linalg.norm(direction)
        helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(d, helper)
        u /= np.linalg.norm(u)
        self._basis = np.stack([u, np.cross(d, u)])
        self._dir = d
        self._tris = tris

        proj = tris @ self._basis.T  # (F, 3, 2)
        lo, hi = proj.min(axis=1), proj.max(axis=1)
        self._origin = lo.min(axis=0)
        self._top = hi.max(axis=0)
        self._n = int(np.clip(np.sqrt(len(tris)), 1, 512))
        self._cell = np.maximum((self._top - self._origin) / self._n, 1e-12)

        i0, i1 = self._cell_of(lo), self._cell_of(hi)
        span = i1 - i0 + 1
        counts = span[:, 0] * span[:, 1]
        tri_ids = np.repeat(np.arange(len(tris)), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        ny = np.repeat(span[:, 1], counts)
        cx = np.repeat(i0[:, 0], counts) + local // ny
        cy = np.repeat(i0[:, 1], counts) + local % ny
        cells = cx * self._n + cy
        order = np.argsort(cells, kind="stable")
        self._cell_tris = tri_ids[order]
        sorted_cells = cells[order]
        all_cells = np.arange(self._n * self._n)
        self._starts = np.searchsorted(sorted_cells, all_cells, side="left")
        self._ends = np.searchsorted(sorted_cells, all_cells, side="right")

    def _cell_of(self, q: np.ndarray) -> np.ndarray:
        idx = np.floor((q - self._origin) / self._cell).astype(np.int64)
        return np.clip(idx, 0, self._n - 1)

    def crossing_counts(self, points: np.ndarray, chunk: int = 4096) -> np.ndarray:
        counts = np.zeros(len(points), dtype=np.int64)
        q = points @ self._basis.T
        inside = np.all((q >= self._origin) & (q <= self._top), axis=1)
        candidates = np.flatnonzero(inside)
        for start in range(0, len(candidates), chunk):
            idx = candidates[start : start + chunk]
            c = self._cell_of(q[idx])
            cid = c[:, 0] * self._n + c[:, 1]
            s, k = self._starts[cid], self._ends[cid] - self._starts[cid]
            pts = np.repeat(idx, k)
            offs = np.arange(k.sum()) - np.repeat(np.cumsum(k) - k, k)
            tri = self._cell_tris[np.repeat(s, k) + offs]
            dirs = np.broadcast_to(self._dir, (len(pts), 3))
            hit, _ = ray_triangle_hits(points[pts], dirs, self._tris[tri])
            counts += np.bincount(pts[hit], minlength=len(points))
        return counts


def inside_votes(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Number of parity rays (out of PARITY_RAYS) that classify each point as inside."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    votes = np.zeros(len(points), dtype=np.int64)
    if mesh.num_faces == 0:
        return votes
    tris = mesh.triangles()
    for direction in _RAY_DIRECTIONS:
        crossings = _ParallelRayGrid(tris, direction).crossing_counts(points)
        votes += crossings % 2
    return votes


def points_inside(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    return inside_votes(mesh, points) * 2 > PARITY_RAYS


def point_in_mesh(mesh: TriMesh, p: np.ndarray) -> Literal["inside", "outside"]:
    return "inside" if points_inside(mesh, np.asarray(p)[None])[0] else "outside"


def camera_frame(camera: CameraSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(forward, right, up) unit vectors of a look-at camera."""
    if camera.focal <= 0:
        raise ParameterError(f"focal length must be positive, got {camera.focal}")
    forward = np.subtract(camera.look_at, camera.position).astype(np.float64)
    if np.linalg.norm(forward) == 0:
        raise ParameterError("camera position equals look-at point")
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, camera.up)
    if np.linalg.norm(right) < 1e-12:
        raise ParameterError("camera up vector is parallel to the view direction")
    right /= np.linalg.norm(right)
    return forward, right, np.cross(right, forward)


def camera_rays(camera: CameraSpec) -> tuple[np.ndarray, np.ndarray]:
    """Camera origin and unit ray directions through pixel centers, row-major (H*W, 3)."""
    forward, right, up = camera_frame(camera)
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    x = (cols.reshape(-1) + 0.5 - camera.width / 2.0) / camera.focal
    y = -(rows.reshape(-1) + 0.5 - camera.height / 2.0) / camera.focal
    dirs = forward + x[:, None] * right + y[:, None] * up
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.asarray(camera.position, dtype=np.float64), dirs


def project_points(
    camera: CameraSpec, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest pixel (row, col) of each point and whether it lies in front of the camera."""
    forward, right, up = camera_frame(camera)
    rel = np.asarray(points, dtype=np.float64) - np.asarray(camera.position)
    z = rel @ forward
    front = z > 1e-9
    safe = np.where(front, z, 1.0)
    col = np.round((rel @ right) / safe * camera.focal + camera.width / 2.0 - 0.5).astype(np.int64)
    row = np.round(-(rel @ up) / safe * camera.focal + camera.height / 2.0 - 0.5).astype(np.int64)
    in_image = front & (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    return row, col, in_image


def raycast_depth(mesh: TriMesh, camera: CameraSpec, max_pairs: int = 250_000) -> DepthView:
    """Nearest-hit distance per pixel; background pixels hold +inf."""
    origin, dirs = camera_rays(camera)
    if mesh.num_faces == 0:
        raise GeometryError("cannot render an empty mesh")
    tris = mesh.triangles()
    nf = len(tris)
    depth = np.full(len(dirs), np.inf)
    chunk = max(1, max_pairs // nf)
    for start in range(0, len(dirs), chunk):
        d = dirs[start : start + chunk]
        k = len(d)
        origins = np.broadcast_to(origin, (k * nf, 3))
        hit, t = ray_triangle_hits(origins, np.repeat(d, nf, axis=0), np.tile(tris, (k, 1, 1)))
        t = np.where(hit, t, np.inf).reshape(k, nf)
        depth[start : start + chunk] = t.min(axis=1)
    return DepthView(camera, depth.reshape(camera.height, camera.width))


# ---------------------------------------------------------------------------
# Depth blob
# ---------------------------------------------------------------------------

_DEPTH_HEADER = struct.Struct("<4sIII10f")


def save_depth(view: DepthView, path: Path) -> None:
    cam = view.camera
    header = _DEPTH_HEADER.pack(
        DEPTH_MAGIC, DEPTH_VERSION, cam.width, cam.height,
        cam.focal, *cam.position, *cam.look_at, *cam.up,
    )
    depth = np.where(view.hit_mask, view.depth, DEPTH_MISS).astype("<f4")
    Path(path).write_bytes(header + depth.tobytes())


def load_depth(path: Path) -> DepthView:
    blob = Path(path).read_bytes()
    if len(blob) < _DEPTH_HEADER.size:
        raise FormatError(f"{path}: truncated depth header")
    magic, version, width, height, focal, *rest = _DEPTH_HEADER.unpack_from(blob)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DEPTH_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(blob) != _DEPTH_HEADER.size + 4 * width * height:
        raise FormatError(f"{path}: depth payload size mismatch")
    camera = CameraSpec(
        position=tuple(rest[0:3]), look_at=tuple(rest[3:6]), up=tuple(rest[6:9]),
        focal=focal, width=width, height=height,
    )
    depth = np.frombuffer(blob, dtype="<f4", offset=_DEPTH_HEADER.size).astype(np.float64)
    depth = np.where(depth < 0, np.inf, depth).reshape(height, width)
    return DepthView(camera, depth)
