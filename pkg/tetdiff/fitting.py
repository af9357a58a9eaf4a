"""Fit grid states to ground-truth geometry.

A fit runs in two passes: signs first (ray-parity occupancy of every rest vertex, already
normalized to +-1), then deformations under a two-sided Chamfer loss with the signs frozen.
With +-1 signs every mesh vertex is the midpoint of its deformed edge, so the Chamfer
gradient reaches the deformations through a fixed linear map.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from tetdiff.errors import (
    BatchError,
    DivergenceError,
    GeometryError,
    ParameterError,
    StateError,
    TetDiffError,
    VisibilityError,
)
from tetdiff.marching import SurfaceTopology, surface_topology
from tetdiff.meshops import (
    PARITY_RAYS,
    DepthView,
    PointCloud,
    TriMesh,
    inside_votes,
    load_obj,
    normalize_mesh,
    project_points,
    sample_faces,
)
from tetdiff.models import FitConfig, FitRecord, FitReport
from tetdiff.optim import Adam
from tetdiff.tetgrid import GridState, TetGrid, save_state

logger = logging.getLogger(__name__)

SPLIT_VOTE_WARN_FRACTION = 0.01
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50
RAW_SDF_SAMPLES = 20_000
EVAL_SAMPLES = 20_000
NORMALIZE_BOUND = 0.9


@dataclass(frozen=True, eq=False)
class FitOutcome:
    record: FitRecord
    state: GridState | None = None
    report: FitReport | None = None


# ---------------------------------------------------------------------------
# Sign pass
# ---------------------------------------------------------------------------


def _classify_vertices(grid: TetGrid, gt: TriMesh) -> tuple[np.ndarray, int]:
    """Inside flags of all rest vertices and the number of non-unanimous votes."""
    if gt.num_faces == 0:
        raise GeometryError("ground-truth mesh has no faces")
    votes = inside_votes(gt, grid.vertex_positions)
    inside = votes * 2 > PARITY_RAYS
    split = int(np.count_nonzero((votes > 0) & (votes < PARITY_RAYS)))
    return inside, split


def _sign_state(inside: np.ndarray) -> GridState:
    sdf = np.where(inside, -1.0, 1.0)
    return GridState(np.zeros((len(sdf), 3)), sdf, normalized=True)


def fit_signs(grid: TetGrid, gt: TriMesh) -> GridState:
    inside, split = _classify_vertices(grid, gt)
    if split > SPLIT_VOTE_WARN_FRACTION * grid.num_vertices:
        logger.warning("%d of %d vertices had split parity votes", split, grid.num_vertices)
    return _sign_state(inside)


def fit_raw_sdf(
    grid: TetGrid, gt: TriMesh, samples: int = RAW_SDF_SAMPLES, seed: int = 0
) -> GridState:
    """Continuous first pass: distance to dense surface samples, signed by the nearest
    sample's face normal. Not normalized."""
    if gt.num_faces == 0:
        raise GeometryError("ground-truth mesh has no faces")
    rng = np.random.default_rng(seed)
    face_ids, w = sample_faces(gt.face_areas(), samples, rng)
    points = np.einsum("nk,nkd->nd", w, gt.triangles()[face_ids])
    normals = gt.face_normals()[face_ids]
    dist, idx = cKDTree(points).query(grid.vertex_positions)
    side = np.einsum("ij,ij->i", grid.vertex_positions - points[idx], normals[idx])
    sdf = np.where(side < 0, -dist, dist)
    return GridState(np.zeros((grid.num_vertices, 3)), sdf)


def sdf_regularizer(grid: TetGrid, sdf: np.ndarray) -> float:
    """Sum of squared SDF differences over grid edges."""
    s = np.asarray(sdf, dtype=np.float64)
    return float(np.sum((s[grid.edges[:, 0]] - s[grid.edges[:, 1]]) ** 2))


# ---------------------------------------------------------------------------
# Deformation pass
# ---------------------------------------------------------------------------


def _chamfer(x: np.ndarray, y: np.ndarray) -> float:
    dxy, _ = cKDTree(y).query(x)
    dyx, _ = cKDTree(x).query(y)
    return float(np.mean(dxy**2) + np.mean(dyx**2))


def _chamfer_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Chamfer loss and its gradient w.r.t. x with the nearest-neighbour matches held fixed."""
    dxy, ixy = cKDTree(y).query(x)
    dyx, iyx = cKDTree(x).query(y)
    loss = float(np.mean(dxy**2) + np.mean(dyx**2))
    grad = 2.0 * (x - y[ixy]) / len(x)
    np.add.at(grad, iyx, 2.0 * (x[iyx] - y) / len(y))
    return loss, grad


class _MidpointSurface:
    """Mesh vertices as midpoints of deformed crossing edges, with a fixed face set."""

    def __init__(self, grid: TetGrid, topo: SurfaceTopology, faces: np.ndarray) -> None:
        self.rest = grid.vertex_positions
        self.edges = topo.edges
        self.faces = faces

    def vertices(self, deformation: np.ndarray) -> np.ndarray:
        p = self.rest + deformation
        return 0.5 * (p[self.edges[:, 0]] + p[self.edges[:, 1]])

    def sample(
        self, deformation: np.ndarray, n: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        tri = self.vertices(deformation)[self.faces]
        areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        return sample_faces(areas, n, rng)

    def points(self, deformation: np.ndarray, face_ids: np.ndarray, w: np.ndarray) -> np.ndarray:
        m = self.vertices(deformation)
        return np.einsum("nk,nkd->nd", w, m[self.faces[face_ids]])

    def pullback(self, grad_points: np.ndarray, face_ids: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. per-vertex deformation from a gradient w.r.t. sample points."""
        grad_mid = np.zeros((len(self.edges), 3))
        corners = self.faces[face_ids]
        for k in range(3):
            np.add.at(grad_mid, corners[:, k], w[:, k, None] * grad_points)
        grad = np.zeros_like(self.rest)
        np.add.at(grad, self.edges[:, 0], 0.5 * grad_mid)
        np.add.at(grad, self.edges[:, 1], 0.5 * grad_mid)
        return grad


def _target_sampler(target: TriMesh | PointCloud, n: int):
    if isinstance(target, TriMesh):
        areas = target.face_areas()
        tris = target.triangles()

        def draw(rng: np.random.Generator) -> np.ndarray:
            face_ids, w = sample_faces(areas, n, rng)
            return np.einsum("nk,nkd->nd", w, tris[face_ids])

        return draw

    points = target.points
    if len(points) == 0:
        raise GeometryError("target point cloud is empty")

    def subset(rng: np.random.Generator) -> np.ndarray:
        if len(points) <= n:
            return points
        return points[rng.choice(len(points), n, replace=False)]

    return subset


def _eval_chamfer(
    surface: _MidpointSurface, deformation: np.ndarray, target: TriMesh | PointCloud, seed: int
) -> float:
    """Chamfer on a fixed dense sample set, comparable across calls with the same seed."""
    rng = np.random.default_rng(seed)
    face_ids, w = surface.sample(deformation, EVAL_SAMPLES, rng)
    x = surface.points(deformation, face_ids, w)
    y = _target_sampler(target, EVAL_SAMPLES)(rng)
    return _chamfer(x, y)


def optimize_deformations(
    grid: TetGrid,
    state: GridState,
    target: TriMesh | PointCloud,
    cfg: FitConfig,
    active: np.ndarray | None = None,
    mesh_id: str = "",
) -> tuple[GridState, FitReport]:
    """Minimize Chamfer(extracted surface, target) over deformations with signs frozen.

    `active` restricts both the optimized vertices and the sampled faces to those whose
    crossing edges have only active endpoints.
    """
    if not state.normalized:
        raise StateError("deformation fitting needs a normalized (+-1) sign field")
    topo = surface_topology(grid, state.sdf)
    if len(topo.faces) == 0:
        raise GeometryError("sign field produces no surface")

    faces = topo.faces
    if active is not None:
        active = np.asarray(active, dtype=bool)
        edge_ok = active[topo.edges].all(axis=1)
        faces = faces[edge_ok[faces].all(axis=1)]
    schedule = (cfg.sdf_weight(0), cfg.sdf_weight(max(cfg.iterations - 1, 0)))
    base = dict(
        mesh_id=mesh_id,
        sdf_regularizer=sdf_regularizer(grid, state.sdf),
        sdf_weight_schedule=schedule,
    )
    if len(faces) == 0:
        logger.warning("No active surface faces to fit; deformations left unchanged")
        return state, FitReport(
            initial_chamfer=0.0, final_chamfer=0.0, chamfer_trace=[0.0],
            warnings=["no active surface faces"], **base,
        )

    surface = _MidpointSurface(grid, topo, faces)
    d = state.deformation.astype(np.float64)
    initial = _eval_chamfer(surface, d, target, cfg.seed)
    if cfg.iterations == 0:
        return state, FitReport(
            initial_chamfer=initial, final_chamfer=initial, chamfer_trace=[initial], **base
        )

    rng = np.random.default_rng(cfg.seed)
    draw_target = _target_sampler(target, cfg.samples)
    adam = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2)
    frozen = None if active is None else ~active
    trace, accepted_trace = [initial], []
    halvings = 0
    first_loss = None
    over = 0

    for it in range(cfg.iterations):
        face_ids, w = surface.sample(d, cfg.samples, rng)
        y = draw_target(rng)
        loss, grad_x = _chamfer_grad(surface.points(d, face_ids, w), y)
        grad = surface.pullback(grad_x, face_ids, w)
        if frozen is not None:
            grad[frozen] = 0.0
        step = adam.update({"deformation": grad})["deformation"]
        if frozen is not None:
            step[frozen] = 0.0

        trace.append(loss)
        first_loss = loss if first_loss is None else first_loss
        scale, new_loss = 1.0, loss
        for attempt in range(cfg.max_halvings + 1):
            candidate = np.clip(d - scale * step, -grid.delta_max, grid.delta_max)
            cand_loss = _chamfer(surface.points(candidate, face_ids, w), y)
            if cand_loss <= loss:
                d, new_loss = candidate, cand_loss
                break
            if attempt < cfg.max_halvings:
                scale *= 0.5
                halvings += 1
        accepted_trace.append(new_loss)

        over = over + 1 if loss > DIVERGENCE_FACTOR * first_loss else 0
        if over >= DIVERGENCE_PATIENCE:
            raise DivergenceError(
                f"chamfer above {DIVERGENCE_FACTOR}x initial for {over} steps (iteration {it})",
                trace,
            )

    final = _eval_chamfer(surface, d, target, cfg.seed)
    out = GridState(d, state.sdf, normalized=True)
    return out, FitReport(
        initial_chamfer=initial,
        final_chamfer=final,
        iterations=cfg.iterations,
        chamfer_trace=trace,
        accepted_trace=accepted_trace,
        halvings=halvings,
        **base,
    )


def fit_mesh(
    grid: TetGrid, gt: TriMesh, cfg: FitConfig, mesh_id: str = ""
) -> tuple[GridState, FitReport]:
    """Both passes for one mesh, with the continuous first pass as a sign cross-check."""
    inside, split = _classify_vertices(grid, gt)
    warnings = []
    if split > SPLIT_VOTE_WARN_FRACTION * grid.num_vertices:
        warnings.append(f"{split} vertices with split parity votes")
        logger.warning("%s: %d vertices with split parity votes", mesh_id or "mesh", split)
    signs = _sign_state(inside)
    raw = fit_raw_sdf(grid, gt, seed=cfg.seed)
    flips = int(np.count_nonzero((raw.sdf < 0) != inside))

    state, report = optimize_deformations(grid, signs, gt, cfg, mesh_id=mesh_id)
    report = report.model_copy(
        update={
            "sign_flips": flips,
            "split_votes": split,
            "warnings": report.warnings + warnings,
        }
    )
    return state, report


def fit_dataset(
    items: Sequence[tuple[str, TriMesh | Path]],
    grid: TetGrid,
    cfg: FitConfig,
    out_dir: Path | None = None,
    normalize: bool = True,
    workers: int = 1,
) -> list[FitOutcome]:
    """Fit every (id, mesh or OBJ path) item; failures are recorded, not raised."""
    if not items:
        raise ParameterError("no meshes to fit")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    def fit_item(index: int) -> FitOutcome:
        mesh_id, source = items[index]
        try:
            mesh = source if isinstance(source, TriMesh) else load_obj(Path(source))
            scale, center = 1.0, np.zeros(3)
            if normalize:
                mesh, scale, center = normalize_mesh(mesh, NORMALIZE_BOUND)
            item_cfg = cfg.model_copy(update={"seed": cfg.seed + index})
            state, report = fit_mesh(grid, mesh, item_cfg, mesh_id)
            output = None
            if out_dir is not None:
                path = Path(out_dir) / f"{mesh_id}.tetg"
                save_state(path, state, grid.resolution)
                output = str(path)
        except (TetDiffError, OSError) as exc:
            logger.exception("Fitting %s failed", mesh_id)
            return FitOutcome(FitRecord(mesh_id=mesh_id, error=str(exc)))

        logger.info(
            "Fitted %s: chamfer %.5f in %d iterations",
            mesh_id, report.final_chamfer, report.iterations,
        )
        record = FitRecord(
            mesh_id=mesh_id,
            output=output,
            final_chamfer=report.final_chamfer,
            iterations=report.iterations,
            scale=scale,
            center=tuple(float(c) for c in center),
            warnings=report.warnings,
        )
        return FitOutcome(record, state, report)

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        outcomes = list(pool.map(fit_item, range(len(items))))

    failures = {o.record.mesh_id: o.record.error for o in outcomes if o.record.error}
    if len(failures) == len(outcomes):
        raise BatchError(f"all {len(outcomes)} meshes failed to fit", failures)
    return outcomes


# ---------------------------------------------------------------------------
# Single view
# ---------------------------------------------------------------------------


def fit_singleview(
    grid: TetGrid, view: DepthView, cfg: FitConfig
) -> tuple[GridState, np.ndarray]:
    """Signs from one depth image plus the per-vertex visibility mask.

    Vertices along a ray in front of the observed depth (or on a background ray) are
    carved to +1. Within one cell edge of the observed depth the sign flips from +1 in
    front to -1 behind. Deeper vertices default to -1 and vertices outside the view to +1.

    A tet is visible when any of its vertices projects to a hit pixel no deeper than the
    observed depth plus one cell edge. Every vertex of an occluded tet is unknown unless
    it was carved.
    """
    if not view.hit_mask.any():
        raise VisibilityError("depth view has no hit pixels")
    h = grid.cell_size
    pos = grid.vertex_positions
    row, col, in_image = project_points(view.camera, pos)
    dist = np.linalg.norm(pos - np.asarray(view.camera.position), axis=1)

    observed = np.full(grid.num_vertices, np.nan)
    observed[in_image] = view.depth[row[in_image], col[in_image]]
    miss = in_image & np.isinf(observed)
    hit = in_image & np.isfinite(observed)
    with np.errstate(invalid="ignore"):
        carved = miss | (hit & (dist < observed - h))
        front_band = hit & (dist >= observed - h) & (dist < observed)
        back_band = hit & (dist >= observed) & (dist <= observed + h)
        behind = hit & (dist > observed + h)

    sdf = np.where(back_band | behind, -1.0, 1.0)
    occluded_tets = ~(hit & ~behind)[grid.tets].any(axis=1)
    known = np.ones(grid.num_vertices, dtype=bool)
    known[grid.tets[occluded_tets].ravel()] = False
    known |= carved
    logger.info(
        "Single view: %d carved, %d band, %d unknown vertices; %d occluded tets",
        int(carved.sum()), int((front_band | back_band).sum()),
        int((~known).sum()), int(occluded_tets.sum()),
    )

    state = GridState(np.zeros((grid.num_vertices, 3)), sdf, normalized=True)
    target = PointCloud(view.hit_points())
    try:
        state, _ = optimize_deformations(grid, state, target, cfg, active=known)
    except GeometryError as exc:
        logger.warning("Skipping single-view deformation refinement: %s", exc)
    return state, known
