"""Tests for sign fitting, deformation optimization and single-view signs.

Verifies that:
1. Ray-parity signs classify grid vertices of a sphere correctly away from the surface.
2. The continuous first pass agrees in sign and approximates the distance.
3. Deformation fitting reduces Chamfer, respects the clip bound and frozen vertices.
4. Dataset fitting records per-item failures and raises only when all fail.
5. Single-view signs carve free space; every vertex of an occluded tet is unknown.
6. Sign fitting is idempotent and the extracted mesh is affine in the deformation.
"""

from __future__ import annotations

import numpy as np
import pytest

from tetdiff.errors import (
    BatchError,
    GeometryError,
    ParameterError,
    StateError,
    VisibilityError,
)
from tetdiff.fitting import (
    fit_dataset,
    fit_mesh,
    fit_raw_sdf,
    fit_signs,
    fit_singleview,
    optimize_deformations,
    sdf_regularizer,
)
from tetdiff.marching import extract_mesh
from tetdiff.meshops import DepthView, TriMesh, project_points, raycast_depth
from tetdiff.models import CameraSpec, FitConfig
from tetdiff.shapes import box_mesh, icosphere
from tetdiff.tetgrid import GridState, build_bcc_grid, load_state

# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


def _make_cfg(**overrides) -> FitConfig:
    base = dict(iterations=20, samples=1024, learning_rate=2e-3, seed=0)
    return FitConfig(**{**base, **overrides})


def _nearest_vertex(grid, point) -> int:
    return int(np.argmin(np.linalg.norm(grid.vertex_positions - np.asarray(point), axis=1)))


@pytest.fixture(scope="module")
def grid():
    return build_bcc_grid(8)


@pytest.fixture(scope="module")
def sphere():
    return icosphere(0.6, subdivisions=3)


# ---------------------------------------------------------------------------
# Sign pass
# ---------------------------------------------------------------------------


def test_signs_of_sphere(grid, sphere):
    state = fit_signs(grid, sphere)
    assert state.normalized
    r = np.linalg.norm(grid.vertex_positions, axis=1)
    assert np.all(state.sdf[r < 0.55] == -1.0)
    assert np.all(state.sdf[r > 0.65] == 1.0)
    assert np.all(state.deformation == 0)


def test_raw_sdf_matches_analytic_distance(grid, sphere):
    raw = fit_raw_sdf(grid, sphere, samples=20_000, seed=1)
    assert not raw.normalized
    r = np.linalg.norm(grid.vertex_positions, axis=1)
    clear = np.abs(r - 0.6) > 0.05
    assert np.all((raw.sdf[clear] < 0) == (r[clear] < 0.6))
    assert np.abs(raw.sdf - (r - 0.6)).max() < 0.05


def test_sdf_regularizer_counts_sign_changes(grid):
    ones = np.ones(grid.num_vertices)
    assert sdf_regularizer(grid, ones) == 0.0
    flipped = ones.copy()
    v = _nearest_vertex(grid, (0.0, 0.0, 0.0))
    flipped[v] = -1.0
    degree = np.count_nonzero(grid.edges == v)
    assert sdf_regularizer(grid, flipped) == pytest.approx(4.0 * degree)


def test_sign_pass_rejects_empty_mesh(grid):
    with pytest.raises(GeometryError):
        fit_signs(grid, TriMesh(np.zeros((0, 3)), np.zeros((0, 3))))


def test_sign_fitting_is_idempotent(grid, sphere):
    """Signs fitted to the mesh extracted from fitted signs come back unchanged."""
    signs = fit_signs(grid, sphere)
    assert np.array_equal(fit_signs(grid, sphere).sdf, signs.sdf)
    again = fit_signs(grid, extract_mesh(grid, signs))
    assert np.array_equal(again.sdf, signs.sdf)


def test_extracted_mesh_is_affine_in_deformation(grid, sphere):
    signs = fit_signs(grid, sphere).sdf
    rng = np.random.default_rng(4)

    def deformation():
        # multiples of 1/1024 keep float32 sums exact
        return rng.integers(-48, 49, size=(grid.num_vertices, 3)) / 1024.0

    d0, d1, d2 = deformation(), deformation(), deformation()

    def points(d):
        return extract_mesh(grid, GridState(d, signs, normalized=True)).vertices

    combined = points(d1 + d2 - d0)
    np.testing.assert_allclose(combined, points(d1) + points(d2) - points(d0), atol=1e-9)


# ---------------------------------------------------------------------------
# Deformation pass
# ---------------------------------------------------------------------------


def test_cube_fit_reduces_chamfer(grid):
    cube = box_mesh((0.6, 0.6, 0.6))
    cfg = _make_cfg(iterations=150)
    state, report = optimize_deformations(grid, fit_signs(grid, cube), cube, cfg, mesh_id="cube")
    assert report.final_chamfer < report.initial_chamfer
    assert report.iterations == 150
    assert len(report.chamfer_trace) == 151
    assert len(report.accepted_trace) == 150
    # an accepted step never increases the loss on its own samples
    assert all(a <= b for a, b in zip(report.accepted_trace, report.chamfer_trace[1:]))
    assert np.abs(state.deformation).max() <= grid.delta_max * (1 + 1e-6)
    assert state.normalized
    assert report.mesh_id == "cube"


def test_zero_iterations_returns_input(grid, sphere):
    signs = fit_signs(grid, sphere)
    state, report = optimize_deformations(grid, signs, sphere, _make_cfg(iterations=0))
    assert state is signs
    assert report.chamfer_trace == [report.initial_chamfer]
    assert report.final_chamfer == report.initial_chamfer


def test_frozen_vertices_do_not_move(grid, sphere):
    signs = fit_signs(grid, sphere)
    active = grid.vertex_positions[:, 2] > 0
    state, _ = optimize_deformations(grid, signs, sphere, _make_cfg(), active=active)
    assert np.all(state.deformation[~active] == 0)
    assert np.any(state.deformation[active] != 0)


def test_no_active_faces_warns(grid, sphere):
    signs = fit_signs(grid, sphere)
    active = np.zeros(grid.num_vertices, bool)
    state, report = optimize_deformations(grid, signs, sphere, _make_cfg(), active=active)
    assert state is signs
    assert report.chamfer_trace == [0.0]
    assert report.warnings


def test_optimizer_preconditions(grid, sphere):
    with pytest.raises(StateError):
        optimize_deformations(grid, GridState.zeros(grid.num_vertices), sphere, _make_cfg())
    outside = GridState(
        np.zeros((grid.num_vertices, 3)), np.ones(grid.num_vertices), normalized=True
    )
    with pytest.raises(GeometryError):
        optimize_deformations(grid, outside, sphere, _make_cfg())


def test_fit_mesh_is_deterministic(grid, sphere):
    cfg = _make_cfg(iterations=10, seed=3)
    a, report = fit_mesh(grid, sphere, cfg, "s")
    b, _ = fit_mesh(grid, sphere, cfg, "s")
    assert np.array_equal(a.deformation, b.deformation)
    assert report.sign_flips <= 0.01 * grid.num_vertices
    assert report.sdf_weight_schedule == pytest.approx((0.2, 0.01))
    assert report.sdf_regularizer > 0


@pytest.mark.slow
def test_sphere_fit_beats_sign_only_baseline():
    """R=16 sphere fit ends at least 30% below the sign-only midpoint mesh."""
    grid = build_bcc_grid(16)
    target = icosphere(0.6, subdivisions=5)
    cfg = _make_cfg(iterations=300, samples=4096)
    _, report = fit_mesh(grid, target, cfg, "sphere")
    assert report.final_chamfer <= 0.7 * report.initial_chamfer
    assert report.final_chamfer <= 0.5 * grid.cell_size


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


def test_fit_dataset_records_failures(tmp_path):
    grid = build_bcc_grid(4)
    items = [
        ("box", box_mesh((0.5, 0.4, 0.3))),
        ("empty", TriMesh(np.zeros((0, 3)), np.zeros((0, 3)))),
        ("missing", tmp_path / "nope.obj"),
    ]
    outcomes = fit_dataset(items, grid, _make_cfg(iterations=5), tmp_path / "out", workers=2)
    assert [o.record.mesh_id for o in outcomes] == ["box", "empty", "missing"]
    ok, empty, missing = outcomes
    assert ok.record.error is None
    assert ok.record.scale == pytest.approx(0.9 / 0.5)
    r, state = load_state(tmp_path / "out" / "box.tetg")
    assert r == 4
    assert np.array_equal(state.deformation, ok.state.deformation)
    assert empty.record.error and missing.record.error
    assert empty.state is None


def test_fit_dataset_all_failing(tmp_path):
    grid = build_bcc_grid(3)
    with pytest.raises(BatchError) as exc:
        fit_dataset([("a", tmp_path / "a.obj")], grid, _make_cfg())
    assert "a" in exc.value.failures
    with pytest.raises(ParameterError):
        fit_dataset([], grid, _make_cfg())


# ---------------------------------------------------------------------------
# Single view
# ---------------------------------------------------------------------------


def test_singleview_carves_and_leaves_occluded_unknown(grid, sphere):
    camera = CameraSpec(position=(0.0, 0.0, 3.0), focal=32.0, width=32, height=32)
    view = raycast_depth(sphere, camera)
    state, known = fit_singleview(grid, view, _make_cfg(iterations=5))
    assert state.normalized
    assert known.dtype == bool
    assert known.any() and not known.all()

    center = _nearest_vertex(grid, (0.0, 0.0, 0.0))
    assert state.sdf[center] == -1.0
    assert not known[center]

    front = _nearest_vertex(grid, (0.0, 0.0, 1.0))
    assert state.sdf[front] == 1.0
    assert known[front]


def test_singleview_mask_follows_tet_visibility(grid, sphere):
    """Known vertices are exactly those outside occluded tets, plus carved ones."""
    camera = CameraSpec(position=(0.0, 0.0, 3.0), focal=32.0, width=32, height=32)
    view = raycast_depth(sphere, camera)
    state, known = fit_singleview(grid, view, _make_cfg(iterations=0))

    h = grid.cell_size
    pos = grid.vertex_positions
    row, col, in_image = project_points(camera, pos)
    observed = np.full(grid.num_vertices, np.nan)
    observed[in_image] = view.depth[row[in_image], col[in_image]]
    dist = np.linalg.norm(pos - np.asarray(camera.position), axis=1)
    hit = in_image & np.isfinite(observed)
    miss = in_image & np.isinf(observed)
    with np.errstate(invalid="ignore"):
        seen = hit & (dist <= observed + h)
        carved = miss | (hit & (dist < observed - h))

    occluded = ~seen[grid.tets].any(axis=1)
    expected = ~np.isin(np.arange(grid.num_vertices), grid.tets[occluded]) | carved
    assert np.array_equal(known, expected)
    assert np.all(state.sdf[carved] == 1.0)

    # back hemisphere is hidden, front hemisphere is seen
    assert not known[_nearest_vertex(grid, (0.0, 0.0, -0.5))]
    assert known[_nearest_vertex(grid, (0.0, 0.0, 0.5))]


def test_singleview_needs_hits(grid):
    camera = CameraSpec(width=8, height=8)
    empty = DepthView(camera, np.full((8, 8), np.inf))
    with pytest.raises(VisibilityError):
        fit_singleview(grid, empty, _make_cfg())
