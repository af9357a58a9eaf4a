"""Tests for marching tetrahedra on deformable grids.

Verifies that:
1. The case table has the expected triangle counts per sign pattern.
2. A sphere SDF extracts to a closed genus-0 mesh whose vertices are exact zeros of the
   edge interpolant.
3. With normalized SDFs every mesh vertex is the midpoint of its deformed edge.
4. vertex_noise_delta matches the difference of two zero-crossing evaluations.
5. Faces are wound so normals point from negative to positive SDF.
"""

from __future__ import annotations

import numpy as np
import pytest

from tetdiff.errors import DomainError, NoCrossingError
from tetdiff.marching import (
    CASE_TABLE,
    CASE_TRIANGLES,
    ZERO_SDF_REPLACEMENT,
    case_class,
    edge_zero_crossing,
    extract_mesh,
    interpolate_sdf,
    prepare_sdf,
    surface_topology,
    vertex_noise_delta,
)
from tetdiff.meshops import topology_check
from tetdiff.shapes import sphere_sdf
from tetdiff.tetgrid import GridState, build_bcc_grid

# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


def _signed_volume(mesh) -> float:
    tri = mesh.triangles()
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6)


@pytest.fixture(scope="module")
def sphere_case():
    grid = build_bcc_grid(16)
    state = GridState(np.zeros((grid.num_vertices, 3)), sphere_sdf(grid.vertex_positions, 0.6))
    # stored values are float32
    sdf = state.sdf.astype(np.float64)
    return grid, sdf, extract_mesh(grid, state)


# ---------------------------------------------------------------------------
# Tests
# ---------------------------------------------------------------------------


def test_case_table_counts():
    """Uniform codes are empty, one-vs-three give one triangle, two-vs-two give two."""
    for code in range(16):
        ones = bin(code).count("1")
        expected = {0: 0, 4: 0, 1: 1, 3: 1, 2: 2}[ones]
        assert CASE_TRIANGLES[code] == expected
        assert (CASE_TABLE[code, :expected] >= 0).all()
        assert (CASE_TABLE[code, expected:] == -1).all()
    assert case_class(0) == "empty"
    assert case_class(0b0001) == "one-vs-three"
    assert case_class(0b0011) == "two-vs-two"


def test_sphere_vertices_are_interpolant_zeros(sphere_case):
    grid, sdf, mesh = sphere_case
    topo = surface_topology(grid, sdf)
    va = grid.vertex_positions[topo.edges[:, 0]]
    vb = grid.vertex_positions[topo.edges[:, 1]]
    sa, sb = sdf[topo.edges[:, 0]], sdf[topo.edges[:, 1]]
    seg = vb - va
    t = np.einsum("ij,ij->i", mesh.vertices - va, seg) / np.einsum("ij,ij->i", seg, seg)
    assert np.abs(sa + t * (sb - sa)).max() <= 1e-9


def test_sphere_is_closed_genus_zero(sphere_case):
    grid, _, mesh = sphere_case
    report = topology_check(mesh)
    assert report.watertight
    assert report.euler == 2
    assert report.component_count == 1
    radial = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.6)
    assert radial.max() <= grid.cell_size


def test_sphere_faces_point_outward(sphere_case):
    """Positive signed volume close to the analytic sphere volume."""
    _, _, mesh = sphere_case
    volume = _signed_volume(mesh)
    assert volume == pytest.approx(4 / 3 * np.pi * 0.6**3, rel=0.05)


def test_normalized_vertices_are_edge_midpoints():
    grid = build_bcc_grid(6)
    rng = np.random.default_rng(3)
    for _ in range(5):
        d = rng.uniform(-grid.delta_max, grid.delta_max, (grid.num_vertices, 3))
        s = rng.choice([-1.0, 1.0], grid.num_vertices)
        state = GridState(d, s, normalized=True)
        positions = grid.deformed_positions(state)
        topo = surface_topology(grid, state.sdf)
        mid = 0.5 * (positions[topo.edges[:, 0]] + positions[topo.edges[:, 1]])
        mesh = extract_mesh(grid, state)
        np.testing.assert_allclose(mesh.vertices, mid, rtol=0, atol=1e-12)


def test_noise_delta_matches_crossing_difference():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        va, vb = rng.normal(size=(2, 3))
        sa = -rng.uniform(0.1, 1.0)
        sb = rng.uniform(0.1, 1.0)
        eps = rng.uniform(-0.05, 0.05)
        moved = edge_zero_crossing(va, sa + eps, vb, sb + eps)
        base = edge_zero_crossing(va, sa, vb, sb)
        delta = vertex_noise_delta(va, vb, sa, sb, eps)
        np.testing.assert_allclose(delta, moved - base, rtol=0, atol=1e-12)


def test_noise_delta_for_normalized_signs():
    """With +-1 values the shift is eps * (va - vb) / 2, linear in eps."""
    va, vb = np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])
    delta = vertex_noise_delta(va, vb, -1.0, 1.0, 0.1)
    np.testing.assert_allclose(delta, [-0.05, 0.0, 0.0])
    with pytest.raises(DomainError):
        vertex_noise_delta(va, vb, 0.5, 0.5, 0.1)


def test_edge_zero_crossing_requires_sign_change():
    with pytest.raises(NoCrossingError):
        edge_zero_crossing(np.zeros(3), 1.0, np.ones(3), 2.0)
    with pytest.raises(NoCrossingError):
        edge_zero_crossing(np.zeros(3), 0.0, np.ones(3), 2.0)
    p = edge_zero_crossing(np.zeros(3), -1.0, np.ones(3), 3.0)
    np.testing.assert_allclose(p, [0.25, 0.25, 0.25])


def test_interpolate_sdf_domain():
    v = np.eye(4, 3)
    s = np.array([1.0, -1.0, 2.0, 0.0])
    assert interpolate_sdf(v, s, np.array([0.25, 0.25, 0.25, 0.25])) == pytest.approx(0.5)
    assert interpolate_sdf(v, s, np.array([0.0, 0.0, 1.0, 0.0])) == 2.0
    with pytest.raises(DomainError):
        interpolate_sdf(v, s, np.array([0.5, 0.5, 0.5, -0.5]))
    with pytest.raises(DomainError):
        interpolate_sdf(v, s, np.array([0.5, 0.2, 0.2, 0.2]))


def test_exact_zeros_count_as_negative():
    s = prepare_sdf(np.array([0.0, 1.0, -1.0]))
    assert s[0] == ZERO_SDF_REPLACEMENT
    assert s[1] == 1.0


def test_uniform_signs_give_empty_mesh():
    grid = build_bcc_grid(3)
    mesh = extract_mesh(grid, GridState(np.zeros((grid.num_vertices, 3)),
                                        np.ones(grid.num_vertices)))
    assert mesh.num_faces == 0
    assert not topology_check(mesh).watertight
