"""Mesh construction, validation, queries, file I/O, and coarsening."""

import numpy as np
import pytest

from easloc.mesh import (
    MeshFormatError,
    MeshValidationError,
    SimplicialMesh,
    azimuthal_fiber_field,
    coarsen_mesh,
    fixed_fiber_field,
    flat_sheet,
    generate_synthetic_geometry,
    load_fibers,
    load_mesh,
    nearest_node,
    nearest_nodes,
    save_fibers,
    save_mesh,
)


def test_icosphere_counts_and_area():
    for level in (0, 1, 2):
        m = generate_synthetic_geometry("icosphere", 1.0, level)
        assert m.n_vertices == 10 * 4**level + 2
        assert m.n_simplices == 20 * 4**level
    m = generate_synthetic_geometry("icosphere", 1.0, 2)
    assert m.element_measures.sum() == pytest.approx(4 * np.pi, rel=0.02)


def test_ellipsoid_radii_respected():
    m = generate_synthetic_geometry("ellipsoid-shell", (30, 25, 20), 2)
    half = 0.5 * np.ptp(m.vertices, axis=0)
    assert np.allclose(half, [30, 25, 20], rtol=1e-9)
    with pytest.raises(ValueError):
        generate_synthetic_geometry("ellipsoid-shell", (30, 25), 2)
    with pytest.raises(ValueError):
        generate_synthetic_geometry("icosphere", (30, 25, 20), 2)


def test_fibers_unit_and_tangent(sphere2):
    norms = np.linalg.norm(sphere2.fibers, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-9)
    offplane = np.einsum("ij,ij->i", sphere2.fibers, sphere2.element_normals)
    assert np.abs(offplane).max() < 1e-6


def test_fixed_fiber_rule_projects_direction(sphere2):
    fib = fixed_fiber_field(sphere2.vertices, sphere2.simplices, (1.0, 0, 0))
    assert np.allclose(np.linalg.norm(fib, axis=1), 1.0, atol=1e-9)
    # the projection keeps a non-negative x-component wherever well defined
    assert np.median(fib[:, 0]) > 0.5


def test_validation_rejects_bad_meshes():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
    tris = np.array([[0, 1, 2], [1, 3, 2]])
    SimplicialMesh(verts, tris)  # sanity: the good mesh passes
    with pytest.raises(MeshValidationError):
        SimplicialMesh(verts, np.array([[0, 1, 4]]))  # out of range
    with pytest.raises(MeshValidationError):
        SimplicialMesh(verts, np.array([[0, 1, 1]]))  # repeated vertex
    with pytest.raises(MeshValidationError):  # degenerate (collinear)
        SimplicialMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]),
                       np.array([[0, 1, 2]]))
    with pytest.raises(MeshValidationError):  # two components
        v2 = np.vstack([verts, verts + [10, 0, 0]])
        SimplicialMesh(v2, np.array([[0, 1, 2], [4, 5, 6]]))
    with pytest.raises(MeshValidationError):  # non-unit fiber
        SimplicialMesh(verts, tris, fibers=np.zeros((2, 3)))


def test_flat_sheet_geometry():
    m = flat_sheet(10, 10)
    assert m.n_vertices == 121
    assert m.element_measures.sum() == pytest.approx(1.0)
    assert np.allclose(m.vertices[:, 2], 0.0)


def test_nearest_node_and_ties():
    m = flat_sheet(4, 4)
    assert nearest_node(m, m.vertices[7]) == 7
    # equidistant query between nodes 0 and 1 -> lowest index wins
    mid = 0.5 * (m.vertices[0] + m.vertices[5])
    assert nearest_node(m, mid) == 0
    batch = nearest_nodes(m, m.vertices[[3, 11, 0]])
    assert batch.tolist() == [3, 11, 0]


@pytest.mark.parametrize("fmt,suffix", [("off", ".off"),
                                        ("vtk-legacy-ascii", ".vtk")])
def test_mesh_roundtrip_bit_exact(tmp_path, sphere2, fmt, suffix):
    path = tmp_path / f"mesh{suffix}"
    save_mesh(sphere2, path, fmt=fmt)
    back = load_mesh(path, fmt=fmt)
    assert np.array_equal(back.vertices, sphere2.vertices)
    assert np.array_equal(back.simplices, sphere2.simplices)
    if fmt == "vtk-legacy-ascii":  # fibers embedded in CELL_DATA
        assert np.array_equal(back.fibers, sphere2.fibers)
    # second save is byte-identical
    path2 = tmp_path / f"again{suffix}"
    save_mesh(back, path2, fmt=fmt)
    assert path.read_bytes() == path2.read_bytes()


def test_fiber_sidecar_roundtrip(tmp_path, sphere2):
    path = tmp_path / "m.off"
    fib = tmp_path / "m.fibers"
    save_mesh(sphere2, path, fibers_path=fib)
    back = load_mesh(path, fibers_path=fib)
    assert np.array_equal(back.fibers, sphere2.fibers)
    assert np.array_equal(load_fibers(fib), sphere2.fibers)


def test_load_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.off"
    bad.write_text("not a mesh\n")
    with pytest.raises(MeshFormatError):
        load_mesh(bad)
    with pytest.raises(MeshFormatError):
        save_mesh(flat_sheet(2, 2), tmp_path / "x.xyz", fmt="xyz")


def test_coarsen_ratio_and_validity(sphere3):
    lf = coarsen_mesh(sphere3, 2.0)
    ratio = lf.n_vertices / sphere3.n_vertices
    assert 0.2 <= ratio <= 0.35
    edge_ratio = lf.mean_edge_length / sphere3.mean_edge_length
    assert edge_ratio == pytest.approx(2.0, rel=0.2)
    lf.validate()
    # coarse mesh stays close to the unit sphere
    radii = np.linalg.norm(lf.vertices, axis=1)
    assert np.abs(radii - 1.0).max() < 0.1


def test_azimuthal_field_is_circumferential():
    # the principal axis of this ellipsoid is x, so fibers wind around it
    m = generate_synthetic_geometry("ellipsoid-shell", (30, 25, 20), 2)
    fib = azimuthal_fiber_field(m.vertices, m.simplices)
    expected = np.cross([1.0, 0.0, 0.0], m.centroids)
    expected /= np.maximum(np.linalg.norm(expected, axis=1, keepdims=True),
                           1e-12)
    align = np.abs(np.einsum("ij,ij->i", fib, expected))
    assert np.median(align) > 0.95


def test_mesh_arrays_immutable(sphere2):
    with pytest.raises(ValueError):
        sphere2.vertices[0, 0] = 99.0
