"""Anisotropic eikonal solver: tensors, local updates, and full solves."""

import numpy as np
import pytest

from easloc.eikonal import (
    EikonalSolver,
    build_conduction_tensor,
    geodesic_distances,
    isotropic_tensor,
    local_update,
    solve_eikonal,
)
from easloc.mesh import SimplicialMesh, flat_sheet


def _sheet_with_fibers(nx, ny, direction=(1.0, 0.0, 0.0)):
    m = flat_sheet(nx, ny)
    fib = np.tile(np.asarray(direction, float), (m.n_simplices, 1))
    fib /= np.linalg.norm(direction)
    return SimplicialMesh(m.vertices, m.simplices, fib)


# -- conduction tensors ---------------------------------------------------


def test_tensor_structure_and_eigenvalues():
    m = _sheet_with_fibers(2, 2, (1.0, 0, 0))
    D = build_conduction_tensor(m, 2.0, 1.0).tensors
    assert np.allclose(D[0], np.diag([4.0, 1.0, 1.0]))
    # general fiber direction: eigenvalues are {v_l^2, v_t^2, v_t^2}
    m2 = _sheet_with_fibers(2, 2, (1.0, 2.0, 0.0))
    D2 = build_conduction_tensor(m2, 0.6, 0.3).tensors
    ev = np.sort(np.linalg.eigvalsh(D2[0]))
    assert np.allclose(ev, [0.09, 0.09, 0.36], atol=1e-12)
    l = np.array([1.0, 2.0, 0.0]) / np.sqrt(5.0)
    assert np.allclose(D2[0] @ l, 0.36 * l)


def test_tensor_speed_validation():
    m = _sheet_with_fibers(2, 2)
    with pytest.raises(ValueError):
        build_conduction_tensor(m, 0.3, 0.6)  # v_l < v_t
    with pytest.raises(ValueError):
        build_conduction_tensor(m, 0.6, 0.0)
    iso = isotropic_tensor(m, 2.0)
    assert np.allclose(iso.tensors, 4.0 * np.eye(3))


# -- scalar local update --------------------------------------------------


def test_local_update_single_edge_and_infinite():
    D = np.eye(3)
    apex = [0.0, 1.0, 0.0]
    # only one finite neighbor -> simple edge update
    t = local_update(apex, [0, 0, 0], [1, 0, 0], 0.0, np.inf, D)
    assert t == pytest.approx(1.0, abs=1e-9)
    assert local_update(apex, [0, 0, 0], [1, 0, 0], np.inf, np.inf, D) == np.inf


def test_local_update_equilateral_height():
    # equal arrival times on the base -> wave from the base midpoint
    D = np.eye(3)
    a, b = [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]
    apex = [0.5, np.sqrt(3) / 2, 0.0]
    t = local_update(apex, a, b, 0.0, 0.0, D)
    assert t == pytest.approx(np.sqrt(3) / 2, abs=1e-6)


def test_local_update_fiber_speed_along_edge():
    # fibers along x with v_l = 2: travel time along x halves
    D = np.diag([4.0, 1.0, 1.0])
    t = local_update([1.0, 0, 0], [0, 0, 0], [0, 1, 0], 0.0, np.inf, D)
    assert t == pytest.approx(0.5, abs=1e-9)
    # across the fiber at unit speed
    t = local_update([0.0, 1, 0], [0, 0, 0], [1, 0, 0], 0.0, np.inf, D)
    assert t == pytest.approx(1.0, abs=1e-9)


def test_local_update_never_undercuts_endpoints():
    rng = np.random.default_rng(3)
    for _ in range(50):
        pts = rng.normal(size=(3, 3))
        ta, tb = rng.uniform(0, 2, size=2)
        w = rng.normal(size=3)
        D = np.eye(3) * rng.uniform(0.5, 2) + 0.5 * np.outer(w, w)
        Minv = np.linalg.inv(D)

        def dist(y):
            d = pts[0] - y
            return np.sqrt(d @ Minv @ d)

        t = local_update(pts[0], pts[1], pts[2], ta, tb, D)
        lower = min(ta + dist(pts[1]), tb + dist(pts[2]))
        assert t <= lower + 1e-9
        # and it is a true minimum over the sampled edge
        samples = min(
            (1 - s) * ta + s * tb + dist(pts[1] + s * (pts[2] - pts[1]))
            for s in np.linspace(0, 1, 201)
        )
        assert t <= samples + 1e-6


# -- full solves on flat sheets (exact oracles) ---------------------------


def test_flat_isotropic_matches_euclidean(sheet_fine):
    m = sheet_fine
    src = 0  # corner node
    amap = solve_eikonal(m, isotropic_tensor(m), src)
    exact = np.linalg.norm(m.vertices - m.vertices[src], axis=1)
    err = np.abs(amap.times - exact).max()
    assert err < 1e-4 * exact.max()
    assert amap.times[src] == 0.0
    assert amap.source == src


def test_flat_anisotropic_matches_metric_distance(sheet_fine):
    fib = np.tile([1.0, 0.0, 0.0], (sheet_fine.n_simplices, 1))
    m = SimplicialMesh(sheet_fine.vertices, sheet_fine.simplices, fib)
    tensors = build_conduction_tensor(m, 0.6, 0.3)
    src = m.n_vertices // 2
    amap = solve_eikonal(m, tensors, src)
    Minv = np.linalg.inv(tensors.tensors[0])
    w = m.vertices - m.vertices[src]
    exact = np.sqrt(np.einsum("ni,ij,nj->n", w, Minv, w))
    err = np.abs(amap.times - exact).max()
    assert err < 1e-4 * exact.max()


def test_factored_mode_selection(sheet_fine, sphere2):
    flat = SimplicialMesh(
        sheet_fine.vertices, sheet_fine.simplices,
        np.tile([1.0, 0, 0], (sheet_fine.n_simplices, 1)))
    s_flat = EikonalSolver(flat, isotropic_tensor(flat))
    assert s_flat.factored
    s_curved = EikonalSolver(sphere2, isotropic_tensor(sphere2))
    assert not s_curved.factored
    # explicit override wins
    assert not EikonalSolver(flat, isotropic_tensor(flat),
                             factored=False).factored


def test_plain_mode_refinement_consistency():
    """Plain-update error at a fixed target shrinks under refinement."""
    errs = []
    for nx in (20, 40):
        m = _sheet_with_fibers(nx, nx)
        solver = EikonalSolver(m, isotropic_tensor(m), factored=False)
        amap = solver.solve(0)
        exact = np.linalg.norm(m.vertices - m.vertices[0], axis=1)
        far = exact > 0.5  # away from the point-source singularity
        errs.append(np.abs(amap.times - exact)[far].max())
    assert errs[1] < errs[0]
    assert errs[1] < 0.02


def test_monotone_history(sphere3):
    solver = EikonalSolver(sphere3, isotropic_tensor(sphere3))
    amap, history = solver.solve(0, return_history=True)
    hist = np.array(history)
    assert np.all(np.diff(hist, axis=0) <= 1e-12)
    assert np.allclose(hist[-1], amap.times, atol=1e-12)


def test_source_swap_symmetry_flat():
    m = _sheet_with_fibers(25, 25, (1.0, 0.5, 0.0))
    tensors = build_conduction_tensor(m, 0.6, 0.3)
    solver = EikonalSolver(m, tensors)
    a, b = 0, m.n_vertices - 1
    tab = solver.solve(a).times[b]
    tba = solver.solve(b).times[a]
    assert abs(tab - tba) <= 2 * solver.tol


def test_source_swap_symmetry_curved(sphere3):
    # discretization (not tolerance) limits symmetry on curved meshes
    solver = EikonalSolver(sphere3, isotropic_tensor(sphere3))
    a, b = 0, 100
    tab = solver.solve(a).times[b]
    tba = solver.solve(b).times[a]
    assert abs(tab - tba) <= 0.05 * max(tab, tba)


def test_sphere_geodesics_match_arc_length(sphere3):
    d = geodesic_distances(sphere3, 0)
    v = sphere3.vertices / np.linalg.norm(sphere3.vertices, axis=1,
                                          keepdims=True)
    arc = np.arccos(np.clip(v @ v[0], -1, 1))
    # the absolute error stays below one mean edge length everywhere
    assert np.abs(d - arc).max() < sphere3.mean_edge_length
    far = arc > 1.0
    rel = np.abs(d - arc)[far] / arc[far]
    assert rel.max() < 0.07
    assert np.median(rel) < 0.03


def test_small_tet_box():
    """Volumetric solve on a structured 5^3 grid of tetrahedra."""
    n = 5
    xs = np.linspace(0, 1, n)
    X, Y, Z = np.meshgrid(xs, xs, xs, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * n + j) * n + k

    tets = []
    corners = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
               (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1)]
    split = [(0, 1, 4, 7), (0, 1, 5, 7), (0, 2, 4, 7),
             (0, 2, 6, 7), (0, 3, 5, 7), (0, 3, 6, 7)]
    for i in range(n - 1):
        for j in range(n - 1):
            for k in range(n - 1):
                ids = [vid(i + di, j + dj, k + dk) for di, dj, dk in corners]
                for t in split:
                    tets.append([ids[c] for c in t])
    fib = np.tile([1.0, 0, 0], (len(tets), 1))
    m = SimplicialMesh(verts, np.array(tets), fib)
    amap = solve_eikonal(m, isotropic_tensor(m), 0)
    exact = np.linalg.norm(verts - verts[0], axis=1)
    assert np.abs(amap.times - exact).max() < 1e-3


def test_solver_input_validation(sphere2):
    tensors = isotropic_tensor(sphere2)
    solver = EikonalSolver(sphere2, tensors)
    with pytest.raises(ValueError):
        solver.solve(-1)
    with pytest.raises(ValueError):
        solver.solve(sphere2.n_vertices)
    other = flat_sheet(3, 3)
    with pytest.raises(ValueError):
        EikonalSolver(other, tensors)
