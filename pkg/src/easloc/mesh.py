"""Simplicial meshes embedded in 3D with per-element fiber directions.

Meshes are immutable after construction: the vertex/simplex/fiber arrays are
write-protected and derived quantities (measures, adjacency, gradients) are
cached lazily. Both triangle surfaces (d=2) and tetrahedral volumes (d=3) are
supported; the synthetic generators only produce surfaces.
"""

from __future__ import annotations

import heapq
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

FIBER_NORM_TOL = 1e-9
FIBER_PLANE_TOL = 1e-6  # radians


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed under its declared format."""


class MeshValidationError(ValueError):
    """Raised when a mesh violates a structural invariant."""


class SimplicialMesh:
    """Triangulated surface or tetrahedral volume with a fiber field.

    Parameters
    ----------
    vertices : (n, 3) float array, coordinates in mm.
    simplices : (m, 3) or (m, 4) int array.
    fibers : (m, 3) float array of unit vectors, or None to use the default
        azimuthal rule (circumferential around the principal axis).
    """

    def __init__(self, vertices, simplices, fibers=None, validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.simplices = np.ascontiguousarray(simplices, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshValidationError("vertices must be an (n, 3) array")
        if self.simplices.ndim != 2 or self.simplices.shape[1] not in (3, 4):
            raise MeshValidationError("simplices must be (m, 3) or (m, 4)")
        s = self.simplices
        if s.size and (s.min() < 0 or s.max() >= self.n_vertices):
            raise MeshValidationError("simplex references out-of-range vertex")
        if fibers is None:
            fibers = azimuthal_fiber_field(self.vertices, self.simplices)
        self.fibers = np.ascontiguousarray(fibers, dtype=np.float64)
        if self.fibers.shape != (self.simplices.shape[0], 3):
            raise MeshValidationError("fibers must be one 3-vector per element")
        for arr in (self.vertices, self.simplices, self.fibers):
            arr.flags.writeable = False
        self._cache = {}
        if validate:
            self.validate()

    # -- basic queries ----------------------------------------------------

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_simplices(self):
        return self.simplices.shape[0]

    @property
    def dimension(self):
        return self.simplices.shape[1] - 1

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def element_measures(self):
        """Triangle areas (mm^2) or tet volumes (mm^3)."""
        return self._cached("measures", self._compute_measures)

    def _compute_measures(self):
        v = self.vertices
        s = self.simplices
        if self.dimension == 2:
            e1 = v[s[:, 1]] - v[s[:, 0]]
            e2 = v[s[:, 2]] - v[s[:, 0]]
            return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
        e1 = v[s[:, 1]] - v[s[:, 0]]
        e2 = v[s[:, 2]] - v[s[:, 0]]
        e3 = v[s[:, 3]] - v[s[:, 0]]
        return np.abs(np.einsum("ij,ij->i", np.cross(e1, e2), e3)) / 6.0

    @property
    def element_normals(self):
        """Unit normals per triangle (d=2 only)."""
        if self.dimension != 2:
            raise MeshValidationError("normals only defined for surface meshes")

        def fn():
            v, s = self.vertices, self.simplices
            n = np.cross(v[s[:, 1]] - v[s[:, 0]], v[s[:, 2]] - v[s[:, 0]])
            return n / np.linalg.norm(n, axis=1, keepdims=True)

        return self._cached("normals", fn)

    @property
    def centroids(self):
        return self._cached(
            "centroids", lambda: self.vertices[self.simplices].mean(axis=1)
        )

    @property
    def edges(self):
        """Unique undirected edges as an (n_edges, 2) sorted-index array."""

        def fn():
            s = self.simplices
            k = s.shape[1]
            pairs = []
            for i in range(k):
                for j in range(i + 1, k):
                    pairs.append(s[:, [i, j]])
            e = np.sort(np.vstack(pairs), axis=1)
            return np.unique(e, axis=0)

        return self._cached("edges", fn)

    @property
    def mean_edge_length(self):
        def fn():
            e = self.edges
            d = self.vertices[e[:, 0]] - self.vertices[e[:, 1]]
            return float(np.linalg.norm(d, axis=1).mean())

        return self._cached("mean_edge", fn)

    @property
    def diameter(self):
        """Maximum pairwise vertex distance (exact up to ~5000 vertices)."""

        def fn():
            v = self.vertices
            if v.shape[0] <= 5000:
                d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=2)
                return float(np.sqrt(d2.max()))
            lo, hi = v.min(axis=0), v.max(axis=0)
            return float(np.linalg.norm(hi - lo))

        return self._cached("diameter", fn)

    # -- validation -------------------------------------------------------

    def validate(self):
        s = self.simplices
        if s.size and (s.min() < 0 or s.max() >= self.n_vertices):
            raise MeshValidationError("simplex references out-of-range vertex")
        if s.shape[0] == 0:
            raise MeshValidationError("mesh has no elements")
        srt = np.sort(s, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise MeshValidationError("simplex repeats a vertex")
        measures = self.element_measures
        scale = np.ptp(self.vertices, axis=0).max()
        floor = 1e-12 * scale ** self.dimension
        if np.any(measures <= floor):
            bad = int(np.argmin(measures))
            raise MeshValidationError(f"degenerate element {bad} (measure ~ 0)")
        norms = np.linalg.norm(self.fibers, axis=1)
        if np.any(np.abs(norms - 1.0) > FIBER_NORM_TOL):
            raise MeshValidationError("fiber vectors must have unit norm")
        if self.dimension == 2:
            offplane = np.abs(np.einsum("ij,ij->i", self.fibers, self.element_normals))
            if np.any(offplane > FIBER_PLANE_TOL):
                raise MeshValidationError("fiber not tangent to its triangle")
        e = self.edges
        graph = coo_matrix(
            (np.ones(len(e)), (e[:, 0], e[:, 1])),
            shape=(self.n_vertices, self.n_vertices),
        )
        n_comp, _ = connected_components(graph, directed=False)
        if n_comp != 1:
            raise MeshValidationError(f"mesh has {n_comp} connected components")
        return self


# -- fiber fields ---------------------------------------------------------


def _project_to_planes(vectors, normals):
    """Project per-element vectors onto triangle planes and normalize.

    Elements where the projection degenerates fall back to an in-plane edge
    direction supplied by the caller via `fallback`.
    """
    t = vectors - np.einsum("ij,ij->i", vectors, normals)[:, None] * normals
    norms = np.linalg.norm(t, axis=1)
    return t, norms


def azimuthal_fiber_field(vertices, simplices):
    """Circumferential fibers around the principal axis of the vertex cloud."""
    vertices = np.asarray(vertices, float)
    simplices = np.asarray(simplices, int)
    center = vertices.mean(axis=0)
    cov = np.cov((vertices - center).T)
    w, vecs = np.linalg.eigh(cov)
    axis = vecs[:, np.argmax(w)]
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    centroids = vertices[simplices].mean(axis=1)
    raw = np.cross(axis, centroids - center)
    return _finalize_fibers(raw, vertices, simplices)


def fixed_fiber_field(vertices, simplices, direction):
    """Constant fiber direction, projected to each element's tangent plane."""
    vertices = np.asarray(vertices, float)
    simplices = np.asarray(simplices, int)
    direction = np.asarray(direction, float)
    n = np.linalg.norm(direction)
    if n == 0:
        raise ValueError("fiber direction must be nonzero")
    raw = np.broadcast_to(direction / n, (simplices.shape[0], 3)).copy()
    return _finalize_fibers(raw, vertices, simplices)


def _finalize_fibers(raw, vertices, simplices):
    if simplices.shape[1] == 4:
        norms = np.linalg.norm(raw, axis=1)
        bad = norms < 1e-12
        raw[bad] = (1.0, 0.0, 0.0)
        return raw / np.linalg.norm(raw, axis=1, keepdims=True)
    e1 = vertices[simplices[:, 1]] - vertices[simplices[:, 0]]
    e2 = vertices[simplices[:, 2]] - vertices[simplices[:, 0]]
    nrm = np.cross(e1, e2)
    # degenerate elements produce zero normals here; validate() rejects them
    # with a proper diagnostic afterwards
    with np.errstate(invalid="ignore", divide="ignore"):
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        t, norms = _project_to_planes(raw, nrm)
        bad = norms < 1e-10 * max(1.0, np.abs(raw).max())
        if np.any(bad):
            t[bad] = e1[bad]
            t[bad] -= np.einsum("ij,ij->i", t[bad], nrm[bad])[:, None] * nrm[bad]
        out = t / np.linalg.norm(t, axis=1, keepdims=True)
    return np.nan_to_num(out, nan=1.0 / np.sqrt(3.0))


# -- synthetic geometry ---------------------------------------------------

_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
        (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
        (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
    ],
    dtype=float,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def _unit_icosphere(subdivision):
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES.copy()
    verts = [tuple(v) for v in verts]
    for _ in range(subdivision):
        midpoint = {}
        new_faces = []

        def mid(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint:
                p = np.asarray(verts[i]) + np.asarray(verts[j])
                p /= np.linalg.norm(p)
                midpoint[key] = len(verts)
                verts.append(tuple(p))
            return midpoint[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.array(new_faces, dtype=np.int64)
    return np.array(verts, dtype=float), faces


def generate_synthetic_geometry(
    kind, radii, subdivision, fiber_rule="azimuthal", fiber_direction=(1.0, 0.0, 0.0)
):
    """Build a watertight synthetic surface with a fiber field.

    kind: "icosphere" (radii = scalar or single radius) or "ellipsoid-shell"
    (radii = three semi-axes, mm). fiber_rule: "azimuthal" or
    "fixed-direction" (uses `fiber_direction`).
    """
    if subdivision < 0:
        raise ValueError("subdivision level must be >= 0")
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    if np.any(radii <= 0):
        raise ValueError("radii must be positive")
    if kind == "icosphere":
        if radii.size != 1:
            raise ValueError("icosphere takes a single radius")
        scale = np.full(3, radii[0])
    elif kind == "ellipsoid-shell":
        if radii.size != 3:
            raise ValueError("ellipsoid-shell takes three semi-axes")
        scale = radii
    else:
        raise ValueError(f"unknown geometry kind: {kind!r}")
    verts, faces = _unit_icosphere(int(subdivision))
    verts = verts * scale[None, :]
    if fiber_rule == "azimuthal":
        fibers = azimuthal_fiber_field(verts, faces)
    elif fiber_rule == "fixed-direction":
        fibers = fixed_fiber_field(verts, faces, fiber_direction)
    else:
        raise ValueError(f"unknown fiber rule: {fiber_rule!r}")
    return SimplicialMesh(verts, faces, fibers)


def flat_sheet(nx, ny, size_x=1.0, size_y=1.0, fiber_direction=(1.0, 0.0, 0.0)):
    """Triangulated rectangular sheet in the z=0 plane (testing helper).

    nx, ny: number of cells per side; vertices are (nx+1)*(ny+1).
    """
    xs = np.linspace(0.0, size_x, nx + 1)
    ys = np.linspace(0.0, size_y, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])

    def vid(i, j):
        return i * (ny + 1) + j

    faces = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            faces += [(a, b, c), (a, c, d)]
    faces = np.array(faces, dtype=np.int64)
    fibers = fixed_fiber_field(verts, faces, fiber_direction)
    return SimplicialMesh(verts, faces, fibers)


# -- nearest node ---------------------------------------------------------


def nearest_node(mesh, point):
    """Index of the mesh vertex closest to `point`; ties -> lowest index."""
    d2 = np.sum((mesh.vertices - np.asarray(point, float)[None, :]) ** 2, axis=1)
    return int(np.argmin(d2))


def nearest_nodes(mesh, points):
    """Vectorized nearest_node for a batch of query points."""
    points = np.asarray(points, float)
    out = np.empty(len(points), dtype=np.int64)
    chunk = max(1, int(4e6) // max(1, mesh.n_vertices))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk]
        d2 = np.sum((p[:, None, :] - mesh.vertices[None, :, :]) ** 2, axis=2)
        out[s : s + chunk] = np.argmin(d2, axis=1)
    return out


# -- file I/O -------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def save_mesh(mesh, path, fmt="off", fibers_path=None):
    """Write a mesh as OFF or legacy ASCII VTK; optionally a fiber sidecar."""
    if fmt == "off":
        lines = ["OFF", f"{mesh.n_vertices} {mesh.n_simplices} 0"]
        for v in mesh.vertices:
            lines.append(" ".join(_fmt(c) for c in v))
        for s in mesh.simplices:
            lines.append(f"{len(s)} " + " ".join(str(int(i)) for i in s))
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
    elif fmt == "vtk-legacy-ascii":
        if mesh.dimension != 2:
            raise MeshFormatError("VTK POLYDATA writer supports surfaces only")
        lines = [
            "# vtk DataFile Version 3.0",
            "easloc mesh",
            "ASCII",
            "DATASET POLYDATA",
            f"POINTS {mesh.n_vertices} double",
        ]
        for v in mesh.vertices:
            lines.append(" ".join(_fmt(c) for c in v))
        m = mesh.n_simplices
        lines.append(f"POLYGONS {m} {4 * m}")
        for s in mesh.simplices:
            lines.append("3 " + " ".join(str(int(i)) for i in s))
        lines.append(f"CELL_DATA {m}")
        lines.append("VECTORS fibers double")
        for fb in mesh.fibers:
            lines.append(" ".join(_fmt(c) for c in fb))
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
    else:
        raise MeshFormatError(f"unknown mesh format: {fmt!r}")
    if fibers_path is not None:
        save_fibers(mesh.fibers, fibers_path)


def save_fibers(fibers, path):
    with open(path, "w") as f:
        for fb in fibers:
            f.write(" ".join(_fmt(c) for c in fb) + "\n")


def load_fibers(path):
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise MeshFormatError(f"fiber line is not a 3-vector: {line!r}")
            rows.append([float(p) for p in parts])
    return np.array(rows, dtype=float)


def load_mesh(path, fmt="off", fibers_path=None):
    """Load and validate a mesh from OFF or legacy ASCII VTK.

    Fibers come from the embedded VTK CELL_DATA, the sidecar file, or default
    to the azimuthal rule, in that priority order.
    """
    if fmt == "off":
        verts, faces = _read_off(path)
        fibers = None
    elif fmt == "vtk-legacy-ascii":
        verts, faces, fibers = _read_vtk(path)
    else:
        raise MeshFormatError(f"unknown mesh format: {fmt!r}")
    if fibers_path is not None:
        fibers = load_fibers(fibers_path)
        if fibers.shape[0] != faces.shape[0]:
            raise MeshFormatError("fiber sidecar row count != element count")
    return SimplicialMesh(verts, faces, fibers)


def _tokens(path):
    with open(path) as f:
        for line in f:
            line = line.split("#")[0].strip()
            if line:
                yield from line.split()


def _read_off(path):
    toks = _tokens(path)
    try:
        magic = next(toks)
        if magic != "OFF":
            raise MeshFormatError("missing OFF header")
        nv, nf = int(next(toks)), int(next(toks))
        next(toks)  # edge count, ignored
        verts = np.array(
            [[float(next(toks)) for _ in range(3)] for _ in range(nv)]
        )
        faces = []
        for _ in range(nf):
            k = int(next(toks))
            if k not in (3, 4):
                raise MeshFormatError(f"unsupported face arity {k}")
            faces.append([int(next(toks)) for _ in range(k)])
        arity = {len(f) for f in faces}
        if len(arity) > 1:
            raise MeshFormatError("mixed simplex arity in OFF file")
    except MeshFormatError:
        raise
    except (StopIteration, ValueError) as exc:
        raise MeshFormatError(f"malformed OFF file {path}: {exc}") from exc
    return verts, np.array(faces, dtype=np.int64)


def _read_vtk(path):
    toks = list(_tokens(path))
    fibers = None
    try:
        i = toks.index("POINTS")
        nv = int(toks[i + 1])
        base = i + 3
        verts = np.array(
            [float(t) for t in toks[base : base + 3 * nv]], dtype=float
        ).reshape(nv, 3)
        j = toks.index("POLYGONS")
        nf = int(toks[j + 1])
        pos = j + 3
        faces = []
        for _ in range(nf):
            k = int(toks[pos])
            if k != 3:
                raise MeshFormatError("only triangle POLYGONS supported")
            faces.append([int(t) for t in toks[pos + 1 : pos + 4]])
            pos += 4
        if "VECTORS" in toks:
            v = toks.index("VECTORS")
            base = v + 3
            fibers = np.array(
                [float(t) for t in toks[base : base + 3 * nf]], dtype=float
            ).reshape(nf, 3)
    except MeshFormatError:
        raise
    except (ValueError, IndexError) as exc:
        raise MeshFormatError(f"malformed VTK file {path}: {exc}") from exc
    return verts, np.array(faces, dtype=np.int64), fibers


def save_point_scalar_vtk(mesh, values, path, name="activation"):
    """Write a surface mesh with one per-node scalar as legacy ASCII VTK."""
    values = np.asarray(values, float)
    lines = [
        "# vtk DataFile Version 3.0",
        "easloc point data",
        "ASCII",
        "DATASET POLYDATA",
        f"POINTS {mesh.n_vertices} double",
    ]
    for v in mesh.vertices:
        lines.append(" ".join(_fmt(c) for c in v))
    m = mesh.n_simplices
    lines.append(f"POLYGONS {m} {4 * m}")
    for s in mesh.simplices:
        lines.append("3 " + " ".join(str(int(i)) for i in s))
    lines.append(f"POINT_DATA {mesh.n_vertices}")
    lines.append(f"SCALARS {name} double 1")
    lines.append("LOOKUP_TABLE default")
    for x in values:
        lines.append(_fmt(x))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# -- decimation -----------------------------------------------------------


def coarsen_mesh(mesh, target_edge_factor):
    """Decimate a triangle surface by greedy shortest-edge collapse.

    Collapses edges (midpoint placement) until the mean edge length reaches
    `target_edge_factor` times the original mean, preserving the surface
    topology via the link condition. Fibers are resampled from the nearest
    original element centroid.
    """
    if target_edge_factor < 1:
        raise ValueError("target_edge_factor must be >= 1")
    if mesh.dimension != 2:
        raise ValueError("coarsening is implemented for triangle surfaces")
    if target_edge_factor == 1:
        return mesh
    if mesh.n_vertices < 8:
        raise MeshValidationError("mesh too small to decimate (< 8 vertices)")

    verts = [v.copy() for v in mesh.vertices]
    faces = {}  # face id -> tuple of 3 vertex ids
    v_faces = {i: set() for i in range(len(verts))}
    for fid, tri in enumerate(mesh.simplices):
        faces[fid] = tuple(int(x) for x in tri)
        for vtx in faces[fid]:
            v_faces[vtx].add(fid)
    next_fid = len(faces)

    def neighbors(u):
        out = set()
        for fid in v_faces[u]:
            out.update(faces[fid])
        out.discard(u)
        return out

    def edge_len(u, v):
        return float(np.linalg.norm(verts[u] - verts[v]))

    target = target_edge_factor * mesh.mean_edge_length
    heap = []
    for e in mesh.edges:
        u, v = int(e[0]), int(e[1])
        heapq.heappush(heap, (edge_len(u, v), u, v))

    alive = set(range(len(verts)))

    def mean_edge():
        seen = set()
        total = 0.0
        for fid, tri in faces.items():
            for a, b in ((0, 1), (1, 2), (2, 0)):
                key = tuple(sorted((tri[a], tri[b])))
                if key not in seen:
                    seen.add(key)
                    total += edge_len(*key)
        return total / max(1, len(seen))

    check_every = max(8, len(verts) // 50)
    ops = 0
    while heap:
        if len(alive) <= 8:
            break
        if ops % check_every == 0 and mean_edge() >= target:
            break
        length, u, v = heapq.heappop(heap)
        if u not in alive or v not in alive:
            continue
        if abs(length - edge_len(u, v)) > 1e-12 * (1 + length):
            continue  # stale heap entry
        shared = v_faces[u] & v_faces[v]
        if len(shared) != 2:
            continue  # boundary or non-manifold edge, skip
        opposite = set()
        for fid in shared:
            opposite.update(faces[fid])
        opposite -= {u, v}
        if neighbors(u) & neighbors(v) != opposite:
            continue  # link condition fails: collapse would change topology
        mid = 0.5 * (verts[u] + verts[v])
        # reject collapses that create degenerate or flipped triangles
        moved = (v_faces[u] | v_faces[v]) - shared
        ok = True
        new_tris = {}
        for fid in moved:
            tri = tuple(u if x == v else x for x in faces[fid])
            p = [mid if x == u else verts[x] for x in tri]
            old_p = [verts[x] for x in faces[fid]]
            n_new = np.cross(p[1] - p[0], p[2] - p[0])
            n_old = np.cross(old_p[1] - old_p[0], old_p[2] - old_p[0])
            if np.linalg.norm(n_new) < 1e-12 or np.dot(n_new, n_old) <= 0:
                ok = False
                break
            new_tris[fid] = tri
        if not ok:
            continue
        # commit
        verts[u] = mid
        for fid in shared:
            for x in faces[fid]:
                v_faces[x].discard(fid)
            del faces[fid]
        for fid, tri in new_tris.items():
            for x in faces[fid]:
                v_faces[x].discard(fid)
            del faces[fid]
            faces[next_fid] = tri
            for x in tri:
                v_faces[x].add(next_fid)
            next_fid += 1
        alive.discard(v)
        del v_faces[v]
        ops += 1
        for w in neighbors(u):
            a, b = (u, w) if u < w else (w, u)
            heapq.heappush(heap, (edge_len(a, b), a, b))

    kept = sorted(alive & set().union(*[set(t) for t in faces.values()]))
    remap = {old: new for new, old in enumerate(kept)}
    new_verts = np.array([verts[i] for i in kept])
    new_faces = np.array(
        [[remap[x] for x in tri] for tri in faces.values()], dtype=np.int64
    )
    centroids = new_verts[new_faces].mean(axis=1)
    src = _nearest_rows(mesh.centroids, centroids)
    raw = mesh.fibers[src].copy()
    fibers = _finalize_fibers(raw, new_verts, new_faces)
    return SimplicialMesh(new_verts, new_faces, fibers)


def _nearest_rows(pool, queries):
    out = np.empty(len(queries), dtype=np.int64)
    chunk = max(1, int(4e6) // max(1, len(pool)))
    for s in range(0, len(queries), chunk):
        q = queries[s : s + chunk]
        d2 = np.sum((q[:, None, :] - pool[None, :, :]) ** 2, axis=2)
        out[s : s + chunk] = np.argmin(d2, axis=1)
    return out
