"""P1 finite-element assembly and the truncated Laplace-Beltrami eigenbasis.

Stiffness and mass matrices are assembled per element with linear shape
functions; the generalized symmetric eigenproblem A v = lambda M v is solved
for the smallest eigenvalues with ARPACK shift-invert (dense fallback for
small problems). Eigenvectors are returned M-orthonormal with a deterministic
sign convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import eigh
from scipy.sparse.linalg import eigsh

from .mesh import MeshValidationError


class EigenSolveError(RuntimeError):
    """Raised when the sparse eigensolver fails its residual contract."""


def shape_gradients(mesh):
    """Constant P1 shape-function gradients per element, shape (m, k, 3).

    For surface triangles the gradients lie in the element plane.
    """
    v = mesh.vertices
    s = mesh.simplices
    if mesh.dimension == 2:
        p0, p1, p2 = v[s[:, 0]], v[s[:, 1]], v[s[:, 2]]
        e1, e2 = p1 - p0, p2 - p0
        n = np.cross(e1, e2)
        nn2 = np.einsum("ij,ij->i", n, n)
        # grad of barycentric coordinate i is (n x opposite_edge) / |n|^2 * |n| ... use
        # the identity grad_i = n x e_opp / (2 A) rotated into the plane:
        g0 = np.cross(n, p2 - p1) / nn2[:, None]
        g1 = np.cross(n, p0 - p2) / nn2[:, None]
        g2 = np.cross(n, p1 - p0) / nn2[:, None]
        return np.stack([g0, g1, g2], axis=1)
    p = v[s]  # (m, 4, 3)
    out = np.empty((s.shape[0], 4, 3))
    # gradient of barycentric i solves P^T g = e_i constraints; do it per element
    for i in range(4):
        others = [j for j in range(4) if j != i]
        base = p[:, others[0], :]
        mat = np.stack([p[:, others[1], :] - base,
                        p[:, others[2], :] - base,
                        p[:, i, :] - base], axis=1)
        rhs = np.zeros((s.shape[0], 3, 1))
        rhs[:, 2, 0] = 1.0
        out[:, i, :] = np.linalg.solve(mat, rhs)[:, :, 0]
    return out


def _assemble(mesh, local):
    """Scatter per-element local matrices (m, k, k) into a sparse CSR matrix."""
    s = mesh.simplices
    k = s.shape[1]
    rows = np.repeat(s, k, axis=1).ravel()
    cols = np.tile(s, (1, k)).ravel()
    mat = sparse.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_vertices, mesh.n_vertices)
    )
    return mat.tocsr()


def assemble_stiffness(mesh):
    """Laplace-Beltrami stiffness matrix: A_ij = sum_e int grad N_i . grad N_j."""
    measures = mesh.element_measures
    if np.any(measures <= 0):
        raise MeshValidationError("degenerate element in stiffness assembly")
    g = shape_gradients(mesh)
    local = np.einsum("eid,ejd,e->eij", g, g, measures)
    return _assemble(mesh, local)


def assemble_mass(mesh, lumping="consistent"):
    """Mass matrix M_ij = sum_e int N_i N_j (consistent) or its lumped diagonal."""
    measures = mesh.element_measures
    if np.any(measures <= 0):
        raise MeshValidationError("degenerate element in mass assembly")
    k = mesh.simplices.shape[1]
    base = (np.ones((k, k)) + np.eye(k)) / (k * (k + 1))
    local = measures[:, None, None] * base[None, :, :]
    M = _assemble(mesh, local)
    if lumping == "consistent":
        return M
    if lumping == "lumped":
        d = np.asarray(M.sum(axis=1)).ravel()
        return sparse.diags(d).tocsr()
    raise ValueError(f"unknown lumping mode: {lumping!r}")


@dataclass(frozen=True)
class EigenBasis:
    """Truncated Laplace-Beltrami eigenpairs, M-orthonormal, ascending."""

    eigenvalues: np.ndarray  # (n_eig,), 1/mm^2
    eigenvectors: np.ndarray  # (n_nodes, n_eig)

    @property
    def n_eig(self):
        return self.eigenvalues.shape[0]

    @property
    def n_nodes(self):
        return self.eigenvectors.shape[0]

    def save(self, path):
        """Flat binary: magic, int64 n / n_eig, float64 lambdas, psi row-major."""
        with open(path, "wb") as f:
            f.write(b"EASBASIS")
            f.write(struct.pack("<qq", self.n_nodes, self.n_eig))
            f.write(np.ascontiguousarray(self.eigenvalues, "<f8").tobytes())
            f.write(np.ascontiguousarray(self.eigenvectors, "<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            if f.read(8) != b"EASBASIS":
                raise ValueError(f"{path} is not an eigenbasis file")
            n, k = struct.unpack("<qq", f.read(16))
            lam = np.frombuffer(f.read(8 * k), "<f8").copy()
            psi = np.frombuffer(f.read(8 * n * k), "<f8").copy().reshape(n, k)
        return cls(lam, psi)


def default_n_eig(n_nodes):
    return max(1, min(256, n_nodes // 4))


def compute_eigenbasis(A, M, n_eig, residual_tol=1e-6):
    """Smallest n_eig generalized eigenpairs of A v = lambda M v.

    Dense solve for n <= 2000, ARPACK shift-invert otherwise (deterministic
    start vector). Eigenvectors are M-orthonormalized and sign-fixed so the
    largest-magnitude entry is positive.
    """
    n = A.shape[0]
    if n_eig > n:
        raise ValueError("n_eig exceeds matrix dimension")
    A = sparse.csr_matrix(A)
    M = sparse.csr_matrix(M)
    if n <= 2000 or n_eig > n // 2:
        lam, vec = eigh(A.toarray(), M.toarray())
        lam, vec = lam[:n_eig], vec[:, :n_eig]
    else:
        v0 = np.linalg.norm(M.diagonal()) * np.ones(n)  # deterministic start
        try:
            lam, vec = eigsh(A, k=n_eig, M=M, sigma=-0.1, which="LM", v0=v0)
        except Exception as exc:  # ARPACK failure
            raise EigenSolveError(f"sparse eigensolver failed: {exc}") from exc
        order = np.argsort(lam)
        lam, vec = lam[order], vec[:, order]
    # M-orthonormalize (defensive re-normalization) and fix signs
    Mv = M @ vec
    norms = np.sqrt(np.einsum("ij,ij->j", vec, Mv))
    vec = vec / norms[None, :]
    idx = np.argmax(np.abs(vec), axis=0)
    signs = np.sign(vec[idx, np.arange(vec.shape[1])])
    signs[signs == 0] = 1.0
    vec = vec * signs[None, :]
    # residual contract
    Av = A @ vec
    Mv = M @ vec
    res = np.linalg.norm(Av - Mv * lam[None, :], axis=0)
    rel = res / np.linalg.norm(Mv, axis=0)
    if np.any(rel > residual_tol):
        raise EigenSolveError(
            f"eigen residual {rel.max():.2e} exceeds {residual_tol:.0e}"
        )
    return EigenBasis(np.ascontiguousarray(lam), np.ascontiguousarray(vec))
