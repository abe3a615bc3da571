"""Forward ECG model: traveling-wave transmembrane potential and lead fields.

An activation map is turned into per-lead body-surface signals in three
steps: (1) the transmembrane potential is a traveling wave V_m(x, t) =
U(t - tau(x)) with a tanh upstroke U; (2) each lead k contributes
V_k(t) = sum_e |e| (G_i grad V_m) . grad Z_k with P1 element-constant
gradients, G_i the intracellular conductivity tensor, and Z_k a per-node
lead field; (3) the mismatch against a reference trace is the trapezoidal
time integral of the squared per-lead difference, summed over leads.

Because V_k(t) is linear in the nodal potentials, the spatial part is
precomputed once per (mesh, conductivity, lead-field) triple as an
L x n_nodes projection matrix; per-candidate ECG evaluation then reduces
to one activation-map solve plus a matrix product.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .fem import shape_gradients

DEFAULT_V0 = -80.0  # mV, resting potential
DEFAULT_V1 = 20.0  # mV, plateau potential
DEFAULT_WIDTH = 1.0  # ms, upstroke width
DEFAULT_SIGMA_L = 0.17  # mS/mm, intracellular conductivity along fiber
DEFAULT_SIGMA_T = 0.019  # mS/mm, cross-fiber

ELECTRODE_NAMES = ("RA", "LA", "LL", "V1", "V2", "V3", "V4", "V5", "V6")
LEAD_NAMES = (
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
)


@dataclass(frozen=True)
class ActionPotentialParams:
    """Tanh action-potential template: rest V0, plateau V1, upstroke width w."""

    V0: float = DEFAULT_V0
    V1: float = DEFAULT_V1
    width: float = DEFAULT_WIDTH

    def __post_init__(self):
        if not self.V1 > self.V0:
            raise ValueError("plateau potential must exceed resting potential")
        if not self.width > 0:
            raise ValueError("upstroke width must be positive")


def action_potential(xi, params=ActionPotentialParams()):
    """U(xi) = V0 + (V1 - V0)/2 (tanh(xi/w) + 1); strictly increasing."""
    xi = np.asarray(xi, dtype=float)
    return params.V0 + 0.5 * (params.V1 - params.V0) * (
        np.tanh(xi / params.width) + 1.0
    )


def transmembrane_field(amap, t, params=ActionPotentialParams()):
    """Per-node transmembrane potentials V_m = U(t - tau) at time t (ms)."""
    return action_potential(t - amap.times, params)


@dataclass(frozen=True)
class IntracellularConductivity:
    """Per-element G_i = sigma_t I + (sigma_l - sigma_t) l l^T (mS/mm)."""

    tensors: np.ndarray  # (m, 3, 3)
    sigma_l: float
    sigma_t: float


def build_intracellular_conductivity(
    mesh, sigma_l=DEFAULT_SIGMA_L, sigma_t=DEFAULT_SIGMA_T
):
    if not sigma_l >= sigma_t > 0:
        raise ValueError("conductivities must satisfy sigma_l >= sigma_t > 0")
    if mesh.fibers is None:
        raise ValueError("mesh has no fiber field")
    l = mesh.fibers
    eye = np.eye(3)[None, :, :]
    G = sigma_t * eye + (sigma_l - sigma_t) * np.einsum("ei,ej->eij", l, l)
    return IntracellularConductivity(np.ascontiguousarray(G), float(sigma_l),
                                     float(sigma_t))


@dataclass(frozen=True)
class LeadFieldSet:
    """Per-node lead fields Z_k, one row per lead, plus electrode metadata."""

    fields: np.ndarray  # (L, n_nodes)
    electrodes: np.ndarray  # (n_electrodes, 3), mm
    lead_names: tuple = LEAD_NAMES

    @property
    def n_leads(self):
        return self.fields.shape[0]

    def __post_init__(self):
        if not np.all(np.isfinite(self.fields)):
            raise ValueError("lead fields must be finite at every node")
        if self.fields.shape[0] < 1:
            raise ValueError("at least one lead is required")
        if len(self.lead_names) != self.fields.shape[0]:
            raise ValueError("lead name count does not match lead count")


def standard_electrode_positions(mesh, radius_factor=2.0):
    """Nine torso-style electrode positions on a sphere around the mesh.

    Limb electrodes sit below/beside the bounding sphere; the six precordial
    electrodes sweep an arc across the front. Purely synthetic placement,
    deterministic in the mesh bounding box.
    """
    center = 0.5 * (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0))
    r = radius_factor * np.linalg.norm(mesh.vertices - center, axis=1).max()
    directions = {
        "RA": (-0.8, 0.5, 0.5),
        "LA": (0.8, 0.5, 0.5),
        "LL": (0.3, -0.9, 0.2),
        "V1": (-0.3, 0.1, 1.0),
        "V2": (-0.1, 0.0, 1.0),
        "V3": (0.15, -0.1, 1.0),
        "V4": (0.4, -0.2, 0.95),
        "V5": (0.7, -0.2, 0.8),
        "V6": (0.95, -0.2, 0.55),
    }
    pos = np.array([directions[name] for name in ELECTRODE_NAMES], dtype=float)
    pos /= np.linalg.norm(pos, axis=1, keepdims=True)
    return center[None, :] + r * pos


def _lead_combination_matrix():
    """12 standard leads from 9 electrodes (limb pairs, augmented, Wilson)."""
    idx = {name: i for i, name in enumerate(ELECTRODE_NAMES)}
    W = np.zeros((12, 9))
    ra, la, ll = idx["RA"], idx["LA"], idx["LL"]
    W[0, la], W[0, ra] = 1, -1  # I
    W[1, ll], W[1, ra] = 1, -1  # II
    W[2, ll], W[2, la] = 1, -1  # III
    W[3, ra] = 1; W[3, la] = W[3, ll] = -0.5  # aVR
    W[4, la] = 1; W[4, ra] = W[4, ll] = -0.5  # aVL
    W[5, ll] = 1; W[5, ra] = W[5, la] = -0.5  # aVF
    for k in range(6):  # V1..V6 against the Wilson central terminal
        W[6 + k, idx[f"V{k + 1}"]] = 1
        W[6 + k, ra] = W[6 + k, la] = W[6 + k, ll] = -1 / 3
    return W


def synthetic_lead_fields(mesh, electrodes=None, min_distance=1.0):
    """Lead fields from free-space 1/(4 pi r) electrode potentials.

    Stand-in for a torso volume-conductor solution: each electrode induces
    Z_e(x) = 1/(4 pi |x - e|) and the 12 leads are the standard
    limb/augmented/precordial combinations of the 9 electrode fields.
    """
    if electrodes is None:
        electrodes = standard_electrode_positions(mesh)
        names = LEAD_NAMES
        W = _lead_combination_matrix()
    else:
        electrodes = np.atleast_2d(np.asarray(electrodes, dtype=float))
        names = tuple(f"lead_{i + 1}" for i in range(len(electrodes)))
        W = np.eye(len(electrodes))
    d = np.linalg.norm(
        mesh.vertices[None, :, :] - electrodes[:, None, :], axis=2
    )
    if d.min() <= min_distance:
        raise ValueError(
            f"electrode within {min_distance} mm of the mesh "
            f"(closest {d.min():.3f} mm)"
        )
    Z = 1.0 / (4.0 * np.pi * d)  # (n_electrodes, n_nodes)
    return LeadFieldSet(np.ascontiguousarray(W @ Z), electrodes, names)


def lead_projection_matrix(mesh, cond, leads):
    """Dense (L, n_nodes) matrix R with V_k(t) = R_k . V_m(t).

    R_kj = sum_e |e| (G_e grad N_j) . grad Z_k restricted to elements
    containing node j.
    """
    if leads.fields.shape[1] != mesh.n_vertices:
        raise ValueError("lead fields do not match mesh")
    if cond.tensors.shape[0] != mesh.n_simplices:
        raise ValueError("conductivity does not match mesh")
    g = shape_gradients(mesh)  # (m, k, 3)
    s = mesh.simplices
    # element-constant lead-field gradients: (L, m, 3)
    gz = np.einsum("lmk,mkd->lmd", leads.fields[:, s], g)
    flux = np.einsum("mij,mkj->mki", cond.tensors, g)  # G_e grad N_k
    contrib = np.einsum("lmd,mkd,m->lmk", gz, flux, mesh.element_measures)
    R = np.zeros((leads.n_leads, mesh.n_vertices))
    for k in range(s.shape[1]):
        np.add.at(R, (slice(None), s[:, k]), contrib[:, :, k])
    return R


@dataclass(frozen=True)
class EcgTrace:
    """Multi-lead signal on a uniform time grid."""

    times: np.ndarray  # (n_t,), ms
    values: np.ndarray  # (n_t, L)
    lead_names: tuple = field(default=LEAD_NAMES)

    def __post_init__(self):
        if self.values.shape[0] != self.times.shape[0]:
            raise ValueError("trace length does not match time grid")
        dt = np.diff(self.times)
        if len(dt) and not np.allclose(dt, dt[0], rtol=1e-9, atol=1e-12):
            raise ValueError("time grid must be uniform")
        if not (np.all(np.isfinite(self.times))
                and np.all(np.isfinite(self.values))):
            raise ValueError("trace contains non-finite values")

    @property
    def n_leads(self):
        return self.values.shape[1]

    def save_csv(self, path):
        with open(path, "w") as f:
            f.write(self.to_csv())

    def to_csv(self):
        buf = io.StringIO()
        buf.write("t," + ",".join(f"lead_{i + 1}" for i in range(self.n_leads)))
        buf.write("\n")
        for t, row in zip(self.times, self.values):
            buf.write(repr(float(t)) + ","
                      + ",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def load_csv(cls, path):
        with open(path) as f:
            body = "".join(ln for ln in f if not ln.startswith("#"))
        data = np.genfromtxt(io.StringIO(body), delimiter=",", names=True)
        cols = list(data.dtype.names)
        if cols[0] != "t" or len(cols) < 2:
            raise ValueError(f"{path}: expected header t,lead_1..lead_L")
        times = np.atleast_1d(data["t"]).astype(float)
        values = np.column_stack(
            [np.atleast_1d(data[c]).astype(float) for c in cols[1:]]
        )
        return cls(times, values, tuple(cols[1:]))


def default_time_grid(amap, dt=1.0, margin=1.2):
    """Uniform grid [0, margin * max(tau)] covering the activation window."""
    T = margin * float(np.max(amap.times))
    n = max(2, int(np.ceil(T / dt)) + 1)
    return np.arange(n) * dt


def compute_ecg(mesh, amap, cond, leads, params=ActionPotentialParams(),
                time_grid=None, projection=None):
    """Simulated ECG for one activation map.

    `projection` may carry a precomputed lead_projection_matrix to amortize
    the spatial assembly over many activation maps.
    """
    if amap.times.shape[0] != mesh.n_vertices:
        raise ValueError("activation map does not match mesh")
    if time_grid is None:
        time_grid = default_time_grid(amap)
    if projection is None:
        projection = lead_projection_matrix(mesh, cond, leads)
    # (n_t, n_nodes) wavefront snapshots -> (n_t, L)
    vm = action_potential(time_grid[:, None] - amap.times[None, :], params)
    values = vm @ projection.T
    return EcgTrace(np.asarray(time_grid, dtype=float), values,
                    tuple(leads.lead_names))


def ecg_loss(sim, ref):
    """Sum over leads of the trapezoidal integral of (V_k - V_ref_k)^2 dt."""
    if sim.values.shape != ref.values.shape:
        raise ValueError("trace shapes differ")
    if not np.allclose(sim.times, ref.times, rtol=1e-9, atol=1e-9):
        raise ValueError("time grids differ")
    diff2 = (sim.values - ref.values) ** 2
    return float(np.trapezoid(diff2, x=sim.times, axis=0).sum())
