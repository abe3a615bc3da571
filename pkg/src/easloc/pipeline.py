"""Forward pipelines and the source-localization problem definition.

A FidelityPipeline bundles everything needed to map a candidate earliest
activation site (a mesh node) to an ECG and a mismatch loss: the mesh, the
eikonal solver, the intracellular conductivity, the lead fields and the
precomputed lead projection matrix. A LocalizationProblem pairs a
high-fidelity pipeline (and optionally a coarse low-fidelity one) with the
reference ECG and the ground-truth site, and provides the per-fidelity loss
evaluators used by the optimization loops.

Low-fidelity evaluations run entirely on the coarse mesh (its own solver
and lead fields — full model mismatch) but are indexed by high-fidelity
node ids: a candidate HF node is projected to its nearest LF node before
simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ecg import (
    ActionPotentialParams,
    EcgTrace,
    build_intracellular_conductivity,
    compute_ecg,
    default_time_grid,
    ecg_loss,
    lead_projection_matrix,
    synthetic_lead_fields,
)
from .eikonal import EikonalSolver, build_conduction_tensor, geodesic_distances
from .mesh import nearest_nodes

DEFAULT_V_FIBER = 0.6  # mm/ms
DEFAULT_V_CROSS = 0.3  # mm/ms


@dataclass(frozen=True)
class FidelityPipeline:
    """Immutable forward model for one mesh resolution."""

    mesh: object
    solver: EikonalSolver
    conductivity: object
    leads: object
    projection: np.ndarray
    ap_params: ActionPotentialParams

    def activation(self, node):
        return self.solver.solve(int(node))

    def ecg(self, node, time_grid):
        amap = self.activation(node)
        return compute_ecg(self.mesh, amap, self.conductivity, self.leads,
                           self.ap_params, time_grid, self.projection)

    def loss(self, node, reference):
        sim = self.ecg(node, reference.times)
        return ecg_loss(sim, reference)


def build_pipeline(mesh, v_fiber=DEFAULT_V_FIBER, v_cross=DEFAULT_V_CROSS,
                   sigma_l=None, sigma_t=None,
                   ap_params=ActionPotentialParams(), electrodes=None):
    """Assemble the forward model for a mesh (tensors, solver, lead fields)."""
    tensors = build_conduction_tensor(mesh, v_fiber, v_cross)
    solver = EikonalSolver(mesh, tensors)
    kwargs = {}
    if sigma_l is not None:
        kwargs["sigma_l"] = sigma_l
    if sigma_t is not None:
        kwargs["sigma_t"] = sigma_t
    cond = build_intracellular_conductivity(mesh, **kwargs)
    leads = synthetic_lead_fields(mesh, electrodes)
    projection = lead_projection_matrix(mesh, cond, leads)
    return FidelityPipeline(mesh, solver, cond, leads, projection, ap_params)


def make_reference(pipeline, truth_node, dt=1.0, margin=1.2):
    """Ground-truth ECG: HF forward solve at the truth node, grid [0, margin*max tau]."""
    amap = pipeline.activation(truth_node)
    grid = default_time_grid(amap, dt=dt, margin=margin)
    trace = compute_ecg(pipeline.mesh, amap, pipeline.conductivity,
                        pipeline.leads, pipeline.ap_params, grid,
                        pipeline.projection)
    return trace


@dataclass
class LocalizationProblem:
    """Loss evaluators plus ground-truth bookkeeping for one experiment."""

    hf: FidelityPipeline
    reference: EcgTrace
    basis: object = None  # EigenBasis of the HF mesh, used by the surrogates
    truth_node: int | None = None
    lf: FidelityPipeline | None = None
    _lf_index: np.ndarray | None = field(default=None, repr=False)
    _truth_geodesics: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_nodes(self):
        return self.hf.mesh.n_vertices

    def lf_node_for(self, hf_node):
        """Nearest LF mesh node to an HF node (cached projection table)."""
        if self.lf is None:
            raise ValueError("problem has no low-fidelity pipeline")
        if self._lf_index is None:
            self._lf_index = nearest_nodes(self.lf.mesh, self.hf.mesh.vertices)
        return int(self._lf_index[int(hf_node)])

    def loss_hf(self, node):
        return self.hf.loss(node, self.reference)

    def loss_lf(self, hf_node):
        return self.lf.loss(self.lf_node_for(hf_node), self.reference)

    def truth_geodesics(self):
        """Geodesic distances (mm) from the truth node over the HF mesh."""
        if self.truth_node is None:
            raise ValueError("problem has no ground-truth node")
        if self._truth_geodesics is None:
            self._truth_geodesics = geodesic_distances(
                self.hf.mesh, int(self.truth_node)
            )
        return self._truth_geodesics

    def geodesic_error(self, node):
        return float(self.truth_geodesics()[int(node)])
