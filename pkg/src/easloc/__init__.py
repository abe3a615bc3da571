"""Earliest-activation-site localization from ECG signals.

Anisotropic eikonal activation maps, a lead-field ECG forward model,
Gaussian-process surrogates built on the Laplace-Beltrami eigenbasis of the
cardiac surface, and single-/multi-fidelity Bayesian optimization of the
activation origin, with a CLI for reproducible experiments.
"""

from .bo import BoConfig, BoState, acquire_lcb, initial_design, run_mf_bo, run_sf_bo
from .ecg import (
    ActionPotentialParams,
    EcgTrace,
    IntracellularConductivity,
    LeadFieldSet,
    action_potential,
    build_intracellular_conductivity,
    compute_ecg,
    ecg_loss,
    lead_projection_matrix,
    synthetic_lead_fields,
    transmembrane_field,
)
from .eikonal import (
    ActivationMap,
    ConductionTensorField,
    EikonalSolver,
    build_conduction_tensor,
    geodesic_distances,
    isotropic_tensor,
    solve_eikonal,
)
from .fem import (
    EigenBasis,
    assemble_mass,
    assemble_stiffness,
    compute_eigenbasis,
    default_n_eig,
)
from .gp import (
    GpModel,
    KernelParams,
    fit_hyperparameters,
    kernel_matrix,
    nlml,
    posterior,
)
from .mesh import (
    SimplicialMesh,
    coarsen_mesh,
    generate_synthetic_geometry,
    load_mesh,
    nearest_node,
    save_mesh,
)
from .mfgp import MfGpModel, assemble_mf_covariance, fit_mf, mf_posterior
from .pipeline import (
    FidelityPipeline,
    LocalizationProblem,
    build_pipeline,
    make_reference,
)

__version__ = "0.1.0"
