"""Shared fixtures: small meshes, eigenbases, and the benchmark problem.

The expensive artifacts (level-4 ellipsoid problem, 20-seed benchmark) are
session-scoped so the acceptance tests and unit tests share one instance.
"""

import time

import numpy as np
import pytest

from easloc.bo import BoConfig, run_mf_bo, run_sf_bo
from easloc.fem import (
    assemble_mass,
    assemble_stiffness,
    compute_eigenbasis,
    default_n_eig,
)
from easloc.mesh import coarsen_mesh, flat_sheet, generate_synthetic_geometry
from easloc.pipeline import LocalizationProblem, build_pipeline, make_reference

BENCHMARK_SEEDS = tuple(range(20))
TRUTH_NODE = 500


@pytest.fixture(scope="session")
def sphere2():
    return generate_synthetic_geometry("icosphere", 1.0, 2)


@pytest.fixture(scope="session")
def sphere3():
    return generate_synthetic_geometry("icosphere", 1.0, 3)


@pytest.fixture(scope="session")
def sphere4():
    return generate_synthetic_geometry("icosphere", 1.0, 4)


@pytest.fixture(scope="session")
def ellipsoid3():
    return generate_synthetic_geometry("ellipsoid-shell", (30, 25, 20), 3)


@pytest.fixture(scope="session")
def ellipsoid3_basis(ellipsoid3):
    A = assemble_stiffness(ellipsoid3)
    M = assemble_mass(ellipsoid3)
    return compute_eigenbasis(A, M, default_n_eig(ellipsoid3.n_vertices))


@pytest.fixture(scope="session")
def sheet_fine():
    """Flat unit sheet with h = 1% of the domain (the accuracy geometry)."""
    return flat_sheet(101, 101)


@pytest.fixture(scope="session")
def benchmark_problem():
    """Default experiment: level-4 ellipsoid HF, 2x-coarsened LF."""
    hf_mesh = generate_synthetic_geometry("ellipsoid-shell", (30, 25, 20), 4)
    lf_mesh = coarsen_mesh(hf_mesh, 2.0)
    hf = build_pipeline(hf_mesh)
    lf = build_pipeline(lf_mesh)
    A = assemble_stiffness(hf_mesh)
    M = assemble_mass(hf_mesh)
    basis = compute_eigenbasis(A, M, default_n_eig(hf_mesh.n_vertices))
    reference = make_reference(hf, TRUTH_NODE)
    return LocalizationProblem(hf, reference, basis, TRUTH_NODE, lf)


@pytest.fixture(scope="session")
def benchmark_results(benchmark_problem):
    """Matched-seed SF and MF runs over the 20 benchmark seeds."""
    t0 = time.perf_counter()
    sf = {seed: run_sf_bo(benchmark_problem, BoConfig(seed=seed))
          for seed in BENCHMARK_SEEDS}
    mf = {seed: run_mf_bo(benchmark_problem, BoConfig(seed=seed))
          for seed in BENCHMARK_SEEDS}
    elapsed = time.perf_counter() - t0
    return {"sf": sf, "mf": mf, "elapsed_s": elapsed}


@pytest.fixture(scope="session")
def lf_loss_map(benchmark_problem):
    """Exhaustive low-fidelity loss over every LF mesh node."""
    lf = benchmark_problem.lf
    return np.array([
        lf.loss(i, benchmark_problem.reference)
        for i in range(lf.mesh.n_vertices)
    ])
