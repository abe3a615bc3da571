"""Bayesian optimization of the earliest activation site over mesh nodes.

Single-fidelity: evaluate an initial design of high-fidelity losses, fit the
manifold GP, acquire the node minimizing the lower confidence bound
mu - beta sqrt(Sigma) over all mesh nodes, evaluate, refit, repeat.
Multi-fidelity: a fixed pool of cheap low-fidelity losses complements a
small high-fidelity design; the autoregressive GP fuses both and only
high-fidelity evaluations are acquired.

Termination: the acquired node falls within the geodesic convergence
tolerance of the known truth, the raw LCB argmin lands on an
already-evaluated node (no new information), or the high-fidelity budget is
exhausted. Cost is accounted in high-fidelity units (one LF evaluation =
`lf_cost_ratio` units). Every evaluation is recorded in an audit trail that
serializes to CSV byte-identically for a given seed and config.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .gp import fit_hyperparameters, posterior
from .mfgp import fit_mf, mf_posterior

DEFAULT_LF_COST_RATIO = 0.6 / 5.6  # coarse/fine runtime ratio


@dataclass(frozen=True)
class BoConfig:
    """Knobs of the optimization loops (sizes, acquisition, stopping)."""

    n_init: int = 10  # single-fidelity initial design
    n_init_hf: int = 5  # multi-fidelity high-fidelity design
    n_init_lf: int = 35  # multi-fidelity low-fidelity pool
    max_hf_evals: int = 30
    beta: float = 2.0
    geo_tol_fraction: float = 0.05  # of mesh diameter
    lf_cost_ratio: float = DEFAULT_LF_COST_RATIO
    seed: int = 0
    fit_restarts: int = 8
    node_exact: bool = False  # require exact truth-node match instead

    def __post_init__(self):
        if min(self.n_init, self.n_init_hf, self.n_init_lf) < 1:
            raise ValueError("design sizes must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0 < self.lf_cost_ratio <= 1:
            raise ValueError("lf_cost_ratio must lie in (0, 1]")


@dataclass(frozen=True)
class EvalRecord:
    iteration: int  # 0 = initial design, then 1, 2, ... per acquisition
    fidelity: str  # "high" | "low"
    node: int
    loss: float
    cum_cost: float
    converged: bool


@dataclass
class BoState:
    """Full audit of one optimization run."""

    records: list
    model: object
    best_node: int
    converged: bool
    total_cost: float
    n_hf_evals: int
    n_acquisitions: int
    stop_reason: str

    def audit_csv(self, mesh):
        """CSV rows `iteration,fidelity,node_id,x,y,z,loss,cum_cost,converged`."""
        buf = io.StringIO()
        buf.write("iteration,fidelity,node_id,x,y,z,loss,cum_cost,converged\n")
        for r in self.records:
            x, y, z = mesh.vertices[r.node]
            buf.write(
                f"{r.iteration},{r.fidelity},{r.node},"
                f"{repr(float(x))},{repr(float(y))},{repr(float(z))},"
                f"{repr(float(r.loss))},{repr(float(r.cum_cost))},"
                f"{int(r.converged)}\n"
            )
        return buf.getvalue()

    def cost_from_trail(self, lf_cost_ratio=DEFAULT_LF_COST_RATIO):
        n_hf = sum(1 for r in self.records if r.fidelity == "high")
        n_lf = sum(1 for r in self.records if r.fidelity == "low")
        return n_hf + lf_cost_ratio * n_lf


def initial_design(mesh, n, seed):
    """n distinct nodes, uniform without replacement, deterministic per seed."""
    if n > mesh.n_vertices:
        raise ValueError("design larger than the mesh")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(mesh.n_vertices, size=n, replace=False))


def acquire_lcb(means, variances, excluded, beta):
    """Argmin of mu - beta sqrt(Sigma) over non-excluded nodes.

    np.argmin returns the first minimum, so ties break to the lowest index.
    """
    lcb = means - beta * np.sqrt(np.maximum(variances, 0.0))
    excluded = np.asarray(list(excluded), dtype=np.intp)
    if len(excluded) == len(lcb):
        raise ValueError("all nodes excluded from acquisition")
    if len(excluded):
        lcb = lcb.copy()
        lcb[excluded] = np.inf
    return int(np.argmin(lcb))


def _within_tolerance(problem, node, config):
    if problem.truth_node is None:
        return False
    if config.node_exact:
        return int(node) == int(problem.truth_node)
    tol = config.geo_tol_fraction * problem.hf.mesh.diameter
    return problem.geodesic_error(node) <= tol


def _best_hf(records):
    hf = [r for r in records if r.fidelity == "high"]
    best = min(hf, key=lambda r: (r.loss, r.node))
    return best.node


def run_sf_bo(problem, config):
    """Single-fidelity loop: HF initial design + LCB acquisitions."""
    mesh = problem.hf.mesh
    basis = problem.basis
    records = []
    cost = 0.0
    design = initial_design(mesh, config.n_init, config.seed)
    X = []
    y = []
    for node in design:
        loss = problem.loss_hf(node)
        cost += 1.0
        X.append(int(node))
        y.append(loss)
        records.append(EvalRecord(0, "high", int(node), loss, cost, False))
    converged = any(_within_tolerance(problem, n, config) for n in X)
    model = None
    stop = "initial-design-hit" if converged else "max-hf-evals"
    n_acq = 0
    while not converged and len(X) < config.max_hf_evals:
        model = fit_hyperparameters(
            np.array(X), np.array(y), basis,
            restarts=config.fit_restarts, seed=config.seed,
            diameter=mesh.diameter,
        )
        mu, var = posterior(model, np.arange(mesh.n_vertices))
        cand = acquire_lcb(mu, var, excluded=(), beta=config.beta)
        if cand in X:
            converged = _within_tolerance(problem, cand, config)
            stop = "duplicate-acquisition"
            break
        n_acq += 1
        loss = problem.loss_hf(cand)
        cost += 1.0
        X.append(cand)
        y.append(loss)
        converged = _within_tolerance(problem, cand, config)
        records.append(EvalRecord(n_acq, "high", cand, loss, cost, converged))
        if converged:
            stop = "converged"
    return BoState(records, model, _best_hf(records), converged, cost,
                   len(X), n_acq, stop)


def run_mf_bo(problem, config):
    """Two-fidelity loop: fixed LF pool, HF-only LCB acquisitions."""
    if problem.lf is None:
        raise ValueError("multi-fidelity run needs a low-fidelity pipeline")
    mesh = problem.hf.mesh
    basis = problem.basis
    records = []
    cost = 0.0
    X_L = initial_design(mesh, config.n_init_lf, config.seed + 10_000)
    y_L = []
    for node in X_L:
        loss = problem.loss_lf(node)
        cost += config.lf_cost_ratio
        y_L.append(loss)
        records.append(EvalRecord(0, "low", int(node), loss, cost, False))
    X_H = list(initial_design(mesh, config.n_init_hf, config.seed))
    y_H = []
    for node in list(X_H):
        loss = problem.loss_hf(node)
        cost += 1.0
        y_H.append(loss)
        records.append(EvalRecord(0, "high", int(node), loss, cost, False))
    converged = any(_within_tolerance(problem, n, config) for n in X_H)
    model = None
    stop = "initial-design-hit" if converged else "max-hf-evals"
    n_acq = 0
    while not converged and len(X_H) < config.max_hf_evals:
        model = fit_mf(
            X_L, np.array(y_L), np.array(X_H), np.array(y_H), basis,
            restarts=config.fit_restarts, seed=config.seed,
            diameter=mesh.diameter,
        )
        mu, var = mf_posterior(model, np.arange(mesh.n_vertices))
        cand = acquire_lcb(mu, var, excluded=(), beta=config.beta)
        if cand in X_H:
            converged = _within_tolerance(problem, cand, config)
            stop = "duplicate-acquisition"
            break
        n_acq += 1
        loss = problem.loss_hf(cand)
        cost += 1.0
        X_H.append(cand)
        y_H.append(loss)
        converged = _within_tolerance(problem, cand, config)
        records.append(EvalRecord(n_acq, "high", cand, loss, cost, converged))
        if converged:
            stop = "converged"
    return BoState(records, model, _best_hf(records), converged, cost,
                   len(X_H), n_acq, stop)
