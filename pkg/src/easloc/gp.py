"""Gaussian process regression on a mesh via the Laplace-Beltrami eigenbasis.

The covariance is a truncated Matern-like spectral kernel,

    k(x, x') = (eta^2 / C) sum_i (1/ell^2 + lambda_i)^(-alpha) psi_i(x) psi_i(x'),

with alpha = nu + d/2 and C chosen so the node-averaged prior variance over
the whole mesh equals eta^2. Hyperparameters (log eta, log ell, log sigma_n^2)
are trained by minimizing the negative log marginal likelihood with L-BFGS-B
and analytic gradients, over several seeded restarts.

Observations are standardized to zero mean / unit variance before fitting by
default, so the zero-mean prior does not drag extrapolations of strictly
positive targets toward zero; predictions are mapped back to the original
scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

DEFAULT_NU = 2.5
DEFAULT_RESTARTS = 8
JITTER_FLOOR = 1e-10
JITTER_CEIL = 1e-4

LOG_2PI = float(np.log(2.0 * np.pi))


class GpFitError(RuntimeError):
    """Raised when every optimizer restart fails."""


@dataclass(frozen=True)
class KernelParams:
    """Spectral Matern-like kernel parameters on a d-manifold."""

    eta: float  # prior amplitude (observation units)
    ell: float  # length scale (mm)
    nu: float = DEFAULT_NU
    d: int = 2

    def __post_init__(self):
        if not (self.eta > 0 and self.ell > 0 and self.nu > 0):
            raise ValueError("eta, ell, nu must be positive")

    @property
    def alpha(self):
        return self.nu + self.d / 2.0


def spectral_weights(basis, ell, alpha):
    """Per-mode weights (1/ell^2 + lambda_i)^(-alpha)."""
    return (1.0 / ell**2 + basis.eigenvalues) ** (-alpha)


def _normalizer(basis, w):
    """C = (1/n) sum_x sum_i w_i psi_i(x)^2: node-averaged raw prior variance."""
    s = np.einsum("xi,xi->i", basis.eigenvectors, basis.eigenvectors)
    return float(w @ s) / basis.n_nodes


def kernel_matrix(basis, rows, cols, params):
    """Dense covariance block k(rows, cols).

    Swapping rows and cols returns the exact float transpose: the block is
    always evaluated with the canonically ordered argument pair and
    transposed as needed, so accumulation order is identical either way.
    """
    if basis.n_eig < 1:
        raise ValueError("empty eigenbasis")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if cols.tobytes() < rows.tobytes():
        return kernel_matrix(basis, cols, rows, params).T
    w = spectral_weights(basis, params.ell, params.alpha)
    C = _normalizer(basis, w)
    pr = basis.eigenvectors[rows]
    pc = basis.eigenvectors[cols]
    K = (params.eta**2 / C) * ((pr * w[None, :]) @ pc.T)
    if rows.shape == cols.shape and np.array_equal(rows, cols):
        K = 0.5 * (K + K.T)
    return K


def kernel_diag(basis, nodes, params):
    w = spectral_weights(basis, params.ell, params.alpha)
    C = _normalizer(basis, w)
    p = basis.eigenvectors[np.asarray(nodes, dtype=np.intp)]
    return (params.eta**2 / C) * np.einsum("xi,i,xi->x", p, w, p)


def _chol_with_jitter(K):
    """Cholesky of K with escalating diagonal jitter; returns (factor, jitter)."""
    mean_diag = max(float(np.mean(np.diag(K))), np.finfo(float).tiny)
    jitter = JITTER_FLOOR * mean_diag
    while True:
        try:
            c = cho_factor(K + jitter * np.eye(K.shape[0]), lower=True)
            return c, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > JITTER_CEIL * mean_diag:
                raise


def nlml(basis, X, y, params, sigma_n2):
    """Negative log marginal likelihood of y ~ N(0, K + sigma_n^2 I)."""
    val, _ = nlml_and_grad(basis, X, y, params, sigma_n2)
    return val


def nlml_and_grad(basis, X, y, params, sigma_n2):
    """NLML and its gradient w.r.t. (log eta, log ell, log sigma_n^2)."""
    X = np.asarray(X, dtype=np.intp)
    y = np.asarray(y, dtype=float)
    n = len(y)
    alpha_exp = params.alpha
    u = 1.0 / params.ell**2
    lam = basis.eigenvalues
    w = (u + lam) ** (-alpha_exp)
    dw = 2.0 * alpha_exp * u * (u + lam) ** (-alpha_exp - 1.0)  # d w / d log ell
    s = np.einsum("xi,xi->i", basis.eigenvectors, basis.eigenvectors)
    C = float(w @ s) / basis.n_nodes
    dC = float(dw @ s) / basis.n_nodes
    P = basis.eigenvectors[X]  # (n, n_eig)
    A = P * w[None, :]
    Kf = (params.eta**2 / C) * (A @ P.T)
    dK_ell = (params.eta**2 / C) * ((P * dw[None, :]) @ P.T) - (dC / C) * Kf
    Ky = Kf + sigma_n2 * np.eye(n)
    (c, lower), jitter = _chol_with_jitter(Ky)
    a = cho_solve((c, lower), y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    val = 0.5 * logdet + 0.5 * float(y @ a) + 0.5 * n * LOG_2PI
    Kinv = cho_solve((c, lower), np.eye(n))
    # d NLML / d theta = 0.5 tr(Kinv dK) - 0.5 a^T dK a
    def direction(dK):
        return 0.5 * float(np.sum(Kinv * dK)) - 0.5 * float(a @ dK @ a)

    grad = np.array([
        direction(2.0 * Kf),
        direction(dK_ell),
        direction(sigma_n2 * np.eye(n)),
    ])
    return val, grad


@dataclass(frozen=True)
class GpModel:
    """Trained single-fidelity GP; immutable, safe for concurrent queries."""

    basis: object  # EigenBasis
    X: np.ndarray  # training node ids
    y: np.ndarray  # raw observations
    params: KernelParams
    sigma_n2: float
    y_shift: float  # standardization offset
    y_scale: float  # standardization scale
    nlml_value: float

    def standardized_y(self):
        return (self.y - self.y_shift) / self.y_scale

    def to_record(self):
        """Structured text (JSON) record of model state sans the basis."""
        return json.dumps({
            "X": [int(i) for i in self.X],
            "y": [float(v) for v in self.y],
            "eta": self.params.eta, "ell": self.params.ell,
            "nu": self.params.nu, "d": self.params.d,
            "sigma_n2": self.sigma_n2,
            "y_shift": self.y_shift, "y_scale": self.y_scale,
            "nlml": self.nlml_value,
        }, indent=2)

    @classmethod
    def from_record(cls, text, basis):
        r = json.loads(text)
        return cls(
            basis, np.asarray(r["X"], dtype=np.intp),
            np.asarray(r["y"], dtype=float),
            KernelParams(r["eta"], r["ell"], r["nu"], r["d"]),
            float(r["sigma_n2"]), float(r["y_shift"]), float(r["y_scale"]),
            float(r["nlml"]),
        )


def spectral_diameter(basis):
    """Crude mesh-diameter estimate pi / sqrt(lambda_1) from the first
    nonzero eigenvalue (half-wavelength of the slowest oscillating mode)."""
    lam = basis.eigenvalues[basis.eigenvalues > 1e-12]
    if len(lam) == 0:
        raise ValueError("basis has no nonzero eigenvalues")
    return float(np.pi / np.sqrt(lam[0]))


def _standardization(y, standardize):
    if not standardize or len(y) < 2:
        return 0.0, 1.0
    shift = float(np.mean(y))
    scale = float(np.std(y))
    if scale <= 0:
        scale = max(abs(shift), 1.0)
    return shift, scale


def fit_hyperparameters(X, y, basis, restarts=DEFAULT_RESTARTS, seed=0,
                        nu=DEFAULT_NU, d=2, diameter=None, standardize=True):
    """Train kernel and noise hyperparameters by restarted L-BFGS-B.

    Deterministic for a given seed: restarts draw log-uniform initial points
    from a seeded generator and the lowest-NLML restart wins (first index on
    ties).
    """
    X = np.asarray(X, dtype=np.intp)
    y = np.asarray(y, dtype=float)
    if len(X) != len(y) or len(y) < 2:
        raise ValueError("need at least two observations")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if diameter is None:
        diameter = spectral_diameter(basis)
    shift, scale = _standardization(y, standardize)
    ys = (y - shift) / scale
    y_std = max(float(np.std(ys)), 1e-12)
    y_var = max(float(np.var(ys)), 1e-10)
    lo = np.log([1e-3 * y_std, 0.01 * diameter, 1e-10 * y_var])
    hi = np.log([1e3 * y_std, 2.0 * diameter, y_var])
    bounds = list(zip(lo, hi))

    def objective(theta):
        params = KernelParams(np.exp(theta[0]), np.exp(theta[1]), nu, d)
        return nlml_and_grad(basis, X, ys, params, np.exp(theta[2]))

    rng = np.random.default_rng(seed)
    starts = [np.log([y_std, 0.3 * diameter, 1e-4 * y_var])]
    for _ in range(restarts - 1):
        starts.append(lo + rng.random(3) * (hi - lo))
    best = None
    failures = []
    for theta0 in starts:
        try:
            res = minimize(objective, np.clip(theta0, lo, hi), jac=True,
                           method="L-BFGS-B", bounds=bounds)
        except np.linalg.LinAlgError as exc:
            failures.append(str(exc))
            continue
        if not np.isfinite(res.fun):
            failures.append("non-finite NLML")
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise GpFitError(f"all {restarts} restarts failed: {failures}")
    theta = best.x
    params = KernelParams(float(np.exp(theta[0])), float(np.exp(theta[1])),
                          nu, d)
    return GpModel(basis, X, y, params, float(np.exp(theta[2])),
                   shift, scale, float(best.fun))


def posterior(model, query):
    """Posterior mean and variance of the latent function at query nodes.

    Variances are clamped at zero; clamping magnitudes stay within numerical
    noise (<= 1e-8 eta^2) by construction of the PSD spectral kernel.
    """
    query = np.asarray(query, dtype=np.intp)
    ys = model.standardized_y()
    Kxx = kernel_matrix(model.basis, model.X, model.X, model.params)
    Ky = Kxx + model.sigma_n2 * np.eye(len(model.X))
    (c, lower), _ = _chol_with_jitter(Ky)
    Kqx = kernel_matrix(model.basis, query, model.X, model.params)
    mean_s = Kqx @ cho_solve((c, lower), ys)
    V = solve_triangular(c, Kqx.T, lower=lower)
    var_s = kernel_diag(model.basis, query, model.params) - np.einsum(
        "ij,ij->j", V, V
    )
    var_s = np.maximum(var_s, 0.0)
    mean = model.y_shift + model.y_scale * mean_s
    var = model.y_scale**2 * var_s
    return mean, var


def sample_prior(basis, nodes, params, seed, n_samples=1):
    """Draw prior samples at the given nodes (testing/diagnostics helper)."""
    K = kernel_matrix(basis, nodes, nodes, params)
    (c, lower), _ = _chol_with_jitter(K)
    L = np.tril(c) if lower else np.triu(c).T
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((len(nodes), n_samples))
    out = L @ z
    return out[:, 0] if n_samples == 1 else out
