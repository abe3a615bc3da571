"""Two-fidelity autoregressive GP: covariance blocks, fits, posteriors."""

import numpy as np
import pytest

from easloc.fem import assemble_mass, assemble_stiffness, compute_eigenbasis
from easloc.gp import (
    KernelParams,
    fit_hyperparameters,
    kernel_matrix,
    posterior,
    sample_prior,
)
from easloc.mfgp import (
    MfGpModel,
    assemble_mf_covariance,
    fit_mf,
    mf_nlml_and_grad,
    mf_posterior,
)


@pytest.fixture(scope="module")
def basis(sphere3):
    A = assemble_stiffness(sphere3)
    M = assemble_mass(sphere3)
    return compute_eigenbasis(A, M, 64)


TL = KernelParams(1.2, 0.6)
TH = KernelParams(0.4, 0.9)


def test_block_structure_formulas(basis):
    rng = np.random.default_rng(0)
    X_L = rng.choice(basis.n_nodes, 8, replace=False)
    X_H = rng.choice(basis.n_nodes, 5, replace=False)
    rho = 1.7
    K = assemble_mf_covariance(basis, X_L, X_H, TL, TH, rho)
    kL = lambda a, b: kernel_matrix(basis, a, b, TL)
    kH = lambda a, b: kernel_matrix(basis, a, b, TH)
    assert np.allclose(K[:8, :8], kL(X_L, X_L))
    assert np.allclose(K[:8, 8:], rho * kL(X_L, X_H))
    assert np.allclose(K[8:, 8:], rho**2 * kL(X_H, X_H) + kH(X_H, X_H))
    assert np.allclose(K, K.T)


def test_rho_zero_decouples_fidelities(basis):
    X_L = np.arange(6)
    X_H = np.arange(10, 14)
    K = assemble_mf_covariance(basis, X_L, X_H, TL, TH, 0.0)
    assert np.abs(K[:6, 6:]).max() == 0.0
    assert np.allclose(K[6:, 6:], kernel_matrix(basis, X_H, X_H, TH))


def test_vanishing_discrepancy_block(basis):
    X_L = np.arange(5)
    X_H = np.arange(20, 24)
    tiny = KernelParams(1e-8, 0.9)
    K = assemble_mf_covariance(basis, X_L, X_H, TL, tiny, 2.0)
    assert np.allclose(K[5:, 5:], 4.0 * kernel_matrix(basis, X_H, X_H, TL),
                       rtol=1e-6)


def test_joint_covariance_psd(basis):
    rng = np.random.default_rng(1)
    for rho in (-2.0, 0.3, 1.0, 4.0):
        X_L = rng.choice(basis.n_nodes, 12, replace=False)
        X_H = rng.choice(basis.n_nodes, 7, replace=False)
        K = assemble_mf_covariance(basis, X_L, X_H, TL, TH, rho)
        ev = np.linalg.eigvalsh(K)
        assert ev.min() > -1e-9 * max(ev.max(), 1.0)


def test_empty_hf_block_rejected(basis):
    with pytest.raises(ValueError):
        assemble_mf_covariance(basis, np.arange(4), np.empty(0, np.intp),
                               TL, TH, 1.0)
    with pytest.raises(ValueError):
        fit_mf([0, 1], [1.0, 2.0], [], [], basis)


def test_mf_gradient_matches_finite_differences(basis):
    rng = np.random.default_rng(2)
    X_L = rng.choice(basis.n_nodes, 10, replace=False)
    X_H = rng.choice(basis.n_nodes, 6, replace=False)
    y_L = rng.normal(size=10)
    y_H = rng.normal(size=6)
    theta = np.array([np.log(0.8), np.log(0.5), np.log(0.3), np.log(0.7),
                      1.3, np.log(0.01), np.log(0.02)])
    _, grad = mf_nlml_and_grad(basis, X_L, y_L, X_H, y_H, theta, 2.5, 2)
    h = 1e-6
    for i in range(7):
        e = np.zeros(7)
        e[i] = h
        fp, _ = mf_nlml_and_grad(basis, X_L, y_L, X_H, y_H, theta + e, 2.5, 2)
        fm, _ = mf_nlml_and_grad(basis, X_L, y_L, X_H, y_H, theta - e, 2.5, 2)
        fd = (fp - fm) / (2 * h)
        assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_linear_coupling_recovered(basis):
    """y_H = 2 y_L exactly: the fit finds rho ~ 2 and a tiny discrepancy."""
    rng = np.random.default_rng(3)
    X_L = np.sort(rng.choice(basis.n_nodes, 30, replace=False))
    X_H = X_L[::3]
    f = sample_prior(basis, np.arange(basis.n_nodes),
                     KernelParams(1.0, 0.8), 5)
    y_L = f[X_L]
    y_H = 2.0 * f[X_H]
    model = fit_mf(X_L, y_L, X_H, y_H, basis, restarts=4, seed=0,
                   standardize=False)
    assert model.rho == pytest.approx(2.0, abs=0.05)
    assert model.params_H.eta < 0.05 * model.params_L.eta
    mean, _ = mf_posterior(model, X_H)
    assert np.abs(mean - y_H).max() < 0.05 * np.std(y_H)


def test_hf_interpolation_and_variance(basis):
    rng = np.random.default_rng(4)
    f = sample_prior(basis, np.arange(basis.n_nodes),
                     KernelParams(1.0, 0.7), 6)
    X_L = np.sort(rng.choice(basis.n_nodes, 40, replace=False))
    X_H = np.sort(rng.choice(X_L, 8, replace=False))
    y_L = f[X_L] + 0.05 * rng.normal(size=40)
    y_H = 1.5 * f[X_H] + 0.3
    model = fit_mf(X_L, y_L, X_H, y_H, basis, restarts=4, seed=0)
    mean, var = mf_posterior(model, X_H)
    assert np.abs(mean - y_H).max() < 0.15 * max(np.std(y_H), 1e-6)
    assert np.all(var >= 0)
    # variance is lower at HF training nodes than at faraway nodes
    others = np.setdiff1d(np.arange(basis.n_nodes), X_L)[::20]
    _, var_far = mf_posterior(model, others)
    assert np.median(var) < np.median(var_far)


def test_rho_zero_model_reduces_to_single_fidelity(basis):
    """With rho = 0 the HF posterior ignores the LF data entirely."""
    rng = np.random.default_rng(5)
    X_L = rng.choice(basis.n_nodes, 15, replace=False)
    X_H = rng.choice(basis.n_nodes, 10, replace=False)
    y_L = rng.normal(size=15)
    f = sample_prior(basis, np.arange(basis.n_nodes), TH, 7)
    y_H = f[X_H]
    model = MfGpModel(basis, X_L, y_L, X_H, y_H, TL, TH, 0.0,
                      1e-6, 1e-6, 0.0, 1.0, 0.0)
    q = np.arange(0, basis.n_nodes, 9)
    m_mf, v_mf = mf_posterior(model, q)
    from easloc.gp import GpModel
    sf = GpModel(basis, X_H, y_H, TH, 1e-6, 0.0, 1.0, 0.0)
    m_sf, v_sf = posterior(sf, q)
    # the joint and marginal factorizations use different jitter scales,
    # so agreement is to solver accuracy rather than exact
    assert np.allclose(m_mf, m_sf, atol=1e-5)
    assert np.allclose(v_mf, v_sf, atol=1e-5)


def test_fit_determinism(basis):
    rng = np.random.default_rng(6)
    X_L = rng.choice(basis.n_nodes, 20, replace=False)
    X_H = X_L[:6]
    f = sample_prior(basis, np.arange(basis.n_nodes),
                     KernelParams(1.0, 0.6), 8)
    y_L, y_H = f[X_L], 1.2 * f[X_H] + 0.1
    m1 = fit_mf(X_L, y_L, X_H, y_H, basis, restarts=3, seed=0)
    m2 = fit_mf(X_L, y_L, X_H, y_H, basis, restarts=3, seed=0)
    assert m1.params_L == m2.params_L and m1.params_H == m2.params_H
    assert m1.rho == m2.rho and m1.nlml_value == m2.nlml_value


def test_record_roundtrip(basis):
    rng = np.random.default_rng(7)
    X_L = rng.choice(basis.n_nodes, 12, replace=False)
    X_H = X_L[:4]
    f = sample_prior(basis, np.arange(basis.n_nodes),
                     KernelParams(1.0, 0.6), 9)
    model = fit_mf(X_L, f[X_L], X_H, 1.1 * f[X_H], basis, restarts=2, seed=0)
    back = MfGpModel.from_record(model.to_record(), basis)
    assert np.array_equal(back.X_L, model.X_L)
    assert np.array_equal(back.X_H, model.X_H)
    assert back.params_L == model.params_L
    assert back.rho == model.rho
    q = np.arange(0, basis.n_nodes, 17)
    m1, v1 = mf_posterior(model, q)
    m2, v2 = mf_posterior(back, q)
    assert np.allclose(m1, m2) and np.allclose(v1, v2)
