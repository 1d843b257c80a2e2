"""Kernel control functionals: closed-form Stein kernel, estimator, bandwidth CV."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad
from scipy.linalg import LinAlgError
from scipy.stats import norm

import steincv.cf as cf_mod
from steincv.cf import (
    KernelSpec,
    _gaussian_stein_cross,
    cf_cv_bandwidth,
    cf_estimate,
    default_bandwidth_grid,
    stein_kernel_matrix,
)
from steincv.errors import ConditioningError, InvalidInput
from steincv.regression import fit_ridge
from steincv.polybasis import enumerate_exponents, design_columns
from steincv.samples import IntegrandValues, SampleSet


def gaussian_draws(n, seed, d=1, mu=0.0, sd=1.0):
    rng = np.random.default_rng(seed)
    theta = rng.normal(mu, sd, size=(n, d))
    return SampleSet(theta=theta, grad_log_target=-(theta - mu) / sd**2, weights=None)


# --- closed-form kernel vs finite differences ------------------------------------


def fd_stein_kernel(x, y, ux, uy, bw, h=1e-4):
    """Brute-force k0(x, y) from the defining operator, via central differences."""
    def k(a, b):
        return float(np.exp(-np.sum((a - b) ** 2) / bw))

    d = x.size
    eye = np.eye(d)
    div = 0.0
    for j in range(d):
        e = h * eye[j]
        div += (k(x + e, y + e) - k(x + e, y - e)
                - k(x - e, y + e) + k(x - e, y - e)) / (4 * h * h)
    gx = np.array([(k(x + h * eye[j], y) - k(x - h * eye[j], y)) / (2 * h) for j in range(d)])
    gy = np.array([(k(x, y + h * eye[j]) - k(x, y - h * eye[j])) / (2 * h) for j in range(d)])
    return div + gx @ uy + gy @ ux + k(x, y) * (ux @ uy)


@pytest.mark.parametrize("bw", [0.5, 1.0, 3.0])
def test_gaussian_stein_kernel_matches_finite_differences(bw):
    rng = np.random.default_rng(0)
    theta = rng.normal(size=(6, 2))
    grad = rng.normal(size=(6, 2))          # arbitrary field: the algebra is generic
    K0 = _gaussian_stein_cross(theta, grad, theta, grad, bw)
    for i in range(6):
        for l in range(6):
            want = fd_stein_kernel(theta[i], theta[l], grad[i], grad[l], bw)
            assert K0[i, l] == pytest.approx(want, rel=1e-5, abs=1e-7)


def test_gaussian_stein_kernel_zero_mean_under_target():
    # the point of the construction: E_p[k0(X, y)] = 0 for p = N(0,1), u = -x
    for y0, bw in [(0.7, 1.0), (-1.3, 2.5), (0.0, 0.3)]:
        def integrand(x):
            val = _gaussian_stein_cross(
                np.array([[x]]), np.array([[-x]]),
                np.array([[y0]]), np.array([[-y0]]), bw,
            )[0, 0]
            return val * norm.pdf(x)

        total, err = quad(integrand, -12.0, 12.0, limit=200, epsabs=1e-12)
        assert abs(total) < 1e-9


def test_stein_kernel_matrix_symmetric_psd():
    s = gaussian_draws(20, seed=1, d=3)
    for spec in [KernelSpec("gaussian", bandwidth=2.0), KernelSpec("polynomial", degree=2)]:
        K0 = stein_kernel_matrix(s, spec)
        assert_allclose(K0, K0.T, atol=1e-12)
        w = np.linalg.eigvalsh(K0)
        assert w.min() > -1e-8 * max(w.max(), 1.0)


def test_gaussian_kernel_rejects_masked_gradients():
    s = gaussian_draws(8, seed=2, d=2)
    grad = s.grad_log_target.copy()
    grad[:, 1] = np.nan
    masked = SampleSet(theta=s.theta, grad_log_target=grad, weights=None)
    with pytest.raises(InvalidInput):
        stein_kernel_matrix(masked, KernelSpec("gaussian"))
    with pytest.raises(InvalidInput):
        cf_cv_bandwidth(masked, IntegrandValues(np.zeros(8)))


# --- estimator --------------------------------------------------------------------


def test_constant_integrand_recovered_exactly():
    s = gaussian_draws(15, seed=3, d=2)
    phi = IntegrandValues(np.full(15, 4.25))
    for spec in [KernelSpec("gaussian", bandwidth=1.5), KernelSpec("polynomial", degree=1)]:
        assert cf_estimate(s, phi, spec) == pytest.approx(4.25, abs=1e-9)
        assert cf_estimate(s, phi, spec, lam_r=0.3) == pytest.approx(4.25, abs=1e-9)


def test_interpolation_beats_plain_average():
    s = gaussian_draws(60, seed=4)
    phi = IntegrandValues(s.theta[:, 0])
    naive = abs(float(np.mean(phi.values)))
    est = cf_estimate(s, phi, KernelSpec("gaussian", bandwidth=2.0))
    assert abs(est) < naive
    assert abs(est) < 0.02


def test_polynomial_kernel_equals_unstandardised_ridge():
    """Representer duality: poly-CF with lam_r reproduces ridge ZV with lam = lam_r."""
    rng = np.random.default_rng(5)
    for trial in range(4):
        n, d, q = rng.integers(8, 30), rng.integers(1, 4), rng.integers(1, 4)
        theta = rng.normal(size=(n, d))
        s = SampleSet(theta=theta, grad_log_target=-theta, weights=None)
        phi = IntegrandValues(np.sin(theta[:, 0]) + theta.sum(axis=1) ** 2)
        lam = float(rng.uniform(0.01, 1.0))
        cf = cf_estimate(s, phi, KernelSpec("polynomial", degree=int(q)), lam_r=lam)
        X = design_columns(enumerate_exponents(int(d), int(q)).A, s.theta, s.grad_log_target)
        fit = fit_ridge(X, phi.values, s.weights, lam=lam, standardised=False)
        zv = fit.intercept
        assert cf == pytest.approx(zv, abs=1e-8 * max(1.0, abs(zv)))


def test_negative_regulariser_rejected():
    s = gaussian_draws(6, seed=6)
    with pytest.raises(InvalidInput):
        cf_estimate(s, IntegrandValues(np.zeros(6)), KernelSpec(), lam_r=-1e-3)


def test_jitter_escalation_exhaustion(monkeypatch):
    def always_fail(*args, **kwargs):
        raise LinAlgError("not positive definite")

    monkeypatch.setattr(cf_mod, "cho_factor", always_fail)
    s = gaussian_draws(6, seed=7)
    with pytest.raises(ConditioningError) as ei:
        cf_estimate(s, IntegrandValues(s.theta[:, 0]), KernelSpec())
    assert ei.value.diagnostics["jitter"] > 0


def test_kernel_spec_validation_and_labels():
    with pytest.raises(InvalidInput):
        KernelSpec(kind="matern")
    with pytest.raises(InvalidInput):
        KernelSpec(kind="gaussian", bandwidth=0.0)
    with pytest.raises(InvalidInput):
        KernelSpec(kind="polynomial", degree=0)
    with pytest.raises(InvalidInput):
        KernelSpec(jitter=-1e-12)
    assert KernelSpec("gaussian", bandwidth=0.25).label() == "cf:gaussian:bw=0.25"
    assert KernelSpec("polynomial", degree=3).label() == "cf:poly:Q=3"


# --- bandwidth selection -----------------------------------------------------------


def test_default_grid_shape():
    grid = default_bandwidth_grid()
    assert grid.size == 15
    assert grid[0] == pytest.approx(1e-3)
    assert grid[-1] == pytest.approx(1e4)
    assert_allclose(np.diff(np.log10(grid)), 0.5)


def test_bandwidth_cv_deterministic_and_on_grid():
    s = gaussian_draws(40, seed=8, d=2)
    phi = IntegrandValues(np.cos(s.theta[:, 0]))
    bw1 = cf_cv_bandwidth(s, phi, seed=3)
    bw2 = cf_cv_bandwidth(s, phi, seed=3)
    assert bw1 == bw2
    assert bw1 in default_bandwidth_grid()
    custom = [0.5, 2.0, 8.0]
    assert cf_cv_bandwidth(s, phi, grid=custom, seed=3) in custom


def test_bandwidth_ties_resolve_large():
    # constant integrand interpolates exactly at every bandwidth: all scores zero
    s = gaussian_draws(25, seed=9)
    phi = IntegrandValues(np.full(25, 2.0))
    assert cf_cv_bandwidth(s, phi, grid=[0.1, 1.0, 10.0]) == 10.0


def test_bandwidth_cv_validation():
    s = gaussian_draws(4, seed=10)
    phi = IntegrandValues(np.zeros(4))
    with pytest.raises(InvalidInput):
        cf_cv_bandwidth(s, phi, folds=5)       # 4 draws cannot fill 5 folds
    with pytest.raises(InvalidInput):
        cf_cv_bandwidth(s, phi, grid=[])
    with pytest.raises(InvalidInput):
        cf_cv_bandwidth(s, phi, grid=[-1.0, 1.0], folds=2)
