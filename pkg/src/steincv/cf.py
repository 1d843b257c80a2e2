"""Kernel control functionals with Stein-modified base kernels.

The estimator interpolates phi with a constant offset plus an RKHS element
whose kernel K0 has zero expectation in each argument under the target.  With
K = K0 + N * lambda_r * I (plus a small diagonal jitter for conditioning), the
estimate is

    a_hat = (w~^T K^{-1} phi) / (w~^T K^{-1} 1),    w~ = N * weights,

which for uniform weights is the usual constant-offset form.

Two base kernels are supported:

* ``gaussian``: k(x, y) = exp(-||x - y||^2 / bandwidth), turned into a Stein
  kernel with the first-order (Langevin) operator applied in both arguments:
  K0 = div_x div_y k + grad_x k . u(y) + grad_y k . u(x) + k u(x).u(y) with
  u = grad log target.
* ``polynomial``: the Gram matrix of the degree-Q second-order Stein
  covariates, K0 = X X^T.  With regulariser lambda_r this reproduces the
  unstandardised ridge ZV-CV estimate exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import ConditioningError, InvalidInput
from .polybasis import design_columns, enumerate_exponents
from .samples import IntegrandValues, SampleSet, check_aligned

_JITTER_DOUBLINGS = 8


@dataclass(frozen=True)
class KernelSpec:
    """Stein kernel configuration.

    ``bandwidth`` is the squared-distance scale of the gaussian kernel (no
    factor 2); ``degree`` is the polynomial order of the covariate Gram
    kernel.  ``jitter`` scales mean(diag K0) and is doubled on factorisation
    failure up to 8 times.
    """

    kind: str = "gaussian"
    bandwidth: float = 1.0
    degree: int = 2
    jitter: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("gaussian", "polynomial"):
            raise InvalidInput(f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian" and not self.bandwidth > 0:
            raise InvalidInput("gaussian bandwidth must be positive")
        if self.kind == "polynomial" and self.degree < 1:
            raise InvalidInput("polynomial order must be >= 1")
        if self.jitter < 0:
            raise InvalidInput("jitter must be >= 0")

    def label(self) -> str:
        if self.kind == "gaussian":
            return f"cf:gaussian:bw={self.bandwidth:g}"
        return f"cf:poly:Q={self.degree}"


def _gaussian_stein_cross(theta_a, grad_a, theta_b, grad_b, bandwidth):
    """First-order Stein kernel for k = exp(-||x-y||^2 / bw), cross block."""
    c = 2.0 / bandwidth
    d = theta_a.shape[1]
    sq = (
        np.sum(theta_a**2, axis=1)[:, None]
        - 2.0 * theta_a @ theta_b.T
        + np.sum(theta_b**2, axis=1)[None, :]
    )
    K = np.exp(-sq / bandwidth)
    P = theta_a @ grad_b.T            # x_i . u(y_l)
    Q = grad_a @ theta_b.T            # u(x_i) . y_l
    qa = np.sum(theta_a * grad_a, axis=1)   # x_i . u(x_i)
    qb = np.sum(theta_b * grad_b, axis=1)   # y_l . u(y_l)
    # div_x div_y k = c K (d - c ||x - y||^2)
    core = c * (d - c * sq)
    # grad_x k . u(y) = -c (x - y) . u(y) k ; grad_y k . u(x) = c (x - y) . u(x) k
    core = core - c * (P - qb[None, :])
    core = core + c * (qa[:, None] - Q)
    core = core + grad_a @ grad_b.T
    return K * core


def _design(s: SampleSet, degree: int) -> np.ndarray:
    A = enumerate_exponents(s.dim, degree)
    return design_columns(A.A, s.theta, s.grad_log_target)


def stein_kernel_matrix(s: SampleSet, kernel: KernelSpec) -> np.ndarray:
    """Symmetric PSD matrix K0 with rows/columns indexed by the draws."""
    if kernel.kind == "gaussian":
        g = s.grad_log_target
        if np.any(np.isnan(g)):
            raise InvalidInput("gaussian Stein kernel needs all gradient columns")
        K0 = _gaussian_stein_cross(s.theta, g, s.theta, g, kernel.bandwidth)
        return 0.5 * (K0 + K0.T)
    X = _design(s, kernel.degree)
    return X @ X.T


def _solve_with_jitter(K: np.ndarray, jitter_scale: float, base_diag: float):
    jitter = jitter_scale * base_diag if base_diag > 0 else jitter_scale
    last = None
    for _ in range(_JITTER_DOUBLINGS + 1):
        try:
            return cho_factor(K + jitter * np.eye(K.shape[0]), lower=True), jitter
        except LinAlgError as exc:
            last = exc
            jitter = max(jitter * 2.0, np.finfo(float).tiny)
    raise ConditioningError(
        "kernel system stayed non-positive-definite after jitter escalation",
        jitter=jitter,
    ) from last


def _cf_solve(K0: np.ndarray, f: np.ndarray, lam_r: float, jitter_scale: float):
    """Return (offset a, residual coefficients alpha) of the uniform-weight fit."""
    n = K0.shape[0]
    K = K0 + n * lam_r * np.eye(n)
    factor, _ = _solve_with_jitter(K, jitter_scale, float(np.mean(np.diag(K0))))
    ones = np.ones(n)
    kf = cho_solve(factor, f)
    k1 = cho_solve(factor, ones)
    a = float(ones @ kf) / float(ones @ k1)
    alpha = cho_solve(factor, f - a * ones)
    return a, alpha, factor


def cf_estimate(s: SampleSet, phi: IntegrandValues, kernel: KernelSpec,
                lam_r: float = 0.0) -> float:
    """Control-functional estimate of E[phi].

    Importance weights enter only the outer inner products; the kernel system
    itself is unweighted.  lam_r = 0 is the interpolating estimator (weights
    drop out up to jitter).
    """
    check_aligned(s, phi)
    if lam_r < 0:
        raise InvalidInput("kernel regulariser must be >= 0")
    n = s.count
    K0 = stein_kernel_matrix(s, kernel)
    K = K0 + n * lam_r * np.eye(n)
    factor, _ = _solve_with_jitter(K, kernel.jitter, float(np.mean(np.diag(K0))))
    wt = n * s.weights
    kf = cho_solve(factor, phi.values)
    k1 = cho_solve(factor, np.ones(n))
    denom = float(wt @ k1)
    if denom == 0.0 or not np.isfinite(denom):
        raise ConditioningError("degenerate kernel system: w~^T K^{-1} 1 is zero")
    return float(wt @ kf) / denom


def default_bandwidth_grid() -> np.ndarray:
    """10^(-3 + 0.5 i) for i = 0..14: fifteen values from 1e-3 to 1e4."""
    return np.power(10.0, -3.0 + 0.5 * np.arange(15))


def cf_cv_bandwidth(s: SampleSet, phi: IntegrandValues, grid=None,
                    folds: int = 5, seed: int = 0) -> float:
    """Pick the gaussian bandwidth by K-fold surrogate prediction error.

    Each fold fits the interpolating surrogate on the remaining draws and
    scores mean squared prediction error on the held-out draws; ties resolve
    to the larger bandwidth.
    """
    check_aligned(s, phi)
    grid = default_bandwidth_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(grid <= 0):
        raise InvalidInput("bandwidth grid must be positive and nonempty")
    n = s.count
    if n < folds:
        raise InvalidInput(f"{n} draws cannot fill {folds} folds")
    if np.any(np.isnan(s.grad_log_target)):
        raise InvalidInput("gaussian Stein kernel needs all gradient columns")
    perm = np.random.default_rng(seed).permutation(n)
    fold_idx = [perm[k::folds] for k in range(folds)]
    f = phi.values

    scores = np.zeros(grid.size)
    for gi, bw in enumerate(grid):
        err = 0.0
        for hold in fold_idx:
            mask = np.ones(n, dtype=bool)
            mask[hold] = False
            th_tr, g_tr = s.theta[mask], s.grad_log_target[mask]
            K0 = _gaussian_stein_cross(th_tr, g_tr, th_tr, g_tr, bw)
            K0 = 0.5 * (K0 + K0.T)
            try:
                a, alpha, _ = _cf_solve(K0, f[mask], 0.0, 1e-10)
            except ConditioningError:
                err = np.inf
                break
            K_cross = _gaussian_stein_cross(
                s.theta[hold], s.grad_log_target[hold], th_tr, g_tr, bw
            )
            pred = a + K_cross @ alpha
            err += float(np.mean((f[hold] - pred) ** 2))
        scores[gi] = err
    best = float(np.min(scores))
    if not np.isfinite(best):
        raise ConditioningError("every candidate bandwidth failed to factorise")
    # scan from the largest bandwidth down; first (near-)minimiser wins
    order = np.argsort(grid)[::-1]
    for gi in order:
        if scores[gi] <= best * (1 + 1e-12) + 1e-300:
            return float(grid[gi])
    return float(grid[order[-1]])
