"""Weighted penalised regression used to fit control variate coefficients.

The fitted model is  f(theta) ~ c - x(theta)^T beta  so that c is the quantity
of interest and +beta^T x is the variance-reducing correction: the estimator
downstream is sum_i w_i (f_i + x_i^T beta).  Penalised fits run on
standardised variables; ``beta`` is always reported on the raw scale with
``beta_s`` its standardised counterpart (beta[j] = beta_s[j] * sd_f / sd_xj).

Weights are importance weights normalised to sum to one.  The penalised
objectives are

    ridge:  sum_i w_i (f_i - c + x_i beta)^2 + lambda ||beta_s||_2^2
    lasso: (1/2) sum_i w_i (f_i - c + x_i beta)^2 + lambda ||beta_s||_1

with the intercept never penalised.  For uniform weights these are the usual
1/N-normalised forms, so lambda_max = max_j |sum_i w_i x_s[i,j] f_s[i]| kills
every lasso coefficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.linalg import lstsq
from scipy import linalg

from .errors import ConvergenceError, InsufficientSamples, InvalidInput
from .samples import SD_FLOOR, Standardisation, standardise, weighted_mean, weighted_sd

_LASSO_MAX_SWEEPS = 100_000
_LASSO_COORD_TOL = 1e-7   # max coordinate change per sweep, standardised scale
_LASSO_KKT_TOL = 1e-8     # absolute KKT slack, standardised scale
# Gram-based coordinate descent is worthwhile until X^T X gets expensive.
_GRAM_FLOP_CAP = 2.0e8


@dataclass(frozen=True)
class RegressionFit:
    """Coefficients and diagnostics of one control-variate regression."""

    intercept: float
    beta: np.ndarray
    beta_s: np.ndarray
    method: str
    lam: float = 0.0
    cv_mse: float | None = None
    dropped: tuple[int, ...] = ()
    rank_deficient: bool = False
    n_sweeps: int = 0

    def __post_init__(self):
        for name in ("beta", "beta_s"):
            v = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=float))
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.intercept - X @ self.beta

    def active(self) -> np.ndarray:
        return np.flatnonzero(self.beta != 0.0)


@dataclass(frozen=True)
class CvConfig:
    """Cross-validation settings for penalty selection.

    ``lambda_grid`` must be strictly descending when given; the default is 100
    log-spaced values from lambda_max down to lambda_max * 1e-4.  Score ties
    within ``tolerance`` (relative to the response variance) resolve to the
    larger lambda.
    """

    folds: int = 10
    lambda_grid: tuple[float, ...] | None = None
    seed: int = 0
    tolerance: float = 1e-9

    def __post_init__(self):
        if self.folds < 2:
            raise InvalidInput("cross-validation needs at least 2 folds")
        if self.lambda_grid is not None:
            grid = tuple(float(v) for v in self.lambda_grid)
            if len(grid) == 0 or any(v < 0 for v in grid):
                raise InvalidInput("lambda grid must be nonnegative and nonempty")
            if any(a <= b for a, b in zip(grid, grid[1:])):
                raise InvalidInput("lambda grid must be strictly descending")
            object.__setattr__(self, "lambda_grid", grid)


def _prepare(X, f, weights):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    f = np.asarray(f, dtype=float).reshape(-1)
    n = X.shape[0]
    if f.shape[0] != n:
        raise InvalidInput("X and f disagree on the number of rows")
    if n < 2:
        raise InsufficientSamples("regression needs at least two samples")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(f))):
        raise InvalidInput("regression requires finite inputs")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape != (n,) or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InvalidInput("bad weight vector")
        total = w.sum()
        if total <= 0:
            raise InvalidInput("weights sum to zero")
        w = w / total
    return X, f, w


def _finish(gamma_full, st, x_mean, f_mean, *, method, lam, dropped,
            rank_deficient=False, n_sweeps=0, cv_mse=None):
    """Map an internal ``f ~ a + X gamma`` solution to the public convention."""
    beta = -gamma_full
    intercept = float(f_mean + beta @ x_mean)
    sd_f = st.response_sd if st is not None else None
    if st is None or sd_f is None:
        beta_s = beta.copy()
    else:
        sds = np.where(st.covariate_sds < SD_FLOOR, 1.0, st.covariate_sds)
        beta_s = beta * sds / sd_f if sd_f >= SD_FLOOR else np.zeros_like(beta)
    return RegressionFit(
        intercept=intercept,
        beta=beta,
        beta_s=beta_s,
        method=method,
        lam=float(lam),
        cv_mse=cv_mse,
        dropped=tuple(dropped),
        rank_deficient=rank_deficient,
        n_sweeps=n_sweeps,
    )


def fit_ols(X, f, weights=None) -> RegressionFit:
    """Weighted least squares with intercept; minimum-norm when rank-deficient."""
    X, f, w = _prepare(X, f, weights)
    J = X.shape[1]
    x_mean = weighted_mean(X, w)
    f_mean = float(weighted_mean(f, w))
    x_sd = weighted_sd(X, w)
    f_sd = float(weighted_sd(f, w))
    dropped = tuple(int(j) for j in np.flatnonzero(x_sd < SD_FLOOR))
    keep = np.array([j for j in range(J) if j not in dropped], dtype=int)

    gamma = np.zeros(J)
    rank_def = False
    if keep.size:
        sw = np.sqrt(w)
        Aw = sw[:, None] * (X[:, keep] - x_mean[keep])
        bw = sw * (f - f_mean)
        sol, _, rank, _ = lstsq(Aw, bw, rcond=None)
        gamma[keep] = sol
        rank_def = rank < keep.size

    # reuse the moments already computed for beta_s
    st = Standardisation(
        response_mean=f_mean,
        response_sd=f_sd if f_sd >= SD_FLOOR else 0.0,
        covariate_means=x_mean,
        covariate_sds=x_sd,
        dropped=dropped,
    )
    return _finish(gamma, st, x_mean, f_mean, method="ols", lam=0.0,
                   dropped=dropped, rank_deficient=rank_def)


def fit_ridge(X, f, weights=None, lam: float = 0.0, *, standardised: bool = True) -> RegressionFit:
    """L2-penalised weighted regression.

    With ``standardised`` (default) the penalty applies to coefficients of the
    standardised design; lam = 0 reduces to least squares on the retained
    columns.  ``standardised=False`` centres but does not rescale, penalising
    raw-scale coefficients directly -- the form that matches a polynomial-kernel
    control functional with regulariser lam.
    """
    X, f, w = _prepare(X, f, weights)
    if lam < 0 or not math.isfinite(lam):
        raise InvalidInput("ridge penalty must be finite and >= 0")
    J = X.shape[1]

    if standardised:
        X_s, f_s, st = standardise(X, f, w)
        keep = st.retained
        gamma_s = np.zeros(J)
        if keep.size:
            if lam > 0:
                G = X_s.T @ (w[:, None] * X_s) + lam * np.eye(keep.size)
                rhs = X_s.T @ (w * f_s)
                gamma_s[keep] = linalg.solve(G, rhs, assume_a="pos")
            else:
                sw = np.sqrt(w)
                sol, _, _, _ = lstsq(sw[:, None] * X_s, sw * f_s, rcond=None)
                gamma_s[keep] = sol
        # map standardised-scale solution back to raw scale
        f_scale = st.response_sd if st.response_sd >= SD_FLOOR else 1.0
        sds = np.where(st.covariate_sds < SD_FLOOR, 1.0, st.covariate_sds)
        gamma = gamma_s * f_scale / sds
        fit = _finish(gamma, st, st.covariate_means, st.response_mean,
                      method="ridge", lam=lam, dropped=st.dropped)
        return fit

    x_mean = weighted_mean(X, w)
    f_mean = float(weighted_mean(f, w))
    Xc = X - x_mean
    fc = f - f_mean
    if lam > 0:
        G = Xc.T @ (w[:, None] * Xc) + lam * np.eye(J)
        gamma = linalg.solve(G, Xc.T @ (w * fc), assume_a="pos")
        rank_def = False
    else:
        sw = np.sqrt(w)
        gamma, _, rank, _ = lstsq(sw[:, None] * Xc, sw * fc, rcond=None)
        rank_def = rank < J
    f_sd = float(weighted_sd(f, w))
    st = Standardisation(
        response_mean=f_mean,
        response_sd=f_sd if f_sd >= SD_FLOOR else 0.0,
        covariate_means=x_mean,
        covariate_sds=weighted_sd(X, w),
        dropped=(),
    )
    return _finish(gamma, st, x_mean, f_mean, method="ridge", lam=lam,
                   dropped=(), rank_deficient=rank_def)


def lasso_lambda_max(X, f, weights=None) -> float:
    """Smallest penalty at which every lasso coefficient is zero."""
    X, f, w = _prepare(X, f, weights)
    X_s, f_s, st = standardise(X, f, w)
    if X_s.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(X_s.T @ (w * f_s))))


def _cd_lasso(X_s, f_s, w, lam, gamma0=None):
    """Cyclic coordinate descent for (1/2) sum w r^2 + lam ||gamma||_1.

    Uses Gram ("covariance") updates when X^T X is affordable, residual
    updates otherwise; active-set sweeps between full passes.  Returns
    (gamma, n_sweeps).
    """
    n, J = X_s.shape
    gamma = np.zeros(J) if gamma0 is None else gamma0.copy()
    Xw = w[:, None] * X_s
    z = np.einsum("ij,ij->j", Xw, X_s)          # sum_i w_i x_ij^2
    zero_z = z <= 0
    use_gram = n * J * J <= _GRAM_FLOP_CAP
    if use_gram:
        G = Xw.T @ X_s
        q = Xw.T @ f_s
        v = q - G @ gamma                        # v_j = sum_i w_i x_ij r_i
    else:
        r = f_s - X_s @ gamma

    def sweep(indices):
        max_delta = 0.0
        nonlocal v, r
        for j in indices:
            if zero_z[j]:
                continue
            if use_gram:
                rho = v[j] + z[j] * gamma[j]
            else:
                rho = X_s[:, j] @ (w * r) + z[j] * gamma[j]
            new = math.copysign(max(abs(rho) - lam, 0.0), rho) / z[j]
            delta = new - gamma[j]
            if delta != 0.0:
                if use_gram:
                    v -= delta * G[:, j]
                else:
                    r -= delta * X_s[:, j]
                gamma[j] = new
                max_delta = max(max_delta, abs(delta))
        return max_delta

    if not use_gram:
        v = None
    obj_prev = np.inf
    sweeps = 0
    all_idx = np.arange(J)
    while sweeps < _LASSO_MAX_SWEEPS:
        max_delta = sweep(all_idx)
        sweeps += 1
        if __debug__:
            r_now = f_s - X_s @ gamma
            obj = 0.5 * float(w @ (r_now * r_now)) + lam * float(np.abs(gamma).sum())
            assert obj <= obj_prev + 1e-10 * max(1.0, abs(obj_prev)), \
                "lasso objective increased"
            obj_prev = obj
        # inner active-set passes until stable
        active = np.flatnonzero(gamma != 0.0)
        while max_delta >= _LASSO_COORD_TOL and active.size and sweeps < _LASSO_MAX_SWEEPS:
            max_delta = sweep(active)
            sweeps += 1
        # full-pass KKT screen decides convergence
        if use_gram:
            corr = v
        else:
            corr = X_s.T @ (w * (f_s - X_s @ gamma))
        active_now = gamma != 0.0
        viol = np.abs(corr) - lam                     # <= 0 required at zeros
        viol[active_now] = np.abs(corr[active_now] - lam * np.sign(gamma[active_now]))
        if max_delta < _LASSO_COORD_TOL and float(np.max(viol, initial=0.0)) <= _LASSO_KKT_TOL:
            return gamma, sweeps
    raise ConvergenceError(
        "lasso coordinate descent did not converge",
        sweeps=sweeps,
        lam=float(lam),
        max_delta=float(max_delta),
    )


def fit_lasso(X, f, weights=None, lam: float = 0.0, *, relaxed: bool = False,
              _warm=None) -> RegressionFit:
    """L1-penalised weighted regression on standardised variables.

    ``relaxed`` refits the selected support by least squares (coefficients are
    debiased, the support is kept).  lam >= lambda_max returns the all-zero
    solution; lam = 0 falls back to least squares.
    """
    X, f, w = _prepare(X, f, weights)
    if lam < 0 or not math.isfinite(lam):
        raise InvalidInput("lasso penalty must be finite and >= 0")
    if lam == 0.0:
        fit = fit_ols(X, f, w)
        return RegressionFit(
            intercept=fit.intercept, beta=fit.beta, beta_s=fit.beta_s,
            method="lasso", lam=0.0, dropped=fit.dropped,
            rank_deficient=fit.rank_deficient,
        )
    J = X.shape[1]
    X_s, f_s, st = standardise(X, f, w)
    keep = st.retained
    gamma_s = np.zeros(J)
    sweeps = 0
    if keep.size and st.response_sd >= SD_FLOOR:
        warm = None if _warm is None else _warm[keep]
        sol, sweeps = _cd_lasso(X_s, f_s, w, lam, gamma0=warm)
        if relaxed:
            support = np.flatnonzero(sol != 0.0)
            if support.size:
                sw = np.sqrt(w)
                refit, _, _, _ = lstsq(sw[:, None] * X_s[:, support], sw * f_s, rcond=None)
                sol = np.zeros_like(sol)
                sol[support] = refit
        gamma_s[keep] = sol
    f_scale = st.response_sd if st.response_sd >= SD_FLOOR else 1.0
    sds = np.where(st.covariate_sds < SD_FLOOR, 1.0, st.covariate_sds)
    gamma = gamma_s * f_scale / sds
    return _finish(gamma, st, st.covariate_means, st.response_mean,
                   method="lasso", lam=lam, dropped=st.dropped, n_sweeps=sweeps)


def refit_fixed_intercept(X, f, weights=None, intercept: float = 0.0, *,
                          method: str = "ols", lam: float = 0.0) -> RegressionFit:
    """Refit beta with the intercept pinned at a given value.

    Solves  min sum_i w_i (f_i - intercept + x_i beta)^2 (+ penalty)  without
    centring the covariates, so constant columns stay live regressors.  Used
    as a rescue path when a free-intercept fit of a positive integrand goes
    non-positive: the caller pins the intercept at the weighted mean of f.
    """
    X, f, w = _prepare(X, f, weights)
    if method not in ("ols", "ridge", "lasso"):
        raise InvalidInput(f"unknown refit method {method!r}")
    if lam < 0 or not math.isfinite(lam):
        raise InvalidInput("penalty must be finite and >= 0")
    g = f - float(intercept)
    J = X.shape[1]
    # root-mean-square column scales (no centring); flat-zero columns drop out
    rms = np.sqrt(np.einsum("ij,ij->j", w[:, None] * X, X))
    keep = np.flatnonzero(rms > SD_FLOOR)
    gamma = np.zeros(J)
    sweeps = 0
    if keep.size:
        Xk = X[:, keep] / rms[keep]
        if method == "ols" or lam == 0.0:
            sw = np.sqrt(w)
            sol, _, _, _ = lstsq(sw[:, None] * Xk, sw * g, rcond=None)
        elif method == "ridge":
            G = Xk.T @ (w[:, None] * Xk) + lam * np.eye(keep.size)
            sol = linalg.solve(G, Xk.T @ (w * g), assume_a="pos")
        else:
            g_sd = float(weighted_sd(g, w))
            scale = g_sd if g_sd >= SD_FLOOR else 1.0
            sol, sweeps = _cd_lasso(Xk, g / scale, w, lam)
            sol = sol * scale
        gamma[keep] = sol / rms[keep]
    f_sd = float(weighted_sd(f, w))
    st = Standardisation(
        response_mean=float(intercept),
        response_sd=f_sd if f_sd >= SD_FLOOR else 0.0,
        covariate_means=np.zeros(J),
        covariate_sds=np.where(rms > SD_FLOOR, rms, 0.0),
        dropped=tuple(int(j) for j in range(J) if j not in keep),
    )
    beta = -gamma
    sds = np.where(st.covariate_sds < SD_FLOOR, 1.0, st.covariate_sds)
    beta_s = beta * sds / f_sd if f_sd >= SD_FLOOR else np.zeros_like(beta)
    return RegressionFit(
        intercept=float(intercept),
        beta=beta,
        beta_s=beta_s,
        method=f"{method}-fixed-intercept",
        lam=float(lam),
        dropped=st.dropped,
        n_sweeps=sweeps,
    )


def _default_grid(lam_max: float, size: int = 100, decades: float = 4.0):
    lam_max = max(lam_max, 1e-30)
    return np.geomspace(lam_max, lam_max * 10.0 ** (-decades), size)


def _fold_slices(n, folds, seed):
    perm = np.random.default_rng(seed).permutation(n)
    return [perm[k::folds] for k in range(folds)]


def cv_lambda(X, f, weights=None, method: str = "ridge", cfg: CvConfig | None = None):
    """K-fold selection of the penalty level.

    Returns (lam_star, fit) where fit is refit on all data at lam_star with
    its cross-validated MSE recorded.  Ties (within cfg.tolerance relative to
    the response variance) resolve to the larger lambda.
    """
    if method not in ("ridge", "lasso"):
        raise InvalidInput(f"unknown penalised method {method!r}")
    cfg = cfg or CvConfig()
    X, f, w = _prepare(X, f, weights)
    n = X.shape[0]
    if n < cfg.folds:
        raise InsufficientSamples(f"{n} samples cannot fill {cfg.folds} folds")

    if cfg.lambda_grid is not None:
        grid = np.asarray(cfg.lambda_grid, dtype=float)
    else:
        grid = _default_grid(lasso_lambda_max(X, f, w))

    folds = _fold_slices(n, cfg.folds, cfg.seed)
    scores = np.zeros(grid.size)
    used_folds = 0
    for hold in folds:
        mask = np.ones(n, dtype=bool)
        mask[hold] = False
        X_tr, f_tr, w_tr = X[mask], f[mask], w[mask]
        X_ho, f_ho, w_ho = X[hold], f[hold], w[hold]
        if w_tr.sum() <= 0 or w_ho.sum() <= 0:
            continue
        used_folds += 1
        warm = None
        for gi, lam in enumerate(grid):
            if method == "ridge":
                fit = fit_ridge(X_tr, f_tr, w_tr, lam=lam)
            else:
                fit = fit_lasso(X_tr, f_tr, w_tr, lam=lam, _warm=warm)
                warm = -fit.beta_s
            resid = f_ho - fit.predict(X_ho)
            # weighted mean squared hold-out residual for this fold
            scores[gi] += float(w_ho @ (resid * resid)) / float(w_ho.sum())
    if used_folds == 0:
        raise InsufficientSamples("every fold had zero weight")
    scores /= used_folds

    f_var = float(weighted_sd(f, w)) ** 2
    best = float(np.min(scores))
    threshold = best + cfg.tolerance * max(f_var, best)
    # grid is descending, so the first qualifying score is the largest lambda
    pick = int(np.argmax(scores <= threshold))
    lam_star = float(grid[pick])

    if method == "ridge":
        fit = fit_ridge(X, f, w, lam=lam_star)
    else:
        fit = fit_lasso(X, f, w, lam=lam_star)
    fit = RegressionFit(
        intercept=fit.intercept, beta=fit.beta, beta_s=fit.beta_s,
        method=fit.method, lam=fit.lam, cv_mse=float(scores[pick]),
        dropped=fit.dropped, rank_deficient=fit.rank_deficient,
        n_sweeps=fit.n_sweeps,
    )
    return lam_star, fit
