"""
Lasso by cyclic coordinate descent, the lambda path, k-fold CV with the
one-standard-error rule, and the post-Lasso OLS refit.

Objective on standardized columns z (mean 0, SD 1 with ddof=0) and centred y:

    (1/2N) * ||y - Z b||^2 + lambda * ||b||_1

The intercept is never penalized. Coefficients are returned on the original
column scale.
"""

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import KFold

from econometrics import INTERCEPT, DesignMatrix, RegressionResult, ols_bootstrap, ols_fit
from errors import ConfigError, DataError, DroppedColumnWarning, LassoConvergenceWarning

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - depends on the environment
    HAS_NUMBA = False

CD_TOL = 1e-9
MAX_SWEEPS = 100_000


def soft_threshold(z: float, lam: float) -> float:
    return float(np.sign(z) * max(abs(z) - lam, 0.0))


def _cd_sweeps(gram, corr, beta, lam, tol, max_sweeps):
    """Cyclic CD on the Gram form; ``beta`` is updated in place.

    resid[j] holds corr[j] - (gram @ beta)[j]; gram is symmetric.
    """
    p = beta.shape[0]
    resid = corr - gram @ beta
    for sweep in range(1, max_sweeps + 1):
        max_change = 0.0
        for j in range(p):
            rho = resid[j] + gram[j, j] * beta[j]
            if rho > lam:
                new = (rho - lam) / gram[j, j]
            elif rho < -lam:
                new = (rho + lam) / gram[j, j]
            else:
                new = 0.0
            delta = new - beta[j]
            if delta != 0.0:
                resid -= gram[j] * delta
                beta[j] = new
                if abs(delta) > max_change:
                    max_change = abs(delta)
        if max_change < tol:
            return sweep, True
    return max_sweeps, False


_cd_kernel = njit(cache=False)(_cd_sweeps) if HAS_NUMBA else _cd_sweeps


@dataclass
class Standardization:
    names: Tuple[str, ...]   # kept (non-constant) columns
    mean: np.ndarray
    scale: np.ndarray
    keep: np.ndarray         # boolean mask over the penalized input columns
    y_mean: float
    dropped: Tuple[str, ...] = ()


def _penalized(X: DesignMatrix) -> DesignMatrix:
    return X.drop([INTERCEPT]) if X.intercept else X


def standardize(X: DesignMatrix, y: np.ndarray, warn: bool = True) -> Tuple[np.ndarray, np.ndarray, Standardization]:
    """Z columns with mean 0 and SD 1 (ddof=0), centred y; constant columns dropped"""
    X = _penalized(X)
    y = np.asarray(y, dtype=np.float64)
    if len(y) != X.n:
        raise DataError(f"y has {len(y)} rows, design has {X.n}")
    mean = X.values.mean(axis=0)
    scale = X.values.std(axis=0)
    keep = scale > 1e-12 * np.maximum(1.0, np.abs(mean))
    dropped = tuple(n for n, k in zip(X.names, keep) if not k)
    if dropped and warn:
        warnings.warn(f"dropping zero-variance columns: {', '.join(dropped)}", DroppedColumnWarning, stacklevel=3)
    Z = (X.values[:, keep] - mean[keep]) / scale[keep]
    names = tuple(n for n, k in zip(X.names, keep) if k)
    info = Standardization(names, mean[keep], scale[keep], keep, float(y.mean()), dropped)
    return Z, y - y.mean(), info


@dataclass
class LassoFit:
    names: Tuple[str, ...]
    coefficients: np.ndarray   # original scale, one per kept column
    intercept: float
    lam: float
    n_sweeps: int = 0
    converged: bool = True
    dropped: Tuple[str, ...] = ()
    standardized: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def active_set(self) -> Tuple[str, ...]:
        return tuple(n for n, b in zip(self.names, self.coefficients) if b != 0.0)

    def predict(self, X: DesignMatrix) -> np.ndarray:
        return self.intercept + X.select(list(self.names)).values @ self.coefficients


def _to_original(beta_std: np.ndarray, info: Standardization) -> Tuple[np.ndarray, float]:
    coef = beta_std / info.scale
    return coef, info.y_mean - float(info.mean @ coef)


def _solve(gram: np.ndarray, corr: np.ndarray, beta: np.ndarray, lam: float, tol: float,
           max_sweeps: int) -> Tuple[int, bool]:
    n_sweeps, converged = _cd_kernel(gram, corr, beta, float(lam), float(tol), int(max_sweeps))
    if not converged:
        warnings.warn(f"coordinate descent stopped after {n_sweeps} sweeps at lambda={lam:.4g}",
                      LassoConvergenceWarning, stacklevel=3)
    return int(n_sweeps), bool(converged)


def lasso_cd(X: DesignMatrix, y: np.ndarray, lam: float, tol: float = CD_TOL,
             max_sweeps: int = MAX_SWEEPS) -> LassoFit:
    """Lasso at one penalty value"""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    Z, yc, info = standardize(X, y)
    n = len(yc)
    gram = Z.T @ Z / n
    corr = Z.T @ yc / n
    beta = np.zeros(Z.shape[1])
    n_sweeps, converged = _solve(gram, corr, beta, lam, tol, max_sweeps)
    coef, intercept = _to_original(beta, info)
    return LassoFit(info.names, coef, intercept, float(lam), n_sweeps, converged, info.dropped, beta.copy())


def lambda_max(X: DesignMatrix, y: np.ndarray) -> float:
    """Smallest penalty at which every penalized coefficient is zero"""
    Z, yc, _ = standardize(X, y, warn=False)
    return float(np.max(np.abs(Z.T @ yc)) / len(yc)) if Z.shape[1] else 0.0


def lambda_grid(X: DesignMatrix, y: np.ndarray, n: int = 100, ratio: float = 1e-4) -> np.ndarray:
    """``n`` log-spaced penalties from lambda_max down to ratio * lambda_max"""
    top = lambda_max(X, y)
    if not top > 0:
        raise DataError("lambda_max is zero: y has no linear association with any column")
    return np.geomspace(top, ratio * top, n)


@dataclass
class LassoPath:
    lambdas: np.ndarray
    names: Tuple[str, ...]
    coefficients: np.ndarray   # (n_lambda, p), original scale
    intercepts: np.ndarray
    converged: np.ndarray
    dropped: Tuple[str, ...] = ()

    def n_active(self) -> np.ndarray:
        return (self.coefficients != 0.0).sum(axis=1)

    def fit_at(self, index: int) -> LassoFit:
        return LassoFit(self.names, self.coefficients[index], float(self.intercepts[index]),
                        float(self.lambdas[index]), converged=bool(self.converged[index]), dropped=self.dropped)

    def predict(self, X: DesignMatrix) -> np.ndarray:
        """(n, n_lambda) predictions"""
        return self.intercepts[None, :] + X.select(list(self.names)).values @ self.coefficients.T


def lasso_path(X: DesignMatrix, y: np.ndarray, lambdas: Optional[Sequence[float]] = None,
               tol: float = CD_TOL, max_sweeps: int = MAX_SWEEPS, warn: bool = True) -> LassoPath:
    """Fit a decreasing lambda sequence with warm starts"""
    lambdas = lambda_grid(X, y) if lambdas is None else np.sort(np.asarray(lambdas, dtype=np.float64))[::-1]
    if lambdas.size == 0:
        raise DataError("empty lambda grid")
    Z, yc, info = standardize(X, y, warn=warn)
    n = len(yc)
    gram = Z.T @ Z / n
    corr = Z.T @ yc / n
    beta = np.zeros(Z.shape[1])
    coefs = np.empty((lambdas.size, Z.shape[1]))
    intercepts = np.empty(lambdas.size)
    converged = np.empty(lambdas.size, dtype=bool)
    for i, lam in enumerate(lambdas):
        _, converged[i] = _solve(gram, corr, beta, lam, tol, max_sweeps)
        coefs[i], intercepts[i] = _to_original(beta, info)
    return LassoPath(lambdas, info.names, coefs, intercepts, converged, info.dropped)


@dataclass
class LassoResult:
    lambdas: np.ndarray
    path: LassoPath
    cv_mean: np.ndarray
    cv_se: np.ndarray
    lambda_min: float
    lambda_1se: float
    folds: int
    seed: int

    @property
    def index_min(self) -> int:
        return int(np.flatnonzero(self.lambdas == self.lambda_min)[0])

    @property
    def index_1se(self) -> int:
        return int(np.flatnonzero(self.lambdas == self.lambda_1se)[0])

    @property
    def fit_1se(self) -> LassoFit:
        return self.path.fit_at(self.index_1se)

    @property
    def active_set(self) -> Tuple[str, ...]:
        return self.fit_1se.active_set

    def cv_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "lambda": self.lambdas,
            "cv_mse": self.cv_mean,
            "cv_se": self.cv_se,
            "n_active": self.path.n_active(),
        })


def lasso_cv(X: DesignMatrix, y: np.ndarray, lambdas: Optional[Sequence[float]] = None, k: int = 10,
             seed: int = 0, tol: float = CD_TOL, max_sweeps: int = MAX_SWEEPS) -> LassoResult:
    """k-fold CV over a shared lambda grid; reports lambda_min and lambda_1se"""
    y = np.asarray(y, dtype=np.float64)
    if k < 2:
        raise ConfigError(f"cross-validation needs k >= 2, got {k}")
    if X.n < k:
        raise DataError(f"cannot split {X.n} observations into {k} folds")
    path = lasso_path(X, y, lambdas, tol, max_sweeps)
    grid = path.lambdas

    fold_mse: List[np.ndarray] = []
    for train_idx, test_idx in KFold(n_splits=k, shuffle=True, random_state=seed).split(X.values):
        fold_path = lasso_path(X.take(train_idx), y[train_idx], grid, tol, max_sweeps, warn=False)
        pred = fold_path.predict(X.take(test_idx))
        fold_mse.append(((y[test_idx, None] - pred) ** 2).mean(axis=0))
    fold_mse_arr = np.vstack(fold_mse)
    cv_mean = fold_mse_arr.mean(axis=0)
    cv_se = fold_mse_arr.std(axis=0, ddof=1) / np.sqrt(k)

    i_min = int(np.argmin(cv_mean))
    within = np.flatnonzero(cv_mean <= cv_mean[i_min] + cv_se[i_min])
    i_1se = int(within[np.argmax(grid[within])])
    return LassoResult(grid, path, cv_mean, cv_se, float(grid[i_min]), float(grid[i_1se]), k, seed)


def post_lasso(X: DesignMatrix, y: np.ndarray, active_set: Sequence[str], controls: Optional[DesignMatrix] = None,
               B: int = 0, seed: int = 0, n_jobs: int = 1) -> RegressionResult:
    """OLS on the selected columns plus the intercept, or plus ``controls`` when given.

    With B > 0 the refit carries pairs-bootstrap inference.
    """
    selected = X.select(list(active_set))
    if controls is None:
        design = DesignMatrix.from_columns({}, intercept=True, n=X.n).hstack(selected)
    else:
        design = controls.hstack(selected)
    return ols_bootstrap(design, y, B, seed, n_jobs) if B else ols_fit(design, y)


def lasso_r2(fit: LassoFit, X: DesignMatrix, y: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64)
    resid = y - fit.predict(X)
    sst = float(((y - y.mean()) ** 2).sum())
    return 1.0 - float(resid @ resid) / sst if sst > 0 else 0.0


def kkt_violation(X: DesignMatrix, y: np.ndarray, fit: LassoFit) -> float:
    """Largest breach of the Lasso optimality conditions on the standardized scale"""
    Z, yc, info = standardize(X, y, warn=False)
    beta = fit.coefficients * info.scale
    grad = Z.T @ (yc - Z @ beta) / len(yc)
    active = beta != 0.0
    worst_inactive = float(np.max(np.abs(grad[~active]) - fit.lam, initial=0.0))
    worst_active = float(np.max(np.abs(grad[active] - fit.lam * np.sign(beta[active])), initial=0.0))
    return max(worst_inactive, worst_active, 0.0)
