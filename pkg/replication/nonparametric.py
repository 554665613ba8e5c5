"""
Kernel and quantile curves for the reporting-error analysis.

nadaraya_watson: Epanechnikov-weighted local means with a Silverman
bandwidth, plus pointwise percentile bands from the pairs bootstrap.
quantile_polyfit: polynomial conditional quantiles minimising the pinball
loss by MM iteratively reweighted least squares.
"""

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from econometrics import bootstrap_replicates
from errors import ConfigError, ConvergenceError, DataError, NumericalError, QuantileFallbackWarning

IRLS_EPSILON_START = 1e-2
IRLS_EPSILON = 1e-6
IRLS_STAGES = 5
IRLS_MAX_ITER = 200
IRLS_TOL = 1e-9
IRLS_COEF_TOL = 1e-8


def epanechnikov(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return 0.75 * np.maximum(0.0, 1.0 - u * u)


@dataclass(frozen=True)
class KernelSpec:
    bandwidth: float
    kernel: str = "epanechnikov"

    def __post_init__(self):
        if not self.bandwidth > 0 or not np.isfinite(self.bandwidth):
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.kernel != "epanechnikov":
            raise ConfigError(f"unsupported kernel '{self.kernel}'")


def silverman_bandwidth(x: np.ndarray) -> float:
    """0.9 * min(sd, IQR/1.349) * n^(-1/5)"""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise DataError("bandwidth needs at least two observations")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise DataError("zero-variance input")
    iqr = stats.iqr(x)
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    return float(0.9 * spread * x.size ** (-0.2))


@dataclass
class KernelCurve:
    grid: np.ndarray
    estimate: np.ndarray   # NaN where supported is False
    supported: np.ndarray
    bandwidth: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"grid": self.grid, "estimate": self.estimate, "supported": self.supported})


def _nw(x: np.ndarray, y: np.ndarray, grid: np.ndarray, h: float) -> np.ndarray:
    weights = epanechnikov((x[None, :] - grid[:, None]) / h)
    denom = weights.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, (weights @ y) / denom, np.nan)


def nadaraya_watson(x: np.ndarray, y: np.ndarray, grid: np.ndarray,
                    spec: Optional[KernelSpec] = None) -> KernelCurve:
    """Local-constant kernel regression; grid points with no data in reach are flagged, not extrapolated"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    grid = np.atleast_1d(np.asarray(grid, dtype=np.float64))
    if x.size == 0:
        raise DataError("kernel regression on empty data")
    if x.shape != y.shape:
        raise DataError("x and y must have the same length")
    spec = spec or KernelSpec(silverman_bandwidth(x))
    estimate = _nw(x, y, grid, spec.bandwidth)
    return KernelCurve(grid, estimate, np.isfinite(estimate), spec.bandwidth)


def kernel_regression_bands(x: np.ndarray, y: np.ndarray, grid: np.ndarray, spec: Optional[KernelSpec] = None,
                            B: int = 200, seed: int = 0, level: float = 0.90, n_jobs: int = 1) -> pd.DataFrame:
    """Curve plus pointwise percentile bands; the bandwidth is held fixed across replicates"""
    curve = nadaraya_watson(x, y, grid, spec)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def statistic(rows: np.ndarray) -> np.ndarray:
        return _nw(x[rows], y[rows], curve.grid, curve.bandwidth)

    reps = bootstrap_replicates(statistic, x.size, B, seed, n_jobs)
    tail = 100.0 * (1.0 - level) / 2.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lower, upper = np.nanpercentile(reps, [tail, 100.0 - tail], axis=0)
    pct = int(round(100 * level))
    frame = curve.to_frame()
    frame[f"lower{pct}"] = np.where(curve.supported, lower, np.nan)
    frame[f"upper{pct}"] = np.where(curve.supported, upper, np.nan)
    return frame[["grid", "estimate", f"lower{pct}", f"upper{pct}", "supported"]]


def zero_crossings(grid: np.ndarray, estimate: np.ndarray) -> np.ndarray:
    """Where a curve changes sign, linearly interpolated between grid points; NaN points are skipped"""
    grid = np.asarray(grid, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    ok = np.isfinite(estimate)
    g, e = grid[ok], estimate[ok]
    crossings = []
    for i in range(len(e) - 1):
        a, b = e[i], e[i + 1]
        if a == 0.0:
            crossings.append(g[i])
        elif a * b < 0.0:
            crossings.append(g[i] - a * (g[i + 1] - g[i]) / (b - a))
    if len(e) and e[-1] == 0.0:
        crossings.append(g[-1])
    return np.asarray(crossings, dtype=np.float64)


# ---------------------------------------------------------------------------
# Quantile regression
# ---------------------------------------------------------------------------

def pinball_loss(residuals: np.ndarray, tau: float) -> float:
    u = np.asarray(residuals, dtype=np.float64)
    return float(np.mean(u * (tau - (u < 0))))


@dataclass
class QuantileFit:
    tau: float
    degree: int
    coefficients: np.ndarray  # on the standardized basis ((x - center) / scale)^k
    x_center: float
    x_scale: float
    n_iter: int = 0
    converged: bool = True

    def basis(self, x: np.ndarray) -> np.ndarray:
        u = (np.asarray(x, dtype=np.float64) - self.x_center) / self.x_scale
        return np.vander(u, self.degree + 1, increasing=True)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.basis(x) @ self.coefficients

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        return pinball_loss(np.asarray(y, dtype=np.float64) - self.predict(x), self.tau)


def _spread(y: np.ndarray) -> float:
    spread = float(np.std(y))
    return spread if spread > 0 else 1.0


def quantile_polyfit(x: np.ndarray, y: np.ndarray, tau: float, degree: int = 3,
                     epsilon: float = IRLS_EPSILON, max_iter: int = IRLS_MAX_ITER,
                     tol: float = IRLS_TOL) -> QuantileFit:
    """Polynomial tau-quantile by majorize-minimize IRLS.

    Each step solves X'WX b = X'Wy + (tau - 1/2) X'1 with W = 1/(2(eps + |r|)).
    eps is annealed from 1e-2 to ``epsilon`` (times sd(y)), warm-starting every
    stage. A stage converges when the coefficient change drops below 1e-8 or the
    relative change of the pinball loss drops to ``tol``; only the last stage
    has to converge.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must be in (0, 1), got {tau}")
    if degree < 0:
        raise ConfigError(f"degree must be >= 0, got {degree}")
    if not 0.0 < epsilon <= IRLS_EPSILON_START:
        raise ConfigError(f"epsilon must be in (0, {IRLS_EPSILON_START}], got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError("x and y must have the same length")
    if x.size <= degree + 1:
        raise DataError(f"quantile fit of degree {degree} needs more than {degree + 1} points")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DataError("quantile fit needs finite x and y")

    center = float(x.mean())
    scale = float(x.std()) if degree > 0 and x.std() > 0 else 1.0
    fit = QuantileFit(tau, degree, np.zeros(degree + 1), center, scale)
    X = fit.basis(x)
    distinct = np.unique(x).size
    if degree > 0 and distinct <= degree:
        raise NumericalError(f"quantile basis of degree {degree} is singular: only {distinct} distinct x values")

    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    beta[0] += np.quantile(y - X @ beta, tau)
    shift = (tau - 0.5) * X.sum(axis=0)
    spread = _spread(y)
    floor = spread * np.finfo(np.float64).eps
    loss = pinball_loss(y - X @ beta, tau)
    total = 0
    for eps in spread * np.logspace(np.log10(IRLS_EPSILON_START), np.log10(epsilon), IRLS_STAGES):
        converged = False
        for _ in range(max_iter):
            total += 1
            r = y - X @ beta
            w = 1.0 / (2.0 * (eps + np.abs(r)))
            gram = X.T @ (X * w[:, None])
            try:
                new = np.linalg.solve(gram, X.T @ (w * y) + shift)
            except np.linalg.LinAlgError as e:
                raise NumericalError(f"quantile fit (tau={tau}, degree={degree}): {e}") from e
            change = float(np.max(np.abs(new - beta)))
            beta = new
            previous, loss = loss, pinball_loss(y - X @ beta, tau)
            settled = change <= IRLS_COEF_TOL * max(1.0, float(np.max(np.abs(beta))))
            if settled or abs(previous - loss) <= tol * loss + floor:
                converged = True
                break
    if converged:
        fit.coefficients, fit.n_iter = beta, total
        return fit
    raise ConvergenceError(
        f"quantile fit (tau={tau}, degree={degree}) did not converge in {max_iter} iterations at eps={epsilon:g}",
        last_iterate=QuantileFit(tau, degree, beta, center, scale, total, converged=False),
        n_iter=total,
    )


def quantile_fan(x: np.ndarray, y: np.ndarray, taus: Sequence[float] = (0.1, 0.25, 0.5, 0.75, 0.9),
                 degree: int = 3, grid: Optional[np.ndarray] = None) -> pd.DataFrame:
    """One fitted quantile curve per tau on a shared grid (columns q10, q25, ...)"""
    x = np.asarray(x, dtype=np.float64)
    if grid is None:
        grid = np.linspace(np.quantile(x, 0.02), np.quantile(x, 0.98), 50)
    frame = pd.DataFrame({"grid": np.asarray(grid, dtype=np.float64)})
    for tau in taus:
        try:
            fit = quantile_polyfit(x, y, tau, degree)
        except ConvergenceError as e:
            warnings.warn(f"{e}; using last iterate", QuantileFallbackWarning, stacklevel=2)
            fit = e.last_iterate
        frame[f"q{int(round(100 * tau))}"] = fit.predict(frame["grid"].to_numpy())
    return frame
