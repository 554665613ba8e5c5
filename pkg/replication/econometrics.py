"""
Linear estimators: OLS with pairs-bootstrap inference, residual instruments,
first stage, control function, 2SLS and the proxy-variable regression.

Every estimator takes a DesignMatrix (named columns, optional intercept) and a
response vector. Bootstrap replicate b is seeded with SeedSequence([seed, b]),
so results do not depend on how replicates are scheduled across workers.
"""

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg, stats

from errors import (
    ConfigError,
    DataError,
    NumericalError,
    RankDeficientError,
    WeakInstrumentWarning,
)

INTERCEPT = "Intercept"
RANK_TOL = 1e-10
STAR_RULES = [(0.01, "***"), (0.05, "**"), (0.10, "*")]
WEAK_F = 10.0

REFERENCE_LEVELS = {
    "race": "White",
    "occupation": "White Collar",
    "marital": "Single",
    "birth_region": "Midwest",
    "car_size": "Sedan",
    "survey_site": "site_01",
}


def stars(p: float) -> str:
    for cut, sym in STAR_RULES:
        if p < cut:
            return sym
    return ""


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------

@dataclass
class DesignMatrix:
    values: np.ndarray
    names: Tuple[str, ...]
    intercept: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        self.names = tuple(self.names)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise DataError(f"{self.values.shape[1]} columns but {len(self.names)} names")
        if len(set(self.names)) != len(self.names):
            raise DataError(f"duplicate column names in {self.names}")
        if not np.all(np.isfinite(self.values)):
            bad = [n for n, ok in zip(self.names, np.isfinite(self.values).all(axis=0)) if not ok]
            raise DataError(f"non-finite values in columns {bad}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_columns(cls, columns: Mapping[str, np.ndarray], intercept: bool = True,
                     n: Optional[int] = None) -> "DesignMatrix":
        arrays = [np.asarray(v, dtype=np.float64) for v in columns.values()]
        if n is None:
            if not arrays:
                raise DataError("cannot size an empty design without n")
            n = len(arrays[0])
        names = list(columns)
        if intercept:
            arrays.insert(0, np.ones(n))
            names.insert(0, INTERCEPT)
        values = np.column_stack(arrays) if arrays else np.empty((n, 0))
        return cls(values, tuple(names), intercept)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, numeric: Sequence[str] = (), categorical: Sequence[str] = (),
                   intercept: bool = True, references: Optional[Mapping[str, str]] = None,
                   min_count: int = 0) -> "DesignMatrix":
        """Numeric columns as-is, categoricals as reference-coded indicators.

        Levels that never occur in ``frame`` get no indicator; levels seen fewer
        than ``min_count`` times are pooled into the reference level.
        """
        references = {**REFERENCE_LEVELS, **(references or {})}
        missing = [c for c in (*numeric, *categorical) if c not in frame.columns]
        if missing:
            raise DataError(f"frame lacks columns {missing}")
        columns: Dict[str, np.ndarray] = {c: frame[c].to_numpy(dtype=np.float64) for c in numeric}
        for c in categorical:
            values = frame[c].astype(str).to_numpy()
            levels = sorted(set(values))
            reference = references.get(c, levels[0] if levels else None)
            for level in levels:
                if level != reference and (values == level).sum() >= min_count:
                    columns[f"{c}[{level}]"] = (values == level).astype(np.float64)
        return cls.from_columns(columns, intercept=intercept, n=len(frame))

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def hstack(self, *others: Optional["DesignMatrix"]) -> "DesignMatrix":
        values, names = [self.values], list(self.names)
        for other in others:
            if other is None or other.p == 0:
                continue
            if other.n != self.n:
                raise DataError(f"row mismatch: {self.n} vs {other.n}")
            if other.intercept:
                raise DataError("only the leftmost block may carry the intercept")
            values.append(other.values)
            names.extend(other.names)
        return DesignMatrix(np.hstack(values), tuple(names), self.intercept)

    def select(self, names: Sequence[str]) -> "DesignMatrix":
        idx = [self.names.index(n) for n in names]
        keep_intercept = self.intercept and INTERCEPT in names
        return DesignMatrix(self.values[:, idx], tuple(names), keep_intercept)

    def drop(self, names: Sequence[str]) -> "DesignMatrix":
        return self.select([n for n in self.names if n not in set(names)])

    def take(self, rows: np.ndarray) -> "DesignMatrix":
        return DesignMatrix(self.values[rows], self.names, self.intercept)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=list(self.names))


def interaction_column_count(p: int) -> int:
    return p + p * (p + 1) // 2


def build_interactions(body: DesignMatrix) -> DesignMatrix:
    """Append every square ("A²") and pairwise product ("A×B", A before B)"""
    if body.intercept:
        body = body.drop([INTERCEPT])
    if body.p < 2:
        raise DataError(f"interactions need at least 2 body columns, got {body.p}")
    values, names = [body.values], list(body.names)
    for j in range(body.p):
        for k in range(j, body.p):
            values.append((body.values[:, j] * body.values[:, k])[:, None])
            names.append(f"{body.names[j]}²" if j == k else f"{body.names[j]}×{body.names[k]}")
    return DesignMatrix(np.hstack(values), tuple(names), False)


# ---------------------------------------------------------------------------
# OLS
# ---------------------------------------------------------------------------

@dataclass
class RegressionResult:
    names: Tuple[str, ...]
    coefficients: np.ndarray
    n: int
    k: int                 # non-intercept regressors
    r2: float
    adj_r2: float
    f_stat: float
    f_pvalue: float
    ssr: float
    residuals: np.ndarray = field(repr=False)
    fitted: np.ndarray = field(repr=False)
    se: Optional[np.ndarray] = None
    ci_lower: Optional[np.ndarray] = None
    ci_upper: Optional[np.ndarray] = None
    p_values: Optional[np.ndarray] = None
    n_boot: int = 0

    @property
    def df_resid(self) -> int:
        return self.n - len(self.names)

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def se_of(self, name: str) -> float:
        if self.se is None:
            raise DataError("no bootstrap inference attached to this fit")
        return float(self.se[self.names.index(name)])

    def with_inference(self, summary: "BootstrapSummary") -> "RegressionResult":
        return replace(self, se=summary.se, ci_lower=summary.ci_lower, ci_upper=summary.ci_upper,
                       p_values=summary.p_values, n_boot=summary.n_boot)

    def to_frame(self) -> pd.DataFrame:
        nan = np.full(len(self.names), np.nan)
        p_values = self.p_values if self.p_values is not None else nan
        return pd.DataFrame({
            "variable": list(self.names),
            "coefficient": self.coefficients,
            "se": self.se if self.se is not None else nan,
            "ci_lower": self.ci_lower if self.ci_lower is not None else nan,
            "ci_upper": self.ci_upper if self.ci_upper is not None else nan,
            "p_value": p_values,
            "stars": [stars(p) if np.isfinite(p) else "" for p in p_values],
        })

    def footer(self) -> Dict[str, float]:
        return {"adj_r2": self.adj_r2, "r2": self.r2, "f_stat": self.f_stat,
                "f_pvalue": self.f_pvalue, "n": self.n}


def check_rank(X: DesignMatrix, tol: float = RANK_TOL) -> None:
    """Raise RankDeficientError naming the columns in the (near) null space"""
    if X.p == 0:
        return
    _, s, vt = np.linalg.svd(X.values, full_matrices=False)
    if s[0] == 0 or s[-1] < tol * s[0]:
        null = np.abs(vt[-1])
        cols = [n for n, v in zip(X.names, null) if v > 1e-3 * null.max()]
        raise RankDeficientError(f"rank-deficient design, collinear columns: {', '.join(cols)}", columns=cols)


def _lstsq_qr(values: np.ndarray, y: np.ndarray) -> np.ndarray:
    q, r = linalg.qr(values, mode="economic")
    return linalg.solve_triangular(r, q.T @ y)


def _coef_only(X: DesignMatrix, y: np.ndarray) -> np.ndarray:
    check_rank(X)
    return _lstsq_qr(X.values, y)


def partial_out(X: DesignMatrix, values: np.ndarray) -> np.ndarray:
    """Residuals of each column of ``values`` after OLS on X"""
    values = np.asarray(values, dtype=np.float64)
    if len(values) != X.n:
        raise DataError(f"values have {len(values)} rows, design has {X.n}")
    check_rank(X)
    return values - X.values @ _lstsq_qr(X.values, values)


def _check_xy(X: DesignMatrix, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) != X.n:
        raise DataError(f"y has {len(y)} rows, design has {X.n}")
    if not np.all(np.isfinite(y)):
        raise DataError("non-finite values in the response")
    if X.n <= X.p:
        raise DataError(f"OLS needs more observations than covariates (n={X.n}, p={X.p})")
    return y


def ols_fit(X: DesignMatrix, y: np.ndarray) -> RegressionResult:
    """Point estimates, R², adjusted R² and the F-test against the constant model"""
    y = _check_xy(X, y)
    beta = _coef_only(X, y)
    fitted = X.values @ beta
    residuals = y - fitted
    n = X.n
    k = X.p - int(X.intercept)
    ssr = float(residuals @ residuals)
    centered = y - y.mean() if X.intercept else y
    sst = float(centered @ centered)
    r2 = 1.0 - ssr / sst if sst > 0 else 0.0
    adj_r2 = 1.0 - (1.0 - r2) * (n - 1) / (n - k - 1) if n - k - 1 > 0 else np.nan
    if k == 0:
        f_stat, f_pvalue = np.nan, np.nan
    elif r2 >= 1.0:
        f_stat, f_pvalue = np.inf, 0.0
    else:
        f_stat = (r2 / k) / ((1.0 - r2) / (n - k - 1))
        f_pvalue = float(stats.f.sf(f_stat, k, n - k - 1))
    return RegressionResult(X.names, beta, n, k, r2, adj_r2, float(f_stat), float(f_pvalue), ssr,
                            residuals, fitted)


def partial_f_test(full: RegressionResult, restricted: RegressionResult) -> Tuple[float, float]:
    """F-test that the extra columns of ``full`` are jointly zero"""
    q = len(full.names) - len(restricted.names)
    if q <= 0:
        raise DataError("restricted model must have fewer columns than the full model")
    if full.ssr <= 0:
        return np.inf, 0.0
    f_stat = ((restricted.ssr - full.ssr) / q) / (full.ssr / full.df_resid)
    return float(f_stat), float(stats.f.sf(f_stat, q, full.df_resid))


# ---------------------------------------------------------------------------
# Pairs bootstrap
# ---------------------------------------------------------------------------

@dataclass
class BootstrapSummary:
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    p_values: np.ndarray
    replicates: np.ndarray = field(repr=False)

    @property
    def n_boot(self) -> int:
        return len(self.replicates)


def _one_replicate(statistic: Callable[[np.ndarray], np.ndarray], n: int, seed: int, b: int,
                   max_redraws: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
    for _ in range(max_redraws + 1):
        rows = rng.integers(0, n, size=n)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                return np.asarray(statistic(rows), dtype=np.float64)
        except RankDeficientError:
            continue
    raise NumericalError(f"bootstrap replicate {b}: design stayed rank-deficient after {max_redraws} redraws")


def bootstrap_replicates(statistic: Callable[[np.ndarray], np.ndarray], n: int, B: int, seed: int = 0,
                         n_jobs: int = 1, max_redraws: int = 10) -> np.ndarray:
    """Evaluate ``statistic(rows)`` on B resamples of row indices; returns (B, m)"""
    if B < 1:
        raise ConfigError(f"bootstrap needs B >= 1, got {B}")
    if n < 1:
        raise DataError("cannot bootstrap an empty sample")
    reps = Parallel(n_jobs=n_jobs)(
        delayed(_one_replicate)(statistic, n, seed, b, max_redraws) for b in range(B)
    )
    return np.vstack(reps)


def summarize_replicates(point: np.ndarray, replicates: np.ndarray, level: float = 0.90) -> BootstrapSummary:
    """SE = replicate SD, percentile CI, p-value from the normal approximation to point/SE"""
    point = np.asarray(point, dtype=np.float64)
    se = replicates.std(axis=0, ddof=1) if len(replicates) > 1 else np.zeros_like(point)
    tail = 100.0 * (1.0 - level) / 2.0
    lower, upper = np.percentile(replicates, [tail, 100.0 - tail], axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, point / se, np.where(point == 0, 0.0, np.inf))
    p_values = 2.0 * stats.norm.sf(np.abs(t))
    return BootstrapSummary(se, lower, upper, p_values, replicates)


def bootstrap_inference(X: DesignMatrix, y: np.ndarray, B: int = 1000, seed: int = 0,
                        n_jobs: int = 1, level: float = 0.90) -> BootstrapSummary:
    """Pairs bootstrap of the OLS coefficients"""
    if B < 100:
        raise ConfigError(f"bootstrap inference needs B >= 100, got {B}")
    y = _check_xy(X, y)
    point = _coef_only(X, y)

    def statistic(rows: np.ndarray) -> np.ndarray:
        return _coef_only(X.take(rows), y[rows])

    return summarize_replicates(point, bootstrap_replicates(statistic, X.n, B, seed, n_jobs), level)


def ols_bootstrap(X: DesignMatrix, y: np.ndarray, B: int = 1000, seed: int = 0,
                  n_jobs: int = 1) -> RegressionResult:
    return ols_fit(X, y).with_inference(bootstrap_inference(X, y, B, seed, n_jobs))


# ---------------------------------------------------------------------------
# Instruments, first stage, control function
# ---------------------------------------------------------------------------

def residual_instrument(reported_size: np.ndarray, anchor_measure: np.ndarray) -> np.ndarray:
    """Residual of the reported size after projecting on (1, anchor)"""
    reported_size = np.asarray(reported_size, dtype=np.float64)
    anchor_measure = np.asarray(anchor_measure, dtype=np.float64)
    if reported_size.shape != anchor_measure.shape:
        raise DataError("reported size and anchor must have the same length")
    if not np.ptp(anchor_measure) > 0:
        raise DataError("zero-variance anchor measure")
    X = DesignMatrix.from_columns({"anchor": anchor_measure})
    return ols_fit(X, reported_size).residuals


@dataclass
class FirstStageResult:
    regression: RegressionResult
    instrument_names: Tuple[str, ...]
    residuals: np.ndarray = field(repr=False)
    f_stat: float = np.nan
    f_pvalue: float = np.nan

    @property
    def gammas(self) -> np.ndarray:
        return np.array([self.regression.coef(n) for n in self.instrument_names])

    @property
    def weak(self) -> bool:
        return not self.f_stat >= WEAK_F


def _as_design(values: Union[DesignMatrix, np.ndarray, None], prefix: str) -> Optional[DesignMatrix]:
    if values is None or isinstance(values, DesignMatrix):
        return values
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    return DesignMatrix(values, tuple(f"{prefix}{j + 1}" for j in range(values.shape[1])))


def first_stage(endogenous: np.ndarray, X: DesignMatrix, instruments: Union[DesignMatrix, np.ndarray],
                warn: bool = True) -> FirstStageResult:
    """OLS of the endogenous feature on X and the excluded instruments"""
    Z = _as_design(instruments, "z")
    full = ols_fit(X.hstack(Z), endogenous)
    restricted = ols_fit(X, endogenous)
    f_stat, f_pvalue = partial_f_test(full, restricted)
    result = FirstStageResult(full, Z.names, full.residuals, f_stat, f_pvalue)
    if warn and result.weak:
        warnings.warn(f"weak instruments: first-stage F = {f_stat:.2f} < {WEAK_F:g}", WeakInstrumentWarning,
                      stacklevel=2)
    return result


@dataclass
class CFResult:
    endogenous_name: str
    first_stage: FirstStageResult
    second_stage: RegressionResult
    pi: float
    pi_se: float
    pi_t: float
    pi_pvalue: float
    level: float = 0.05

    @property
    def endogenous(self) -> bool:
        return self.pi_pvalue < self.level

    @property
    def weak_instruments(self) -> bool:
        return self.first_stage.weak

    @property
    def beta(self) -> float:
        return self.second_stage.coef(self.endogenous_name)

    def verdict(self) -> str:
        return "endogenous" if self.endogenous else "no evidence of endogeneity"


CONTROL_FUNCTION = "nu_hat"


def _cf_coefficients(y: np.ndarray, controls: DesignMatrix, endog: np.ndarray, Z: DesignMatrix,
                     name: str) -> np.ndarray:
    first = _coef_only(controls.hstack(Z), endog)
    nu_hat = endog - controls.hstack(Z).values @ first
    second = controls.hstack(DesignMatrix(np.column_stack([endog, nu_hat]), (name, CONTROL_FUNCTION)))
    return _coef_only(second, y)


def control_function(y: np.ndarray, X: DesignMatrix, endogenous: np.ndarray,
                     other_features: Optional[DesignMatrix], instruments: Union[DesignMatrix, np.ndarray],
                     B: int = 1000, seed: int = 0, n_jobs: int = 1, endogenous_name: str = "P1",
                     level: float = 0.05) -> CFResult:
    """Second stage with the first-stage residual added; both stages are bootstrapped together"""
    if B < 100:
        raise ConfigError(f"bootstrap inference needs B >= 100, got {B}")
    endogenous = np.asarray(endogenous, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    controls = X.hstack(other_features)
    Z = _as_design(instruments, "z")
    fs = first_stage(endogenous, controls, Z)
    second_X = controls.hstack(DesignMatrix(np.column_stack([endogenous, fs.residuals]),
                                            (endogenous_name, CONTROL_FUNCTION)))
    second = ols_fit(second_X, y)

    def statistic(rows: np.ndarray) -> np.ndarray:
        return _cf_coefficients(y[rows], controls.take(rows), endogenous[rows], Z.take(rows), endogenous_name)

    summary = summarize_replicates(second.coefficients,
                                   bootstrap_replicates(statistic, len(y), B, seed, n_jobs))
    second = second.with_inference(summary)
    pi = second.coef(CONTROL_FUNCTION)
    pi_se = second.se_of(CONTROL_FUNCTION)
    pi_t = pi / pi_se if pi_se > 0 else np.inf
    pi_pvalue = float(2.0 * stats.norm.sf(abs(pi_t)))
    return CFResult(endogenous_name, fs, second, pi, pi_se, pi_t, pi_pvalue, level)


def two_sls_oracle(y: np.ndarray, X: DesignMatrix, endogenous: np.ndarray,
                   instruments: Union[DesignMatrix, np.ndarray], endogenous_names: Sequence[str] = ("P1",)
                   ) -> pd.Series:
    """Textbook two-stage least squares point estimates"""
    y = np.asarray(y, dtype=np.float64)
    W_endog = np.asarray(endogenous, dtype=np.float64)
    if W_endog.ndim == 1:
        W_endog = W_endog[:, None]
    Z_excl = _as_design(instruments, "z")
    if Z_excl.p < W_endog.shape[1]:
        raise DataError(f"{Z_excl.p} instruments for {W_endog.shape[1]} endogenous regressors")
    Z = X.hstack(Z_excl)
    check_rank(Z)
    W = np.hstack([X.values, W_endog])
    W_hat = Z.values @ _lstsq_qr(Z.values, W)
    names = (*X.names, *endogenous_names[:W_endog.shape[1]])
    check_rank(DesignMatrix(W_hat, names))
    try:
        beta = np.linalg.solve(W_hat.T @ W, W_hat.T @ y)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"2SLS normal equations: {e}") from e
    return pd.Series(beta, index=list(names))


def proxy_ols(y: np.ndarray, X_core: DesignMatrix, proxies: Optional[DesignMatrix],
              features: Optional[DesignMatrix], B: int = 0, seed: int = 0, n_jobs: int = 1) -> RegressionResult:
    """OLS with the proxy variables appended to the controls"""
    X = X_core.hstack(proxies, features)
    return ols_bootstrap(X, y, B, seed, n_jobs) if B else ols_fit(X, y)


def nested_proxy_sets(proxy_blocks: Sequence[Tuple[str, DesignMatrix]]) -> List[Tuple[str, DesignMatrix]]:
    """Cumulative proxy sets: first block, first two blocks, ..."""
    out: List[Tuple[str, DesignMatrix]] = []
    acc: Optional[DesignMatrix] = None
    labels: List[str] = []
    for label, block in proxy_blocks:
        acc = block if acc is None else acc.hstack(block)
        labels.append(label)
        out.append(("+".join(labels), acc))
    return out
