"""Random-intercept linear mixed model fitted by profile maximum likelihood.

Model: ``y_ij = x_ij' beta + u_j + e_ij`` with ``u_j ~ N(0, s2_farm)`` and
``e_ij ~ N(0, s2_resid)``.  With ``lam = s2_farm / s2_resid`` the marginal
covariance of farm j is ``s2_resid * (I + lam * 11')``.  Its inverse square
root has the closed form ``I - d_j 11'/n_j`` with
``d_j = 1 - 1/sqrt(1 + lam * n_j)``, so for fixed ``lam`` the fixed effects
and residual variance come from ordinary least squares on transformed data
and only ``log(lam)`` needs a numerical search.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import LmmError

log = logging.getLogger(__name__)

LOG_LAM_BOUNDS = (-12.0, 12.0)
GRID_POINTS = 25
GOLDEN_TOL = 1e-10
_INVPHI = (math.sqrt(5) - 1) / 2


@dataclass
class LmmSpec:
    """Response, grouping and fixed effects for one model.

    ``factors`` are categorical (treatment-coded against their first level);
    ``covariates`` enter as numeric columns.  ``levels`` optionally fixes the
    level order of a factor; unobserved levels are dropped.
    """

    response: Sequence[float]
    groups: Sequence
    factors: Mapping[str, Sequence] = field(default_factory=dict)
    covariates: Mapping[str, Sequence[float]] = field(default_factory=dict)
    levels: Mapping[str, Sequence] = field(default_factory=dict)


@dataclass
class Design:
    X: np.ndarray
    names: list[str]
    factor_levels: dict[str, list]
    factor_columns: dict[str, list[int]]
    covariate_columns: dict[str, int]


def build_design(spec: LmmSpec) -> Design:
    n = len(spec.response)
    cols, names = [np.ones(n)], ["(Intercept)"]
    factor_levels, factor_columns, covariate_columns = {}, {}, {}
    for name, values in spec.factors.items():
        values = list(values)
        if len(values) != n:
            raise LmmError(f"factor {name!r} has {len(values)} values for {n} observations")
        observed = set(values)
        order = [lv for lv in spec.levels.get(name, ()) if lv in observed]
        order += sorted((lv for lv in observed if lv not in order), key=str)
        factor_levels[name] = order
        idx = []
        for lv in order[1:]:
            idx.append(len(cols))
            cols.append(np.array([v == lv for v in values], dtype=float))
            names.append(f"{name}[{lv}]")
        factor_columns[name] = idx
    for name, values in spec.covariates.items():
        arr = np.asarray(values, dtype=float)
        if arr.shape != (n,):
            raise LmmError(f"covariate {name!r} has shape {arr.shape}, expected ({n},)")
        covariate_columns[name] = len(cols)
        cols.append(arr)
        names.append(name)
    X = np.column_stack(cols)
    _check_rank(X, names)
    return Design(X, names, factor_levels, factor_columns, covariate_columns)


def _check_rank(X: np.ndarray, names: list[str]) -> None:
    aliased, basis = [], np.empty((X.shape[0], 0))
    rank = 0
    for j in range(X.shape[1]):
        trial = np.column_stack([basis, X[:, j]])
        r = np.linalg.matrix_rank(trial)
        if r > rank:
            basis, rank = trial, r
        else:
            aliased.append(names[j])
    if aliased:
        raise LmmError(f"design matrix is rank deficient; aliased columns: {', '.join(aliased)}")


@dataclass
class _Profile:
    beta: np.ndarray
    sigma2: float
    loglik: float
    logdet_xtx: float


class _Problem:
    """Cached data for profile evaluations at different variance ratios."""

    def __init__(self, X: np.ndarray, y: np.ndarray, codes: np.ndarray, n_groups: int, reml: bool) -> None:
        self.X, self.y, self.codes, self.reml = X, y, codes, reml
        self.n, self.p = X.shape
        self.counts = np.bincount(codes, minlength=n_groups).astype(float)
        self.xbar = np.zeros((n_groups, self.p))
        np.add.at(self.xbar, codes, X)
        self.xbar /= self.counts[:, None]
        self.ybar = np.bincount(codes, weights=y, minlength=n_groups) / self.counts

    def transform(self, lam: float) -> tuple[np.ndarray, np.ndarray]:
        d = 1.0 - 1.0 / np.sqrt(1.0 + lam * self.counts)
        dj = d[self.codes]
        return self.X - dj[:, None] * self.xbar[self.codes], self.y - dj * self.ybar[self.codes]

    def evaluate(self, lam: float) -> _Profile:
        Xs, ys = self.transform(lam)
        beta, *_ = np.linalg.lstsq(Xs, ys, rcond=None)
        resid = ys - Xs @ beta
        rss = float(resid @ resid)
        logdet_h = float(np.sum(np.log1p(lam * self.counts)))
        r = np.linalg.qr(Xs, mode="r")
        logdet_xtx = 2.0 * float(np.sum(np.log(np.abs(np.diag(r)))))
        dof = self.n - self.p if self.reml else self.n
        # rounding noise from an exact fit counts as zero
        if rss <= 1e-20 * float(ys @ ys) or dof <= 0:
            rss = 0.0
        if rss <= 0 or dof <= 0:
            return _Profile(beta, 0.0, -math.inf if rss <= 0 else math.nan, logdet_xtx)
        sigma2 = rss / dof
        loglik = -0.5 * (dof * (math.log(2 * math.pi * sigma2) + 1) + logdet_h)
        if self.reml:
            loglik -= 0.5 * logdet_xtx
        return _Profile(beta, sigma2, loglik, logdet_xtx)

    def profile_loglik(self, log_lam: float) -> float:
        return self.evaluate(math.exp(log_lam)).loglik


def golden_section_max(f, lo: float, hi: float, tol: float = GOLDEN_TOL) -> float:
    """Maximiser of a unimodal function on [lo, hi]."""
    a, b = lo, hi
    c, d = b - _INVPHI * (b - a), a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return (a + b) / 2


@dataclass
class LmmFit:
    beta: np.ndarray
    names: list[str]
    cov_beta: np.ndarray
    sigma2_farm: float
    sigma2_resid: float
    loglik: float
    n_obs: int
    n_groups: int
    n_params: int
    method: str
    fitted_fixed: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    std_residuals: np.ndarray
    random_effects: dict
    design: Design
    y: np.ndarray
    group_codes: np.ndarray
    group_labels: list
    lam_estimated: bool = True

    @property
    def lam(self) -> float:
        return self.sigma2_farm / self.sigma2_resid

    @property
    def rank(self) -> int:
        return self.design.X.shape[1]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_beta))

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])


def fit_random_intercept(
    spec: LmmSpec,
    method: str = "ml",
    farm_variance: float | None = None,
) -> LmmFit:
    """Fit by maximising the profile likelihood over ``log(lam)`` in [-12, 12].

    A 25-point grid locates the optimum, golden-section search refines it,
    and the ``s2_farm = 0`` boundary is compared explicitly.  Pass
    ``farm_variance=0`` to pin the farm variance at zero (the fit then equals
    ordinary least squares).  ``method="reml"`` switches to restricted
    likelihood.
    """
    method = method.lower()
    if method not in ("ml", "reml"):
        raise ValueError("method must be 'ml' or 'reml'")
    y = np.asarray(spec.response, dtype=float)
    if y.ndim != 1 or not np.all(np.isfinite(y)):
        raise LmmError("response must be a finite 1-D array")
    if len(spec.groups) != len(y):
        raise LmmError("groups and response differ in length")
    labels = sorted(set(spec.groups), key=str)
    if len(labels) < 2:
        raise LmmError("at least two groups are required to estimate a farm variance")
    code_of = {g: i for i, g in enumerate(labels)}
    codes = np.array([code_of[g] for g in spec.groups])
    design = build_design(spec)
    if design.X.shape[0] <= design.X.shape[1]:
        raise LmmError("more fixed-effect columns than observations")
    prob = _Problem(design.X, y, codes, len(labels), method == "reml")

    if farm_variance is not None:
        if farm_variance != 0:
            raise ValueError("only farm_variance=0 can be pinned")
        lam, estimated = 0.0, False
    else:
        lam, estimated = _optimise_lambda(prob), True

    best = prob.evaluate(lam)
    if best.sigma2 <= 0 or not math.isfinite(best.loglik):
        raise LmmError("degenerate fit: zero residual variance")
    beta = best.beta
    s2 = best.sigma2
    Xs, _ = prob.transform(lam)
    cov = s2 * np.linalg.inv(Xs.T @ Xs)
    fitted_fixed = design.X @ beta
    marginal = y - fitted_fixed
    rbar = np.bincount(codes, weights=marginal, minlength=len(labels)) / prob.counts
    shrink = lam * prob.counts / (1 + lam * prob.counts)
    blup = shrink * rbar
    fitted = fitted_fixed + blup[codes]
    resid = y - fitted
    return LmmFit(
        beta=beta,
        names=design.names,
        cov_beta=cov,
        sigma2_farm=lam * s2,
        sigma2_resid=s2,
        loglik=best.loglik,
        n_obs=len(y),
        n_groups=len(labels),
        n_params=design.X.shape[1] + (2 if estimated else 1),
        method=method,
        fitted_fixed=fitted_fixed,
        fitted=fitted,
        residuals=resid,
        std_residuals=standardize(resid, math.sqrt(s2)),
        random_effects={g: float(blup[i]) for i, g in enumerate(labels)},
        design=design,
        y=y,
        group_codes=codes,
        group_labels=labels,
        lam_estimated=estimated,
    )


def _optimise_lambda(prob: _Problem) -> float:
    lo, hi = LOG_LAM_BOUNDS
    grid = np.linspace(lo, hi, GRID_POINTS)
    values = [prob.profile_loglik(t) for t in grid]
    k = int(np.nanargmax(values))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, GRID_POINTS - 1)]
    theta = golden_section_max(prob.profile_loglik, a, b)
    lam = math.exp(theta)
    if prob.evaluate(0.0).loglik >= prob.evaluate(lam).loglik:
        return 0.0
    return lam


def profile_loglik(spec: LmmSpec, log_lam: float, method: str = "ml") -> float:
    """Profile log-likelihood at a given ``log(s2_farm / s2_resid)``."""
    y = np.asarray(spec.response, dtype=float)
    labels = sorted(set(spec.groups), key=str)
    code_of = {g: i for i, g in enumerate(labels)}
    codes = np.array([code_of[g] for g in spec.groups])
    prob = _Problem(build_design(spec).X, y, codes, len(labels), method == "reml")
    return prob.profile_loglik(log_lam)


def standardize(resid: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        if np.any(resid != 0):
            raise LmmError("non-zero residuals with zero scale")
        return np.zeros_like(resid)
    return resid / sigma


def icc(fit: LmmFit | None = None, *, sigma2_farm: float | None = None, sigma2_resid: float | None = None) -> float:
    """``s2_farm / (s2_farm + s2_resid)``."""
    if fit is not None:
        sigma2_farm, sigma2_resid = fit.sigma2_farm, fit.sigma2_resid
    total = sigma2_farm + sigma2_resid
    if total <= 0:
        raise ValueError("total variance must be positive")
    return sigma2_farm / total


def r_squared(fit: LmmFit, baseline: LmmFit | None = None) -> dict[str, float]:
    """Marginal and conditional R² from the variance partition.

    ``marginal = v_f / (v_f + s2_farm + s2_resid)`` and
    ``conditional = (v_f + s2_farm) / (same)``, where ``v_f`` is the variance
    of the fixed-effect predictions.
    """
    if baseline is not None:
        if baseline.n_obs != fit.n_obs or not np.array_equal(baseline.y, fit.y) \
                or not np.array_equal(baseline.group_codes, fit.group_codes):
            raise LmmError("baseline fitted to different data")
    var_fixed = float(np.var(fit.fitted_fixed))
    denom = var_fixed + fit.sigma2_farm + fit.sigma2_resid
    return {
        "marginal": var_fixed / denom,
        "conditional": (var_fixed + fit.sigma2_farm) / denom,
    }


def aic_bic(loglik: float, k: int, n: float) -> dict[str, float]:
    return {"aic": -2 * loglik + 2 * k, "bic": -2 * loglik + k * math.log(n)}


def information_criteria(fit: LmmFit) -> dict[str, float]:
    return aic_bic(fit.loglik, fit.n_params, fit.n_obs)


def lr_test(full: LmmFit, nested: LmmFit) -> dict[str, float]:
    """Likelihood-ratio test of a nested model against a fuller one."""
    if full.n_obs != nested.n_obs or not np.array_equal(full.y, nested.y) \
            or not np.array_equal(full.group_codes, nested.group_codes):
        raise LmmError("models fitted to different data are not nested")
    if "reml" in (full.method, nested.method) and not np.array_equal(full.design.X, nested.design.X):
        raise LmmError("REML likelihoods are not comparable across fixed-effect structures")
    df = full.n_params - nested.n_params
    if df < 0:
        raise LmmError("the 'full' model has fewer parameters than the nested one")
    Xf, Xn = full.design.X, nested.design.X
    coef, *_ = np.linalg.lstsq(Xf, Xn, rcond=None)
    scale = max(1.0, float(np.max(np.abs(Xn))))
    if np.max(np.abs(Xf @ coef - Xn)) > 1e-8 * scale:
        raise LmmError("nested model's fixed effects are not contained in the full model")
    if nested.lam_estimated and not full.lam_estimated:
        raise LmmError("nested model estimates a farm variance the full model pins")
    chi2 = max(0.0, 2.0 * (full.loglik - nested.loglik))
    p = 1.0 if df == 0 or chi2 == 0 else float(stats.chi2.sf(chi2, df))
    return {"chi2": chi2, "df": df, "p": p}


def _reference_row(fit: LmmFit) -> np.ndarray:
    """Design row with covariates at their means and factors equally weighted."""
    d = fit.design
    row = np.zeros(len(fit.names))
    row[0] = 1.0
    for name, cols in d.factor_columns.items():
        share = 1.0 / len(d.factor_levels[name])
        row[cols] = share
    for name, col in d.covariate_columns.items():
        row[col] = float(np.mean(d.X[:, col]))
    return row


def lsd_df(fit: LmmFit) -> int:
    """Containment denominator df: ``n - rank(X) - n_groups + 1``.

    With the farm variance pinned at zero the model is ordinary least squares
    and the residual df ``n - rank(X)`` applies.
    """
    if not fit.lam_estimated:
        return fit.n_obs - fit.rank
    return fit.n_obs - fit.rank - fit.n_groups + 1


def adjusted_means(fit: LmmFit, factor: str) -> dict:
    """Model-adjusted (estimated marginal) means and SEs per factor level."""
    d = fit.design
    if factor not in d.factor_levels:
        raise LmmError(f"model has no factor {factor!r}")
    base = _reference_row(fit)
    out = {}
    for lv in d.factor_levels[factor]:
        row = _level_row(fit, base, factor, lv)
        out[lv] = (float(row @ fit.beta), float(math.sqrt(row @ fit.cov_beta @ row)))
    return out


def _level_row(fit: LmmFit, base: np.ndarray, factor: str, level) -> np.ndarray:
    d = fit.design
    row = base.copy()
    cols = d.factor_columns[factor]
    row[cols] = 0.0
    k = d.factor_levels[factor].index(level)
    if k > 0:
        row[cols[k - 1]] = 1.0
    return row


@dataclass(frozen=True)
class PairwiseComparison:
    level_a: object
    level_b: object
    difference: float
    se: float
    t: float
    df: int
    p: float


def lsd_pairwise(fit: LmmFit, factor: str, levels: Sequence | None = None) -> list[PairwiseComparison]:
    """Unadjusted t-tests between every pair of adjusted level means."""
    d = fit.design
    if factor not in d.factor_levels:
        raise LmmError(f"model has no factor {factor!r}")
    observed = d.factor_levels[factor]
    levels = list(observed if levels is None else levels)
    for lv in levels:
        if lv not in observed:
            raise LmmError(f"level {lv!r} of {factor!r} was not observed")
    if len(levels) < 2:
        raise LmmError("need at least two levels for pairwise comparisons")
    base = _reference_row(fit)
    df = lsd_df(fit)
    if df <= 0:
        raise LmmError("no residual degrees of freedom for LSD tests")
    out = []
    for a, b in combinations(levels, 2):
        c = _level_row(fit, base, factor, a) - _level_row(fit, base, factor, b)
        diff = float(c @ fit.beta)
        se = float(math.sqrt(c @ fit.cov_beta @ c))
        t = diff / se
        p = float(2 * stats.t.sf(abs(t), df))
        out.append(PairwiseComparison(a, b, diff, se, t, df, min(1.0, p)))
    return out


def significance_marker(p: float, symbol: str = "*") -> str:
    """Doubled symbol for p < 0.01, single for p < 0.05, else empty."""
    if p < 0.01:
        return symbol * 2
    if p < 0.05:
        return symbol
    return ""


def wald_test(fit: LmmFit, factor: str) -> dict[str, float]:
    """Joint F test that all contrasts of a factor are zero."""
    cols = fit.design.factor_columns.get(factor)
    if not cols:
        raise LmmError(f"model has no factor {factor!r} with more than one level")
    b = fit.beta[cols]
    V = fit.cov_beta[np.ix_(cols, cols)]
    q = len(cols)
    F = float(b @ np.linalg.solve(V, b)) / q
    df2 = lsd_df(fit)
    return {"F": F, "df1": q, "df2": df2, "p": float(stats.f.sf(F, q, df2))}


def levene_brown_forsythe(values: Sequence[float], groups: Sequence) -> dict:
    """Levene's test on absolute deviations from group medians.

    Groups with a single observation carry no spread information and are
    dropped (logged).
    """
    values = np.asarray(values, dtype=float)
    by_group: dict = {}
    for v, g in zip(values, groups):
        by_group.setdefault(g, []).append(v)
    dropped = [g for g, vs in by_group.items() if len(vs) < 2]
    for g in dropped:
        log.warning("group %r has one observation; excluded from Levene test", g)
    samples = [np.asarray(vs) for g, vs in by_group.items() if len(vs) >= 2]
    k = len(samples)
    if k < 2:
        raise LmmError("Levene test needs at least two groups with n >= 2")
    z = [np.abs(s - np.median(s)) for s in samples]
    n_total = sum(len(s) for s in z)
    grand = np.concatenate(z).mean()
    between = sum(len(s) * (s.mean() - grand) ** 2 for s in z)
    within = sum(float(((s - s.mean()) ** 2).sum()) for s in z)
    df1, df2 = k - 1, n_total - k
    if within == 0:
        stat = math.inf if between > 0 else 0.0
    else:
        stat = (df2 / df1) * between / within
    p = float(stats.f.sf(stat, df1, df2)) if math.isfinite(stat) else 0.0
    if stat == 0.0:
        p = 1.0
    return {"statistic": float(stat), "p": p, "df1": df1, "df2": df2, "excluded_groups": dropped}


def diagnostics(fit: LmmFit, groups: Sequence) -> dict:
    """Standardized residuals plus a Brown-Forsythe homoscedasticity test."""
    if len(groups) != fit.n_obs:
        raise LmmError("groups length does not match the fit")
    return {
        "standardized_residuals": fit.std_residuals,
        "levene": levene_brown_forsythe(fit.std_residuals, groups),
    }
