"""Engagement-shift analysis around disclosure events.

Weekly contribution fractions are encoded into an interrupted time series
(level term at the event, slope-change term after it) and fitted by pooled
OLS, with a separate piecewise fit corroborating the post-event slope. Tenure
records summarize each user's first hundred comments (disclosure counts,
dissonance-index statistics, score covariates) and feed negative-binomial,
log-OLS, and logistic regressions on how long the user stays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence, TextIO

import numpy as np
from scipy import optimize, special, stats

WEEK_SECONDS = 7 * 86400
DAY_SECONDS = 86400

TENURE_MODELS = ("negbin_days", "ols_log_comments", "logit_10days")


class EngagementError(Exception):
    pass


class FilteredOut(Exception):
    """User fails the robustness filters; .reason carries the code."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class ConvergenceError(EngagementError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


def dissonance_index(d: int, b: int) -> Optional[float]:
    """Fraction of disclosures that is dissonant: d / (d + b); undefined
    (None) when there are no disclosures at all."""
    if d < 0 or b < 0:
        raise EngagementError("disclosure counts must be non-negative")
    if d + b == 0:
        return None
    return d / (d + b)


@dataclass(frozen=True)
class ItsObservation:
    user: str
    week: int       # T: 1-based week index from window start
    after: int      # D: 0 before the event week, 1 from it on
    weeks_since: int  # P: weeks since the event inclusive, 0 before
    fraction: float   # weekly contributions / lifetime contributions in scope


def encode_its(
    user: str,
    timestamps: Sequence[int],
    intervention: int,
    window_weeks: int = 13,
    scope: str = "inside",
) -> list[ItsObservation]:
    """Weekly observation rows for one user around one event.

    `timestamps` must already be restricted to the chosen scope (inside or
    outside the community). Raises FilteredOut with a reason code when the
    user misses the robustness requirements: activity on both sides of the
    window, and on both sides of the event within the window.
    """
    if window_weeks < 3 or window_weeks % 2 == 0:
        raise EngagementError("window must be an odd number of weeks >= 3")
    if scope not in ("inside", "outside"):
        raise EngagementError(f"unknown scope {scope!r}")
    if not timestamps:
        raise FilteredOut("no_contributions")
    n_pre = window_weeks // 2
    bins = [math.floor((t - intervention) / WEEK_SECONDS) for t in timestamps]
    if not any(b < -n_pre for b in bins):
        raise FilteredOut("no_pre_window")
    if not any(b > n_pre for b in bins):
        raise FilteredOut("no_post_window")
    if not any(-n_pre <= b < 0 for b in bins):
        raise FilteredOut("no_pre_intervention")
    if not any(0 <= b <= n_pre for b in bins):
        raise FilteredOut("no_post_intervention")
    lifetime = len(timestamps)
    counts = {b: 0 for b in range(-n_pre, n_pre + 1)}
    for b in bins:
        if -n_pre <= b <= n_pre:
            counts[b] += 1
    out = []
    for b in range(-n_pre, n_pre + 1):
        week = b + n_pre + 1
        after = 1 if b >= 0 else 0
        out.append(
            ItsObservation(
                user=user,
                week=week,
                after=after,
                weeks_since=b + 1 if b >= 0 else 0,
                fraction=counts[b] / lifetime,
            )
        )
    return out


def encode_all(
    histories: dict[str, Sequence[int]],
    interventions: dict[str, int],
    window_weeks: int = 13,
    scope: str = "inside",
) -> tuple[list[ItsObservation], dict[str, str]]:
    """Pool observations across users; excluded users map to reason codes."""
    observations: list[ItsObservation] = []
    excluded: dict[str, str] = {}
    for user in sorted(interventions):
        try:
            observations.extend(
                encode_its(
                    user, histories.get(user, []), interventions[user],
                    window_weeks=window_weeks, scope=scope,
                )
            )
        except FilteredOut as exc:
            excluded[user] = exc.reason
    return observations, excluded


@dataclass
class CoefficientRow:
    name: str
    coef: float
    se: float
    stat: float
    p: float
    ci_low: float
    ci_high: float

    def to_record(self) -> dict:
        return {
            "name": self.name, "coef": self.coef, "se": self.se,
            "stat": self.stat, "p": self.p,
            "ci_low": self.ci_low, "ci_high": self.ci_high,
        }


def _ols(X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> list[CoefficientRow]:
    n, p = X.shape
    if np.linalg.matrix_rank(X) < p:
        raise EngagementError("rank-deficient design matrix")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    df = n - p
    if df <= 0:
        raise EngagementError("not enough observations for inference")
    sigma2 = float(resid @ resid) / df
    cov = sigma2 * np.linalg.inv(X.T @ X)
    se = np.sqrt(np.diag(cov))
    tstat = beta / se
    pvals = 2.0 * stats.t.sf(np.abs(tstat), df)
    crit = stats.t.ppf(0.975, df)
    return [
        CoefficientRow(
            name=names[i], coef=float(beta[i]), se=float(se[i]),
            stat=float(tstat[i]), p=float(pvals[i]),
            ci_low=float(beta[i] - crit * se[i]), ci_high=float(beta[i] + crit * se[i]),
        )
        for i in range(p)
    ]


@dataclass
class ItsFit:
    rows: list[CoefficientRow]  # const, week, after, weeks_since
    post_slope: float           # b1 + b3
    piecewise_post: CoefficientRow
    n_observations: int
    scope: str

    def coefficient(self, name: str) -> CoefficientRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def significant(self, name: str, alpha: float = 0.05) -> bool:
        return self.coefficient(name).p < alpha


def fit_its(observations: Sequence[ItsObservation], scope: str = "inside") -> ItsFit:
    """Pooled user-week OLS of fraction ~ week + after + weeks_since, plus a
    separate post-window linear fit corroborating the post-event slope."""
    if not observations:
        raise EngagementError("no observations")
    pre_weeks = {o.week for o in observations if o.after == 0}
    post_weeks = {o.week for o in observations if o.after == 1}
    if len(pre_weeks) < 2 or len(post_weeks) < 2:
        raise EngagementError("need at least two distinct weeks on each side")
    X = np.array([[1.0, o.week, o.after, o.weeks_since] for o in observations])
    y = np.array([o.fraction for o in observations])
    rows = _ols(X, y, ["const", "week", "after", "weeks_since"])

    post = [o for o in observations if o.after == 1]
    Xp = np.array([[1.0, o.weeks_since] for o in post])
    yp = np.array([o.fraction for o in post])
    piecewise = _ols(Xp, yp, ["const", "post_slope"])[1]

    return ItsFit(
        rows=rows,
        post_slope=rows[1].coef + rows[3].coef,
        piecewise_post=piecewise,
        n_observations=len(observations),
        scope=scope,
    )


# -- tenure ------------------------------------------------------------------


@dataclass
class TenureRecord:
    user: str
    belief_count: int
    dissonance_count: int
    avg_dissonance: Optional[float]
    max_dissonance: Optional[float]
    min_score: float
    avg_score: float
    max_score: float
    born: int       # first-comment timestamp
    created: int    # 100th-comment timestamp
    remaining_days: float
    remaining_comments: int
    remains_after_10_days: bool
    censored: bool


def build_tenure(
    comments_by_user: dict[str, list[tuple[int, str, int]]],
    disclosure_labels: dict[str, str],
    ban_time: Optional[int],
    first_n: int = 100,
    censor_days: int = 30,
) -> list[TenureRecord]:
    """Tenure records for users with more than first_n community comments.

    comments_by_user maps user -> [(created_at, comment_id, score)]. The
    dissonance-index statistics run over cumulative prefixes of the first
    first_n comments, skipping prefixes with no disclosures yet. Users whose
    last comment falls within censor_days of the ban are flagged censored.
    """
    if ban_time is None:
        raise EngagementError("ban time is required for censoring")
    records = []
    for user in sorted(comments_by_user):
        comments = sorted(comments_by_user[user])
        if len(comments) <= first_n:
            continue
        first = comments[:first_n]
        b_count = d_count = 0
        d_values = []
        for _, comment_id, _ in first:
            label = disclosure_labels.get(comment_id)
            if label == "belief":
                b_count += 1
            elif label == "dissonance":
                d_count += 1
            value = dissonance_index(d_count, b_count)
            if value is not None:
                d_values.append(value)
        scores = [s for _, _, s in first]
        born = first[0][0]
        created = first[first_n - 1][0]
        last = comments[-1][0]
        remaining_days = (last - created) / DAY_SECONDS
        records.append(
            TenureRecord(
                user=user,
                belief_count=b_count,
                dissonance_count=d_count,
                avg_dissonance=float(np.mean(d_values)) if d_values else None,
                max_dissonance=max(d_values) if d_values else None,
                min_score=float(min(scores)),
                avg_score=float(np.mean(scores)),
                max_score=float(max(scores)),
                born=born,
                created=created,
                remaining_days=remaining_days,
                remaining_comments=len(comments) - first_n,
                remains_after_10_days=remaining_days > 10.0,
                censored=(ban_time - last) < censor_days * DAY_SECONDS,
            )
        )
    return records


TENURE_REGRESSORS = (
    "born", "created", "belief", "dissonance",
    "min_score", "avg_score", "max_score", "avg_D", "max_D",
)


def _regressor_column(records: list[TenureRecord], name: str) -> tuple[np.ndarray, np.ndarray]:
    """(values with NaN for undefined, defined mask)."""
    getters = {
        "born": lambda r: float(r.born),
        "created": lambda r: float(r.created),
        "belief": lambda r: float(r.belief_count),
        "dissonance": lambda r: float(r.dissonance_count),
        "min_score": lambda r: r.min_score,
        "avg_score": lambda r: r.avg_score,
        "max_score": lambda r: r.max_score,
        "avg_D": lambda r: math.nan if r.avg_dissonance is None else r.avg_dissonance,
        "max_D": lambda r: math.nan if r.max_dissonance is None else r.max_dissonance,
    }
    if name not in getters:
        raise EngagementError(f"unknown regressor {name!r}")
    values = np.array([getters[name](r) for r in records])
    return values, np.isfinite(values)


def standardize_column(values: np.ndarray, defined: np.ndarray) -> np.ndarray:
    """Z-score over defined entries; undefined entries impute to 0 (the mean)
    after standardization."""
    out = np.zeros(len(values))
    vals = values[defined]
    if vals.size == 0:
        return out
    std = vals.std()
    if std == 0:
        raise EngagementError("constant regressor column")
    out[defined] = (vals - vals.mean()) / std
    return out


def _tenure_design(
    records: list[TenureRecord], regressors: Sequence[str]
) -> tuple[np.ndarray, list[str]]:
    columns = [np.ones(len(records))]
    names = ["const"]
    for name in regressors:
        values, defined = _regressor_column(records, name)
        if not defined.any():
            continue  # regressor never observed (e.g. no disclosures at all)
        columns.append(standardize_column(values, defined))
        names.append(name)
    return np.column_stack(columns), names


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    names: Sequence[str],
    max_iter: int = 200,
    tol: float = 1e-8,
    ridge: float = 0.0,
) -> list[CoefficientRow]:
    """Logistic MLE by iteratively reweighted least squares. Separable data
    does not converge and raises with the iteration trace unless a ridge
    penalty stabilizes the fit."""
    n, p = X.shape
    beta = np.zeros(p)
    trace = []
    converged = False
    for _ in range(max_iter):
        eta = np.clip(X @ beta, -30, 30)
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = np.clip(mu * (1.0 - mu), 1e-10, None)
        z = eta + (y - mu) / w
        lhs = X.T @ (w[:, None] * X) + ridge * np.eye(p)
        new_beta = np.linalg.solve(lhs, X.T @ (w * z) )
        delta = float(np.max(np.abs(new_beta - beta)))
        trace.append({"beta": new_beta.tolist(), "delta": delta})
        beta = new_beta
        if delta < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"logistic IRLS did not converge in {max_iter} iterations", trace
        )
    if ridge == 0.0 and float(np.max(np.abs(X @ beta))) >= 29.9:
        # The linear predictor saturated the clip bound: separable data, the
        # unpenalized MLE diverges.
        raise ConvergenceError(
            "separation detected: coefficients diverge without a ridge penalty", trace
        )
    eta = np.clip(X @ beta, -30, 30)
    mu = 1.0 / (1.0 + np.exp(-eta))
    w = np.clip(mu * (1.0 - mu), 1e-10, None)
    cov = np.linalg.inv(X.T @ (w[:, None] * X) + ridge * np.eye(p))
    se = np.sqrt(np.diag(cov))
    zstat = beta / se
    pvals = 2.0 * stats.norm.sf(np.abs(zstat))
    crit = stats.norm.ppf(0.975)
    return [
        CoefficientRow(
            name=names[i], coef=float(beta[i]), se=float(se[i]),
            stat=float(zstat[i]), p=float(pvals[i]),
            ci_low=float(beta[i] - crit * se[i]), ci_high=float(beta[i] + crit * se[i]),
        )
        for i in range(p)
    ]


def _nb2_loglik(beta: np.ndarray, log_theta: float, X: np.ndarray, y: np.ndarray) -> float:
    theta = math.exp(log_theta)
    eta = np.clip(X @ beta, -30, 30)
    mu = np.exp(eta)
    return float(
        np.sum(
            special.gammaln(y + theta) - special.gammaln(theta) - special.gammaln(y + 1)
            + theta * math.log(theta) + y * eta - (y + theta) * np.log(theta + mu)
        )
    )


def fit_negative_binomial(
    X: np.ndarray,
    y: np.ndarray,
    names: Sequence[str],
    max_iter: int = 200,
    tol: float = 1e-8,
) -> tuple[list[CoefficientRow], float]:
    """NB2 (log link, Var = mu + alpha mu^2) maximum likelihood: IRLS steps
    for the coefficients alternate with a bounded 1-d search for the
    dispersion, and the joint observed information supplies standard errors.
    Returns the coefficient table (dispersion last) and the log-likelihood.
    """
    n, p = X.shape
    if np.linalg.matrix_rank(X) < p:
        raise EngagementError("rank-deficient design matrix")
    # Poisson-style init.
    beta = np.linalg.lstsq(X, np.log1p(y), rcond=None)[0]
    log_theta = 0.0
    loglik = _nb2_loglik(beta, log_theta, X, y)
    trace = []
    converged = False
    for _ in range(max_iter):
        theta = math.exp(log_theta)
        alpha = 1.0 / theta
        eta = np.clip(X @ beta, -30, 30)
        mu = np.exp(eta)
        w = mu / (1.0 + alpha * mu)
        z = eta + (y - mu) / mu
        new_beta = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * z))

        res = optimize.minimize_scalar(
            lambda lt: -_nb2_loglik(new_beta, lt, X, y),
            bounds=(-10.0, 20.0),
            method="bounded",
            options={"xatol": 1e-10},
        )
        new_log_theta = float(res.x)
        new_loglik = _nb2_loglik(new_beta, new_log_theta, X, y)
        delta_beta = float(np.max(np.abs(new_beta - beta)))
        delta_ll = abs(new_loglik - loglik)
        trace.append(
            {"beta": new_beta.tolist(), "log_theta": new_log_theta,
             "delta_beta": delta_beta, "delta_ll": delta_ll}
        )
        beta, log_theta, loglik = new_beta, new_log_theta, new_loglik
        # The dispersion plateaus to machine precision on equidispersed data,
        # so convergence is judged on the coefficients and the likelihood.
        if delta_beta < tol and delta_ll < 1e-9 * (1.0 + abs(new_loglik)):
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"negative binomial MLE did not converge in {max_iter} iterations", trace
        )

    alpha = math.exp(-log_theta)
    params = np.concatenate([beta, [alpha]])

    if log_theta >= 19.0:
        # Dispersion pinned at the Poisson boundary: the joint information is
        # singular in alpha, so score the coefficients alone.
        mu = np.exp(np.clip(X @ beta, -30, 30))
        w = mu / (1.0 + alpha * mu)
        cov_beta = np.linalg.inv(X.T @ (w[:, None] * X))
        se = np.concatenate([np.sqrt(np.diag(cov_beta)), [float("nan")]])
    else:
        def negll(vec: np.ndarray) -> float:
            a = max(vec[-1], 1e-12)
            return -_nb2_loglik(vec[:-1], -math.log(a), X, y)

        hess = _numeric_hessian(negll, params)
        cov = np.linalg.pinv(hess)
        se = np.sqrt(np.clip(np.diag(cov), 0, None))
    crit = stats.norm.ppf(0.975)
    rows = []
    for i, name in enumerate(list(names) + ["alpha"]):
        coef = float(params[i])
        s = float(se[i]) if se[i] > 0 else float("nan")
        zstat = coef / s if s and math.isfinite(s) else float("nan")
        pval = 2.0 * stats.norm.sf(abs(zstat)) if math.isfinite(zstat) else float("nan")
        rows.append(
            CoefficientRow(
                name=name, coef=coef, se=s, stat=zstat, p=pval,
                ci_low=coef - crit * s if math.isfinite(s) else float("nan"),
                ci_high=coef + crit * s if math.isfinite(s) else float("nan"),
            )
        )
    return rows, _nb2_loglik(beta, log_theta, X, y)


def _numeric_hessian(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian with per-coordinate relative steps."""
    p = len(x)
    h = step * np.maximum(1.0, np.abs(x))
    hess = np.zeros((p, p))
    f0 = fn(x)
    for i in range(p):
        for j in range(i, p):
            if i == j:
                xp, xm = x.copy(), x.copy()
                xp[i] += h[i]
                xm[i] -= h[i]
                hess[i, i] = (fn(xp) - 2 * f0 + fn(xm)) / (h[i] ** 2)
            else:
                xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
                xpp[[i, j]] += [h[i], h[j]]
                xpm[i] += h[i]
                xpm[j] -= h[j]
                xmp[i] -= h[i]
                xmp[j] += h[j]
                xmm[[i, j]] -= [h[i], h[j]]
                value = (fn(xpp) - fn(xpm) - fn(xmp) + fn(xmm)) / (4 * h[i] * h[j])
                hess[i, j] = hess[j, i] = value
    return hess


@dataclass
class TenureFit:
    model: str
    rows: list[CoefficientRow]
    n_records: int
    n_censored: int
    log_likelihood: Optional[float] = None

    def coefficient(self, name: str) -> CoefficientRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)


def fit_tenure(
    records: Sequence[TenureRecord],
    model: str,
    regressors: Sequence[str] = TENURE_REGRESSORS,
    ridge: float = 0.0,
) -> TenureFit:
    """Fit one of the three tenure outcomes on standardized regressors;
    censored users are excluded up front."""
    if model not in TENURE_MODELS:
        raise EngagementError(f"unknown tenure model {model!r}")
    usable = [r for r in records if not r.censored]
    n_censored = len(records) - len(usable)
    if len(usable) < 3:
        raise EngagementError("not enough uncensored records")
    X, names = _tenure_design(usable, regressors)
    loglik = None
    if model == "negbin_days":
        y = np.array([max(0.0, round(r.remaining_days)) for r in usable])
        rows, loglik = fit_negative_binomial(X, y, names)
    elif model == "ols_log_comments":
        y = np.log1p(np.array([r.remaining_comments for r in usable], dtype=float))
        rows = _ols(X, y, names)
    else:
        y = np.array([1.0 if r.remains_after_10_days else 0.0 for r in usable])
        rows = fit_logistic(X, y, names, ridge=ridge)
    return TenureFit(
        model=model, rows=rows, n_records=len(usable),
        n_censored=n_censored, log_likelihood=loglik,
    )


# -- reports -----------------------------------------------------------------


def format_table(title: str, rows: Sequence[CoefficientRow], extra: str = "") -> str:
    lines = [title, "=" * len(title)]
    if extra:
        lines.append(extra)
    lines.append(f"{'':<16}{'coef':>12}{'std err':>12}{'stat':>10}{'P>|stat|':>10}{'[0.025':>12}{'0.975]':>12}")
    for row in rows:
        lines.append(
            f"{row.name:<16}{row.coef:>12.4f}{row.se:>12.4f}{row.stat:>10.3f}"
            f"{row.p:>10.3f}{row.ci_low:>12.4f}{row.ci_high:>12.4f}"
        )
    return "\n".join(lines) + "\n"


def its_plot_data(observations: Sequence[ItsObservation], fit: ItsFit) -> list[dict]:
    """Week-by-week mean fraction plus the fitted segments, for charting."""
    b = {row.name: row.coef for row in fit.rows}
    weeks = sorted({o.week for o in observations})
    out = []
    for week in weeks:
        values = [o.fraction for o in observations if o.week == week]
        sample = next(o for o in observations if o.week == week)
        fitted = (
            b["const"] + b["week"] * week + b["after"] * sample.after
            + b["weeks_since"] * sample.weeks_since
        )
        out.append(
            {
                "week": week,
                "mean_fraction": float(np.mean(values)),
                "fitted": fitted,
                "after": sample.after,
            }
        )
    return out


def save_coefficients(rows: Sequence[CoefficientRow], stream: TextIO) -> None:
    for row in rows:
        stream.write(json.dumps(row.to_record(), sort_keys=True) + "\n")
