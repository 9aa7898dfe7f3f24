"""Attribute-selection statistics: one-way ANOVA over per-instance CTR and
IRLS logistic regression over raw clicks, plus per-level CTR summaries.

Significance reports are a methodology reproduction over whatever data
they are given; they do not claim to reproduce any production outcome.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc, gammaincc, ndtr

from .pipeline import aggregate, natural_level_order


class StatsError(Exception):
    pass


class DegenerateDataError(StatsError):
    pass


class DesignError(StatsError):
    pass


SEPARATION_BOUND = 30.0


@dataclass
class AnovaResult:
    attribute: str | None
    f: float
    df_between: int
    df_within: int
    p: float


@dataclass
class LogitResult:
    coefficients: np.ndarray
    standard_errors: np.ndarray | None
    wald_z: np.ndarray | None
    p_values: np.ndarray | None
    converged: bool
    iterations: int
    separated: bool = False
    log_likelihood: float = float("nan")
    ll_trace: list = field(default_factory=list)


def f_survival(f, d1, d2):
    """P(F(d1, d2) > f) through the regularized incomplete beta function."""
    if f <= 0:
        return 1.0
    x = d2 / (d2 + d1 * f)
    return float(betainc(d2 / 2.0, d1 / 2.0, x))


def chi2_survival(x, df):
    """P(chi2(df) > x) through the regularized upper incomplete gamma."""
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def one_way_anova(groups, attribute=None):
    """Classical one-way ANOVA on a list of sample groups."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2:
        raise DegenerateDataError(f"need >= 2 groups, got {len(groups)}")
    for i, g in enumerate(groups):
        if g.size < 2:
            raise DegenerateDataError(f"group {i} has {g.size} samples, need >= 2")
    n_total = sum(g.size for g in groups)
    grand = sum(g.sum() for g in groups) / n_total
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    df_between = len(groups) - 1
    df_within = n_total - len(groups)
    if ss_within <= 0:
        raise DegenerateDataError("zero within-group variance")
    f = (ss_between / df_between) / (ss_within / df_within)
    return AnovaResult(attribute=attribute, f=float(f), df_between=df_between,
                       df_within=df_within, p=f_survival(f, df_between, df_within))


def _log_likelihood(eta, y):
    # sum y*eta - log(1 + exp(eta)), computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_fit(X, y, max_iter=50, tol=1e-8, add_intercept=True):
    """Logistic regression by iteratively reweighted least squares.

    Convergence means the score (gradient) inf-norm fell below `tol`;
    step-halving keeps the log-likelihood non-decreasing. Quasi-separation
    (any |coef| > 30) suppresses the Wald p-values.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DesignError(f"bad design: X {X.shape}, y {y.shape}")
    if add_intercept:
        X = np.hstack([np.ones((X.shape[0], 1)), X])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DesignError("design matrix is rank deficient")
    beta = np.zeros(X.shape[1])
    ll = _log_likelihood(X @ beta, y)
    ll_trace = [ll]
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        eta = X @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (y - p)
        if np.max(np.abs(grad)) < tol:
            converged = True
            iterations -= 1
            break
        w = np.maximum(p * (1.0 - p), 1e-10)
        try:
            step = np.linalg.solve((X * w[:, None]).T @ X, grad)
        except np.linalg.LinAlgError as exc:
            raise DesignError(f"IRLS normal equations singular: {exc}") from None
        new_beta = beta + step
        new_ll = _log_likelihood(X @ new_beta, y)
        halvings = 0
        while new_ll < ll and halvings < 30:
            step *= 0.5
            new_beta = beta + step
            new_ll = _log_likelihood(X @ new_beta, y)
            halvings += 1
        beta, ll = new_beta, new_ll
        ll_trace.append(ll)
    eta = X @ beta
    p = 1.0 / (1.0 + np.exp(-eta))
    if np.max(np.abs(X.T @ (y - p))) < tol:
        converged = True
    separated = bool(np.any(np.abs(beta) > SEPARATION_BOUND))
    se = z = pvals = None
    if not separated:
        w = np.maximum(p * (1.0 - p), 1e-10)
        info = (X * w[:, None]).T @ X
        try:
            se = np.sqrt(np.diag(np.linalg.inv(info)))
        except np.linalg.LinAlgError:
            se = None
        if se is not None:
            z = beta / se
            pvals = 2.0 * ndtr(-np.abs(z))
    return LogitResult(coefficients=beta, standard_errors=se, wald_z=z,
                       p_values=pvals, converged=converged, iterations=iterations,
                       separated=separated, log_likelihood=ll, ll_trace=ll_trace)


# ---------------------------------------------------------------------------
# attribute selection over raw click logs

@dataclass
class AttributeTest:
    attribute: str
    anova: AnovaResult | None
    anova_note: str | None
    logit_p: float | None
    logit_note: str | None
    selected: bool

    def best_p(self):
        ps = [p for p in (self.anova.p if self.anova else None, self.logit_p)
              if p is not None]
        return min(ps) if ps else 1.0


@dataclass
class SelectionReport:
    alpha: float
    tests: list = field(default_factory=list)

    def selected(self):
        return [t.attribute for t in self.tests if t.selected]

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "note": "methodology reproduction on the supplied log, "
                    "not a reproduction of any production selection",
            "attributes": [{
                "attribute": t.attribute,
                "anova_f": t.anova.f if t.anova else None,
                "anova_p": t.anova.p if t.anova else None,
                "anova_note": t.anova_note,
                "logit_p": t.logit_p,
                "logit_note": t.logit_note,
                "selected": t.selected,
            } for t in self.tests],
        }


def _anova_on_instances(instances, attribute):
    by_level = {}
    for inst in instances:
        by_level.setdefault(inst.attributes[attribute], []).append(inst.y)
    groups = [np.asarray(v) for v in by_level.values() if len(v) >= 2]
    if len(groups) < 2:
        return None, "fewer than 2 levels with 2+ instances"
    try:
        return one_way_anova(groups, attribute=attribute), None
    except DegenerateDataError as exc:
        return None, str(exc)


def _logit_on_records(records, attribute):
    """Per-attribute significance by likelihood ratio against the
    intercept-only model (one calibrated p per attribute; the per-level
    Wald statistics stay available on LogitResult for inspection)."""
    levels = {}
    for rec in records:
        lv = rec.attributes[attribute]
        levels[lv] = levels.get(lv, 0) + 1
    if len(levels) < 2:
        return None, "single level"
    ordered = natural_level_order(levels)
    reference = max(ordered, key=lambda lv: levels[lv])
    others = [lv for lv in ordered if lv != reference]
    index = {lv: j for j, lv in enumerate(others)}
    X = np.zeros((len(records), len(others)))
    y = np.empty(len(records))
    for i, rec in enumerate(records):
        lv = rec.attributes[attribute]
        if lv != reference:
            X[i, index[lv]] = 1.0
        y[i] = float(rec.clicked)
    try:
        fit = logistic_fit(X, y)
    except DesignError as exc:
        return None, str(exc)
    if fit.separated:
        return None, "separation detected; p-values suppressed"
    rate = y.mean()
    if rate <= 0.0 or rate >= 1.0:
        return None, "degenerate click rate"
    ll_null = len(y) * (rate * np.log(rate) + (1 - rate) * np.log(1 - rate))
    lr = 2.0 * (fit.log_likelihood - ll_null)
    return chi2_survival(lr, df=len(others)), None


def select_attributes(records, schema, alpha=0.05, min_impressions=1):
    """Keep attributes significant under either test at `alpha`.

    ANOVA runs on per-instance CTR grouped by level; the logistic route
    fits clicked ~ onehot(attribute) on the raw 0/1 clicks (most frequent
    level as reference) and scores the attribute with a likelihood-ratio
    test against the intercept-only model. Text-embedding slots are not
    testable here and are skipped. Output order: selected first, then
    ascending best p-value.
    """
    records = list(records)
    instances = aggregate(records, min_impressions=min_impressions)
    tests = []
    for attr in schema.categorical():
        anova, anova_note = _anova_on_instances(instances, attr.name)
        logit_p, logit_note = _logit_on_records(records, attr.name)
        selected = ((anova is not None and anova.p < alpha)
                    or (logit_p is not None and logit_p < alpha))
        tests.append(AttributeTest(attr.name, anova, anova_note,
                                   logit_p, logit_note, selected))
    tests.sort(key=lambda t: (not t.selected, t.best_p(), t.attribute))
    return SelectionReport(alpha=alpha, tests=tests)


def ctr_bars(records, attribute):
    """Per-level (level, mean CTR, record count), levels in natural order."""
    counts, clicks = {}, {}
    for rec in records:
        lv = rec.attributes[attribute]
        counts[lv] = counts.get(lv, 0) + 1
        clicks[lv] = clicks.get(lv, 0) + int(rec.clicked)
    return [(lv, clicks[lv] / counts[lv], counts[lv])
            for lv in natural_level_order(counts)]
