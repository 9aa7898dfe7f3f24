"""Losses and ranking metrics.

The losses accept either plain arrays (returning a float) or a Tensor
prediction (returning a scalar Tensor wired into the autodiff graph);
targets and weights are always plain data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_TOL = 1e-6
LOG_FLOOR = 1e-12


class MetricError(Exception):
    pass


class DegenerateInputError(MetricError):
    """Constant input where a correlation is undefined."""


@dataclass
class ScoreDistribution:
    """A bucketed score: masses over an increasing grid of representative values."""

    buckets: np.ndarray
    bucket_values: np.ndarray

    def __post_init__(self):
        self.buckets = np.asarray(self.buckets, dtype=np.float64)
        self.bucket_values = np.asarray(self.bucket_values, dtype=np.float64)
        if self.buckets.shape != self.bucket_values.shape or self.buckets.ndim != 1:
            raise MetricError(f"distribution shapes differ: {self.buckets.shape} "
                              f"vs {self.bucket_values.shape}")
        if np.any(self.buckets < 0):
            raise MetricError("negative bucket mass")
        if abs(self.buckets.sum() - 1.0) > NORM_TOL:
            raise MetricError(f"bucket masses sum to {self.buckets.sum()}, not 1")
        if np.any(np.diff(self.bucket_values) <= 0):
            raise MetricError("bucket_values must be strictly increasing")


@dataclass
class MetricReport:
    sprc_mean: float
    lcc_mean: float
    sprc_std: float | None = None
    lcc_std: float | None = None

    def to_dict(self):
        return {"sprc_mean": self.sprc_mean, "lcc_mean": self.lcc_mean,
                "sprc_std": self.sprc_std, "lcc_std": self.lcc_std}


def _dist_rows(dists):
    """Normalize list-of-ScoreDistribution / array input to ([N, K] rows, values)."""
    if isinstance(dists, ScoreDistribution):
        return dists.buckets[None, :], dists.bucket_values
    if isinstance(dists, (list, tuple)) and dists and isinstance(dists[0], ScoreDistribution):
        values = dists[0].bucket_values
        for d in dists[1:]:
            if not np.array_equal(d.bucket_values, values):
                raise MetricError("distributions use different bucket grids")
        return np.stack([d.buckets for d in dists]), values
    rows = np.asarray(dists, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    return rows, None


def _check_normalized(rows, who):
    if np.any(np.abs(rows.sum(axis=-1) - 1.0) > NORM_TOL):
        raise MetricError(f"{who}: rows not normalized within {NORM_TOL}")


# ---------------------------------------------------------------------------
# losses

def weighted_mse(pred, target, weights):
    """(1/N) * sum_n w_n * (pred_n - target_n)^2."""
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise MetricError("negative weight")
    if isinstance(pred, Tensor):
        if pred.shape != target.shape or pred.shape != weights.shape:
            raise MetricError(f"length mismatch: pred {pred.shape}, target {target.shape}, "
                              f"weights {weights.shape}")
        w = T.tensor(weights.astype(pred.dtype), requires_grad=False)
        t = T.tensor(target.astype(pred.dtype), requires_grad=False)
        return T.reduce_mean(T.mul(w, T.square(T.sub(pred, t))))
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != target.shape or pred.shape != weights.shape:
        raise MetricError(f"length mismatch: pred {pred.shape}, target {target.shape}, "
                          f"weights {weights.shape}")
    return float(np.mean(weights * (pred - target) ** 2))


def kld_loss(target_dist, pred_dist):
    """Mean KL divergence target || pred over the batch, with 0*log(0/q) = 0.

    Predicted masses are floor-clamped at 1e-12 before the log.
    """
    t_rows, _ = _dist_rows(target_dist)
    _check_normalized(t_rows, "kld_loss target")
    if isinstance(pred_dist, Tensor):
        if pred_dist.shape != t_rows.shape:
            raise MetricError(f"shape mismatch: target {t_rows.shape} vs pred {pred_dist.shape}")
        logp = T.log(T.maximum_scalar(pred_dist, LOG_FLOOR))
        t = t_rows.astype(pred_dist.dtype)
        with np.errstate(divide="ignore"):
            tlogt = np.where(t_rows > 0, t_rows * np.log(np.maximum(t_rows, LOG_FLOOR)), 0.0)
        const = float(tlogt.sum() / t_rows.shape[0])
        cross = T.reduce_sum(T.mul(T.tensor(t, requires_grad=False), logp))
        return T.add_scalar(T.scale(cross, -1.0 / t_rows.shape[0]), const)
    p_rows, _ = _dist_rows(pred_dist)
    if p_rows.shape != t_rows.shape:
        raise MetricError(f"shape mismatch: target {t_rows.shape} vs pred {p_rows.shape}")
    _check_normalized(p_rows, "kld_loss pred")
    p = np.maximum(p_rows, LOG_FLOOR)
    terms = np.where(t_rows > 0, t_rows * (np.log(np.maximum(t_rows, LOG_FLOOR)) - np.log(p)), 0.0)
    return float(terms.sum() / t_rows.shape[0])


def emd_loss(p, q, r=2):
    """Earth mover's distance on ordered buckets:
    (mean_k |CDF_p - CDF_q|^r)^(1/r)."""
    p_rows, _ = _dist_rows(p)
    q_rows, _ = _dist_rows(q)
    if p_rows.shape != q_rows.shape:
        raise MetricError(f"shape mismatch: {p_rows.shape} vs {q_rows.shape}")
    _check_normalized(p_rows, "emd_loss p")
    _check_normalized(q_rows, "emd_loss q")
    diff = np.abs(np.cumsum(p_rows, axis=-1) - np.cumsum(q_rows, axis=-1))
    per_row = np.mean(diff ** r, axis=-1) ** (1.0 / r)
    return float(per_row.mean())


def emd_loss_tensor(target_rows, pred, r=2):
    """Batched EMD as a training objective; pred is a Tensor of [N, K] masses.

    Adds 1e-12 inside the final root so the gradient stays finite when the
    distributions coincide; the array-path emd_loss above is exact.
    """
    if r not in (1, 2):
        raise MetricError(f"tensor EMD supports r in (1, 2), got {r}")
    target_rows = np.asarray(target_rows, dtype=np.float64)
    if pred.shape != target_rows.shape:
        raise MetricError(f"shape mismatch: target {target_rows.shape} vs pred {pred.shape}")
    t = T.tensor(target_rows.astype(pred.dtype), requires_grad=False)
    diff = T.absolute(T.cumsum_lastdim(T.sub(pred, t)))
    if r == 1:
        return T.reduce_mean(T.reduce_mean(diff, axis=-1))
    per_row = T.reduce_mean(T.square(diff), axis=-1)
    return T.reduce_mean(T.sqrt(T.add_scalar(per_row, 1e-12)))


# ---------------------------------------------------------------------------
# correlation metrics

def _ranks(x):
    """1-based ranks, ties averaged."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    r = np.empty(x.size, dtype=np.float64)
    r[order] = np.arange(1, x.size + 1)
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=r)
    return sums[inverse] / counts[inverse]


def lcc(a, b):
    """Pearson linear correlation; constant input is an error, never NaN."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError(f"lcc: shape mismatch {a.shape} vs {b.shape}")
    if a.size < 2:
        raise MetricError("lcc: need at least 2 samples")
    ac = a - a.mean()
    bc = b - b.mean()
    na = np.sqrt((ac * ac).sum())
    nb = np.sqrt((bc * bc).sum())
    if na == 0 or nb == 0:
        raise DegenerateInputError("lcc: constant input vector")
    return float((ac * bc).sum() / (na * nb))


def sprc(a, b):
    """Spearman rank correlation: Pearson on average-tied ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError(f"sprc: shape mismatch {a.shape} vs {b.shape}")
    if a.size < 2:
        raise MetricError("sprc: need at least 2 samples")
    return lcc(_ranks(a), _ranks(b))


def dist_moments(d):
    """(mean, std) of a bucketed score distribution."""
    if isinstance(d, ScoreDistribution):
        masses, values = d.buckets, d.bucket_values
    else:
        masses, values = d
        masses = np.asarray(masses, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
    mean = float((masses * values).sum())
    var = float((masses * (values - mean) ** 2).sum())
    return mean, float(np.sqrt(max(var, 0.0)))


def evaluate(preds, targets):
    """Rank-correlation report for a batch of predictions.

    Scalar head: sprc/lcc of scores. Distribution head: sprc/lcc computed
    separately on the per-sample means and standard deviations.
    """
    pred_is_dist = _is_dist(preds)
    targ_is_dist = _is_dist(targets)
    if pred_is_dist != targ_is_dist:
        raise MetricError("evaluate: mixed prediction kinds (scalar vs distribution)")
    if not pred_is_dist:
        p = np.asarray(preds, dtype=np.float64)
        t = np.asarray(targets, dtype=np.float64)
        return MetricReport(sprc_mean=sprc(p, t), lcc_mean=lcc(p, t))
    p_rows, p_vals = _dist_rows(preds)
    t_rows, t_vals = _dist_rows(targets)
    values = p_vals if p_vals is not None else t_vals
    if values is None:
        raise MetricError("evaluate: distribution inputs carry no bucket values")
    p_m, p_s = _moment_arrays(p_rows, values)
    t_m, t_s = _moment_arrays(t_rows, values)
    return MetricReport(sprc_mean=sprc(p_m, t_m), lcc_mean=lcc(p_m, t_m),
                        sprc_std=sprc(p_s, t_s), lcc_std=lcc(p_s, t_s))


def _is_dist(x):
    if isinstance(x, ScoreDistribution):
        return True
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], ScoreDistribution):
        return True
    return np.asarray(x, dtype=object).ndim > 1 if not isinstance(x, np.ndarray) else x.ndim > 1


def _moment_arrays(rows, values):
    means = rows @ values
    variances = (rows * (values[None, :] - means[:, None]) ** 2).sum(axis=-1)
    return means, np.sqrt(np.maximum(variances, 0.0))
