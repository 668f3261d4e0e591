"""Predictive accuracy and calibration: Q², coverage accuracy, envelopes."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVarianceError, InsufficientDataError, ShapeError

MIN_ENVELOPE_REPLICATES = 20


@dataclass(frozen=True)
class EvaluationBatch:
    """True values, predictive means and variances shaped (S, n_test, n_u)."""

    y_true: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float) for a in (self.y_true, self.mean, self.var)]
        arrs = [a.reshape((1,) * (3 - a.ndim) + a.shape) if a.ndim < 3 else a for a in arrs]
        if not arrs[0].shape == arrs[1].shape == arrs[2].shape:
            raise ShapeError(f"shapes differ: {[a.shape for a in arrs]}")
        if np.any(arrs[2] < -1e-10):
            raise ValueError("predictive variances must be non-negative")
        for name, a in zip(("y_true", "mean", "var"), arrs):
            object.__setattr__(self, name, a)

    @classmethod
    def from_posterior(cls, y_true, posterior):
        return cls(y_true, posterior.mean, posterior.var)

    @property
    def n_tasks(self):
        return self.y_true.shape[0]


def q2(y_true, mean):
    """``1 - SS_res / SS_tot`` around the empirical mean of ``y_true``."""
    y = np.asarray(y_true, dtype=float).ravel()
    m = np.asarray(mean, dtype=float).ravel()
    if y.shape != m.shape:
        raise ShapeError("y_true and mean differ in size")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if y.size < 2 or ss_tot == 0:
        raise DegenerateVarianceError("Q² is undefined for constant test values")
    return float(1.0 - np.sum((y - m) ** 2) / ss_tot)


def coverage_accuracy(y_true, mean, var, delta=1.96):
    """Fraction of points with ``|y - m| <= delta * sqrt(v)``."""
    y = np.asarray(y_true, dtype=float)
    m = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))
    return float(np.mean(np.abs(y - m) <= delta * sd))


def task_q2(batch, task):
    return q2(batch.y_true[task], batch.mean[task])


def task_coverage(batch, task, delta=1.96):
    return coverage_accuracy(batch.y_true[task], batch.mean[task], batch.var[task], delta)


@dataclass(frozen=True)
class Envelopes:
    """Per-grid-point ``[lo, hi]`` bands, each shaped (n_u, 2)."""

    ci_true: np.ndarray
    ci_m: np.ndarray
    ci_v: np.ndarray

    def pointwise_coverage(self, y_true):
        """Fraction of ``y_true`` (n_rep, n_u) inside the CI_v band."""
        y = np.atleast_2d(y_true)
        return float(np.mean((y >= self.ci_v[:, 0]) & (y <= self.ci_v[:, 1])))


def calibration_envelopes(y_true, mean, var, delta=1.96, levels=(2.5, 97.5)):
    """Percentile envelopes across replicates at every grid point.

    Inputs are shaped (n_rep, n_u) for a single task.  ``CI_v`` takes the
    lower percentile of ``m - delta sqrt(v)`` and the upper percentile of
    ``m + delta sqrt(v)``.  Percentiles interpolate linearly between
    order statistics.
    """
    y = np.atleast_2d(np.asarray(y_true, dtype=float))
    m = np.atleast_2d(np.asarray(mean, dtype=float))
    v = np.atleast_2d(np.asarray(var, dtype=float))
    if not y.shape == m.shape == v.shape:
        raise ShapeError("y_true, mean and var must share a shape")
    if y.shape[0] < MIN_ENVELOPE_REPLICATES:
        raise InsufficientDataError(f"envelopes need at least {MIN_ENVELOPE_REPLICATES} "
                                    f"replicates, got {y.shape[0]}")
    lo, hi = levels
    sd = np.sqrt(np.maximum(v, 0.0))

    def band(a_lo, a_hi):
        return np.stack([np.percentile(a_lo, lo, axis=0), np.percentile(a_hi, hi, axis=0)], axis=1)

    return Envelopes(band(y, y), band(m, m), band(m - delta * sd, m + delta * sd))


def task_envelopes(batch, task, delta=1.96):
    return calibration_envelopes(batch.y_true[task], batch.mean[task], batch.var[task], delta)


def summarize(values):
    """Boxplot statistics ``min, q25, median, q75, max`` ignoring NaNs."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return dict.fromkeys(("min", "q25", "median", "q75", "max"), float("nan"))
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q25", "median", "q75", "max"), map(float, q)))


# -- CSV ---------------------------------------------------------------------------------------

def write_metrics_csv(path, rows):
    """Rows of ``(task, metric, value)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "metric", "value"])
        for task, metric, value in rows:
            w.writerow([task, metric, repr(float(value)) if isinstance(value, float) else value])


def write_envelopes_csv(path, grid, envelopes_by_task):
    """``task,u,ci_true_lo,ci_true_hi,ci_m_lo,ci_m_hi,ci_v_lo,ci_v_hi``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "u", "ci_true_lo", "ci_true_hi", "ci_m_lo", "ci_m_hi",
                    "ci_v_lo", "ci_v_hi"])
        for task, env in envelopes_by_task.items():
            for j, u in enumerate(grid):
                w.writerow([task, repr(float(u))] + [repr(float(x)) for x in
                            (*env.ci_true[j], *env.ci_m[j], *env.ci_v[j])])


def read_envelopes_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = {}
    for task in np.unique(data[:, 0]).astype(int):
        rows = data[data[:, 0] == task]
        out[task] = (rows[:, 1], Envelopes(rows[:, 2:4], rows[:, 4:6], rows[:, 6:8]))
    return out
