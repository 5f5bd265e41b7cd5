"""
Statistics utility functions for the SPDE control solver.
Monte-Carlo summaries and the goodness-of-fit checks used on costs,
offspring counts and filter errors.
"""

from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike
from scipy import stats


def mean_and_stderr(samples: ArrayLike, axis: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Sample mean and its standard error along an axis"""
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[axis]
    mean = np.mean(x, axis=axis)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, np.std(x, axis=axis, ddof=1) / np.sqrt(n)


def within_standard_errors(estimate: ArrayLike, target: ArrayLike, stderr: ArrayLike, k: float = 3.0) -> bool:
    """True if |estimate - target| <= k * stderr componentwise (exact match when stderr = 0)"""
    estimate, target, stderr = (np.asarray(v, dtype=np.float64) for v in (estimate, target, stderr))
    return bool(np.all(np.abs(estimate - target) <= k * stderr + 1e-12))


def chi_square_test(observed: Sequence[int], expected_probs: Optional[Sequence[float]] = None) -> Tuple[float, float]:
    """
    Chi-square goodness of fit of observed category counts.

    Args:
        observed: Observed frequencies per category
        expected_probs: Expected probabilities, uniform when None

    Returns:
        Tuple of (test statistic, p-value)
    """
    observed = np.asarray(observed, dtype=np.float64)
    total = observed.sum()
    if total == 0:
        return 0.0, 1.0
    if expected_probs is None:
        expected_probs = np.full(len(observed), 1.0 / len(observed))
    expected = total * np.asarray(expected_probs, dtype=np.float64)
    statistic, p_value = stats.chisquare(observed, expected)
    return float(statistic), float(p_value)


def interpret_chi_square_result(p_value: float, alpha: float = 0.05) -> Dict[str, Union[str, float, bool]]:
    result = {
        "p_value": p_value,
        "alpha": alpha,
        "consistent": p_value >= alpha,
    }
    if p_value >= alpha:
        result["conclusion"] = f"counts consistent with the expected law (p={p_value:.3f} >= alpha={alpha:.3f})"
    else:
        result["conclusion"] = f"counts deviate from the expected law (p={p_value:.3f} < alpha={alpha:.3f})"
    return result


def variance_chi_square(samples: ArrayLike, variance: float) -> Tuple[float, float]:
    """
    Two-sided chi-square test of a normal sample's variance against a known value.

    Returns:
        Tuple of (test statistic (n-1) s^2 / variance, p-value)
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    dof = x.size - 1
    statistic = dof * np.var(x, ddof=1) / variance
    tail = min(stats.chi2.cdf(statistic, dof), stats.chi2.sf(statistic, dof))
    return float(statistic), float(min(1.0, 2.0 * tail))


def normal_bin_counts(samples: ArrayLike, scale: float, n_bins: int = 10) -> Tuple[np.ndarray, np.ndarray]:
    """Counts of samples in n_bins equiprobable bins of N(0, scale^2), with the bin probabilities"""
    edges = stats.norm.ppf(np.linspace(0.0, 1.0, n_bins + 1)[1:-1], scale=scale)
    counts = np.bincount(np.searchsorted(edges, np.asarray(samples, dtype=np.float64).reshape(-1)),
                         minlength=n_bins)
    return counts, np.full(n_bins, 1.0 / n_bins)


def offspring_moments(offspring: ArrayLike) -> Dict[str, np.ndarray]:
    """Per-particle mean, standard error and variance over branching trials (trials x S)"""
    counts = np.asarray(offspring, dtype=np.float64)
    mean, stderr = mean_and_stderr(counts)
    return {"mean": mean, "stderr": stderr, "variance": np.var(counts, axis=0, ddof=1)}


def windowed_means(values: ArrayLike, window: int) -> Tuple[np.ndarray, np.ndarray]:
    """Means and standard errors over consecutive non-overlapping windows"""
    x = np.asarray(values, dtype=np.float64)
    n_windows = len(x) // window
    blocks = x[:n_windows * window].reshape(n_windows, window)
    return mean_and_stderr(blocks, axis=1)


def is_non_increasing(means: ArrayLike, tolerance: ArrayLike = 0.0) -> bool:
    """Each mean at most the previous one plus the tolerance"""
    means = np.asarray(means, dtype=np.float64)
    tolerance = np.broadcast_to(np.asarray(tolerance, dtype=np.float64), means.shape)
    return bool(np.all(means[1:] <= means[:-1] + tolerance[1:]))


def loglog_slope(x: ArrayLike, y: ArrayLike) -> float:
    """Least-squares slope of log y against log x"""
    fit = stats.linregress(np.log(np.asarray(x, dtype=np.float64)), np.log(np.asarray(y, dtype=np.float64)))
    return float(fit.slope)


def observed_order(errors: Sequence[float], refinement: float = 2.0) -> List[float]:
    """Convergence orders between successive refinement levels"""
    e = np.asarray(errors, dtype=np.float64)
    return list(np.log(e[:-1] / e[1:]) / np.log(refinement))
