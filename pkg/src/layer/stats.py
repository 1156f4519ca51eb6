"""
Statistics kernel: logistic regression by IRLS, ROC/AUC with midranks, DeLong's paired
test, paired t-test, Pearson correlation, percentile bootstrap and the distribution
functions behind their p-values.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import betainc, expit, ndtr, ndtri
from scipy.stats import rankdata
from sklearn.metrics import accuracy_score, precision_recall_fscore_support

from .errors import DomainError, RankError, SeparationError

SEPARATION_NORM = 1e3


def normal_cdf(z: float) -> float:
    """Standard normal CDF."""
    return float(ndtr(z))


def student_t_cdf(t: float, df: float) -> float:
    """
    Student-t CDF through the regularized incomplete beta function.

    :raises DomainError: If df < 1.
    """
    if df < 1:
        raise DomainError(f"Degrees of freedom must be >= 1, got {df}.")
    if t == 0:
        return 0.5
    tail = 0.5 * float(betainc(0.5 * df, 0.5, df / (df + t * t)))
    return 1.0 - tail if t > 0 else tail


def _two_sided_normal(z: float) -> float:
    return float(2.0 * ndtr(-abs(z)))


# ROC / AUC


@dataclass
class RocResult:
    """Threshold sweep (descending thresholds) and the midrank AUC."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _binary(y: Sequence[int]) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or not np.all(np.isin(y, (0, 1))):
        raise DomainError("Labels must be a 1-D sequence of 0/1 values.")
    return y.astype(int)


def _both_classes(y: np.ndarray) -> Tuple[int, int]:
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DomainError("Both classes must be present.")
    return n_pos, n_neg


def roc_auc(scores: Sequence[float], y: Sequence[int]) -> RocResult:
    """
    ROC curve and AUC as the Mann-Whitney statistic with midrank ties.

    :raises DomainError: If only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = _binary(y)
    if scores.shape != y.shape:
        raise DomainError("Scores and labels must have the same length.")
    n_pos, n_neg = _both_classes(y)
    ranks = rankdata(scores)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    auc = float(u / (n_pos * n_neg))

    thresholds = np.unique(scores)[::-1]
    tpr = np.array([0.0] + [float(np.sum((scores >= t) & (y == 1))) / n_pos for t in thresholds])
    fpr = np.array([0.0] + [float(np.sum((scores >= t) & (y == 0))) / n_neg for t in thresholds])
    return RocResult(np.concatenate([[np.inf], thresholds]), fpr, tpr, auc)


@dataclass
class DeLongResult:
    delta_auc: float
    variance: float
    z: Optional[float]
    p: Optional[float]
    auc_a: float
    auc_b: float
    degenerate: bool = False


def _placements(scores: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """AUC and the structural components V10 (per positive) and V01 (per negative)."""
    pos, neg = scores[y == 1], scores[y == 0]
    m, n = len(pos), len(neg)
    all_ranks = rankdata(np.concatenate([pos, neg]))
    pos_ranks = rankdata(pos)
    neg_ranks = rankdata(neg)
    v10 = (all_ranks[:m] - pos_ranks) / n
    v01 = 1.0 - (all_ranks[m:] - neg_ranks) / m
    return float(v10.mean()), v10, v01


def delong_test(scores_a: Sequence[float], scores_b: Sequence[float], y: Sequence[int]) -> DeLongResult:
    """
    DeLong's test for two correlated AUCs on the same units.

    With zero variance, identical AUCs report p = 1; differing AUCs are flagged degenerate.

    :raises DomainError: Unless each class has at least two units.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    y = _binary(y)
    if a.shape != y.shape or b.shape != y.shape:
        raise DomainError("Both score vectors must be paired with the labels.")
    m, n = _both_classes(y)
    if m < 2 or n < 2:
        raise DomainError("DeLong's test needs at least two units in each class.")
    auc_a, v10_a, v01_a = _placements(a, y)
    auc_b, v10_b, v01_b = _placements(b, y)
    d10, d01 = v10_a - v10_b, v01_a - v01_b
    variance = float(np.var(d10, ddof=1) / m + np.var(d01, ddof=1) / n)
    delta = auc_a - auc_b
    if variance <= 0.0:
        if delta == 0.0:
            return DeLongResult(0.0, 0.0, 0.0, 1.0, auc_a, auc_b)
        return DeLongResult(delta, 0.0, None, None, auc_a, auc_b, degenerate=True)
    z = delta / math.sqrt(variance)
    return DeLongResult(delta, variance, z, _two_sided_normal(z), auc_a, auc_b)


# t-test, correlation, bootstrap


@dataclass
class TTestResult:
    t: Optional[float]
    df: int
    p: Optional[float]
    mean_difference: float
    degenerate: bool = False


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """
    Two-sided paired t-test on a - b with n - 1 degrees of freedom.

    Zero-variance differences are reported as degenerate, without t or p.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise DomainError("Paired t-test needs two equal-length samples of at least two values.")
    d = a - b
    df = len(d) - 1
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        return TTestResult(None, df, None, mean, degenerate=True)
    t = mean / (sd / math.sqrt(len(d)))
    return TTestResult(t, df, 2.0 * student_t_cdf(-abs(t), df), mean)


def pearson(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """Sample Pearson correlation; None when fewer than two pairs or either series is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError("Correlated series must have the same length.")
    if len(a) < 2:
        return None
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0.0 or sb == 0.0:
        return None
    return float(min(1.0, max(-1.0, (da @ db) / (sa * sb))))


def bootstrap_ci(samples: Sequence[float], n_boot: int = 1000, level: float = 0.95,
                 seed: int = 0) -> Tuple[float, float]:
    """Percentile interval of the resampled mean."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 1:
        raise DomainError("Bootstrap needs at least one value.")
    rng = np.random.default_rng(seed)
    means = samples[rng.integers(0, samples.size, size=(n_boot, samples.size))].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    return float(low), float(high)


# logistic regression


@dataclass
class LogisticFit:
    beta0: float
    beta1: float
    se0: float
    se1: float
    ci_low: float
    ci_high: float
    z: float
    p: float
    iterations: int
    log_likelihood: float


def _log_likelihood(eta: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_fit(x: Sequence[float], y: Sequence[int], tol: float = 1e-8, max_iter: int = 100,
                 level: float = 0.95) -> LogisticFit:
    """
    Univariate logistic regression logit P(y=1) = beta0 + beta1 x by IRLS, with Wald statistics.

    Converged means the log-likelihood moved by less than tol and the Newton step became
    negligible next to the coefficients. Under separation the coefficients keep growing by
    a roughly constant step instead, so they either pass the 1e3 norm or never converge.

    :raises RankError: If x is constant.
    :raises SeparationError: If the coefficients diverge (norm beyond 1e3, or still growing after max_iter).
    :raises DomainError: If a class is missing.
    """
    x = np.asarray(x, dtype=np.float64)
    y = _binary(y).astype(np.float64)
    if x.shape != y.shape:
        raise DomainError("x and y must have the same length.")
    _both_classes(y.astype(int))
    if np.ptp(x) == 0.0:
        raise RankError("Predictor is constant; the design matrix is rank deficient.")
    design = np.column_stack([np.ones_like(x), x])
    beta = np.zeros(2)
    previous = _log_likelihood(design @ beta, y)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        p = expit(design @ beta)
        w = p * (1.0 - p)
        information = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(information, design.T @ (y - p))
        except np.linalg.LinAlgError:
            raise SeparationError("Information matrix became singular; classes are separable.") from None
        beta = beta + step
        if not np.all(np.isfinite(beta)) or np.linalg.norm(beta) > SEPARATION_NORM:
            raise SeparationError("Coefficients diverged; classes are (quasi-)completely separated.")
        current = _log_likelihood(design @ beta, y)
        small_step = np.linalg.norm(step) <= math.sqrt(tol) * (1.0 + np.linalg.norm(beta))
        if abs(current - previous) < tol and small_step:
            previous = current
            converged = True
            break
        previous = current
    if not converged:
        raise SeparationError(f"Coefficients still growing after {max_iter} iterations; classes are separated.")
    eta = design @ beta
    p = expit(eta)
    information = design.T @ (design * (p * (1.0 - p))[:, None])
    try:
        covariance = np.linalg.inv(information)
    except np.linalg.LinAlgError:
        raise SeparationError("Information matrix is singular at the solution.") from None
    se0, se1 = (float(v) for v in np.sqrt(np.diag(covariance)))
    z = float(beta[1] / se1)
    quantile = float(ndtri(0.5 + level / 2.0))
    return LogisticFit(float(beta[0]), float(beta[1]), se0, se1, float(beta[1] - quantile * se1),
                       float(beta[1] + quantile * se1), z, _two_sided_normal(z), iterations, previous)


# classification metrics


@dataclass
class ClassificationMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    auc: Optional[float]


def classification_metrics(y: Sequence[int], probabilities: Sequence[float],
                           threshold: float = 0.5) -> ClassificationMetrics:
    """Precision, recall, F1 and accuracy at a probability threshold, plus AUC when both classes occur."""
    y = _binary(y)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    predicted = (probabilities >= threshold).astype(int)
    precision, recall, f1, _ = precision_recall_fscore_support(y, predicted, average="binary", zero_division=0)
    auc = roc_auc(probabilities, y).auc if 0 < y.sum() < len(y) else None
    return ClassificationMetrics(float(precision), float(recall), float(f1), float(accuracy_score(y, predicted)), auc)
