"""Metrics and statistics for the model comparison study.

Confusion matrices, support-weighted F1, the multiclass (R_K) Matthews
correlation coefficient, per-class classification reports, and a
Mann-Whitney U test with midrank tie handling. Everything here is a pure
function over plain arrays; nothing mutates its inputs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError

# Exact enumeration of the U distribution is used up to this sample size per
# group; beyond it the normal approximation (tie- and continuity-corrected)
# takes over.
EXACT_ENUMERATION_LIMIT = 8


@dataclass
class ConfusionMatrix:
    """K x K count matrix; rows are true classes, columns predicted."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ContractViolationError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ContractViolationError("confusion matrix entries must be >= 0")

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class EvalResult:
    """Scores for one fitted model on one entity."""

    f1_weighted: float
    mcc: float
    per_class: list[dict] = field(default_factory=list)
    duration_s: float = 0.0


@dataclass
class StatConfig:
    alpha: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ContractViolationError("alpha must lie strictly in (0, 1)")


def confusion(y_true, y_pred, n_classes: int) -> ConfusionMatrix:
    """Tally a confusion matrix from parallel label sequences.

    Labels must be integers in ``[0, n_classes)``. Empty inputs yield the
    zero matrix.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ContractViolationError(
            f"length mismatch: {y_true.shape} vs {y_pred.shape}"
        )
    if y_true.size and (
        y_true.min() < 0
        or y_pred.min() < 0
        or y_true.max() >= n_classes
        or y_pred.max() >= n_classes
    ):
        raise ContractViolationError("labels out of range")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def _precision_recall_f1(matrix: ConfusionMatrix):
    c = matrix.counts.astype(np.float64)
    tp = np.diag(c)
    pred_tot = c.sum(axis=0)
    true_tot = c.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    return precision, recall, f1, true_tot


def f1_weighted(matrix: ConfusionMatrix) -> float:
    """Support-weighted mean of per-class F1; a class with P+R = 0 scores 0."""
    if matrix.total == 0:
        raise ContractViolationError("empty confusion matrix")
    _, _, f1, support = _precision_recall_f1(matrix)
    return float(np.dot(f1, support) / support.sum())


def mcc_multiclass(matrix: ConfusionMatrix) -> float:
    """Multiclass Matthews correlation (the R_K statistic).

    ``(c*s - sum_k p_k*t_k) / sqrt((s^2 - sum p_k^2)(s^2 - sum t_k^2))``
    with c the trace, s the total, p_k column sums, t_k row sums. A zero
    denominator (all predictions or all truths in one class) returns 0.
    """
    if matrix.total == 0:
        raise ContractViolationError("empty confusion matrix")
    c = matrix.counts.astype(np.float64)
    s = c.sum()
    trace = np.trace(c)
    p = c.sum(axis=0)
    t = c.sum(axis=1)
    num = trace * s - float(np.dot(p, t))
    den_sq = (s * s - float(np.dot(p, p))) * (s * s - float(np.dot(t, t)))
    if den_sq <= 0.0:
        return 0.0
    return float(num / math.sqrt(den_sq))


def classification_report(matrix: ConfusionMatrix, class_names=None) -> str:
    """Aligned-text per-class precision/recall/F1/support table."""
    if class_names is None:
        class_names = [f"class_{k}" for k in range(matrix.n_classes)]
    precision, recall, f1, support = _precision_recall_f1(matrix)
    width = max(len(n) for n in class_names) + 2
    lines = [f"{'':{width}}precision  recall  f1      support"]
    for k, name in enumerate(class_names):
        lines.append(
            f"{name:{width}}{precision[k]:<11.3f}{recall[k]:<8.3f}"
            f"{f1[k]:<8.3f}{int(support[k])}"
        )
    lines.append(
        f"{'weighted':{width}}{'':11}{'':8}{f1_weighted(matrix):<8.3f}{matrix.total}"
    )
    return "\n".join(lines)


def report_rows(matrix: ConfusionMatrix, class_names=None) -> list[dict]:
    """Per-class report as dict rows, ready for CSV export."""
    if class_names is None:
        class_names = [f"class_{k}" for k in range(matrix.n_classes)]
    precision, recall, f1, support = _precision_recall_f1(matrix)
    return [
        {
            "class": class_names[k],
            "precision": float(precision[k]),
            "recall": float(recall[k]),
            "f1": float(f1[k]),
            "support": int(support[k]),
        }
        for k in range(matrix.n_classes)
    ]


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, ties receiving the mean of their rank span."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _u_from_ranks(pooled: np.ndarray, n1: int) -> float:
    ranks = _midranks(pooled)
    r1 = ranks[:n1].sum()
    return r1 - n1 * (n1 + 1) / 2.0


def _exact_two_sided_p(pooled: np.ndarray, n1: int, u_obs: float) -> float:
    """Enumerate every assignment of the pooled values to group one.

    The two-sided p-value is the fraction of arrangements whose U lies at
    least as far from the null mean n1*n2/2 as the observed U.
    """
    n = len(pooled)
    n2 = n - n1
    mu = n1 * n2 / 2.0
    obs_dev = abs(u_obs - mu)
    hits = 0
    total = 0
    for combo in itertools.combinations(range(n), n1):
        mask = np.zeros(n, dtype=bool)
        mask[list(combo)] = True
        u = _u_from_ranks(np.concatenate([pooled[mask], pooled[~mask]]), n1)
        if abs(u - mu) >= obs_dev - 1e-12:
            hits += 1
        total += 1
    return hits / total


def _normal_two_sided_p(pooled: np.ndarray, n1: int, u_obs: float) -> float:
    """Normal approximation with tie correction and continuity correction."""
    n = len(pooled)
    n2 = n - n1
    mu = n1 * n2 / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(((tie_counts**3) - tie_counts).sum())
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0.0:
        return 1.0  # all values identical: no evidence of any difference
    z = (abs(u_obs - mu) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    p = 2.0 * 0.5 * math.erfc(z / math.sqrt(2.0))
    return min(p, 1.0)


def mann_whitney_u(a, b, exact_limit: int = EXACT_ENUMERATION_LIMIT):
    """Two-sided Mann-Whitney U test of samples ``a`` and ``b``.

    Returns ``(U, p)`` where U is the statistic for sample ``a`` computed
    from midranks. When both samples have at most ``exact_limit`` members
    the p-value is computed by exact enumeration over all
    C(n1+n2, n1) group assignments; otherwise by normal approximation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractViolationError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    u_obs = _u_from_ranks(pooled, len(a))
    if len(a) <= exact_limit and len(b) <= exact_limit:
        p = _exact_two_sided_p(pooled, len(a), u_obs)
    else:
        p = _normal_two_sided_p(pooled, len(a), u_obs)
    return float(u_obs), float(p)


def u_test_verdict(a, b, config: StatConfig | None = None) -> dict:
    """U test plus the alpha-level verdict, shaped for the stats report."""
    config = config or StatConfig()
    u, p = mann_whitney_u(a, b)
    return {
        "U": u,
        "p": p,
        "alpha": config.alpha,
        "reject_h0": bool(p < config.alpha),
        "verdict": (
            "H0 can be rejected (p < alpha)"
            if p < config.alpha
            else "H0 cannot be rejected (p >= alpha)"
        ),
    }
