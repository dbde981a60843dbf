"""ROC-AUC scoring and the error-reduction comparison metric, plus the
CSV report the classification stage emits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricUndefinedError
from .ioutil import atomic_write_text
from .tensor import DTYPE


def _tied_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average of their positions."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    starts = np.r_[True, s[1:] != s[:-1]]
    group = np.cumsum(starts) - 1
    counts = np.bincount(group)
    ends = np.cumsum(counts)
    avg = (ends - counts + 1 + ends) / 2.0
    ranks = np.empty(len(scores), dtype=DTYPE)
    ranks[order] = avg[group]
    return ranks


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative,
    with tied pairs counted half (rank-based Mann-Whitney form)."""
    scores = np.asarray(scores, dtype=DTYPE)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricUndefinedError(
            f"scores and labels must be equal-length vectors, got "
            f"{scores.shape} and {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(
            f"AUC needs both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = _tied_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def error_reduction(auc_new: float, auc_baseline: float) -> float:
    """Fraction of the baseline's remaining error removed:
    (auc_new - auc_baseline) / (1 - auc_baseline)."""
    if auc_baseline == 1.0:
        raise MetricUndefinedError(
            "baseline AUC of 1 leaves no error to reduce (division by zero)")
    return (auc_new - auc_baseline) / (1.0 - auc_baseline)


@dataclass
class CategoryResult:
    """Cross-validated outcome for one category."""
    category_id: str
    fold_aucs: tuple[float, ...]
    lambdas: tuple[float, ...]

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.fold_aucs))


@dataclass
class AucReport:
    """Per-category AUCs plus the overall mean and an optional
    baseline comparison."""
    categories: list[CategoryResult] = field(default_factory=list)
    baseline_auc: float | None = None

    @property
    def overall_mean(self) -> float | None:
        """Mean of category means; None when the report is empty."""
        if not self.categories:
            return None
        return float(np.mean([c.mean_auc for c in self.categories]))

    @property
    def error_reduction(self) -> float | None:
        if self.baseline_auc is None or self.overall_mean is None:
            return None
        return error_reduction(self.overall_mean, self.baseline_auc)


REPORT_HEADER = ("category_id,mean_auc,fold1,fold2,fold3,fold4,fold5,"
                 "lambda1,lambda2,lambda3,lambda4,lambda5,"
                 "baseline_auc,error_reduction")


def write_report_csv(report: AucReport, path) -> None:
    """Emit one row per category and a final OVERALL summary row; the
    baseline columns are filled on the summary row only."""
    lines = [REPORT_HEADER]
    for cat in report.categories:
        cells = [cat.category_id, repr(cat.mean_auc)]
        cells += [repr(float(a)) for a in cat.fold_aucs]
        cells += [repr(float(l)) for l in cat.lambdas]
        cells += ["", ""]
        lines.append(",".join(cells))
    overall = report.overall_mean
    summary = ["OVERALL", "" if overall is None else repr(overall)]
    summary += [""] * 10
    summary.append("" if report.baseline_auc is None else repr(report.baseline_auc))
    red = report.error_reduction
    summary.append("" if red is None else repr(red))
    lines.append(",".join(summary))
    atomic_write_text(path, "\n".join(lines) + "\n")
