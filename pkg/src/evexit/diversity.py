"""Diversity measures across exit classifiers.

Pairwise measures (Q-statistic, correlation) work on oracle correctness
columns through the usual 2x2 contingency counts; the Kohavi-Wolpert
variance is ensemble-level. The agreement table instead compares predicted
labels directly: entry (i, j) is the fraction of samples where exits i
and j said the same thing, right or wrong. Degenerate denominators (e.g.
an exit that is always correct) yield 0 by convention.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError


@dataclass(frozen=True)
class PairCounts:
    n11: int
    n10: int
    n01: int
    n00: int

    @property
    def total(self) -> int:
        return self.n11 + self.n10 + self.n01 + self.n00


def pair_counts(a, b) -> PairCounts:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise DataError("pair_counts: need two equal-length columns")
    return PairCounts(n11=int(np.sum(a & b)), n10=int(np.sum(a & ~b)),
                      n01=int(np.sum(~a & b)), n00=int(np.sum(~a & ~b)))


def pair_diversity(a, b) -> tuple[float, float]:
    """Q-statistic and correlation coefficient for two correctness columns."""
    c = pair_counts(a, b)
    agree = c.n11 * c.n00
    cross = c.n01 * c.n10
    q_den = agree + cross
    q = 0.0 if q_den == 0 else (agree - cross) / q_den
    rho_den = ((c.n11 + c.n10) * (c.n01 + c.n00)
               * (c.n11 + c.n01) * (c.n10 + c.n00))
    rho = 0.0 if rho_den == 0 else (agree - cross) / np.sqrt(rho_den)
    return float(q), float(rho)


def kw_variance(correct_matrix) -> float:
    """Kohavi-Wolpert variance of an (N, L) correctness matrix:
    (1 / (N L^2)) * sum_j l_j (L - l_j) with l_j = correct exits on sample j."""
    m = np.asarray(correct_matrix, dtype=bool)
    if m.ndim != 2:
        raise DataError("kw_variance: need an (N, L) matrix")
    n, l = m.shape
    if l < 2:
        raise ConfigurationError("kw_variance: need at least 2 exits")
    if n < 1:
        raise DataError("kw_variance: empty matrix")
    correct_per_sample = m.sum(axis=1)
    return float(np.sum(correct_per_sample * (l - correct_per_sample))
                 / (n * l * l))


def agreement_table(predictions) -> np.ndarray:
    """(L, L) matrix of label-agreement fractions; symmetric, unit diagonal."""
    p = np.asarray(predictions)
    if p.ndim != 2:
        raise DataError("agreement_table: need an (N, L) prediction matrix")
    n, l = p.shape
    if l < 2:
        raise ConfigurationError("agreement_table: need at least 2 exits")
    if n < 1:
        raise DataError("agreement_table: empty matrix")
    table = np.eye(l)
    for i in range(l):
        for j in range(i + 1, l):
            table[i, j] = table[j, i] = float(np.mean(p[:, i] == p[:, j]))
    return table


@dataclass
class DiversityReport:
    exit_count: int
    sample_count: int
    q_statistic: np.ndarray       # (L, L), diagonal 1
    correlation: np.ndarray
    agreement: np.ndarray
    kw_variance: float
    per_exit_accuracy: list[float]

    def mean_pairwise(self, which: str) -> float:
        table = {"q_statistic": self.q_statistic,
                 "correlation": self.correlation,
                 "agreement": self.agreement}[which]
        l = self.exit_count
        upper = [table[i, j] for i in range(l) for j in range(i + 1, l)]
        return float(np.mean(upper))

    def to_json(self) -> dict:
        return {"exit_count": self.exit_count,
                "sample_count": self.sample_count,
                "q_statistic": self.q_statistic.tolist(),
                "correlation": self.correlation.tolist(),
                "agreement": self.agreement.tolist(),
                "kw_variance": self.kw_variance,
                "per_exit_accuracy": self.per_exit_accuracy,
                "mean_q": self.mean_pairwise("q_statistic"),
                "mean_correlation": self.mean_pairwise("correlation"),
                "mean_agreement": self.mean_pairwise("agreement")}


def measure_store(store) -> DiversityReport:
    """All diversity measures over a logits store (plain argmax per exit)."""
    records = list(store)
    if not records:
        raise DataError("measure_store: empty store")
    exits = len(records[0].exit_logits)
    if exits < 2:
        raise ConfigurationError("measure_store: need at least 2 exits")
    predictions = np.array([[int(np.argmax(r.exit_logits[c]))
                             for c in range(exits)] for r in records])
    labels = np.array([r.label for r in records])
    correct = predictions == labels[:, None]
    q = np.eye(exits)
    rho = np.eye(exits)
    for i in range(exits):
        for j in range(i + 1, exits):
            qi, ri = pair_diversity(correct[:, i], correct[:, j])
            q[i, j] = q[j, i] = qi
            rho[i, j] = rho[j, i] = ri
    return DiversityReport(
        exit_count=exits, sample_count=len(records),
        q_statistic=q, correlation=rho,
        agreement=agreement_table(predictions),
        kw_variance=kw_variance(correct),
        per_exit_accuracy=[float(c) for c in correct.mean(axis=0)])


def write_csv(report: DiversityReport, path) -> None:
    """Long-form CSV: exit_i, exit_j, metric, value. Ensemble-level rows
    (kw_variance) carry exit_i = exit_j = -1."""
    from .cli import atomic_write
    with atomic_write(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["exit_i", "exit_j", "metric", "value"])
        l = report.exit_count
        for name, table in (("q_statistic", report.q_statistic),
                            ("correlation", report.correlation),
                            ("agreement", report.agreement)):
            for i in range(l):
                for j in range(l):
                    writer.writerow([i + 1, j + 1, name, f"{table[i, j]:.17g}"])
        writer.writerow([-1, -1, "kw_variance", f"{report.kw_variance:.17g}"])
