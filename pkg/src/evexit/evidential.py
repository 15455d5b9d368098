"""Evidential quantification of classifier logits and the evidential loss.

Logits are mapped through softplus to non-negative per-class evidence e.
With K classes, alpha = e + 1 parameterizes a Dirichlet with strength
S = sum(alpha); belief mass b_k = e_k / S and uncertainty u = K / S then
partition unit mass: u + sum(b) = 1.

The training loss per sample is

    sum_k (m_k - y_k)^2  +  sum_k alpha_k (S - alpha_k) / (S^2 (S + 1))

with y one-hot and m the per-class mass in the squared term. The default
takes m = b (the belief mass); `mean_mode="dirichlet-mean"` switches to
m = alpha / S, the convention of much of the evidential literature. Both
are exposed because they genuinely differ (the belief form penalizes low
total evidence harder).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError, DataError

MEAN_MODES = ("belief", "dirichlet-mean")


@dataclass(frozen=True, eq=False)
class EvidentialOpinion:
    """Per-classifier evidence and the masses derived from it."""

    evidence: np.ndarray
    alpha: np.ndarray = field(init=False)
    strength: float = field(init=False)
    belief: np.ndarray = field(init=False)
    uncertainty: float = field(init=False)

    def __post_init__(self):
        e = np.asarray(self.evidence, dtype=np.float64)
        object.__setattr__(self, "evidence", e)
        alpha = e + 1.0
        strength = float(np.sum(alpha))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "strength", strength)
        object.__setattr__(self, "belief", e / strength)
        object.__setattr__(self, "uncertainty", e.size / strength)

    @property
    def class_count(self) -> int:
        return self.evidence.size


def quantify(logits) -> EvidentialOpinion:
    """Turn one logit vector into an evidential opinion.

    Requires K >= 2 finite logits; deterministic.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 2:
        raise ConfigurationError(
            f"quantify: need a vector of K >= 2 logits, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise DataError("quantify: non-finite logit")
    return EvidentialOpinion(evidence=_softplus(logits))


def _softplus(x: np.ndarray) -> np.ndarray:
    return dc._softplus_values(np.asarray(x, dtype=np.float64))


def edl_loss(opinion: EvidentialOpinion, label: int,
             mean_mode: str = "belief") -> float:
    """Evidential loss of one opinion against an integer label."""
    k = opinion.class_count
    if not 0 <= label < k:
        raise DataError(f"edl_loss: label {label} out of range [0, {k})")
    _check_mean_mode(mean_mode)
    alpha, s = opinion.alpha, opinion.strength
    m = opinion.belief if mean_mode == "belief" else alpha / s
    y = np.zeros(k)
    y[label] = 1.0
    squared = float(np.sum((m - y) ** 2))
    variance = float(np.sum(alpha * (s - alpha)) / (s * s * (s + 1.0)))
    return squared + variance


def _check_mean_mode(mean_mode: str) -> None:
    if mean_mode not in MEAN_MODES:
        raise ConfigurationError(
            f"mean_mode must be one of {MEAN_MODES}, got {mean_mode!r}")


def one_hot(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise DataError("one_hot: empty batch")
    if labels.min() < 0 or labels.max() >= class_count:
        raise DataError(
            f"one_hot: labels outside [0, {class_count})")
    out = np.zeros((labels.size, class_count))
    out[np.arange(labels.size), labels] = 1.0
    return out


def edl_loss_graph(logits: dc.Tensor, targets: np.ndarray,
                   mean_mode: str = "belief") -> dc.Tensor:
    """Per-sample evidential loss for an (N, K) logit tensor, shape (N, 1).

    Differentiable w.r.t. the logits; `targets` is a constant one-hot array.
    """
    _check_mean_mode(mean_mode)
    k = targets.shape[-1]
    e = dc.softplus(logits)
    alpha = e + 1.0
    s = dc.sum_last(alpha)                      # (N, 1)
    s_wide = dc.expand_last(s, k)               # (N, K)
    numerator = e if mean_mode == "belief" else alpha
    m = numerator / s_wide
    squared = dc.sum_last(dc.square(m - dc.Tensor(targets)))
    variance = dc.sum_last(alpha * (s_wide - alpha)) / (dc.square(s) * (s + 1.0))
    return squared + variance


def batch_edl_loss(exit_logits, labels, mean_mode: str = "belief") -> dc.Tensor:
    """Mean over the batch of the per-exit evidential losses summed over exits.

    `exit_logits` is a list with one (N, K) tensor or array per exit; all
    exits must agree on N and K.
    """
    if len(exit_logits) == 0:
        raise DataError("batch_edl_loss: no exits")
    tensors = [x if isinstance(x, dc.Tensor) else dc.Tensor(x) for x in exit_logits]
    shape = tensors[0].shape
    if len(shape) != 2:
        raise DataError(f"batch_edl_loss: expected (N, K) logits, got {shape}")
    if any(t.shape != shape for t in tensors):
        raise DataError("batch_edl_loss: ragged exits (mismatched N or K)")
    targets = one_hot(labels, shape[1])
    if targets.shape[0] != shape[0]:
        raise DataError("batch_edl_loss: labels do not match batch size")
    total = edl_loss_graph(tensors[0], targets, mean_mode)
    for t in tensors[1:]:
        total = total + edl_loss_graph(t, targets, mean_mode)
    return dc.mean(total)
