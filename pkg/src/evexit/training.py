"""Training for multi-exit models: evidential or cross-entropy objectives,
optionally with last-exit guidance.

Guidance pulls each early exit's temperature-scaled evidence distribution
toward the deepest exit's. The per-exit distribution is
softmax(softplus(logits) / tau); the deepest exit acts as a fixed teacher
(gradient-detached), and the regularizer averages the Jensen-Shannon
divergence at two temperatures (tau1, tau2), which stabilizes training
compared to a single temperature. Defaults tau1 = 0.5, tau2 = 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError, DataError, NumericError
from .evidential import MEAN_MODES, batch_edl_loss, one_hot
from .model import MultiExitModel

LOSS_MODES = ("edl", "cross-entropy")


@dataclass
class TrainingConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 0.08
    momentum: float = 0.9
    seed: int = 0
    loss_mode: str = "edl"
    regularize: bool = False
    tau1: float = 0.5
    tau2: float = 1.0
    edl_mean_mode: str = "belief"
    lambda1: float = 1.0
    decay_milestones: tuple[float, ...] = (0.6, 0.85)
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ConfigurationError("temperatures must be positive")
        if self.learning_rate < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}")
        if self.edl_mean_mode not in MEAN_MODES:
            raise ConfigurationError(f"edl_mean_mode must be one of {MEAN_MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")


def temperature_distribution(logits, tau: float) -> np.ndarray:
    """softmax(softplus(logits) / tau): the evidence distribution at
    temperature tau. Sums to 1 for any tau > 0."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    e = dc._softplus_values(logits) / tau
    z = e - e.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats between two distributions on the
    same support; 0 * ln 0 counts as 0. Bounded by ln 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DataError("js_divergence: shape mismatch")
    if np.any(p < 0) or np.any(q < 0):
        raise DataError("js_divergence: negative entries")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise DataError("js_divergence: inputs must sum to 1 within 1e-9")
    m = 0.5 * (p + q)

    def kl(a):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / m[mask])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def _temperature_graph(logits: dc.Tensor, tau: float) -> dc.Tensor:
    return dc.softmax(dc.softplus(logits) * (1.0 / tau))


_JS_EPS = 1e-12


def _js_graph(p: dc.Tensor, q: dc.Tensor) -> dc.Tensor:
    """Per-row JS divergence, shape (N, 1).

    Inputs are softmax outputs; once an exit saturates, entries underflow
    to exact zero, so both sides carry a 1e-12 floor before the logs. The
    shift is far below every tolerance in use and keeps JS(p, p) at 0.
    """
    p = p + _JS_EPS
    q = q + _JS_EPS
    m = (p + q) * 0.5
    log_m = dc.log(m)
    kl_p = dc.sum_last(p * (dc.log(p) - log_m))
    kl_q = dc.sum_last(q * (dc.log(q) - log_m))
    return (kl_p + kl_q) * 0.5


def _cross_entropy_rows(logits: dc.Tensor, targets: np.ndarray) -> dc.Tensor:
    shift = logits.data.max(axis=-1, keepdims=True)
    shifted = logits - dc.Tensor(np.broadcast_to(shift, logits.shape).copy())
    lse = dc.log(dc.sum_last(dc.exp(shifted))) + dc.Tensor(shift)
    picked = dc.sum_last(logits * dc.Tensor(targets))
    return lse - picked


def guidance_loss(exit_logits: list[dc.Tensor], taus: tuple[float, ...]) -> dc.Tensor:
    """Mean over the batch of the temperature-averaged JS divergence between
    the last exit (detached teacher) and every earlier exit."""
    teacher_logits = exit_logits[-1].detach()
    total = None
    for tau in taus:
        teacher = _temperature_graph(teacher_logits, tau)
        for student_logits in exit_logits[:-1]:
            student = _temperature_graph(student_logits, tau)
            term = _js_graph(teacher, student)
            total = term if total is None else total + term
    return dc.mean(total) * (1.0 / len(taus))


def gcdm_loss(exit_logits, labels, cfg: TrainingConfig) -> dc.Tensor:
    """Full training objective: base loss over all exits plus, when
    `cfg.regularize`, the dual-temperature guidance term."""
    tensors = [x if isinstance(x, dc.Tensor) else dc.Tensor(x) for x in exit_logits]
    if cfg.regularize and len(tensors) < 2:
        raise ConfigurationError("regularized training needs at least 2 exits")
    if cfg.loss_mode == "edl":
        base = batch_edl_loss(tensors, labels, cfg.edl_mean_mode)
    else:
        targets = one_hot(labels, tensors[0].shape[1])
        rows = None
        for t in tensors:
            term = _cross_entropy_rows(t, targets)
            rows = term if rows is None else rows + term
        base = dc.mean(rows) * cfg.lambda1
    if not cfg.regularize:
        return base
    return base + guidance_loss(tensors, (cfg.tau1, cfg.tau2))


@dataclass
class EpochMetric:
    epoch: int
    exit: int
    split: str
    accuracy: float
    loss: float


@dataclass
class FitResult:
    model: MultiExitModel
    metrics: list[EpochMetric]
    best_epoch: int
    best_val_accuracy: float


def write_metrics_csv(metrics: list[EpochMetric], path) -> None:
    from .cli import atomic_write
    with atomic_write(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "exit", "split", "accuracy", "loss"])
        for m in metrics:
            writer.writerow([m.epoch, m.exit, m.split,
                             f"{m.accuracy:.17g}", f"{m.loss:.17g}"])


def _epoch_lr(cfg: TrainingConfig, epoch: int) -> float:
    lr = cfg.learning_rate
    for milestone in cfg.decay_milestones:
        if epoch >= int(milestone * cfg.epochs):
            lr *= cfg.decay_factor
    return lr


def _split_eval(model, x, y, cfg) -> tuple[np.ndarray, float]:
    logits = model.forward_all(x)
    accs = np.array([float((t.data.argmax(axis=1) == y).mean()) for t in logits])
    loss = gcdm_loss([t.detach() for t in logits], y, cfg).item()
    return accs, loss


def fit(model: MultiExitModel, dataset, cfg: TrainingConfig) -> FitResult:
    """Momentum gradient descent with step decay; deterministic for a seed.

    Tracks per-epoch per-exit accuracy/loss on train and validation splits
    and restores the parameters with the best mean validation accuracy.
    """
    train_idx = dataset.split_indices("train")
    val_idx = dataset.split_indices("validation")
    if train_idx.size == 0 or val_idx.size == 0:
        raise DataError("fit: dataset must provide train and validation splits")
    x_train, y_train = dataset.features[train_idx], dataset.labels[train_idx]
    x_val, y_val = dataset.features[val_idx], dataset.labels[val_idx]

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    metrics: list[EpochMetric] = []
    best_state, best_acc, best_epoch = model.copy_state(), -1.0, -1

    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        order = rng.permutation(train_idx.size)
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            try:
                logits = model.forward_all(x_train[batch])
                loss = gcdm_loss(logits, y_train[batch], cfg)
            except NumericError as err:
                raise NumericError(
                    f"fit: diverged at epoch {epoch}, "
                    f"batch {start // cfg.batch_size}: {err}") from err
            if not np.isfinite(loss.item()):
                raise NumericError(
                    f"fit: non-finite loss at epoch {epoch}, "
                    f"batch {start // cfg.batch_size}")
            dc.backward(loss)
            for p, v in zip(params, velocity):
                v *= cfg.momentum
                v -= lr * p.grad
                p.data = p.data + v

        train_accs, train_loss = _split_eval(model, x_train, y_train, cfg)
        val_accs, val_loss = _split_eval(model, x_val, y_val, cfg)
        for c in range(model.spec.exit_count):
            metrics.append(EpochMetric(epoch, c + 1, "train",
                                       float(train_accs[c]), train_loss))
            metrics.append(EpochMetric(epoch, c + 1, "validation",
                                       float(val_accs[c]), val_loss))
        mean_val = float(val_accs.mean())
        if mean_val > best_acc:
            best_acc, best_epoch = mean_val, epoch
            best_state = model.copy_state()

    model.load_state(best_state)
    model.meta.update({"epochs": cfg.epochs, "seed": cfg.seed,
                       "loss_mode": cfg.loss_mode, "regularize": cfg.regularize,
                       "tau1": cfg.tau1, "tau2": cfg.tau2,
                       "edl_mean_mode": cfg.edl_mean_mode,
                       "best_epoch": best_epoch})
    return FitResult(model=model, metrics=metrics, best_epoch=best_epoch,
                     best_val_accuracy=best_acc)
