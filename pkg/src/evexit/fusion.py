"""Collaborative decision fusion across exit classifiers.

The CDM rule combines two opinions (b, u) into unnormalized fused scores.
In ``attention`` mode,

    u_hat   = u1 * u2
    b_hat_k = b1_k * b2_k + b1_k * (1 - u1) + b2_k * (1 - u2)

so consensual evidence is amplified multiplicatively and each side is
additionally weighted by its own reliability (1 - u). ``balanced`` mode
damps the drift of those values with an averaging term:

    gamma_k = (b1_k + b2_k) / 2,  zeta = u1 + u2
    b_tilde_k = (gamma_k + b1_k * b2_k) * 0.5 + b1_k*(1-u1) + b2_k*(1-u2)
    u_tilde   = zeta + u1 * u2

Both rules are symmetric in their arguments and deliberately leave the
outputs off the unit simplex; a fused decision for classifier c folds the
first c opinions left to right, carrying the raw fused state forward.
With the balance term the carried uncertainty can exceed 1, at which
point (1 - u) weights turn negative — kept as-is by default and
switchable via ``renormalize_each_step``, which rescales the running
state back onto u + sum(b) = 1 after every step (identical to converting
the fused scores to evidence and re-deriving the opinion).

``trace_fusion`` instruments the recurrence on the unit-mass scale, where
saturation (dominant mass pinned near 1, later steps changing almost
nothing) is visible and comparable across modes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from .errors import (ConfigurationError, ContractViolation, DataError,
                     DegenerateFusionError, NumericError)
from .evidential import EvidentialOpinion, one_hot, quantify

MODES = ("attention", "balanced")
BASELINE_METHODS = ("average", "weighted-average", "vote", "dempster")
_CONFLICT_LIMIT = 1.0 - 1e-12


@dataclass(frozen=True, eq=False)
class FusedOpinion:
    """Running fused state: unnormalized per-class scores plus uncertainty."""

    belief: np.ndarray
    uncertainty: float
    depth: int = 1

    def __post_init__(self):
        b = np.asarray(self.belief, dtype=np.float64)
        object.__setattr__(self, "belief", b)
        if not (np.all(np.isfinite(b)) and np.isfinite(self.uncertainty)):
            raise NumericError("FusedOpinion: non-finite fused values")
        if self.depth < 1:
            raise ContractViolation("FusedOpinion: depth must be >= 1")

    @property
    def class_count(self) -> int:
        return self.belief.size


def as_fused(opinion) -> FusedOpinion:
    if isinstance(opinion, FusedOpinion):
        return opinion
    return FusedOpinion(belief=opinion.belief.copy(),
                        uncertainty=float(opinion.uncertainty), depth=1)


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigurationError(f"fusion mode must be one of {MODES}, got {mode!r}")


def fuse_pair(a, b, mode: str = "balanced") -> FusedOpinion:
    """Fuse two opinion-like values (anything exposing belief/uncertainty)."""
    _check_mode(mode)
    fa, fb = as_fused(a), as_fused(b)
    if fa.class_count != fb.class_count:
        raise ContractViolation(
            f"fuse_pair: class counts differ ({fa.class_count} vs {fb.class_count})")
    ba, ua = fa.belief, fa.uncertainty
    bb, ub = fb.belief, fb.uncertainty
    # the two attention terms are summed first so that swapping the
    # arguments is bitwise-neutral (addition commutes; it does not associate)
    attention = ba * (1.0 - ua) + bb * (1.0 - ub)
    if mode == "attention":
        belief = ba * bb + attention
        uncertainty = ua * ub
    else:
        gamma = (ba + bb) * 0.5
        zeta = ua + ub
        belief = (gamma + ba * bb) * 0.5 + attention
        uncertainty = zeta + ua * ub
    return FusedOpinion(belief=belief, uncertainty=float(uncertainty),
                        depth=fa.depth + fb.depth)


def _renormalized(f: FusedOpinion) -> FusedOpinion:
    total = float(np.sum(f.belief)) + f.uncertainty
    if total <= 0:
        raise NumericError("renormalize: non-positive total mass")
    return FusedOpinion(belief=f.belief / total,
                        uncertainty=f.uncertainty / total, depth=f.depth)


def fuse_sequence(opinions, mode: str = "balanced",
                  renormalize_each_step: bool = False) -> list[FusedOpinion]:
    """Fold C opinions left to right; element c-2 is the fused decision
    for classifier c (c = 2..C)."""
    _check_mode(mode)
    if len(opinions) < 2:
        raise ContractViolation("fuse_sequence: need at least two opinions")
    state = as_fused(opinions[0])
    fused: list[FusedOpinion] = []
    for opinion in opinions[1:]:
        state = fuse_pair(state, opinion, mode)
        if renormalize_each_step:
            state = _renormalized(state)
        fused.append(state)
    return fused


def fused_evidence(f: FusedOpinion) -> tuple[float, np.ndarray]:
    """Map fused scores back to a Dirichlet strength and per-class evidence."""
    if f.uncertainty <= 0:
        raise NumericError(
            f"fused_evidence: uncertainty must be positive, got {f.uncertainty}")
    strength = f.class_count / f.uncertainty
    return strength, strength * f.belief


def predict(f: FusedOpinion, fallback: bool = True) -> tuple[int, float]:
    """Predicted class (argmax of fused belief, lowest index on ties) and the
    fused-evidence share of that class as confidence."""
    total = float(np.sum(f.belief))
    if total <= 0:
        if not fallback:
            raise DataError("predict: all-zero fused belief")
        return 0, 1.0 / f.class_count
    cls = int(np.argmax(f.belief))
    return cls, float(f.belief[cls] / total)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    ez = np.exp(z)
    return ez / ez.sum()


def _dempster_pair(a: EvidentialOpinion | FusedOpinion, b) -> FusedOpinion:
    ba, ua = a.belief, a.uncertainty
    bb, ub = b.belief, b.uncertainty
    conflict = float(np.sum(ba) * np.sum(bb) - np.dot(ba, bb))
    if conflict >= _CONFLICT_LIMIT:
        raise DegenerateFusionError(
            f"dempster: total conflict (Conf = {conflict:.17g})")
    scale = 1.0 - conflict
    belief = (ba * bb + ba * ub + bb * ua) / scale
    uncertainty = ua * ub / scale
    depth = getattr(a, "depth", 1) + getattr(b, "depth", 1)
    return FusedOpinion(belief=belief, uncertainty=uncertainty, depth=depth)


def baseline_fuse(logit_sets, method: str, weights=None) -> list[int]:
    """Fuse one sample's per-exit logits with a reference method.

    Returns the predicted class for every exit prefix 1..C (prefix 1 is the
    plain single-exit argmax). Methods: average / weighted-average of
    softmax probabilities, majority vote over argmaxes, and the reduced
    two-source Dempster combination folded left to right.
    """
    if method not in BASELINE_METHODS:
        raise ConfigurationError(
            f"baseline method must be one of {BASELINE_METHODS}, got {method!r}")
    logit_sets = [np.asarray(x, dtype=np.float64) for x in logit_sets]
    c_total = len(logit_sets)
    if c_total < 1:
        raise DataError("baseline_fuse: no exits")
    if method == "weighted-average":
        if weights is None:
            raise ConfigurationError("weighted-average requires weights")
        weights = np.asarray(weights, dtype=np.float64)
        if weights.size != c_total:
            raise ConfigurationError("weights length must equal exit count")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ConfigurationError("weights must sum to 1")

    predictions: list[int] = []
    if method in ("average", "weighted-average"):
        probs = np.stack([_softmax(lg) for lg in logit_sets])
        for c in range(1, c_total + 1):
            if method == "average":
                mixed = probs[:c].mean(axis=0)
            else:
                w = weights[:c] / weights[:c].sum()
                mixed = (w[:, None] * probs[:c]).sum(axis=0)
            predictions.append(int(np.argmax(mixed)))
    elif method == "vote":
        votes = [int(np.argmax(lg)) for lg in logit_sets]
        k = logit_sets[0].size
        for c in range(1, c_total + 1):
            counts = np.bincount(votes[:c], minlength=k)
            predictions.append(int(np.argmax(counts)))
    else:  # dempster
        state = quantify(logit_sets[0])
        predictions.append(int(np.argmax(state.belief)))
        fused = as_fused(state)
        for c in range(1, c_total):
            fused = _dempster_pair(fused, quantify(logit_sets[c]))
            predictions.append(predict(fused)[0])
    return predictions


@dataclass
class FusionReport:
    """Per-exit comparison of fused vs single-exit accuracy on one store."""

    method: str
    exit_count: int
    sample_count: int
    plain_accuracy: list[float]
    fused_accuracy: list[float]
    fused_predictions: list[list[int]]
    degenerate_samples: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        from .cli import atomic_write  # local import: cli owns file plumbing
        with atomic_write(path) as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        from .cli import atomic_write
        with atomic_write(path) as fh:
            writer = csv.writer(fh)
            writer.writerow(["exit", "plain_accuracy", "fused_accuracy", "method"])
            for c in range(self.exit_count):
                writer.writerow([c + 1, f"{self.plain_accuracy[c]:.17g}",
                                 f"{self.fused_accuracy[c]:.17g}", self.method])


def cdm_predictions(exit_logits, mode: str = "balanced",
                    renormalize_each_step: bool = False) -> list[int]:
    """CDM predictions for every exit prefix of one sample (prefix 1 plain)."""
    opinions = [quantify(lg) for lg in exit_logits]
    preds = [predict(as_fused(opinions[0]))[0]]
    if len(opinions) >= 2:
        for fused in fuse_sequence(opinions, mode, renormalize_each_step):
            preds.append(predict(fused)[0])
    return preds


def build_report(store, method: str, weights=None,
                 renormalize_each_step: bool = False) -> FusionReport:
    """Replay a logits store through one fusion method.

    `method` is a CLI-facing tag: cdm / cdm-nobalance use the uncertainty-
    aware rule (balanced / attention), avg / wavg / vote / dempster the
    baselines. Samples where Dempster combination degenerates are counted
    as wrong and listed by id.
    """
    method_map = {
        "cdm": ("cdm", "balanced"),
        "cdm-nobalance": ("cdm", "attention"),
        "avg": ("baseline", "average"),
        "wavg": ("baseline", "weighted-average"),
        "vote": ("baseline", "vote"),
        "dempster": ("baseline", "dempster"),
    }
    if method not in method_map:
        raise ConfigurationError(
            f"fusion method must be one of {sorted(method_map)}, got {method!r}")
    kind, variant = method_map[method]

    records = list(store)
    if not records:
        raise DataError("build_report: empty store")
    c_total = len(records[0].exit_logits)
    plain_hits = np.zeros(c_total)
    fused_hits = np.zeros(c_total)
    fused_predictions: list[list[int]] = []
    degenerate: list[str] = []

    if kind == "baseline" and variant == "weighted-average" and weights is None:
        weights = _accuracy_weights(records, c_total)

    for record in records:
        logits = record.exit_logits
        for c in range(c_total):
            plain_hits[c] += int(np.argmax(logits[c])) == record.label
        try:
            if kind == "cdm":
                preds = cdm_predictions(logits, variant, renormalize_each_step)
            else:
                preds = baseline_fuse(logits, variant, weights)
        except DegenerateFusionError:
            degenerate.append(record.id)
            preds = [-1] * c_total
        fused_predictions.append(preds)
        for c in range(c_total):
            fused_hits[c] += preds[c] == record.label

    n = len(records)
    return FusionReport(method=method, exit_count=c_total, sample_count=n,
                        plain_accuracy=list(plain_hits / n),
                        fused_accuracy=list(fused_hits / n),
                        fused_predictions=fused_predictions,
                        degenerate_samples=degenerate)


def _accuracy_weights(records, c_total: int) -> np.ndarray:
    """Per-exit weights from normalized single-exit accuracies."""
    hits = np.zeros(c_total)
    for record in records:
        for c in range(c_total):
            hits[c] += int(np.argmax(record.exit_logits[c])) == record.label
    if hits.sum() == 0:
        return np.full(c_total, 1.0 / c_total)
    return hits / hits.sum()


@dataclass
class FusionTrace:
    """Step-by-step unit-mass view of a fusion run.

    Row t of `beliefs` is the normalized belief vector after absorbing
    t+1 classifiers (row 0 is the first opinion untouched); `increments`
    holds exact consecutive differences, so `increments[t-2]` is the
    step-t change for t = 2..C.
    """

    mode: str
    beliefs: np.ndarray
    uncertainties: np.ndarray
    increments: np.ndarray

    def dominant_class(self) -> int:
        return int(np.argmax(self.beliefs[0]))

    def step_increment(self, step: int, cls: int | None = None) -> float:
        if not 2 <= step <= self.beliefs.shape[0]:
            raise ConfigurationError(
                f"step must be in [2, {self.beliefs.shape[0]}], got {step}")
        cls = self.dominant_class() if cls is None else cls
        return float(self.increments[step - 2, cls])

    def write_csv(self, path) -> None:
        from .cli import atomic_write
        with atomic_write(path) as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "class", "belief", "increment"])
            steps, k = self.beliefs.shape
            for t in range(steps):
                for cls in range(k):
                    inc = 0.0 if t == 0 else float(self.increments[t - 1, cls])
                    writer.writerow([t + 1, cls,
                                     f"{self.beliefs[t, cls]:.17g}", f"{inc:.17g}"])

    def to_json(self) -> dict:
        return {"mode": self.mode,
                "beliefs": self.beliefs.tolist(),
                "uncertainties": self.uncertainties.tolist(),
                "increments": self.increments.tolist()}


def trace_fusion(opinions, mode: str = "balanced") -> FusionTrace:
    """Record the fusion recurrence on the unit-mass scale.

    The running state is rescaled onto u + sum(b) = 1 after every step so
    the recorded values are belief masses; this is the scale on which
    saturation shows up as vanishing increments.
    """
    _check_mode(mode)
    if len(opinions) < 3:
        raise ContractViolation("trace_fusion: need at least three opinions")
    first = _renormalized(as_fused(opinions[0]))
    beliefs = [first.belief]
    uncertainties = [first.uncertainty]
    for fused in fuse_sequence(opinions, mode, renormalize_each_step=True):
        beliefs.append(fused.belief)
        uncertainties.append(fused.uncertainty)
    beliefs = np.stack(beliefs)
    return FusionTrace(mode=mode, beliefs=beliefs,
                       uncertainties=np.asarray(uncertainties),
                       increments=beliefs[1:] - beliefs[:-1])


def increment_ratios(numerator: FusionTrace, denominator: FusionTrace,
                     cls: int | None = None) -> np.ndarray:
    """Per-step ratio of two traces' increments for one class (default: the
    dominant class of the numerator trace). Zero-over-zero becomes 0."""
    if numerator.increments.shape != denominator.increments.shape:
        raise DataError("increment_ratios: traces have different shapes")
    cls = numerator.dominant_class() if cls is None else cls
    num = numerator.increments[:, cls]
    den = denominator.increments[:, cls]
    out = np.zeros_like(num)
    nonzero = den != 0
    out[nonzero] = num[nonzero] / den[nonzero]
    return out


class NNFuser:
    """A small trained head over the concatenated first-c exit logits."""

    def __init__(self, exit_count: int, class_count: int, weights, biases):
        self.exit_count = exit_count
        self.class_count = class_count
        self.weights = weights
        self.biases = biases
        self.holdout_accuracy: float | None = None
        self.construction_accuracy: float | None = None

    def predict_logits(self, features: np.ndarray) -> np.ndarray:
        h = features
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return h

    def predict(self, exit_logits) -> int:
        feats = np.concatenate([np.asarray(x, float)
                                for x in exit_logits[:self.exit_count]])
        return int(np.argmax(self.predict_logits(feats[None, :])[0]))


def train_nn_fuser(store, exit_index: int, seed: int = 0, hidden: int = 32,
                   epochs: int = 60, learning_rate: float = 0.05,
                   holdout_fraction: float = 0.25) -> NNFuser:
    """Fit an MLP fusion head for classifier `exit_index` on stored logits.

    Cross-entropy training over the concatenated logits of exits
    1..exit_index; a deterministic holdout split reports generalization.
    Requires at least 10 samples per class.
    """
    if exit_index < 2:
        raise ConfigurationError("train_nn_fuser: exit_index must be >= 2")
    records = list(store)
    if not records:
        raise DataError("train_nn_fuser: empty store")
    if exit_index > len(records[0].exit_logits):
        raise ConfigurationError("train_nn_fuser: exit_index beyond store exits")
    k = len(records[0].exit_logits[0])
    labels = np.array([r.label for r in records])
    counts = np.bincount(labels, minlength=k)
    if counts.min() < 10:
        raise DataError(
            f"train_nn_fuser: need >= 10 samples per class, worst class has {counts.min()}")

    features = np.stack([np.concatenate(r.exit_logits[:exit_index])
                         for r in records])
    rng = np.random.default_rng(seed)
    u = np.random.default_rng(seed).random(len(records))
    holdout = u < holdout_fraction
    fit_x, fit_y = features[~holdout], labels[~holdout]
    hold_x, hold_y = features[holdout], labels[holdout]

    dims = [features.shape[1], hidden, k]
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(dc.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)),
                                requires_grad=True))
        params.append(dc.Tensor(np.zeros(fan_out), requires_grad=True))

    targets = one_hot(fit_y, k)
    x_const = dc.Tensor(fit_x)
    for _ in range(epochs):
        h = dc.relu(x_const @ params[0] + _row_broadcast(params[1], fit_x.shape[0]))
        logits = h @ params[2] + _row_broadcast(params[3], fit_x.shape[0])
        loss = _cross_entropy_mean(logits, targets)
        dc.backward(loss)
        for p in params:
            p.data = p.data - learning_rate * p.grad

    weights = [params[0].data.copy(), params[2].data.copy()]
    biases = [params[1].data.copy(), params[3].data.copy()]
    fuser = NNFuser(exit_index, k, weights, biases)
    fit_pred = fuser.predict_logits(fit_x).argmax(axis=1)
    fuser.construction_accuracy = float((fit_pred == fit_y).mean())
    if hold_x.shape[0]:
        hold_pred = fuser.predict_logits(hold_x).argmax(axis=1)
        fuser.holdout_accuracy = float((hold_pred == hold_y).mean())
    return fuser


def _row_broadcast(bias: dc.Tensor, rows: int) -> dc.Tensor:
    # (K,) -> (rows, K) by explicit expansion.
    col = dc.reshape(bias, (1, bias.shape[0]))
    ones = dc.Tensor(np.ones((rows, 1)))
    return ones @ col


def nn_report(store, seed: int = 0, **fuser_kwargs) -> FusionReport:
    """FusionReport for the trainable-head method.

    One head is fitted per exit prefix c >= 2; accuracies (plain and fused)
    are measured on each head's holdout split so the comparison is honest.
    Exit 1 has nothing to fuse and reports its plain accuracy.
    """
    records = list(store)
    if not records:
        raise DataError("nn_report: empty store")
    c_total = len(records[0].exit_logits)
    labels = np.array([r.label for r in records])
    plain = [np.array([int(np.argmax(r.exit_logits[c])) for r in records])
             for c in range(c_total)]

    holdout_frac = fuser_kwargs.pop("holdout_fraction", 0.25)
    u = np.random.default_rng(seed).random(len(records))
    holdout = u < holdout_frac
    plain_accuracy = [float((p[holdout] == labels[holdout]).mean())
                      for p in plain]

    fused_accuracy = [plain_accuracy[0]]
    fused_predictions = [[int(p[i]) for p in plain[:1]] for i in range(len(records))]
    for c in range(2, c_total + 1):
        fuser = train_nn_fuser(store, c, seed=seed,
                               holdout_fraction=holdout_frac, **fuser_kwargs)
        fused_accuracy.append(float(fuser.holdout_accuracy))
        for i, record in enumerate(records):
            fused_predictions[i].append(fuser.predict(record.exit_logits))
    return FusionReport(method="nn", exit_count=c_total,
                        sample_count=len(records),
                        plain_accuracy=plain_accuracy,
                        fused_accuracy=fused_accuracy,
                        fused_predictions=fused_predictions)


def _cross_entropy_mean(logits: dc.Tensor, targets: np.ndarray) -> dc.Tensor:
    shift = logits.data.max(axis=-1, keepdims=True)
    shifted = logits - dc.Tensor(np.broadcast_to(shift, logits.shape).copy())
    lse = dc.log(dc.sum_last(dc.exp(shifted))) + dc.Tensor(shift)
    picked = dc.sum_last(logits * dc.Tensor(targets))
    return dc.mean(lse - picked)
