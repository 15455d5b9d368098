"""Anytime and budgeted batch prediction over stored logits.

Anytime evaluation classifies every sample at one fixed exit, optionally
fusing the preceding exits' opinions into it. Budgeted prediction
calibrates per-exit confidence thresholds on a validation store so that
the expected per-sample cost meets a FLOPs budget, then lets each test
sample leave at the first exit whose confidence clears its threshold.

Exit fractions follow the truncated geometric family p_c ~ q (1-q)^(c-1);
q is found by bisection against the budget. Thresholds are alive-set
quantiles: the threshold for exit c is computed only over samples that no
earlier exit released. Inverse-CDF quantiles keep calibration invariant
to duplicating the validation set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import (ConfigurationError, DataError, InfeasibleBudgetError,
                     ParseError)
from .evidential import quantify
from .fusion import as_fused, fuse_sequence, predict
from .model import ExitCosts

_Q_LOW = 1e-6
_Q_HIGH = 1.0 - 1e-6


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    ez = np.exp(z)
    return ez / ez.sum()


def _fused_prefix(record, exit_index: int, mode: str = "balanced"):
    opinions = [quantify(record.exit_logits[c]) for c in range(exit_index)]
    if exit_index == 1:
        return as_fused(opinions[0])
    return fuse_sequence(opinions, mode)[-1]


def sample_prediction(record, exit_index: int, fusion: bool,
                      mode: str = "balanced") -> tuple[int, float]:
    """(class, confidence) for one sample at one exit.

    Without fusion: argmax and max softmax probability of that exit's
    logits. With fusion: the fused decision over exits 1..exit_index and
    its fused-evidence share.
    """
    if not 1 <= exit_index <= len(record.exit_logits):
        raise ConfigurationError(
            f"exit {exit_index} out of range 1..{len(record.exit_logits)}")
    if fusion:
        return predict(_fused_prefix(record, exit_index, mode))
    probs = _softmax(np.asarray(record.exit_logits[exit_index - 1], float))
    cls = int(np.argmax(probs))
    return cls, float(probs[cls])


def confidence(record, exit_index: int, fusion: bool,
               mode: str = "balanced") -> float:
    return sample_prediction(record, exit_index, fusion, mode)[1]


def eval_anytime(store, exit_index: int, fusion: bool = False,
                 mode: str = "balanced") -> float:
    """Accuracy when every sample is classified at `exit_index`."""
    records = list(store)
    if not records:
        raise DataError("eval_anytime: empty store")
    hits = sum(sample_prediction(r, exit_index, fusion, mode)[0] == r.label
               for r in records)
    return hits / len(records)


@dataclass(frozen=True)
class BudgetSchedule:
    budget: float
    q: float
    fractions: tuple[float, ...]
    thresholds: tuple[float, ...]   # one per exit except the last
    costs: tuple[float, ...]

    @property
    def expected_cost(self) -> float:
        return float(np.dot(self.fractions, self.costs))

    def to_json(self) -> dict:
        payload = asdict(self)
        payload["fractions"] = list(self.fractions)
        payload["thresholds"] = [_inf_to_json(t) for t in self.thresholds]
        payload["costs"] = list(self.costs)
        return payload

    def write_json(self, path) -> None:
        from .cli import atomic_write
        with atomic_write(path) as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _inf_to_json(x: float):
    if np.isposinf(x):
        return "inf"
    if np.isneginf(x):
        return "-inf"
    return float(x)


def _json_to_inf(x) -> float:
    if x == "inf":
        return np.inf
    if x == "-inf":
        return -np.inf
    return float(x)


def load_schedule(path) -> BudgetSchedule:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as err:
            raise ParseError(
                f"schedule {path}: malformed JSON at byte offset {err.pos}") from err
    try:
        return BudgetSchedule(
            budget=float(obj["budget"]), q=float(obj["q"]),
            fractions=tuple(float(f) for f in obj["fractions"]),
            thresholds=tuple(_json_to_inf(t) for t in obj["thresholds"]),
            costs=tuple(float(c) for c in obj["costs"]))
    except (KeyError, TypeError, ValueError) as err:
        raise ParseError(f"schedule {path}: invalid structure ({err})") from err


def _geometric_fractions(q: float, exits: int) -> np.ndarray:
    raw = q * (1.0 - q) ** np.arange(exits)
    return raw / raw.sum()


def _expected_cost(q: float, costs: np.ndarray) -> float:
    return float(np.dot(_geometric_fractions(q, costs.size), costs))


def _solve_q(budget: float, costs: np.ndarray) -> float:
    """Feasible q next to the cost/budget crossing.

    Expected cost decreases as q grows (mass shifts to cheap exits), so
    bisection keeps the invariant cost(lo) > budget >= cost(hi) and
    returns the hi end.
    """
    lo, hi = _Q_LOW, _Q_HIGH
    if _expected_cost(lo, costs) <= budget:
        return lo
    if _expected_cost(hi, costs) > budget:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _expected_cost(mid, costs) <= budget:
            hi = mid
        else:
            lo = mid
    return hi


def _alive_quantile(values: np.ndarray, exit_fraction: float) -> float:
    if exit_fraction >= 1.0:
        return -np.inf
    if exit_fraction <= 0.0:
        return np.inf
    return float(np.quantile(values, 1.0 - exit_fraction, method="inverted_cdf"))


def calibrate(store, costs: ExitCosts, budget: float, fusion: bool = False,
              mode: str = "balanced") -> BudgetSchedule:
    """Derive a budget schedule from validation confidences.

    The confidence measure must match the one used at evaluation time, so
    the fusion flag is part of the calibration. Budgets outside [F_1, F_C]
    clamp: everything at exit 1, or everything at the last exit.
    """
    records = list(store)
    if not records:
        raise DataError("calibrate: empty validation store")
    f = np.asarray(costs.flops, dtype=np.float64)
    exits = f.size
    if len(records[0].exit_logits) < exits:
        raise ConfigurationError("calibrate: store has fewer exits than costs")
    if budget <= 0:
        raise ConfigurationError("calibrate: budget must be positive")
    if budget < f[0]:
        raise InfeasibleBudgetError(
            f"budget {budget} is below the cheapest exit cost {f[0]}")

    if budget >= f[-1]:
        fractions = np.zeros(exits)
        fractions[-1] = 1.0
        return BudgetSchedule(budget=float(budget), q=0.0,
                              fractions=tuple(fractions),
                              thresholds=(np.inf,) * (exits - 1),
                              costs=tuple(f))
    if budget == f[0]:
        fractions = np.zeros(exits)
        fractions[0] = 1.0
        thresholds = (-np.inf,) + (np.inf,) * (exits - 2)
        return BudgetSchedule(budget=float(budget), q=1.0,
                              fractions=tuple(fractions),
                              thresholds=thresholds, costs=tuple(f))

    q = _solve_q(budget, f)
    fractions = _geometric_fractions(q, exits)
    n = len(records)
    alive = np.arange(n)
    thresholds = []
    for c in range(1, exits):
        if alive.size == 0:
            thresholds.append(np.inf)
            continue
        conf = np.array([confidence(records[i], c, fusion, mode) for i in alive])
        target = fractions[c - 1] * n
        theta = _alive_quantile(conf, target / alive.size)
        thresholds.append(theta)
        alive = alive[conf < theta]
    return BudgetSchedule(budget=float(budget), q=float(q),
                          fractions=tuple(float(p) for p in fractions),
                          thresholds=tuple(thresholds), costs=tuple(f))


@dataclass
class BudgetedResult:
    accuracy: float
    mean_flops: float
    per_exit_counts: list[int]

    def to_json(self) -> dict:
        return asdict(self)


def eval_budgeted(store, schedule: BudgetSchedule, fusion: bool = False,
                  mode: str = "balanced") -> BudgetedResult:
    """Replay a schedule: each sample exits at the first c with
    confidence >= threshold_c, otherwise at the last exit."""
    records = list(store)
    if not records:
        raise DataError("eval_budgeted: empty store")
    exits = len(schedule.costs)
    if len(records[0].exit_logits) < exits:
        raise ConfigurationError("eval_budgeted: store has fewer exits than schedule")
    counts = [0] * exits
    hits = 0
    total_cost = 0.0
    for record in records:
        exit_at = exits
        for c in range(1, exits):
            cls, conf = sample_prediction(record, c, fusion, mode)
            if conf >= schedule.thresholds[c - 1]:
                exit_at = c
                break
        if exit_at == exits:
            cls, _ = sample_prediction(record, exits, fusion, mode)
        counts[exit_at - 1] += 1
        total_cost += schedule.costs[exit_at - 1]
        hits += cls == record.label
    n = len(records)
    return BudgetedResult(accuracy=hits / n, mean_flops=total_cost / n,
                          per_exit_counts=counts)
