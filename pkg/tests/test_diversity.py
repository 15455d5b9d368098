import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evexit import diversity as dv
from evexit.data import LogitsStore, StoreRecord
from evexit.errors import ConfigurationError, DataError


class TestPairDiversity:
    def test_hand_contingency_case(self):
        q, rho = dv.pair_diversity([1, 1, 0, 0], [1, 0, 1, 0])
        assert q == 0.0 and rho == 0.0
        counts = dv.pair_counts([1, 1, 0, 0], [1, 0, 1, 0])
        assert (counts.n11, counts.n10, counts.n01, counts.n00) == (1, 1, 1, 1)

    def test_identical_columns_full_dependence(self):
        q, rho = dv.pair_diversity([1, 0, 1, 0], [1, 0, 1, 0])
        assert q == 1.0 and rho == 1.0

    def test_degenerate_all_correct_is_zero(self):
        q, rho = dv.pair_diversity([1, 1, 1], [1, 0, 1])
        assert q == 0.0 and rho == 0.0

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            dv.pair_diversity([1, 0], [1, 0, 1])

    @settings(max_examples=200)
    @given(st.lists(st.booleans(), min_size=1, max_size=40),
           st.integers(min_value=0, max_value=10**6))
    def test_bounded(self, a, seed):
        b = list(np.random.default_rng(seed).integers(0, 2, len(a)))
        q, rho = dv.pair_diversity(a, b)
        assert -1.0 <= q <= 1.0
        assert -1.0 <= rho <= 1.0


class TestKwVariance:
    def test_all_correct_is_zero(self):
        assert dv.kw_variance(np.ones((6, 3), dtype=bool)) == 0.0

    def test_hand_case(self):
        matrix = np.array([[1, 1], [1, 0], [0, 1], [0, 0]], dtype=bool)
        assert dv.kw_variance(matrix) == 0.125

    def test_sample_order_invariant(self):
        rng = np.random.default_rng(0)
        matrix = rng.integers(0, 2, (30, 4)).astype(bool)
        shuffled = matrix[rng.permutation(30)]
        assert dv.kw_variance(matrix) == dv.kw_variance(shuffled)

    def test_maximum_at_half_correct(self):
        # l_j = L/2 for every sample maximizes the variance at 1/4 L^2 scale
        matrix = np.array([[1, 0], [0, 1]] * 5, dtype=bool)
        assert dv.kw_variance(matrix) == pytest.approx(0.25)

    def test_needs_two_exits(self):
        with pytest.raises(ConfigurationError):
            dv.kw_variance(np.ones((4, 1), dtype=bool))

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            matrix = rng.integers(0, 2, (12, 3)).astype(bool)
            assert dv.kw_variance(matrix) >= 0.0


class TestAgreementTable:
    def test_unit_diagonal_and_symmetry(self):
        rng = np.random.default_rng(2)
        preds = rng.integers(0, 5, (40, 4))
        table = dv.agreement_table(preds)
        np.testing.assert_array_equal(np.diag(table), np.ones(4))
        np.testing.assert_array_equal(table, table.T)
        assert np.all((table >= 0) & (table <= 1))

    def test_hand_count(self):
        table = dv.agreement_table(np.array([[1, 1], [2, 2], [3, 0]]))
        assert table[0, 1] == pytest.approx(2 / 3)

    def test_sample_order_invariant(self):
        rng = np.random.default_rng(3)
        preds = rng.integers(0, 3, (25, 3))
        shuffled = preds[rng.permutation(25)]
        np.testing.assert_array_equal(dv.agreement_table(preds),
                                      dv.agreement_table(shuffled))


class TestMeasureStore:
    def make_store(self, n=60, exits=3, k=4, seed=0):
        rng = np.random.default_rng(seed)
        records = []
        for i in range(n):
            label = int(rng.integers(0, k))
            per_exit = []
            for c in range(exits):
                logits = rng.normal(0, 1, k)
                logits[label] += 1.5
                per_exit.append(logits.tolist())
            records.append(StoreRecord(id=f"r{i}", label=label,
                                       exit_logits=per_exit))
        return LogitsStore(records=records)

    def test_report_shapes(self):
        report = dv.measure_store(self.make_store())
        assert report.exit_count == 3
        assert report.q_statistic.shape == (3, 3)
        np.testing.assert_array_equal(np.diag(report.agreement), np.ones(3))
        assert 0 <= report.kw_variance <= 0.25

    def test_csv_long_form(self, tmp_path):
        report = dv.measure_store(self.make_store())
        path = tmp_path / "diversity.csv"
        dv.write_csv(report, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "exit_i,exit_j,metric,value"
        assert len(lines) == 1 + 3 * 9 + 1  # three tables + kw row
        assert lines[-1].startswith("-1,-1,kw_variance,")

    def test_single_exit_rejected(self):
        records = [StoreRecord(id="a", label=0, exit_logits=[[1.0, 0.0]])]
        with pytest.raises(ConfigurationError):
            dv.measure_store(LogitsStore(records=records))
